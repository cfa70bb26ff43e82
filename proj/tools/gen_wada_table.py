#!/usr/bin/env python3
"""Regenerates the WADA-SNR lookup table embedded in include/crowdqc/wada_snr.hpp.

Speech is modelled as a signed gamma variable (shape 0.4), noise as Gaussian.
For each SNR in -20..100 dB the statistic G = log E|z| - E log|z| of z = s + n
is computed by quadrature.
"""
import math
from scipy import integrate, special, stats

SHAPE = 0.4
SIG_POWER = SHAPE * (SHAPE + 1.0)  # E[s^2] with unit scale


def inner_abs(s, sigma):
    r = s / sigma
    if r > 40:
        return s
    return sigma * math.sqrt(2 / math.pi) * math.exp(-0.5 * r * r) + s * (1 - 2 * stats.norm.cdf(-r))


def inner_log(s, sigma):
    r = s / sigma
    if r > 40:
        return math.log(s) - 0.5 / (r * r)
    f = lambda u: math.log(abs(s + sigma * u) + 1e-300) * stats.norm.pdf(u)
    a, b = -r - 12, -r + 12
    lo = integrate.quad(f, min(-12, a), -r, limit=400)[0]
    hi = integrate.quad(f, -r, max(12, b), limit=400)[0]
    return lo + hi


def g_stat(snr_db):
    sigma = math.sqrt(SIG_POWER / 10 ** (snr_db / 10))
    dens = lambda w: 2.5 * math.exp(-w ** 2.5) / special.gamma(SHAPE)
    s_of = lambda w: w ** 2.5
    pts = [((sigma / 1) ** 0.4) * c for c in (0.5, 1, 2, 5, 20)]
    e_abs = integrate.quad(lambda w: dens(w) * inner_abs(s_of(w), sigma), 0, 12, points=pts, limit=400)[0]
    e_log = integrate.quad(lambda w: dens(w) * inner_log(s_of(w), sigma), 0, 12, points=pts, limit=400)[0]
    return math.log(e_abs) - e_log


if __name__ == "__main__":
    vals = [g_stat(db) for db in range(-20, 101)]
    for i in range(0, len(vals), 6):
        print("    " + " ".join(f"{v:.8f}," for v in vals[i:i + 6]))
