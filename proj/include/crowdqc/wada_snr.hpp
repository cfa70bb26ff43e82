// crowdqc/wada_snr.hpp
//
// Blind SNR estimate from the waveform amplitude distribution. Clean speech
// amplitudes are modelled as gamma distributed (shape 0.4) and noise as
// Gaussian; the statistic G = log(mean |x|) - mean(log |x|) grows
// monotonically with SNR and is inverted through a table sampled at 1 dB
// steps from -20 to 100 dB. tools/gen_wada_table.py regenerates the table.

#ifndef CROWDQC_WADA_SNR_HPP_
#define CROWDQC_WADA_SNR_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "crowdqc/error.hpp"

namespace crowdqc {

inline constexpr double kWadaMinDb = -20.0;
inline constexpr double kWadaMaxDb = 100.0;

// G statistic at kWadaMinDb + i dB.
inline constexpr std::array<double, 121> kWadaTable = {
    0.40943470, 0.40945950, 0.40949762, 0.40955585, 0.40964412, 0.40977680,
    0.40997422, 0.41026473, 0.41068699, 0.41129251, 0.41214827, 0.41333908,
    0.41496934, 0.41716371, 0.42006640, 0.42383855, 0.42865366, 0.43469103,
    0.44212755, 0.45112839, 0.46183732, 0.47436773, 0.48879504, 0.50515144,
    0.52342326, 0.54355138, 0.56543434, 0.58893370, 0.61388120, 0.64008667,
    0.66734632, 0.69545050, 0.72419070, 0.75336533, 0.78278429, 0.81227220,
    0.84167053, 0.87083865, 0.89965408, 0.92801212, 0.95582492, 0.98302036,
    1.00954067, 1.03534093, 1.06038765, 1.08465731, 1.10813504, 1.13081335,
    1.15269101, 1.17377203, 1.19406475, 1.21358105, 1.23233569, 1.25034568,
    1.26762977, 1.28420805, 1.30010155, 1.31533193, 1.32992125, 1.34389171,
    1.35726553, 1.37006475, 1.38231114, 1.39402610, 1.40523060, 1.41594509,
    1.42618949, 1.43598314, 1.44534478, 1.45429253, 1.46284392, 1.47101583,
    1.47882452, 1.48628567, 1.49341433, 1.50022497, 1.50673148, 1.51294719,
    1.51888488, 1.52455680, 1.52997471, 1.53514983, 1.54009295, 1.54481436,
    1.54932393, 1.55363109, 1.55774488, 1.56167392, 1.56542647, 1.56901042,
    1.57243331, 1.57570236, 1.57882446, 1.58180620, 1.58465386, 1.58737347,
    1.58997078, 1.59245126, 1.59482018, 1.59708253, 1.59924311, 1.60130649,
    1.60327704, 1.60515893, 1.60695615, 1.60867250, 1.61031162, 1.61187698,
    1.61337191, 1.61479956, 1.61616297, 1.61746503, 1.61870849, 1.61989599,
    1.62103005, 1.62211307, 1.62314735, 1.62413509, 1.62507837, 1.62597920,
    1.62683949,
};

/// Estimated SNR in dB, clamped to [-20, 100]. Needs at least 0.1 s of
/// audio that is not all zeros.
inline double wada_snr(std::span<const double> samples, double sample_rate) {
  if (!(sample_rate > 0)) throw DataError("sample rate must be positive");
  if (static_cast<double>(samples.size()) < 0.1 * sample_rate)
    throw DataError("WADA-SNR needs at least 0.1 s of audio");
  double peak = 0.0;
  for (double s : samples) peak = std::max(peak, std::abs(s));
  if (peak == 0.0) throw DataError("WADA-SNR undefined for an all-zero waveform");

  double sum_abs = 0.0, sum_log = 0.0;
  for (double s : samples) {
    double a = std::max(std::abs(s) / peak, 1e-10);
    sum_abs += a;
    sum_log += std::log(a);
  }
  const double n = static_cast<double>(samples.size());
  const double g = std::log(std::max(sum_abs / n, 1e-10)) - sum_log / n;

  if (g <= kWadaTable.front()) return kWadaMinDb;
  if (g >= kWadaTable.back()) return kWadaMaxDb;
  auto hi = std::upper_bound(kWadaTable.begin(), kWadaTable.end(), g);
  std::size_t i = static_cast<std::size_t>(hi - kWadaTable.begin()) - 1;
  double frac = (g - kWadaTable[i]) / (kWadaTable[i + 1] - kWadaTable[i]);
  return kWadaMinDb + static_cast<double>(i) + frac;
}

// ---------------------------------------------------------------------------

struct Waveform {
  std::vector<double> samples;  // in [-1, 1)
  double sample_rate = 0.0;
};

/// 16-bit PCM mono RIFF/WAVE reader.
inline Waveform read_wav(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open file");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto u32 = [&](std::size_t off) {
    std::uint32_t v = 0;
    for (int b = 3; b >= 0; --b) v = (v << 8) | static_cast<unsigned char>(bytes[off + b]);
    return v;
  };
  auto u16 = [&](std::size_t off) {
    return static_cast<std::uint16_t>(static_cast<unsigned char>(bytes[off]) |
                                      (static_cast<unsigned char>(bytes[off + 1]) << 8));
  };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw DataError(path + ": not a RIFF/WAVE file");
  Waveform wav;
  bool have_fmt = false;
  std::size_t off = 12;
  while (off + 8 <= bytes.size()) {
    std::uint32_t size = u32(off + 4);
    std::size_t body = off + 8;
    if (body + size > bytes.size()) size = static_cast<std::uint32_t>(bytes.size() - body);
    if (std::memcmp(bytes.data() + off, "fmt ", 4) == 0) {
      if (size < 16) throw DataError(path + ": short fmt chunk");
      if (u16(body) != 1) throw DataError(path + ": only PCM WAV is supported");
      if (u16(body + 2) != 1) throw DataError(path + ": only mono WAV is supported");
      if (u16(body + 14) != 16) throw DataError(path + ": only 16-bit WAV is supported");
      wav.sample_rate = u32(body + 4);
      have_fmt = true;
    } else if (std::memcmp(bytes.data() + off, "data", 4) == 0) {
      if (!have_fmt) throw DataError(path + ": data chunk before fmt chunk");
      wav.samples.reserve(size / 2);
      for (std::size_t i = 0; i + 1 < size; i += 2)
        wav.samples.push_back(static_cast<std::int16_t>(u16(body + i)) / 32768.0);
      return wav;
    }
    off = body + size + (size & 1);
  }
  throw DataError(path + ": no data chunk");
}

inline void write_wav(const std::string &path, std::span<const double> samples,
                      std::uint32_t sample_rate) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path + ": cannot write file");
  auto put32 = [&](std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.put(static_cast<char>((v >> (8 * b)) & 0xFF));
  };
  auto put16 = [&](std::uint16_t v) {
    out.put(static_cast<char>(v & 0xFF));
    out.put(static_cast<char>(v >> 8));
  };
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  out.write("RIFF", 4);
  put32(36 + data_bytes);
  out.write("WAVEfmt ", 8);
  put32(16);
  put16(1);
  put16(1);
  put32(sample_rate);
  put32(sample_rate * 2);
  put16(2);
  put16(16);
  out.write("data", 4);
  put32(data_bytes);
  for (double s : samples) {
    double c = std::clamp(s, -1.0, 32767.0 / 32768.0);
    put16(static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(c * 32768.0))));
  }
}

}  // namespace crowdqc

#endif  // CROWDQC_WADA_SNR_HPP_
