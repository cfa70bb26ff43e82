// crowdqc/ctc.hpp
//
// Log-space CTC over externally produced character emissions: forward-pass
// loss, Viterbi word segmentation, and the per-word alignment score built
// from the word's own segment plus the CTC losses of its left and right
// context.

#ifndef CROWDQC_CTC_HPP_
#define CROWDQC_CTC_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "crowdqc/corpus.hpp"
#include "crowdqc/error.hpp"

namespace crowdqc {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr std::string_view kBlankSymbol = "<b>";
inline constexpr std::string_view kSeparatorSymbol = "|";

inline double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  if (a < b) std::swap(a, b);
  return a + std::log1p(std::exp(b - a));
}

inline double log_sum_exp(std::span<const double> xs) {
  double mx = kNegInf;
  for (double x : xs) mx = std::max(mx, x);
  if (mx == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - mx);
  return mx + std::log(s);
}

/// Frames x vocabulary log-probabilities. Blank is symbol 0; every row must
/// log-sum-exp to 0 within `tolerance`.
class EmissionMatrix {
 public:
  static constexpr int kBlank = 0;

  EmissionMatrix() = default;

  EmissionMatrix(std::vector<std::string> vocab, std::vector<double> logp,
                 double tolerance = 1e-6)
      : vocab_(std::move(vocab)), logp_(std::move(logp)) {
    if (vocab_.empty() || vocab_[0] != kBlankSymbol)
      throw DataError("emission vocabulary must start with " + std::string(kBlankSymbol));
    if (logp_.size() % vocab_.size() != 0)
      throw DataError("emission grid size is not a multiple of the vocabulary size");
    frames_ = logp_.size() / vocab_.size();
    if (frames_ == 0) throw DataError("emission matrix has no frames");
    for (std::size_t k = 1; k < vocab_.size(); ++k) {
      const auto &sym = vocab_[k];
      if (sym == kSeparatorSymbol) {
        separator_ = static_cast<int>(k);
      } else if (sym.size() == 1) {
        char_index_[static_cast<unsigned char>(sym[0])] = static_cast<int>(k);
      } else {
        throw DataError("emission symbol '" + sym + "' is not a single character");
      }
    }
    for (std::size_t t = 0; t < frames_; ++t) {
      double z = log_sum_exp(row(t));
      if (!(std::abs(z) <= tolerance))
        throw DataError("emission row " + std::to_string(t) +
                        " is not normalized (log-sum-exp " + std::to_string(z) + ")");
    }
  }

  std::size_t frames() const { return frames_; }
  std::size_t vocab_size() const { return vocab_.size(); }
  const std::vector<std::string> &vocab() const { return vocab_; }
  const std::vector<double> &data() const { return logp_; }

  double operator()(std::size_t t, int k) const {
    return logp_[t * vocab_.size() + static_cast<std::size_t>(k)];
  }

  std::span<const double> row(std::size_t t) const {
    return std::span<const double>(logp_).subspan(t * vocab_.size(), vocab_.size());
  }

  /// Symbol index of a character, or -1.
  int char_symbol(char c) const { return char_index_[static_cast<unsigned char>(c)]; }

  /// Word-separator symbol index, or -1 when the vocabulary has none.
  int separator() const { return separator_; }

  bool operator==(const EmissionMatrix &o) const {
    return vocab_ == o.vocab_ && logp_ == o.logp_;
  }

 private:
  std::vector<std::string> vocab_;
  std::vector<double> logp_;
  std::size_t frames_ = 0;
  int separator_ = -1;
  std::vector<int> char_index_ = std::vector<int>(256, -1);
};

/// Half-open frame range [begin, end) of a matrix. Slices are not
/// renormalized.
class EmissionView {
 public:
  EmissionView(const EmissionMatrix &m)  // NOLINT(google-explicit-constructor)
      : m_(&m), begin_(0), end_(m.frames()) {}
  EmissionView(const EmissionMatrix &m, std::size_t begin, std::size_t end)
      : m_(&m), begin_(begin), end_(end) {
    if (begin > end || end > m.frames()) throw InvariantError("emission view out of range");
  }

  std::size_t frames() const { return end_ - begin_; }
  double operator()(std::size_t t, int k) const { return (*m_)(begin_ + t, k); }

 private:
  const EmissionMatrix *m_;
  std::size_t begin_;
  std::size_t end_;
};

/// Character symbol indices of one word.
inline std::vector<int> encode_word(const EmissionMatrix &em, std::string_view word) {
  std::vector<int> labels;
  labels.reserve(word.size());
  for (char c : word) {
    int k = em.char_symbol(c);
    if (k < 0)
      throw DataError("symbol '" + std::string(1, c) + "' of word '" + std::string(word) +
                      "' is not in the emission vocabulary");
    labels.push_back(k);
  }
  return labels;
}

/// Words [first, last) joined by the separator symbol (when the vocabulary
/// has one), optionally with a leading and/or trailing separator.
inline std::vector<int> encode_words(const EmissionMatrix &em, const TokenSeq &words,
                                     std::size_t first, std::size_t last,
                                     bool leading_sep = false, bool trailing_sep = false) {
  std::vector<int> labels;
  const int sep = em.separator();
  if (first >= last) return labels;
  if (leading_sep && sep >= 0) labels.push_back(sep);
  for (std::size_t w = first; w < last; ++w) {
    if (w > first && sep >= 0) labels.push_back(sep);
    auto chars = encode_word(em, words[w]);
    labels.insert(labels.end(), chars.begin(), chars.end());
  }
  if (trailing_sep && sep >= 0) labels.push_back(sep);
  return labels;
}

/// Minimal frame count for a CTC label sequence: one frame per label plus a
/// blank between each pair of repeated labels.
inline std::size_t min_ctc_frames(std::span<const int> labels) {
  std::size_t n = labels.size();
  for (std::size_t i = 1; i < labels.size(); ++i)
    if (labels[i] == labels[i - 1]) ++n;
  return n;
}

/// -log of the total probability of all frame paths collapsing to `labels`.
/// Empty labels score the all-blank path; an empty view with empty labels
/// is 0. Too few frames gives +inf.
inline double ctc_loss(const EmissionView &em, std::span<const int> labels) {
  const std::size_t T = em.frames();
  const std::size_t L = labels.size();
  if (T == 0) return L == 0 ? 0.0 : std::numeric_limits<double>::infinity();
  for (int k : labels)
    if (k == EmissionMatrix::kBlank) throw DataError("CTC labels may not contain blank");
  if (T < min_ctc_frames(labels)) return std::numeric_limits<double>::infinity();

  const std::size_t S = 2 * L + 1;
  auto sym = [&](std::size_t s) { return s % 2 == 0 ? EmissionMatrix::kBlank : labels[s / 2]; };
  std::vector<double> alpha(S, kNegInf), next(S, kNegInf);
  alpha[0] = em(0, EmissionMatrix::kBlank);
  if (S > 1) alpha[1] = em(0, sym(1));
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double a = alpha[s];
      if (s >= 1) a = log_add(a, alpha[s - 1]);
      if (s >= 2 && s % 2 == 1 && sym(s) != sym(s - 2)) a = log_add(a, alpha[s - 2]);
      next[s] = a == kNegInf ? kNegInf : a + em(t, sym(s));
    }
    std::swap(alpha, next);
  }
  double total = alpha[S - 1];
  if (S > 1) total = log_add(total, alpha[S - 2]);
  return total == kNegInf ? std::numeric_limits<double>::infinity() : -total;
}

inline double ctc_loss(const EmissionView &em, std::string_view chars,
                       const EmissionMatrix &vocab_source) {
  auto labels = encode_word(vocab_source, chars);
  return ctc_loss(em, labels);
}

// ---------------------------------------------------------------------------

/// Inclusive frame span of one word.
struct WordSegment {
  std::size_t word_index = 0;
  std::size_t start_frame = 0;
  std::size_t end_frame = 0;

  bool operator==(const WordSegment &) const = default;
};

/// Most probable monotonic alignment of the separator-joined words. Ties
/// prefer the path that reaches each label at the earliest frame.
inline std::vector<WordSegment> ctc_segment(const EmissionMatrix &em, const TokenSeq &words) {
  std::vector<WordSegment> segments;
  if (words.empty()) return segments;

  std::vector<int> labels;
  std::vector<int> owner;  // word index of each label, -1 for separators
  const int sep = em.separator();
  for (std::size_t w = 0; w < words.size(); ++w) {
    if (w > 0 && sep >= 0) {
      labels.push_back(sep);
      owner.push_back(-1);
    }
    for (int k : encode_word(em, words[w])) {
      labels.push_back(k);
      owner.push_back(static_cast<int>(w));
    }
  }
  const std::size_t T = em.frames();
  if (T < min_ctc_frames(labels))
    throw DataError("transcript needs " + std::to_string(min_ctc_frames(labels)) +
                    " frames but the emission matrix has " + std::to_string(T));

  const std::size_t L = labels.size();
  const std::size_t S = 2 * L + 1;
  auto sym = [&](std::size_t s) { return s % 2 == 0 ? EmissionMatrix::kBlank : labels[s / 2]; };
  std::vector<double> delta(S, kNegInf), next(S, kNegInf);
  std::vector<std::uint8_t> back(T * S, 0);
  delta[0] = em(0, EmissionMatrix::kBlank);
  delta[1] = em(0, sym(1));
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double best = delta[s];
      std::uint8_t step = 0;
      if (s >= 1 && delta[s - 1] > best) {
        best = delta[s - 1];
        step = 1;
      }
      if (s >= 2 && s % 2 == 1 && sym(s) != sym(s - 2) && delta[s - 2] > best) {
        best = delta[s - 2];
        step = 2;
      }
      next[s] = best == kNegInf ? kNegInf : best + em(t, sym(s));
      back[t * S + s] = step;
    }
    std::swap(delta, next);
  }
  std::size_t s = delta[S - 1] >= delta[S - 2] ? S - 1 : S - 2;
  if (delta[s] == kNegInf) throw DataError("transcript has no admissible CTC alignment");

  std::vector<std::size_t> state(T);
  for (std::size_t t = T; t-- > 0;) {
    state[t] = s;
    if (t > 0) s -= back[t * S + s];
  }

  segments.resize(words.size());
  std::vector<bool> seen(words.size(), false);
  for (std::size_t t = 0; t < T; ++t) {
    if (state[t] % 2 == 0) continue;
    int w = owner[state[t] / 2];
    if (w < 0) continue;
    auto &seg = segments[static_cast<std::size_t>(w)];
    if (!seen[static_cast<std::size_t>(w)]) {
      seen[static_cast<std::size_t>(w)] = true;
      seg.word_index = static_cast<std::size_t>(w);
      seg.start_frame = t;
    }
    seg.end_frame = t;
  }
  return segments;
}

struct WordAlignmentScore {
  std::size_t word_index = 0;
  double log_s = 0.0;
};

namespace detail {

// Extended (blank-interleaved) CTC lattice over a full label sequence.
// alpha(t, s): log prob of frames [0, t] ending in state s.
// beta(t, s):  log prob of frames [t, T) starting in state s.
class CtcTables {
 public:
  CtcTables(const EmissionMatrix &em, std::span<const int> labels)
      : T_(em.frames()), S_(2 * labels.size() + 1), alpha_(T_ * S_, kNegInf),
        beta_(T_ * S_, kNegInf) {
    auto sym = [&](std::size_t s) { return s % 2 == 0 ? EmissionMatrix::kBlank : labels[s / 2]; };
    auto skip = [&](std::size_t s) { return s >= 2 && s % 2 == 1 && sym(s) != sym(s - 2); };
    alpha(0, 0) = em(0, EmissionMatrix::kBlank);
    if (S_ > 1) alpha(0, 1) = em(0, sym(1));
    for (std::size_t t = 1; t < T_; ++t) {
      for (std::size_t s = 0; s < S_; ++s) {
        double a = alpha(t - 1, s);
        if (s >= 1) a = log_add(a, alpha(t - 1, s - 1));
        if (skip(s)) a = log_add(a, alpha(t - 1, s - 2));
        alpha(t, s) = a == kNegInf ? kNegInf : a + em(t, sym(s));
      }
    }
    beta(T_ - 1, S_ - 1) = em(T_ - 1, sym(S_ - 1));
    if (S_ > 1) beta(T_ - 1, S_ - 2) = em(T_ - 1, sym(S_ - 2));
    for (std::size_t t = T_ - 1; t-- > 0;) {
      for (std::size_t s = 0; s < S_; ++s) {
        double b = beta(t + 1, s);
        if (s + 1 < S_) b = log_add(b, beta(t + 1, s + 1));
        if (s + 2 < S_ && skip(s + 2)) b = log_add(b, beta(t + 1, s + 2));
        beta(t, s) = b == kNegInf ? kNegInf : b + em(t, sym(s));
      }
    }
  }

  // -log P(labels[0, m) on frames [0, frames)).
  double prefix_loss(std::size_t m, std::size_t frames) const {
    if (frames == 0) return m == 0 ? 0.0 : std::numeric_limits<double>::infinity();
    double p = alpha(frames - 1, 2 * m);
    if (m > 0) p = log_add(p, alpha(frames - 1, 2 * m - 1));
    return p == kNegInf ? std::numeric_limits<double>::infinity() : -p;
  }

  // -log P(labels[j, L) on frames [first, T)).
  double suffix_loss(std::size_t j, std::size_t first) const {
    const std::size_t L = (S_ - 1) / 2;
    if (first >= T_) return j == L ? 0.0 : std::numeric_limits<double>::infinity();
    double p = beta(first, 2 * j);
    if (j < L) p = log_add(p, beta(first, 2 * j + 1));
    return p == kNegInf ? std::numeric_limits<double>::infinity() : -p;
  }

 private:
  double &alpha(std::size_t t, std::size_t s) { return alpha_[t * S_ + s]; }
  double alpha(std::size_t t, std::size_t s) const { return alpha_[t * S_ + s]; }
  double &beta(std::size_t t, std::size_t s) { return beta_[t * S_ + s]; }
  double beta(std::size_t t, std::size_t s) const { return beta_[t * S_ + s]; }

  std::size_t T_;
  std::size_t S_;
  std::vector<double> alpha_;
  std::vector<double> beta_;
};

}  // namespace detail

/// Score of word i given its segment [u, v]:
///   log s_i = -CTC(x[u..v], word_i) - CTC(x[0..u), words before i)
///             - CTC(x(v..S), words after i)
/// The context label sequences carry the separator that sits between them
/// and word i, so the three slices together cover the full label sequence.
/// This version evaluates every context term by running CTC on the slice.
inline std::vector<WordAlignmentScore> word_alignment_scores_direct(
    const EmissionMatrix &em, const TokenSeq &words, std::span<const WordSegment> segments) {
  if (segments.size() != words.size())
    throw InvariantError("one segment per word required");
  std::vector<WordAlignmentScore> out;
  out.reserve(words.size());
  const std::size_t T = em.frames();
  for (std::size_t i = 0; i < words.size(); ++i) {
    const auto &seg = segments[i];
    double word = ctc_loss(EmissionView(em, seg.start_frame, seg.end_frame + 1),
                           encode_word(em, words[i]));
    double prefix = ctc_loss(EmissionView(em, 0, seg.start_frame),
                             encode_words(em, words, 0, i, false, true));
    double suffix = ctc_loss(EmissionView(em, seg.end_frame + 1, T),
                             encode_words(em, words, i + 1, words.size(), true, false));
    double total = word + prefix + suffix;
    out.push_back({i, std::isinf(total) ? kNegInf : -total});
  }
  return out;
}

/// Same quantity as word_alignment_scores_direct. Context terms come from
/// one forward and one backward pass over the full label sequence: the
/// forward variables restricted to a label prefix are exactly the prefix's
/// own CTC forward variables, and likewise backward for suffixes.
inline std::vector<WordAlignmentScore> word_alignment_scores(
    const EmissionMatrix &em, const TokenSeq &words, std::span<const WordSegment> segments) {
  if (segments.size() != words.size())
    throw InvariantError("one segment per word required");
  std::vector<WordAlignmentScore> out;
  if (words.empty()) return out;
  out.reserve(words.size());

  std::vector<int> labels;
  std::vector<std::pair<std::size_t, std::size_t>> span_of(words.size());  // [first, last)
  const int sep = em.separator();
  for (std::size_t w = 0; w < words.size(); ++w) {
    if (w > 0 && sep >= 0) labels.push_back(sep);
    auto chars = encode_word(em, words[w]);
    span_of[w].first = labels.size();
    labels.insert(labels.end(), chars.begin(), chars.end());
    span_of[w].second = labels.size();
  }
  detail::CtcTables tables(em, labels);
  for (std::size_t i = 0; i < words.size(); ++i) {
    const auto &seg = segments[i];
    std::span<const int> word_labels(labels.data() + span_of[i].first,
                                     span_of[i].second - span_of[i].first);
    double word = ctc_loss(EmissionView(em, seg.start_frame, seg.end_frame + 1), word_labels);
    double prefix = tables.prefix_loss(span_of[i].first, seg.start_frame);
    double suffix = tables.suffix_loss(span_of[i].second, seg.end_frame + 1);
    double total = word + prefix + suffix;
    out.push_back({i, std::isinf(total) ? kNegInf : -total});
  }
  return out;
}

inline std::vector<WordAlignmentScore> word_alignment_scores(const EmissionMatrix &em,
                                                             const TokenSeq &words) {
  auto segments = ctc_segment(em, words);
  return word_alignment_scores(em, words, segments);
}

// ---------------------------------------------------------------------------
// Emission files: first line is the vocabulary (blank first), then one line
// of log-probabilities per frame.

inline EmissionMatrix read_emissions(std::istream &in, const std::string &name) {
  std::string line;
  if (!detail::read_line(in, line)) throw DataError(name + ": empty emission file");
  std::vector<std::string> vocab;
  {
    std::istringstream ss(line);
    std::string sym;
    while (ss >> sym) vocab.push_back(sym);
  }
  std::vector<double> logp;
  std::size_t line_no = 1;
  while (detail::read_line(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::istringstream ss(line);
    std::string tok;
    std::size_t count = 0;
    while (ss >> tok) {
      char *end = nullptr;
      double v = std::strtod(tok.c_str(), &end);
      if (end != tok.c_str() + tok.size())
        throw DataError(name + ":" + std::to_string(line_no) + ": bad number '" + tok + "'");
      logp.push_back(v);
      ++count;
    }
    if (count != vocab.size())
      throw DataError(name + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(vocab.size()) + " values, got " + std::to_string(count));
  }
  try {
    return EmissionMatrix(std::move(vocab), std::move(logp));
  } catch (const DataError &e) {
    throw DataError(name + ": " + e.what());
  }
}

inline EmissionMatrix load_emissions(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open file");
  return read_emissions(in, path);
}

inline void write_emissions(std::ostream &out, const EmissionMatrix &em) {
  for (std::size_t k = 0; k < em.vocab_size(); ++k) out << (k ? " " : "") << em.vocab()[k];
  out << '\n';
  std::ostringstream num;
  num.precision(17);
  for (std::size_t t = 0; t < em.frames(); ++t) {
    for (std::size_t k = 0; k < em.vocab_size(); ++k) {
      double v = em(t, static_cast<int>(k));
      num.str("");
      if (v == kNegInf)
        num << "-inf";
      else
        num << v;
      out << (k ? " " : "") << num.str();
    }
    out << '\n';
  }
}

}  // namespace crowdqc

#endif  // CROWDQC_CTC_HPP_
