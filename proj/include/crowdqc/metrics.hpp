// crowdqc/metrics.hpp
//
// Levenshtein alignment with a fixed backtrace order, TWER bookkeeping and
// edit-distance agreement between transcripts of the same audio.

#ifndef CROWDQC_METRICS_HPP_
#define CROWDQC_METRICS_HPP_

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "crowdqc/corpus.hpp"
#include "crowdqc/error.hpp"

namespace crowdqc {

enum class EditOp { kMatch, kSubstitute, kDelete, kInsert };

/// kDelete consumes a reference word only, kInsert a hypothesis word only.
struct AlignedPair {
  EditOp op = EditOp::kMatch;
  std::optional<std::size_t> hyp_index;
  std::optional<std::size_t> ref_index;
};

struct EditAlignment {
  std::vector<AlignedPair> ops;
  std::size_t distance = 0;
};

/// Unit-cost global alignment of two sequences given only their lengths and
/// an equality predicate on (hyp position, ref position). Backtrace priority
/// is match > substitute > delete > insert.
template <typename Equal>
EditAlignment align_by(std::size_t hyp_len, std::size_t ref_len, Equal &&equal) {
  const std::size_t cols = ref_len + 1;
  std::vector<std::uint32_t> d((hyp_len + 1) * cols);
  auto at = [&](std::size_t i, std::size_t j) -> std::uint32_t & { return d[i * cols + j]; };
  for (std::size_t j = 0; j <= ref_len; ++j) at(0, j) = static_cast<std::uint32_t>(j);
  for (std::size_t i = 1; i <= hyp_len; ++i) {
    at(i, 0) = static_cast<std::uint32_t>(i);
    for (std::size_t j = 1; j <= ref_len; ++j) {
      std::uint32_t diag = at(i - 1, j - 1) + (equal(i - 1, j - 1) ? 0 : 1);
      std::uint32_t del = at(i, j - 1) + 1;
      std::uint32_t ins = at(i - 1, j) + 1;
      at(i, j) = std::min({diag, del, ins});
    }
  }

  EditAlignment result;
  result.distance = at(hyp_len, ref_len);
  std::size_t i = hyp_len, j = ref_len;
  while (i > 0 || j > 0) {
    const std::uint32_t here = at(i, j);
    if (i > 0 && j > 0) {
      bool eq = equal(i - 1, j - 1);
      if (eq && here == at(i - 1, j - 1)) {
        result.ops.push_back({EditOp::kMatch, i - 1, j - 1});
        --i, --j;
        continue;
      }
      if (!eq && here == at(i - 1, j - 1) + 1) {
        result.ops.push_back({EditOp::kSubstitute, i - 1, j - 1});
        --i, --j;
        continue;
      }
    }
    if (j > 0 && here == at(i, j - 1) + 1) {
      result.ops.push_back({EditOp::kDelete, std::nullopt, j - 1});
      --j;
      continue;
    }
    if (i > 0 && here == at(i - 1, j) + 1) {
      result.ops.push_back({EditOp::kInsert, i - 1, std::nullopt});
      --i;
      continue;
    }
    throw InvariantError("edit alignment backtrace lost its path");
  }
  std::reverse(result.ops.begin(), result.ops.end());
  return result;
}

inline EditAlignment edit_align(const TokenSeq &hyp, const TokenSeq &ref) {
  return align_by(hyp.size(), ref.size(),
                  [&](std::size_t i, std::size_t j) { return hyp[i] == ref[j]; });
}

/// Distance only; same DP as edit_align without the backtrace.
inline std::size_t edit_distance(const TokenSeq &a, const TokenSeq &b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1), cur[j - 1] + 1,
                         prev[j] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// ---------------------------------------------------------------------------

/// Error counts against a reference. Rates divide by ref_words; a pool with
/// no reference words has rate 0 when error-free.
struct ErrorBreakdown {
  long segments = 0;
  long ref_words = 0;
  long hyp_words = 0;
  long deletions = 0;
  long insertions = 0;
  long substitutions = 0;

  long errors() const { return deletions + insertions + substitutions; }

  double rate(long count) const {
    if (ref_words == 0) return count == 0 ? 0.0 : std::numeric_limits<double>::infinity();
    return static_cast<double>(count) / static_cast<double>(ref_words);
  }
  double del_rate() const { return rate(deletions); }
  double ins_rate() const { return rate(insertions); }
  double sub_rate() const { return rate(substitutions); }
  double twer() const { return rate(errors()); }

  /// Mean hypothesis length in words.
  double mean_length() const {
    return segments ? static_cast<double>(hyp_words) / static_cast<double>(segments) : 0.0;
  }

  ErrorBreakdown &operator+=(const ErrorBreakdown &o) {
    segments += o.segments;
    ref_words += o.ref_words;
    hyp_words += o.hyp_words;
    deletions += o.deletions;
    insertions += o.insertions;
    substitutions += o.substitutions;
    return *this;
  }

  bool operator==(const ErrorBreakdown &) const = default;
};

/// Counts without the rate precondition; used when pooling.
inline ErrorBreakdown count_errors(const TokenSeq &hyp, const TokenSeq &ref) {
  ErrorBreakdown b;
  b.segments = 1;
  b.ref_words = static_cast<long>(ref.size());
  b.hyp_words = static_cast<long>(hyp.size());
  for (const auto &op : edit_align(hyp, ref).ops) {
    switch (op.op) {
      case EditOp::kMatch: break;
      case EditOp::kSubstitute: ++b.substitutions; break;
      case EditOp::kDelete: ++b.deletions; break;
      case EditOp::kInsert: ++b.insertions; break;
    }
  }
  return b;
}

inline ErrorBreakdown breakdown(const TokenSeq &hyp, const TokenSeq &ref) {
  if (ref.empty() && !hyp.empty())
    throw DataError("error rate undefined: empty reference with non-empty hypothesis");
  return count_errors(hyp, ref);
}

struct CorpusTwer {
  std::map<Subset, ErrorBreakdown> per_subset;
  ErrorBreakdown total;
};

/// Pooled (micro-averaged) TWER of one hypothesis per utterance.
inline CorpusTwer corpus_twer(const Corpus &corpus,
                              const std::map<std::string, TokenSeq> &hypothesis) {
  CorpusTwer out;
  for (const auto &[id, hyp] : hypothesis) {
    const Utterance *u = corpus.find(id);
    if (!u) throw DataError("hypothesis for unknown utterance '" + id + "'");
    if (!u->reference) throw DataError("utterance '" + id + "' has no reference");
    ErrorBreakdown b = count_errors(hyp, *u->reference);
    out.per_subset[u->subset] += b;
    out.total += b;
  }
  return out;
}

/// Pooled TWER with every response scored against its reference. Utterances
/// without a reference are skipped.
inline CorpusTwer raw_twer(const Corpus &corpus) {
  CorpusTwer out;
  for (std::size_t i = 0; i < corpus.utterances().size(); ++i) {
    const auto &u = corpus.utterances()[i];
    if (!u.reference) continue;
    for (const auto &r : corpus.responses_for(i)) {
      ErrorBreakdown b = count_errors(r.text, *u.reference);
      out.per_subset[u.subset] += b;
      out.total += b;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

struct PeerAgreement {
  double mean_peer_distance = 1.0;
  double min_peer_distance = 1.0;
};

/// Edit distance normalized by the longer of the two sequences; two empty
/// sequences are at distance 0.
inline double normalized_distance(const TokenSeq &a, const TokenSeq &b) {
  std::size_t longer = std::max(a.size(), b.size());
  if (longer == 0) return 0.0;
  return static_cast<double>(edit_distance(a, b)) / static_cast<double>(longer);
}

/// One entry per transcript; a lone transcript gets 1.0 for both features.
inline std::vector<PeerAgreement> agreement_features(std::span<const TokenSeq> responses) {
  const std::size_t n = responses.size();
  std::vector<PeerAgreement> out(n);
  if (n < 2) return out;
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      dist[i * n + j] = dist[j * n + i] = normalized_distance(responses[i], responses[j]);
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0, mn = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      sum += dist[i * n + j];
      mn = std::min(mn, dist[i * n + j]);
    }
    out[i].mean_peer_distance = sum / static_cast<double>(n - 1);
    out[i].min_peer_distance = mn;
  }
  return out;
}

}  // namespace crowdqc

#endif  // CROWDQC_METRICS_HPP_
