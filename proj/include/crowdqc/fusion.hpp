// crowdqc/fusion.hpp
//
// Error correction by multi-transcript voting. Transcripts are folded one at
// a time into a column-aligned word lattice (ROVER-style), then each column
// elects the word maximizing
//
//   s(w) = alpha * N(w) / N + (1 - alpha) * c(w)
//
// where N(w) counts the transcripts proposing w at that column and c(w) is
// their mean word confidence. A gap pseudo-candidate competes with the gap
// count and a fixed confidence. alpha = 1 is plain plurality voting.
//
// The selection baselines (random, longest, best worker, oracle) live here
// too since they consume the same per-utterance response lists.

#ifndef CROWDQC_FUSION_HPP_
#define CROWDQC_FUSION_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "crowdqc/corpus.hpp"
#include "crowdqc/error.hpp"
#include "crowdqc/metrics.hpp"

namespace crowdqc {

enum class AlignmentOrder { kConfidenceDesc, kGiven };

struct FusionConfig {
  double alpha = 0.8;
  double gap_confidence = 0.5;
  AlignmentOrder alignment_order = AlignmentOrder::kConfidenceDesc;
};

/// A pair of sequences padded with gaps to equal length.
struct GappedPair {
  std::vector<std::optional<std::string>> a;
  std::vector<std::optional<std::string>> b;
};

/// Needleman-Wunsch with unit costs and the edit_align tie-break.
inline GappedPair pairwise_align(const TokenSeq &a, const TokenSeq &b) {
  // a plays the reference role, b the hypothesis role.
  auto al = edit_align(b, a);
  GappedPair out;
  for (const auto &op : al.ops) {
    out.a.push_back(op.ref_index ? std::optional<std::string>(a[*op.ref_index]) : std::nullopt);
    out.b.push_back(op.hyp_index ? std::optional<std::string>(b[*op.hyp_index]) : std::nullopt);
  }
  return out;
}

/// Column-aligned transcripts. Slot k of every column belongs to transcript
/// `source_ids[k]` and holds a word position in that transcript or kGap.
class WordLattice {
 public:
  static constexpr int kGap = -1;

  WordLattice() = default;
  WordLattice(std::vector<TokenSeq> transcripts, std::vector<std::size_t> source_ids,
              std::vector<std::vector<int>> columns)
      : transcripts_(std::move(transcripts)),
        source_ids_(std::move(source_ids)),
        columns_(std::move(columns)) {}

  std::size_t num_sources() const { return source_ids_.size(); }
  std::size_t num_columns() const { return columns_.size(); }
  const std::vector<std::size_t> &source_ids() const { return source_ids_; }
  const std::vector<std::vector<int>> &columns() const { return columns_; }
  const std::vector<TokenSeq> &transcripts() const { return transcripts_; }

  /// Word in slot `slot` of column `col`, or nullptr for a gap.
  const std::string *word(std::size_t col, std::size_t slot) const {
    int pos = columns_[col][slot];
    if (pos == kGap) return nullptr;
    return &transcripts_[source_ids_[slot]][static_cast<std::size_t>(pos)];
  }

  /// Non-gap words of one slot, left to right.
  TokenSeq readback(std::size_t slot) const {
    TokenSeq out;
    for (std::size_t c = 0; c < columns_.size(); ++c)
      if (const auto *w = word(c, slot)) out.push_back(*w);
    return out;
  }

  /// Slot of input transcript `source`.
  std::size_t slot_of(std::size_t source) const {
    auto it = std::find(source_ids_.begin(), source_ids_.end(), source);
    if (it == source_ids_.end()) throw InvariantError("source not in lattice");
    return static_cast<std::size_t>(it - source_ids_.begin());
  }

  /// Column index holding each word of input transcript `source`.
  std::vector<std::size_t> word_columns(std::size_t source) const {
    std::size_t slot = slot_of(source);
    std::vector<std::size_t> out(transcripts_[source].size());
    for (std::size_t c = 0; c < columns_.size(); ++c)
      if (columns_[c][slot] != kGap) out[static_cast<std::size_t>(columns_[c][slot])] = c;
    return out;
  }

  /// Plurality non-gap word per column; ties go to the word seen in the
  /// earliest slot.
  TokenSeq spine() const {
    TokenSeq out;
    out.reserve(columns_.size());
    for (std::size_t c = 0; c < columns_.size(); ++c) {
      std::vector<std::pair<const std::string *, int>> counts;
      for (std::size_t k = 0; k < source_ids_.size(); ++k) {
        const auto *w = word(c, k);
        if (!w) continue;
        auto it = std::find_if(counts.begin(), counts.end(),
                               [&](const auto &p) { return *p.first == *w; });
        if (it == counts.end())
          counts.emplace_back(w, 1);
        else
          ++it->second;
      }
      if (counts.empty()) throw InvariantError("lattice column without words");
      auto best = counts.begin();
      for (auto it = counts.begin(); it != counts.end(); ++it)
        if (it->second > best->second) best = it;
      out.push_back(*best->first);
    }
    return out;
  }

 private:
  std::vector<TokenSeq> transcripts_;
  std::vector<std::size_t> source_ids_;
  std::vector<std::vector<int>> columns_;
};

/// Progressive alignment: seed with the first transcript in alignment order,
/// then align each next one against the current spine. Under
/// kConfidenceDesc, `priority` (e.g. mean word confidence per transcript)
/// orders the sources, highest first, stable on ties.
inline WordLattice build_lattice(std::vector<TokenSeq> transcripts, const FusionConfig &config,
                                 std::span<const double> priority = {}) {
  if (transcripts.empty()) throw DataError("cannot build a lattice from zero transcripts");
  std::vector<std::size_t> order(transcripts.size());
  std::iota(order.begin(), order.end(), 0);
  if (config.alignment_order == AlignmentOrder::kConfidenceDesc && !priority.empty()) {
    if (priority.size() != transcripts.size())
      throw InvariantError("one priority per transcript required");
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return priority[a] > priority[b]; });
  }

  std::vector<std::vector<int>> columns;
  std::vector<std::size_t> sources;
  for (std::size_t n = 0; n < order.size(); ++n) {
    const TokenSeq &next = transcripts[order[n]];
    if (n == 0) {
      for (std::size_t i = 0; i < next.size(); ++i) columns.push_back({static_cast<int>(i)});
      sources.push_back(order[n]);
      continue;
    }
    TokenSeq spine = WordLattice(transcripts, sources, columns).spine();
    auto al = align_by(next.size(), spine.size(),
                       [&](std::size_t i, std::size_t j) { return next[i] == spine[j]; });
    std::vector<std::vector<int>> merged;
    merged.reserve(al.ops.size());
    for (const auto &op : al.ops) {
      if (op.ref_index) {
        auto col = columns[*op.ref_index];
        col.push_back(op.hyp_index ? static_cast<int>(*op.hyp_index) : WordLattice::kGap);
        merged.push_back(std::move(col));
      } else {
        std::vector<int> col(sources.size(), WordLattice::kGap);
        col.push_back(static_cast<int>(*op.hyp_index));
        merged.push_back(std::move(col));
      }
    }
    columns = std::move(merged);
    sources.push_back(order[n]);
  }
  return WordLattice(std::move(transcripts), std::move(sources), std::move(columns));
}

// ---------------------------------------------------------------------------
// Voting

struct Candidate {
  std::string word;  // empty for the gap pseudo-candidate
  bool is_gap = false;
  int count = 0;
  double confidence = 0.0;
};

struct VotingColumn {
  std::vector<Candidate> candidates;  // distinct words in first-seen slot order
  int gap_count = 0;
  int total = 0;
};

inline double vote_score(double alpha, int count, int total, double confidence) {
  return alpha * static_cast<double>(count) / static_cast<double>(total) +
         (1.0 - alpha) * confidence;
}

/// `confidences[s][i]` is the confidence of word i of input transcript s.
inline VotingColumn tally_column(const WordLattice &lattice, std::size_t col,
                                 std::span<const std::vector<double>> confidences) {
  VotingColumn vc;
  vc.total = static_cast<int>(lattice.num_sources());
  std::vector<double> sums;
  for (std::size_t k = 0; k < lattice.num_sources(); ++k) {
    int pos = lattice.columns()[col][k];
    if (pos == WordLattice::kGap) {
      ++vc.gap_count;
      continue;
    }
    std::size_t src = lattice.source_ids()[k];
    if (src >= confidences.size() ||
        static_cast<std::size_t>(pos) >= confidences[src].size())
      throw DataError("missing confidence for word " + std::to_string(pos) + " of transcript " +
                      std::to_string(src));
    const std::string &w = lattice.transcripts()[src][static_cast<std::size_t>(pos)];
    double c = confidences[src][static_cast<std::size_t>(pos)];
    auto it = std::find_if(vc.candidates.begin(), vc.candidates.end(),
                           [&](const Candidate &cand) { return cand.word == w; });
    if (it == vc.candidates.end()) {
      vc.candidates.push_back({w, false, 1, 0.0});
      sums.push_back(c);
    } else {
      ++it->count;
      sums[static_cast<std::size_t>(it - vc.candidates.begin())] += c;
    }
  }
  for (std::size_t i = 0; i < vc.candidates.size(); ++i)
    vc.candidates[i].confidence = sums[i] / vc.candidates[i].count;
  return vc;
}

/// Winning word of a tallied column, nullopt when the gap wins. Ties: higher
/// score, then higher count, then words before the gap, then lexicographic.
inline std::optional<std::string> column_winner(const VotingColumn &vc,
                                                const FusionConfig &config) {
  Candidate gap{"", true, vc.gap_count, config.gap_confidence};
  const Candidate *best = &gap;
  double best_score = vote_score(config.alpha, gap.count, vc.total, gap.confidence);
  for (const auto &cand : vc.candidates) {
    double s = vote_score(config.alpha, cand.count, vc.total, cand.confidence);
    bool better = s > best_score ||
                  (s == best_score &&
                   (cand.count > best->count ||
                    (cand.count == best->count && (best->is_gap || cand.word < best->word))));
    if (better) {
      best = &cand;
      best_score = s;
    }
  }
  if (best->is_gap) return std::nullopt;
  return best->word;
}

inline TokenSeq vote(const WordLattice &lattice,
                     std::span<const std::vector<double>> confidences,
                     const FusionConfig &config) {
  if (!(config.alpha >= 0.0 && config.alpha <= 1.0))
    throw UsageError("alpha must lie in [0, 1]");
  TokenSeq out;
  for (std::size_t c = 0; c < lattice.num_columns(); ++c) {
    auto w = column_winner(tally_column(lattice, c, confidences), config);
    if (w) out.push_back(std::move(*w));
  }
  return out;
}

/// Mean confidence of each transcript's words; empty transcripts get 0.
inline std::vector<double> mean_confidences(std::span<const std::vector<double>> confidences) {
  std::vector<double> out;
  out.reserve(confidences.size());
  for (const auto &c : confidences)
    out.push_back(c.empty() ? 0.0 : std::accumulate(c.begin(), c.end(), 0.0) / c.size());
  return out;
}

/// Lattice construction plus vote in one call.
inline TokenSeq fuse(const std::vector<TokenSeq> &transcripts,
                     std::span<const std::vector<double>> confidences,
                     const FusionConfig &config) {
  auto prio = mean_confidences(confidences);
  auto lattice = build_lattice(transcripts, config, prio);
  return vote(lattice, confidences, config);
}

// ---------------------------------------------------------------------------

struct VotingExample {
  std::vector<TokenSeq> transcripts;
  std::vector<std::vector<double>> confidences;
  TokenSeq reference;
};

struct AlphaSearch {
  double alpha = 1.0;
  std::vector<std::pair<double, ErrorBreakdown>> grid;
};

/// Grid search over alpha in [0, 1] minimizing pooled TWER of the vote;
/// ties go to the larger alpha.
inline AlphaSearch tune_alpha(std::span<const VotingExample> examples, FusionConfig config,
                              double step = 0.05) {
  if (!(step > 0.0 && step <= 1.0)) throw UsageError("alpha grid step must lie in (0, 1]");
  const int points = static_cast<int>(std::lround(1.0 / step));
  std::vector<WordLattice> lattices;
  lattices.reserve(examples.size());
  for (const auto &ex : examples)
    lattices.push_back(build_lattice(ex.transcripts, config, mean_confidences(ex.confidences)));

  AlphaSearch result;
  long best_errors = std::numeric_limits<long>::max();
  for (int k = 0; k <= points; ++k) {
    config.alpha = std::min(1.0, k * step);
    ErrorBreakdown pooled;
    for (std::size_t i = 0; i < examples.size(); ++i)
      pooled += count_errors(vote(lattices[i], examples[i].confidences, config),
                             examples[i].reference);
    result.grid.emplace_back(config.alpha, pooled);
    if (pooled.errors() <= best_errors) {
      best_errors = pooled.errors();
      result.alpha = config.alpha;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Selection baselines. Each returns an index into `responses`, which are in
// submit order.

inline std::size_t select_random(std::span<const Response> responses, std::uint64_t seed) {
  if (responses.empty()) throw DataError("cannot select from zero responses");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, responses.size() - 1);
  return pick(rng);
}

inline std::size_t select_longest(std::span<const Response> responses) {
  if (responses.empty()) throw DataError("cannot select from zero responses");
  std::size_t best = 0;
  for (std::size_t i = 1; i < responses.size(); ++i)
    if (responses[i].text.size() > responses[best].text.size()) best = i;
  return best;
}

struct WorkerRank {
  double twer = 0.0;
  long responses = 0;
};

using WorkerRanking = std::map<std::string, WorkerRank>;

/// Pooled TWER per worker over responses whose utterance has a reference.
inline WorkerRanking rank_workers(const Corpus &corpus) {
  std::map<std::string, ErrorBreakdown> pooled;
  for (std::size_t u = 0; u < corpus.utterances().size(); ++u) {
    const auto &utt = corpus.utterances()[u];
    if (!utt.reference) continue;
    for (const auto &r : corpus.responses_for(u))
      pooled[r.worker_id] += count_errors(r.text, *utt.reference);
  }
  WorkerRanking ranking;
  for (const auto &[id, b] : pooled) {
    if (b.ref_words == 0) continue;
    ranking[id] = {b.twer(), b.segments};
  }
  return ranking;
}

/// Response of the best-ranked worker: lowest TWER, then more responses,
/// then worker id. Unranked workers come last; with nobody ranked the first
/// response wins.
inline std::size_t select_best_worker(std::span<const Response> responses,
                                      const WorkerRanking &ranking) {
  if (responses.empty()) throw DataError("cannot select from zero responses");
  std::size_t best = 0;
  auto rank_of = [&](std::size_t i) -> const WorkerRank * {
    auto it = ranking.find(responses[i].worker_id);
    return it == ranking.end() ? nullptr : &it->second;
  };
  for (std::size_t i = 1; i < responses.size(); ++i) {
    const WorkerRank *a = rank_of(i);
    const WorkerRank *b = rank_of(best);
    if (!a) continue;
    if (!b) {
      best = i;
      continue;
    }
    if (a->twer != b->twer) {
      if (a->twer < b->twer) best = i;
      continue;
    }
    if (a->responses != b->responses) {
      if (a->responses > b->responses) best = i;
      continue;
    }
    if (responses[i].worker_id < responses[best].worker_id) best = i;
  }
  return best;
}

inline std::size_t select_oracle(std::span<const Response> responses,
                                 const std::optional<TokenSeq> &reference) {
  if (!reference) throw DataError("oracle selection needs a reference");
  if (responses.empty()) throw DataError("cannot select from zero responses");
  std::size_t best = 0;
  std::size_t best_d = edit_distance(responses[0].text, *reference);
  for (std::size_t i = 1; i < responses.size(); ++i) {
    std::size_t d = edit_distance(responses[i].text, *reference);
    if (d < best_d) {
      best = i;
      best_d = d;
    }
  }
  return best;
}

}  // namespace crowdqc

#endif  // CROWDQC_FUSION_HPP_
