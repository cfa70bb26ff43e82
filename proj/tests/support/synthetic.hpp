// crowdqc/tests/support/synthetic.hpp
//
// Seeded generator of LibriCrowd-shaped corpora: references, five noisy
// worker responses per utterance, and character emission matrices that
// follow the reference audio.

#ifndef CROWDQC_TESTS_SYNTHETIC_HPP_
#define CROWDQC_TESTS_SYNTHETIC_HPP_

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "crowdqc/corpus.hpp"
#include "crowdqc/ctc.hpp"

namespace crowdqc::testing {

struct SyntheticOptions {
  std::uint64_t seed = 7;
  int train_utterances = 300;
  int eval_utterances = 100;  // per evaluation subset
  int workers = 40;
  int responses_per_utterance = 5;
  bool emissions = true;
};

struct WorkerProfile {
  std::string id;
  double sub = 0.02;
  double del = 0.01;
  double ins = 0.01;
  double truncate = 0.0;  // chance of dropping the tail of the utterance
  double seconds_per_word = 3.0;
  double mishear = 0.4;  // chance of falling for an utterance's shared confusion
};

inline const std::vector<std::string> &synthetic_vocabulary() {
  static const std::vector<std::string> words = {
      "the",     "and",    "of",      "to",      "a",       "in",      "he",      "was",
      "that",    "it",     "his",     "her",     "with",    "as",      "had",     "you",
      "for",     "she",    "not",     "at",      "but",     "be",      "on",      "him",
      "they",    "said",   "all",     "so",      "which",   "have",    "there",   "from",
      "one",     "were",   "by",      "them",    "this",    "me",      "my",      "what",
      "would",   "when",   "if",      "no",      "could",   "we",      "some",    "out",
      "man",     "little", "very",    "old",     "into",    "time",    "then",    "upon",
      "now",     "will",   "only",    "see",     "down",    "more",    "great",   "good",
      "day",     "made",   "long",    "night",   "house",   "eyes",    "hand",    "came",
      "face",    "water",  "light",   "door",    "mother",  "father",  "young",   "heart",
      "thought", "away",   "room",    "voice",   "place",   "while",   "again",   "before",
      "after",   "river",  "garden",  "window",  "letter",  "morning", "evening", "forest",
      "captain", "doctor", "silence", "journey", "village", "mountain", "whisper", "lantern",
      "harbour", "meadow", "castle",  "shadow",  "carriage", "kingdom", "stranger", "wander",
      "don't",   "it's",   "o'clock", "i'm",     "won't",   "that's",  "can't",   "there's"};
  return words;
}

class SyntheticCorpus {
 public:
  explicit SyntheticCorpus(const SyntheticOptions &opt = {}) : opt_(opt), rng_(opt.seed) {
    // Zipf-like word weights
    const auto &vocab = synthetic_vocabulary();
    for (std::size_t i = 0; i < vocab.size(); ++i) weights_.push_back(1.0 / (1.0 + 0.3 * i));
    make_workers();
    make_utterances();
  }

  const std::vector<Utterance> &utterances() const { return utterances_; }
  const std::vector<Response> &responses() const { return responses_; }
  const std::vector<WorkerProfile> &workers() const { return workers_; }
  Corpus corpus() const { return Corpus(utterances_, responses_); }

  /// Writes responses.tsv, references.tsv and emissions/<id>.emit.
  void write(const std::filesystem::path &dir) const {
    std::filesystem::create_directories(dir);
    {
      std::ofstream out(dir / "responses.tsv");
      out << "utterance_id\tworker_id\tsubmit_order\tspend_time\traw_text\n";
      for (const auto &r : responses_)
        out << r.utterance_id << '\t' << r.worker_id << '\t' << r.submit_order << '\t'
            << (r.spend_time ? std::to_string(*r.spend_time) : "") << '\t' << r.raw_text << '\n';
    }
    {
      std::ofstream out(dir / "references.tsv");
      out << "utterance_id\tsubset\tduration_s\treference_text\n";
      for (const auto &u : utterances_)
        out << u.id << '\t' << subset_name(u.subset) << '\t' << *u.audio_duration << '\t'
            << join_tokens(*u.reference) << '\n';
    }
    if (opt_.emissions) {
      std::filesystem::create_directories(dir / "emissions");
      for (const auto &u : utterances_) {
        std::ofstream out(dir / "emissions" / (u.id + ".emit"));
        write_emissions(out, emissions_.at(u.id));
      }
    }
  }

  const EmissionMatrix &emissions(const std::string &id) const { return emissions_.at(id); }

 private:
  void make_workers() {
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (int w = 0; w < opt_.workers; ++w) {
      WorkerProfile p;
      char buf[16];
      std::snprintf(buf, sizeof buf, "W%03d", w);
      p.id = buf;
      double kind = U(rng_);
      if (kind < 0.65) {
        p.sub = 0.005 + 0.015 * U(rng_);
        p.del = 0.003 + 0.005 * U(rng_);
        p.ins = 0.003 + 0.005 * U(rng_);
        p.truncate = 0.01;
        p.seconds_per_word = 2.5 + U(rng_);
        p.mishear = 0.45;
      } else if (kind < 0.9) {
        p.sub = 0.03 + 0.03 * U(rng_);
        p.del = 0.01 + 0.01 * U(rng_);
        p.ins = 0.005 + 0.01 * U(rng_);
        p.truncate = 0.04;
        p.seconds_per_word = 1.8 + U(rng_);
        p.mishear = 0.6;
      } else {
        p.sub = 0.08 + 0.06 * U(rng_);
        p.del = 0.03 + 0.03 * U(rng_);
        p.ins = 0.01 + 0.01 * U(rng_);
        p.truncate = 0.25;
        p.seconds_per_word = 0.8 + 0.5 * U(rng_);
        p.mishear = 0.75;
      }
      workers_.push_back(p);
    }
  }

  std::string sample_word() {
    std::discrete_distribution<std::size_t> d(weights_.begin(), weights_.end());
    return synthetic_vocabulary()[d(rng_)];
  }

  /// A plausible misspelling or confusion for `w`.
  std::string confuse(const std::string &w) {
    std::uniform_real_distribution<double> U(0.0, 1.0);
    if (U(rng_) < 0.5 || w.size() < 3) {
      std::string other;
      do other = sample_word();
      while (other == w);
      return other;
    }
    std::string s = w;
    std::uniform_int_distribution<std::size_t> pos(0, s.size() - 1);
    std::uniform_int_distribution<int> letter(0, 25);
    s[pos(rng_)] = static_cast<char>('a' + letter(rng_));
    return s == w ? w + "s" : s;
  }

  void make_utterances() {
    const std::vector<std::pair<Subset, int>> plan = {
        {Subset::kTrainOther10h, opt_.train_utterances}, {Subset::kTrainMixed10h, opt_.eval_utterances},
        {Subset::kDevClean, opt_.eval_utterances},       {Subset::kTestClean, opt_.eval_utterances},
        {Subset::kDevOther, opt_.eval_utterances},       {Subset::kTestOther, opt_.eval_utterances}};
    std::uniform_real_distribution<double> U(0.0, 1.0);
    std::uniform_int_distribution<int> length(6, 22);
    std::uniform_int_distribution<std::size_t> pick_worker(0, workers_.size() - 1);
    int serial = 0;
    for (const auto &[subset, count] : plan) {
      bool other = subset == Subset::kTrainOther10h || subset == Subset::kDevOther ||
                   subset == Subset::kTestOther;
      double difficulty = other ? 1.6 : 1.0;
      for (int i = 0; i < count; ++i) {
        Utterance u;
        char buf[32];
        std::snprintf(buf, sizeof buf, "u%05d", serial++);
        u.id = buf;
        u.subset = subset;
        TokenSeq ref;
        int n = length(rng_);
        for (int k = 0; k < n; ++k) ref.push_back(sample_word());
        u.reference = ref;
        u.audio_duration = 0.35 * n + 0.5 + U(rng_);
        if (opt_.emissions) emissions_.emplace(u.id, make_emissions(ref, other));
        // hard spots: one shared wrong hearing that many workers repeat
        std::vector<std::string> hard(ref.size());
        for (std::size_t k = 0; k < ref.size(); ++k)
          if (U(rng_) < 0.05 * difficulty) hard[k] = confuse(ref[k]);

        std::vector<std::size_t> chosen;
        while (static_cast<int>(chosen.size()) < opt_.responses_per_utterance) {
          std::size_t w = pick_worker(rng_);
          if (std::find(chosen.begin(), chosen.end(), w) == chosen.end()) chosen.push_back(w);
        }
        for (std::size_t k = 0; k < chosen.size(); ++k) {
          const WorkerProfile &p = workers_[chosen[k]];
          Response r;
          r.utterance_id = u.id;
          r.worker_id = p.id;
          r.submit_order = static_cast<int>(k);
          r.raw_text = transcribe(ref, hard, p, difficulty);
          r.text = normalize_text(r.raw_text);
          r.spend_time = p.seconds_per_word * (static_cast<double>(r.text.size()) + 1.0) *
                         (0.7 + 0.6 * U(rng_));
          responses_.push_back(std::move(r));
        }
        utterances_.push_back(std::move(u));
      }
    }
  }

  std::string transcribe(const TokenSeq &ref, const std::vector<std::string> &hard,
                         const WorkerProfile &p, double difficulty) {
    std::uniform_real_distribution<double> U(0.0, 1.0);
    TokenSeq out;
    std::size_t keep = ref.size();
    if (U(rng_) < p.truncate) keep = static_cast<std::size_t>(ref.size() * (0.2 + 0.4 * U(rng_)));
    for (std::size_t i = 0; i < keep; ++i) {
      if (!hard[i].empty() && U(rng_) < p.mishear) {
        out.push_back(hard[i]);
        continue;
      }
      double x = U(rng_);
      if (x < p.del * difficulty) continue;
      if (x < (p.del + p.sub) * difficulty)
        out.push_back(confuse(ref[i]));
      else
        out.push_back(ref[i]);
      if (U(rng_) < p.ins * difficulty) out.push_back(sample_word());
    }
    if (!out.empty() && U(rng_) < 0.01) out[out.size() / 2] = "?";
    // surface form: capitalized, with punctuation that normalization strips
    std::string raw;
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::string w = out[i];
      if (i == 0) w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
      raw += (i ? (U(rng_) < 0.1 ? ", " : " ") : "") + w;
    }
    if (!raw.empty()) raw += '.';
    return raw;
  }

  /// Frames spell the reference with separators; peaked rows with noise.
  EmissionMatrix make_emissions(const TokenSeq &ref, bool noisy) {
    std::vector<std::string> vocab = {std::string(kBlankSymbol), std::string(kSeparatorSymbol), "'"};
    for (char c = 'a'; c <= 'z'; ++c) vocab.emplace_back(1, c);
    auto index_of = [&](char c) {
      if (c == '|') return 1;
      if (c == '\'') return 2;
      return 3 + (c - 'a');
    };
    std::vector<int> path;
    std::uniform_int_distribution<int> blanks(0, 2), repeat(1, 2);
    auto emit = [&](int k, int times) {
      for (int i = 0; i < times; ++i) path.push_back(k);
    };
    emit(0, 1 + blanks(rng_));
    for (std::size_t w = 0; w < ref.size(); ++w) {
      if (w) {
        emit(1, 1);
        emit(0, blanks(rng_));
      }
      char prev = 0;
      for (char c : ref[w]) {
        if (c == prev) emit(0, 1);
        emit(index_of(c), repeat(rng_));
        emit(0, blanks(rng_));
        prev = c;
      }
    }
    emit(0, 1 + blanks(rng_));

    std::uniform_real_distribution<double> U(0.0, 1.0);
    const std::size_t V = vocab.size();
    std::vector<double> logp;
    logp.reserve(path.size() * V);
    for (int k : path) {
      double peak = noisy ? 0.55 + 0.35 * U(rng_) : 0.75 + 0.2 * U(rng_);
      std::vector<double> row(V);
      double rest = 0.0;
      for (std::size_t j = 0; j < V; ++j) {
        row[j] = 0.05 + U(rng_);
        rest += row[j];
      }
      for (std::size_t j = 0; j < V; ++j) row[j] = row[j] / rest * (1.0 - peak);
      row[static_cast<std::size_t>(k)] += peak;
      double z = 0.0;
      for (double v : row) z += v;
      for (double v : row) logp.push_back(std::log(v / z));
    }
    return EmissionMatrix(vocab, std::move(logp));
  }

  SyntheticOptions opt_;
  std::mt19937_64 rng_;
  std::vector<double> weights_;
  std::vector<WorkerProfile> workers_;
  std::vector<Utterance> utterances_;
  std::vector<Response> responses_;
  std::map<std::string, EmissionMatrix> emissions_;
};

}  // namespace crowdqc::testing

#endif  // CROWDQC_TESTS_SYNTHETIC_HPP_
