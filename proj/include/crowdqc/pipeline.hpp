// crowdqc/pipeline.hpp
//
// Orchestration: train the word and utterance confidence models on the
// training subsets, calibrate the reject threshold, tune alpha, replay the
// accept/reject loop over stored responses and score the final selection.

#ifndef CROWDQC_PIPELINE_HPP_
#define CROWDQC_PIPELINE_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "crowdqc/confidence.hpp"
#include "crowdqc/corpus.hpp"
#include "crowdqc/ctc.hpp"
#include "crowdqc/error.hpp"
#include "crowdqc/fusion.hpp"
#include "crowdqc/gbm.hpp"
#include "crowdqc/metrics.hpp"
#include "crowdqc/wada_snr.hpp"

namespace crowdqc {

enum class Strategy { kEcm, kRandom, kLongest, kBestWorker, kOracle, kRover };

inline std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kEcm: return "ecm";
    case Strategy::kRandom: return "random";
    case Strategy::kLongest: return "longest";
    case Strategy::kBestWorker: return "best-worker";
    case Strategy::kOracle: return "oracle";
    case Strategy::kRover: return "rover";
  }
  throw InvariantError("bad Strategy value");
}

inline Strategy parse_strategy(std::string_view name) {
  for (Strategy s : {Strategy::kEcm, Strategy::kRandom, Strategy::kLongest, Strategy::kBestWorker,
                     Strategy::kOracle, Strategy::kRover})
    if (strategy_name(s) == name) return s;
  throw UsageError("unknown strategy '" + std::string(name) + "'");
}

struct PipelineConfig {
  double target_reject_rate = 0.054;
  std::optional<double> alpha;  // nullopt: tune on the training subsets
  Strategy strategy = Strategy::kEcm;
  std::uint64_t seed = 0;

  std::string responses;
  std::string references;
  std::string meta;
  std::string emissions_dir;
  std::string wav_dir;
  std::string lexicon;
  std::string out_dir = ".";
  ColumnMap columns;

  std::vector<Subset> train_subsets = {Subset::kTrainOther10h};
  std::vector<Subset> eval_subsets = {Subset::kTrainMixed10h, Subset::kDevClean,
                                      Subset::kTestClean, Subset::kDevOther, Subset::kTestOther};

  double gap_confidence = 0.5;
  double alpha_step = 0.05;
  double snr_fallback_db = 15.0;
  GbmOptions gbm;
  /// Accepted responses wanted per utterance; 0 consumes every response.
  std::size_t slots = 0;
  /// Fixed reject threshold; calibrated from target_reject_rate when unset.
  std::optional<double> threshold;
};

namespace detail {

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline double parse_double(const std::string &key, const std::string &v) {
  char *end = nullptr;
  double d = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || !std::isfinite(d))
    throw UsageError("config key '" + key + "': not a number: '" + v + "'");
  return d;
}

inline long long parse_int(const std::string &key, const std::string &v) {
  char *end = nullptr;
  long long d = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0') throw UsageError("config key '" + key + "': not an integer: '" + v + "'");
  return d;
}

}  // namespace detail

/// Applies one `key = value` setting.
inline void set_config_value(PipelineConfig &c, const std::string &key, const std::string &value) {
  using detail::parse_double;
  using detail::parse_int;
  if (key == "target_reject_rate") {
    c.target_reject_rate = parse_double(key, value);
    if (c.target_reject_rate < 0 || c.target_reject_rate > 1)
      throw UsageError("target_reject_rate must lie in [0, 1]");
  } else if (key == "alpha") {
    if (value == "tune") {
      c.alpha.reset();
    } else {
      c.alpha = parse_double(key, value);
      if (*c.alpha < 0 || *c.alpha > 1) throw UsageError("alpha must lie in [0, 1] or be 'tune'");
    }
  } else if (key == "strategy") {
    c.strategy = parse_strategy(value);
  } else if (key == "seed") {
    c.seed = static_cast<std::uint64_t>(parse_int(key, value));
  } else if (key == "responses") {
    c.responses = value;
  } else if (key == "references") {
    c.references = value;
  } else if (key == "meta") {
    c.meta = value;
  } else if (key == "emissions_dir") {
    c.emissions_dir = value;
  } else if (key == "wav_dir") {
    c.wav_dir = value;
  } else if (key == "lexicon") {
    c.lexicon = value;
  } else if (key == "out_dir") {
    c.out_dir = value;
  } else if (key == "train_subsets") {
    c.train_subsets = parse_subset_list(value);
  } else if (key == "eval_subsets") {
    c.eval_subsets = parse_subset_list(value);
  } else if (key == "gap_confidence") {
    c.gap_confidence = parse_double(key, value);
    if (c.gap_confidence < 0 || c.gap_confidence > 1)
      throw UsageError("gap_confidence must lie in [0, 1]");
  } else if (key == "alpha_step") {
    c.alpha_step = parse_double(key, value);
  } else if (key == "snr_fallback_db") {
    c.snr_fallback_db = parse_double(key, value);
  } else if (key == "gbm_rounds") {
    c.gbm.rounds = static_cast<int>(parse_int(key, value));
  } else if (key == "gbm_max_depth") {
    c.gbm.max_depth = static_cast<int>(parse_int(key, value));
  } else if (key == "gbm_learning_rate") {
    c.gbm.learning_rate = parse_double(key, value);
  } else if (key == "gbm_min_samples_leaf") {
    c.gbm.min_samples_leaf = static_cast<int>(parse_int(key, value));
  } else if (key == "slots") {
    long long s = parse_int(key, value);
    if (s < 0) throw UsageError("slots must be >= 0");
    c.slots = static_cast<std::size_t>(s);
  } else if (key == "threshold") {
    c.threshold = parse_double(key, value);
  } else if (key.rfind("column.", 0) == 0) {
    std::string field = key.substr(7);
    ColumnMap &m = c.columns;
    if (field == "utterance_id") m.utterance_id = value;
    else if (field == "worker_id") m.worker_id = value;
    else if (field == "submit_order") m.submit_order = value;
    else if (field == "spend_time") m.spend_time = value;
    else if (field == "raw_text") m.raw_text = value;
    else if (field == "ref_utterance_id") m.ref_utterance_id = value;
    else if (field == "subset") m.subset = value;
    else if (field == "duration") m.duration = value;
    else if (field == "reference_text") m.reference_text = value;
    else throw UsageError("unknown column mapping '" + field + "'");
  } else {
    throw UsageError("unknown config key '" + key + "'");
  }
}

/// Flat `key = value` lines; '#' starts a comment. Relative paths are
/// resolved against `base_dir` when it is non-empty.
inline PipelineConfig parse_config(std::istream &in, const std::string &name,
                                   const std::string &base_dir = {}) {
  PipelineConfig c;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::string t = detail::trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw UsageError(name + ":" + std::to_string(line_no) + ": expected key = value");
    std::string key = detail::trim(t.substr(0, eq));
    std::string value = detail::trim(t.substr(eq + 1));
    static const std::set<std::string> path_keys = {"responses", "references",    "meta",
                                                    "lexicon",   "emissions_dir", "wav_dir",
                                                    "out_dir"};
    if (!base_dir.empty() && path_keys.count(key) && !value.empty() &&
        std::filesystem::path(value).is_relative())
      value = (std::filesystem::path(base_dir) / value).string();
    try {
      set_config_value(c, key, value);
    } catch (const UsageError &e) {
      throw UsageError(name + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return c;
}

inline PipelineConfig load_config(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw UsageError(path + ": cannot open config file");
  return parse_config(in, path, std::filesystem::path(path).parent_path().string());
}

inline Corpus load_corpus(const PipelineConfig &c) {
  if (c.responses.empty() || c.references.empty())
    throw UsageError("config needs both 'responses' and 'references' paths");
  return load_corpus(c.responses, c.references,
                     c.meta.empty() ? std::nullopt : std::optional<std::string>(c.meta), c.columns);
}

// ---------------------------------------------------------------------------
// Acoustic evidence

struct UtteranceEvidence {
  std::optional<EmissionMatrix> emissions;
  std::optional<double> snr_db;
};

/// Looks up `<id>.emit` and `<id>.wav`; missing directories or files leave
/// the corresponding evidence empty. Warnings go to `log` once per kind.
class EvidenceSource {
 public:
  EvidenceSource(const PipelineConfig &config, std::ostream &log) : config_(config), log_(log) {
    if (config.emissions_dir.empty()) {
      log_ << "warning: no emissions directory; alignment features use the sentinel value\n";
    } else if (!std::filesystem::is_directory(config.emissions_dir)) {
      log_ << "warning: emissions directory '" << config.emissions_dir
           << "' not found; alignment features use the sentinel value\n";
    } else {
      use_emissions_ = true;
    }
    use_wav_ = !config.wav_dir.empty() && std::filesystem::is_directory(config.wav_dir);
    if (!config.wav_dir.empty() && !use_wav_)
      log_ << "warning: wav directory '" << config.wav_dir << "' not found; SNR falls back to "
           << config.snr_fallback_db << " dB\n";
  }

  UtteranceEvidence load(const Utterance &u) const {
    UtteranceEvidence ev;
    if (use_emissions_) {
      auto path = std::filesystem::path(config_.emissions_dir) /
                  (u.emission_ref.value_or(u.id) + ".emit");
      if (std::filesystem::exists(path)) ev.emissions = load_emissions(path.string());
    }
    if (use_wav_) {
      auto path = std::filesystem::path(config_.wav_dir) / (u.id + ".wav");
      if (std::filesystem::exists(path)) {
        Waveform w = read_wav(path.string());
        try {
          ev.snr_db = wada_snr(w.samples, w.sample_rate);
        } catch (const DataError &) {
          // too short or silent: keep the fallback
        }
      }
    }
    return ev;
  }

 private:
  const PipelineConfig &config_;
  std::ostream &log_;
  bool use_emissions_ = false;
  bool use_wav_ = false;
};

// ---------------------------------------------------------------------------
// Per-utterance analysis

struct ResponseAnalysis {
  std::vector<WordFeatures> word_features;
  std::vector<double> word_confidence;
  PeerAgreement agreement;
};

/// Word features of every response of one utterance, with all the other
/// responses as peers. `accept_rate(worker_id)` supplies the worker feature.
template <typename AcceptRate>
std::vector<ResponseAnalysis> analyze_utterance(std::span<const Response> responses,
                                                const UtteranceEvidence &evidence,
                                                const Lexicon &lexicon, AcceptRate &&accept_rate) {
  std::vector<TokenSeq> texts;
  texts.reserve(responses.size());
  for (const auto &r : responses) texts.push_back(r.text);
  std::vector<ResponseAnalysis> out(responses.size());
  if (responses.empty()) return out;
  FusionConfig given;
  given.alignment_order = AlignmentOrder::kGiven;
  WordLattice lattice = build_lattice(texts, given);
  auto agreement = agreement_features(texts);
  for (std::size_t i = 0; i < responses.size(); ++i) {
    std::optional<std::vector<WordAlignmentScore>> scores;
    if (evidence.emissions) {
      try {
        scores = word_alignment_scores(*evidence.emissions, texts[i]);
      } catch (const DataError &) {
        scores.reset();  // unknown symbols or too long for the audio
      }
    }
    std::optional<std::span<const WordAlignmentScore>> view;
    if (scores) view = std::span<const WordAlignmentScore>(*scores);
    out[i].word_features =
        extract_word_features(lattice, i, view, accept_rate(responses[i].worker_id), lexicon);
    out[i].agreement = agreement[i];
  }
  return out;
}

inline std::vector<double> utterance_row(const Utterance &u, const Response &r,
                                         const ResponseAnalysis &a,
                                         const UtteranceEvidence &evidence, double accept_rate,
                                         double snr_fallback_db) {
  UtteranceInputs in;
  in.audio_duration = u.audio_duration;
  in.transcript_length = r.text.size();
  in.snr_db = evidence.snr_db;
  in.snr_fallback_db = snr_fallback_db;
  in.spend_time = r.spend_time;
  in.worker_accept_rate = accept_rate;
  in.agreement = a.agreement;
  in.word_confidences = a.word_confidence;
  return utterance_features(in);
}

// ---------------------------------------------------------------------------
// Word confidence files: utterance_id, worker_id, word_index, confidence

using WordConfidenceTable = std::map<std::pair<std::string, std::string>, std::vector<double>>;

inline WordConfidenceTable read_word_confidences(std::istream &in, const std::string &name) {
  detail::TsvTable t(in, name);
  std::size_t c_utt = t.column("utterance_id"), c_worker = t.column("worker_id");
  std::size_t c_index = t.column("word_index"), c_conf = t.column("confidence");
  WordConfidenceTable table;
  while (t.next()) {
    auto key = std::make_pair(std::string(t.field(c_utt, "utterance_id")),
                              std::string(t.field(c_worker, "worker_id")));
    auto index = detail::parse_number<std::size_t>(t, t.field(c_index, "word_index"), "word_index");
    double c = detail::parse_number<double>(t, t.field(c_conf, "confidence"), "confidence");
    if (!(c >= 0.0 && c <= 1.0))
      throw data_error_at(name, t.line_no(), "confidence", "confidence outside [0, 1]");
    auto &v = table[key];
    if (v.size() <= index) v.resize(index + 1, std::numeric_limits<double>::quiet_NaN());
    v[index] = c;
  }
  return table;
}

inline void write_word_confidences(std::ostream &out, const WordConfidenceTable &table) {
  std::ostringstream s;
  s.precision(17);
  s << "utterance_id\tworker_id\tword_index\tconfidence\n";
  for (const auto &[key, conf] : table)
    for (std::size_t i = 0; i < conf.size(); ++i)
      s << key.first << '\t' << key.second << '\t' << i << '\t' << conf[i] << '\n';
  out << s.str();
}

/// Per-response confidences for one utterance. Rows are keyed by
/// (utterance, worker) and apply to that worker's first response; any other
/// response, or a missing word, is an error unless `fallback` is given.
inline std::vector<std::vector<double>> confidences_for(std::span<const Response> responses,
                                                        const WordConfidenceTable &table,
                                                        const std::optional<double> &fallback) {
  std::vector<std::vector<double>> out;
  std::set<std::string> seen;
  for (const auto &r : responses) {
    bool first = seen.insert(r.worker_id).second;
    const std::vector<double> *row = nullptr;
    if (first) {
      auto it = table.find({r.utterance_id, r.worker_id});
      if (it != table.end()) row = &it->second;
    }
    std::vector<double> c(r.text.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (row && i < row->size() && !std::isnan((*row)[i])) {
        c[i] = (*row)[i];
      } else if (fallback) {
        c[i] = *fallback;
      } else {
        throw DataError("no confidence for word " + std::to_string(i) + " of worker '" +
                        r.worker_id + "' on utterance '" + r.utterance_id + "'");
      }
    }
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct CemModels {
  Lexicon lexicon;
  LogisticModel word;
  GbmModel utterance;
};

struct TrainingData {
  std::vector<WordExample> words;
  std::vector<std::vector<double>> utterance_rows;
  std::vector<double> utterance_targets;
  std::vector<VotingExample> voting;
};

inline std::vector<std::size_t> all_word_features() {
  std::vector<std::size_t> f(kNumWordFeatures);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = i;
  return f;
}

/// Lexicon from the configured file, else estimated from the references of
/// `corpus`.
inline Lexicon resolve_lexicon(const PipelineConfig &config, const Corpus &corpus) {
  if (!config.lexicon.empty()) return load_lexicon(config.lexicon);
  std::vector<TokenSeq> refs;
  for (const auto &u : corpus.utterances())
    if (u.reference) refs.push_back(*u.reference);
  return build_lexicon(refs);
}

/// Trains both confidence models on the utterances of `train` that have a
/// reference. With `data` non-null the collected examples are kept, with
/// voting examples scored by the trained word model.
inline CemModels train_cem(const Corpus &train, const PipelineConfig &config,
                           const EvidenceSource &evidence, TrainingData *data = nullptr) {
  TrainingData local;
  TrainingData &d = data ? *data : local;
  CemModels models;
  models.lexicon = resolve_lexicon(config, train);

  struct Pending {
    std::size_t utterance;
    std::vector<ResponseAnalysis> analysis;
    UtteranceEvidence evidence;
  };
  std::vector<Pending> pending;
  for (std::size_t u = 0; u < train.utterances().size(); ++u) {
    const auto &utt = train.utterances()[u];
    auto rs = train.responses_for(u);
    if (!utt.reference || rs.empty()) continue;
    Pending p{u, {}, evidence.load(utt)};
    p.analysis = analyze_utterance(rs, p.evidence, models.lexicon,
                                   [](const std::string &) { return 1.0; });
    for (std::size_t i = 0; i < rs.size(); ++i) {
      auto labels = word_labels(rs[i].text, *utt.reference);
      for (std::size_t w = 0; w < labels.size(); ++w) {
        const auto &f = p.analysis[i].word_features[w];
        if (f.unknown_token) continue;
        d.words.push_back({std::vector<double>(f.values.begin(), f.values.end()), labels[w]});
      }
    }
    pending.push_back(std::move(p));
  }
  if (pending.empty()) throw DataError("training subsets contain no referenced utterances");
  models.word = train_word_cem(d.words, all_word_features());

  for (auto &p : pending) {
    const auto &utt = train.utterances()[p.utterance];
    auto rs = train.responses_for(p.utterance);
    VotingExample vex;
    vex.reference = *utt.reference;
    for (std::size_t i = 0; i < rs.size(); ++i) {
      p.analysis[i].word_confidence = score_words(models.word, p.analysis[i].word_features);
      d.utterance_rows.push_back(
          utterance_row(utt, rs[i], p.analysis[i], p.evidence, 1.0, config.snr_fallback_db));
      d.utterance_targets.push_back(static_cast<double>(edit_distance(rs[i].text, *utt.reference)));
      vex.transcripts.push_back(rs[i].text);
      vex.confidences.push_back(p.analysis[i].word_confidence);
    }
    if (rs.size() >= 2) d.voting.push_back(std::move(vex));
  }
  models.utterance = train_gbm(d.utterance_rows, d.utterance_targets, config.gbm,
                               utterance_feature_names());
  return models;
}

// ---------------------------------------------------------------------------
// Simulation

struct SubsetReport {
  std::string name;
  long utterances = 0;
  long responses = 0;
  long workers = 0;
  double speech_seconds = 0.0;
  long decided = 0;
  long rejected = 0;
  ErrorBreakdown raw;
  ErrorBreakdown accepted;
  ErrorBreakdown rejected_pool;
  ErrorBreakdown post_cem;
  ErrorBreakdown final;

  double reject_rate() const {
    return decided ? static_cast<double>(rejected) / static_cast<double>(decided) : 0.0;
  }
  bool operator==(const SubsetReport &) const = default;
};

struct SimulationReport {
  std::string strategy;
  double threshold = 0.0;
  double alpha = 1.0;
  std::vector<SubsetReport> subsets;
  SubsetReport total;
  std::map<std::string, TokenSeq> hypotheses;
};

struct SimulationModels {
  const CemModels *cem = nullptr;
  double threshold = 0.0;
  double alpha = 1.0;
  const WorkerRanking *ranking = nullptr;
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view id) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : id) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h ^ (seed + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2));
}

/// Replays the accept/reject loop over every utterance of `corpus` in id
/// order, then applies the final selection strategy to each accepted pool.
inline SimulationReport simulate(const Corpus &corpus, const PipelineConfig &config,
                                 const SimulationModels &models, const EvidenceSource &evidence) {
  if (!models.cem) throw InvariantError("simulation needs trained confidence models");
  if (config.strategy == Strategy::kOracle)
    for (const auto &u : corpus.utterances())
      if (!u.reference)
        throw DataError("strategy 'oracle' needs a reference for utterance '" + u.id + "'");
  if (config.strategy == Strategy::kBestWorker && !models.ranking)
    throw InvariantError("best-worker strategy needs a worker ranking");

  const CemModels &cem = *models.cem;
  SimulationReport report;
  report.strategy = std::string(strategy_name(config.strategy));
  report.threshold = models.threshold;
  report.alpha = config.strategy == Strategy::kRover ? 1.0 : models.alpha;

  FusionConfig fusion;
  fusion.alpha = report.alpha;
  fusion.gap_confidence = config.gap_confidence;

  std::map<std::string, std::pair<int, int>> running;  // worker -> (accepted, decided)
  auto accept_rate = [&](const std::string &w) {
    auto it = running.find(w);
    if (it == running.end() || it->second.second == 0) return 1.0;
    return static_cast<double>(it->second.first) / it->second.second;
  };

  std::map<Subset, SubsetReport> per;
  std::map<Subset, std::set<std::string>> workers;
  std::set<std::string> all_workers;

  for (std::size_t u = 0; u < corpus.utterances().size(); ++u) {
    const auto &utt = corpus.utterances()[u];
    auto rs = corpus.responses_for(u);
    SubsetReport &rep = per[utt.subset];
    rep.utterances += 1;
    rep.responses += static_cast<long>(rs.size());
    rep.speech_seconds += utt.audio_duration.value_or(0.0);
    for (const auto &r : rs) {
      workers[utt.subset].insert(r.worker_id);
      all_workers.insert(r.worker_id);
    }
    if (rs.empty()) continue;

    UtteranceEvidence ev = evidence.load(utt);
    auto analysis = analyze_utterance(rs, ev, cem.lexicon, accept_rate);
    std::vector<double> predicted(rs.size(), 0.0);
    for (std::size_t i = 0; i < rs.size(); ++i)
      analysis[i].word_confidence = score_words(cem.word, analysis[i].word_features);

    std::vector<std::size_t> pool, rejected;
    for (std::size_t i = 0; i < rs.size(); ++i) {
      if (config.slots > 0 && pool.size() >= config.slots) break;
      auto row = utterance_row(utt, rs[i], analysis[i], ev, accept_rate(rs[i].worker_id),
                               config.snr_fallback_db);
      predicted[i] = predict_expected_errors(cem.utterance, row);
      Decision d = decide(predicted[i], models.threshold);
      auto &w = running[rs[i].worker_id];
      ++w.second;
      ++rep.decided;
      if (d == Decision::kAccept) {
        ++w.first;
        pool.push_back(i);
      } else {
        ++rep.rejected;
        rejected.push_back(i);
      }
    }
    const std::vector<std::size_t> accepted = pool;
    if (pool.empty()) {
      std::size_t keep = rejected.front();
      for (std::size_t i : rejected)
        if (predicted[i] < predicted[keep]) keep = i;
      pool.push_back(keep);
    }

    std::vector<Response> pool_responses;
    for (std::size_t i : pool) pool_responses.push_back(rs[i]);
    TokenSeq hyp;
    switch (config.strategy) {
      case Strategy::kEcm:
      case Strategy::kRover: {
        std::vector<TokenSeq> texts;
        std::vector<std::vector<double>> conf;
        for (std::size_t i : pool) {
          texts.push_back(rs[i].text);
          conf.push_back(analysis[i].word_confidence);
        }
        hyp = fuse(texts, conf, fusion);
        break;
      }
      case Strategy::kRandom:
        hyp = pool_responses[select_random(pool_responses, mix_seed(config.seed, utt.id))].text;
        break;
      case Strategy::kLongest:
        hyp = pool_responses[select_longest(pool_responses)].text;
        break;
      case Strategy::kBestWorker:
        hyp = pool_responses[select_best_worker(pool_responses, *models.ranking)].text;
        break;
      case Strategy::kOracle:
        hyp = pool_responses[select_oracle(pool_responses, utt.reference)].text;
        break;
    }

    if (utt.reference) {
      const TokenSeq &ref = *utt.reference;
      for (const auto &r : rs) rep.raw += count_errors(r.text, ref);
      for (std::size_t i : pool) rep.post_cem += count_errors(rs[i].text, ref);
      for (std::size_t i : rejected) rep.rejected_pool += count_errors(rs[i].text, ref);
      for (std::size_t i : accepted) rep.accepted += count_errors(rs[i].text, ref);
      rep.final += count_errors(hyp, ref);
    }
    report.hypotheses[utt.id] = std::move(hyp);
  }

  report.total.name = "all";
  for (auto &[subset, rep] : per) {
    rep.name = std::string(subset_name(subset));
    rep.workers = static_cast<long>(workers[subset].size());
    SubsetReport &t = report.total;
    t.utterances += rep.utterances;
    t.responses += rep.responses;
    t.speech_seconds += rep.speech_seconds;
    t.decided += rep.decided;
    t.rejected += rep.rejected;
    t.raw += rep.raw;
    t.accepted += rep.accepted;
    t.rejected_pool += rep.rejected_pool;
    t.post_cem += rep.post_cem;
    t.final += rep.final;
    report.subsets.push_back(rep);
  }
  report.total.workers = static_cast<long>(all_workers.size());
  return report;
}

struct ResponseScore {
  std::size_t response;  // index into corpus.responses()
  double predicted_errors = 0.0;
  std::vector<double> word_confidence;
};

/// Scores every response of `corpus` independently, with the optimistic
/// worker prior (no decisions have been made yet).
inline std::vector<ResponseScore> score_corpus(const Corpus &corpus, const CemModels &cem,
                                               const PipelineConfig &config,
                                               const EvidenceSource &evidence) {
  std::vector<ResponseScore> out;
  for (std::size_t u = 0; u < corpus.utterances().size(); ++u) {
    const auto &utt = corpus.utterances()[u];
    auto rs = corpus.responses_for(u);
    if (rs.empty()) continue;
    UtteranceEvidence ev = evidence.load(utt);
    auto analysis =
        analyze_utterance(rs, ev, cem.lexicon, [](const std::string &) { return 1.0; });
    for (std::size_t i = 0; i < rs.size(); ++i) {
      analysis[i].word_confidence = score_words(cem.word, analysis[i].word_features);
      ResponseScore sc;
      sc.response = corpus.response_index(rs[i]);
      sc.predicted_errors = predict_expected_errors(
          cem.utterance, utterance_row(utt, rs[i], analysis[i], ev, 1.0, config.snr_fallback_db));
      sc.word_confidence = std::move(analysis[i].word_confidence);
      out.push_back(std::move(sc));
    }
  }
  return out;
}

/// Label-free threshold calibration on the predictions over `corpus`.
inline double calibrate_on(const Corpus &corpus, const CemModels &cem, const PipelineConfig &config,
                           const EvidenceSource &evidence) {
  std::vector<double> preds;
  for (const auto &sc : score_corpus(corpus, cem, config, evidence))
    preds.push_back(sc.predicted_errors);
  return calibrate_threshold(preds, config.target_reject_rate);
}

// ---------------------------------------------------------------------------
// Reports

namespace detail {

inline std::string pct(double rate) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * rate);
  return buf;
}

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace detail

inline const std::vector<std::string> &report_tsv_columns() {
  static const std::vector<std::string> cols = [] {
    std::vector<std::string> c = {"subset",  "utterances", "responses", "workers",
                                  "speech_seconds", "decided", "rejected"};
    for (const char *pool : {"raw", "accepted", "rejected_pool", "post_cem", "final"})
      for (const char *field : {"segments", "ref_words", "hyp_words", "del", "ins", "sub"})
        c.push_back(std::string(pool) + "_" + field);
    return c;
  }();
  return cols;
}

/// One row per subset plus "all". Counts only, so parsing back is exact.
inline void write_report_tsv(std::ostream &out, const SimulationReport &report) {
  const auto &cols = report_tsv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "\t" : "") << cols[i];
  out << '\n';
  auto row = [&](const SubsetReport &s) {
    out << s.name << '\t' << s.utterances << '\t' << s.responses << '\t' << s.workers << '\t'
        << detail::fixed(s.speech_seconds, 3) << '\t' << s.decided << '\t' << s.rejected;
    for (const ErrorBreakdown *b : {&s.raw, &s.accepted, &s.rejected_pool, &s.post_cem, &s.final})
      out << '\t' << b->segments << '\t' << b->ref_words << '\t' << b->hyp_words << '\t'
          << b->deletions << '\t' << b->insertions << '\t' << b->substitutions;
    out << '\n';
  };
  if (report.subsets.empty()) return;
  for (const auto &s : report.subsets) row(s);
  row(report.total);
}

inline SimulationReport parse_report_tsv(std::istream &in, const std::string &name) {
  detail::TsvTable t(in, name);
  const auto &cols = report_tsv_columns();
  std::vector<std::size_t> pos;
  for (const auto &c : cols) pos.push_back(t.column(c));
  SimulationReport report;
  while (t.next()) {
    SubsetReport s;
    std::size_t k = 0;
    auto next_long = [&] {
      const auto &c = cols[k];
      return detail::parse_number<long>(t, t.field(pos[k++], c), c);
    };
    s.name = std::string(t.field(pos[k++], cols[0]));
    s.utterances = next_long();
    s.responses = next_long();
    s.workers = next_long();
    s.speech_seconds = detail::parse_number<double>(t, t.field(pos[k], cols[k]), cols[k]);
    ++k;
    s.decided = next_long();
    s.rejected = next_long();
    for (ErrorBreakdown *b : {&s.raw, &s.accepted, &s.rejected_pool, &s.post_cem, &s.final}) {
      b->segments = next_long();
      b->ref_words = next_long();
      b->hyp_words = next_long();
      b->deletions = next_long();
      b->insertions = next_long();
      b->substitutions = next_long();
    }
    if (s.name == "all")
      report.total = s;
    else
      report.subsets.push_back(s);
  }
  return report;
}

/// Markdown tables: corpus statistics with raw TWER, quality after each
/// stage, and error types of the accepted and rejected pools.
inline void write_report_markdown(std::ostream &out, const SimulationReport &report) {
  std::vector<const SubsetReport *> rows;
  for (const auto &s : report.subsets) rows.push_back(&s);
  if (!report.subsets.empty()) rows.push_back(&report.total);

  out << "| Subset | # Utterances | speech hours | # Workers | # Responses | TWER (%) |\n";
  out << "|---|---|---|---|---|---|\n";
  for (const auto *s : rows)
    out << "| " << s->name << " | " << s->utterances << " | "
        << detail::fixed(s->speech_seconds / 3600.0, 1) << " | " << s->workers << " | "
        << s->responses << " | " << detail::pct(s->raw.twer()) << " |\n";

  out << "\n| Subset | Raw TWER (%) | Reject rate (%) | CEM TWER (%) | CEM + " << report.strategy
      << " TWER (%) |\n";
  out << "|---|---|---|---|---|\n";
  for (const auto *s : rows)
    out << "| " << s->name << " | " << detail::pct(s->raw.twer()) << " | "
        << detail::pct(s->reject_rate()) << " | " << detail::pct(s->post_cem.twer()) << " | "
        << detail::pct(s->final.twer()) << " |\n";

  for (int pass = 0; pass < 2; ++pass) {
    out << "\n| " << (pass == 0 ? "Accepted" : "Rejected")
        << " | Length (# word) | Deletion (%) | Insertion (%) | Substitution (%) | TWER (%) |\n";
    out << "|---|---|---|---|---|---|\n";
    for (const auto *s : rows) {
      const ErrorBreakdown &b = pass == 0 ? s->accepted : s->rejected_pool;
      out << "| " << s->name << " | " << detail::fixed(b.mean_length(), 0) << " | "
          << detail::pct(b.del_rate()) << " | " << detail::pct(b.ins_rate()) << " | "
          << detail::pct(b.sub_rate()) << " | " << detail::pct(b.twer()) << " |\n";
    }
  }
}

enum class ReportFormat { kTsv, kMarkdown };

inline void run_report(std::ostream &out, const SimulationReport &report, ReportFormat format) {
  if (format == ReportFormat::kTsv)
    write_report_tsv(out, report);
  else
    write_report_markdown(out, report);
}

inline void write_hypotheses(std::ostream &out, const std::map<std::string, TokenSeq> &hyps) {
  out << "utterance_id\thypothesis\n";
  for (const auto &[id, h] : hyps) out << id << '\t' << join_tokens(h) << '\n';
}

// ---------------------------------------------------------------------------
// End to end

struct TrainedPipeline {
  CemModels cem;
  WorkerRanking ranking;
  double threshold = 0.0;
  double alpha = 1.0;
  std::vector<std::pair<double, ErrorBreakdown>> alpha_grid;
};

/// Training, calibration and alpha selection for `config`. The threshold is
/// calibrated on predictions over `eval` (no labels used).
inline TrainedPipeline train_pipeline(const Corpus &corpus, const PipelineConfig &config,
                                      const EvidenceSource &evidence) {
  TrainedPipeline tp;
  Corpus train = split(corpus, config.train_subsets);
  Corpus eval = split(corpus, config.eval_subsets);
  TrainingData data;
  try {
    tp.cem = train_cem(train, config, evidence, &data);
  } catch (const DataError &e) {
    throw DataError(std::string("stage cem-train: ") + e.what());
  }
  tp.ranking = rank_workers(train);
  tp.threshold = config.threshold ? *config.threshold
                                  : calibrate_on(eval.empty() ? train : eval, tp.cem, config, evidence);
  if (config.strategy == Strategy::kRover) {
    tp.alpha = 1.0;
  } else if (config.alpha) {
    tp.alpha = *config.alpha;
  } else {
    FusionConfig fc;
    fc.gap_confidence = config.gap_confidence;
    auto search = tune_alpha(data.voting, fc, config.alpha_step);
    tp.alpha = search.alpha;
    tp.alpha_grid = std::move(search.grid);
  }
  return tp;
}

inline void save_models(const std::filesystem::path &dir, const TrainedPipeline &tp) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "word_cem.txt");
    save_logistic(out, tp.cem.word);
  }
  {
    std::ofstream out(dir / "utterance_cem.txt");
    save_gbm(out, tp.cem.utterance);
  }
  {
    std::ofstream out(dir / "lexicon.tsv");
    save_lexicon(out, tp.cem.lexicon);
  }
  std::ofstream out(dir / "params.txt");
  out.precision(17);
  out << "threshold " << tp.threshold << "\nalpha " << tp.alpha << '\n';
}

/// Reads what save_models wrote. The worker ranking is not persisted.
inline TrainedPipeline load_models(const std::filesystem::path &dir) {
  auto open = [&](const char *name) {
    std::ifstream in(dir / name);
    if (!in) throw DataError((dir / name).string() + ": cannot open file");
    return in;
  };
  TrainedPipeline tp;
  {
    auto in = open("word_cem.txt");
    tp.cem.word = load_logistic(in);
  }
  {
    auto in = open("utterance_cem.txt");
    tp.cem.utterance = load_gbm(in);
  }
  open("lexicon.tsv");
  tp.cem.lexicon = load_lexicon((dir / "lexicon.tsv").string());
  auto in = open("params.txt");
  std::string key;
  bool have_threshold = false, have_alpha = false;
  while (in >> key) {
    if (key == "threshold") have_threshold = static_cast<bool>(in >> tp.threshold);
    else if (key == "alpha") have_alpha = static_cast<bool>(in >> tp.alpha);
    else throw DataError((dir / "params.txt").string() + ": unknown key '" + key + "'");
  }
  if (!have_threshold || !have_alpha)
    throw DataError((dir / "params.txt").string() + ": needs threshold and alpha");
  return tp;
}

struct EndToEndResult {
  SimulationReport report;
  TrainedPipeline trained;
};

/// Train, calibrate, tune, simulate on the evaluation subsets and write
/// report.tsv, report.md, hypotheses.tsv and the models to config.out_dir.
inline EndToEndResult end_to_end(const PipelineConfig &config, std::ostream &log = std::cerr) {
  Corpus corpus;
  try {
    corpus = load_corpus(config);
  } catch (const DataError &e) {
    throw DataError(std::string("stage load: ") + e.what());
  }
  EvidenceSource evidence(config, log);
  EndToEndResult result;
  result.trained = train_pipeline(corpus, config, evidence);
  Corpus eval = split(corpus, config.eval_subsets);
  SimulationModels sm{&result.trained.cem, result.trained.threshold, result.trained.alpha,
                      &result.trained.ranking};
  try {
    result.report = simulate(eval, config, sm, evidence);
  } catch (const DataError &e) {
    throw DataError(std::string("stage simulate: ") + e.what());
  }

  std::filesystem::path dir(config.out_dir);
  std::filesystem::create_directories(dir);
  save_models(dir, result.trained);
  {
    std::ofstream out(dir / "report.tsv");
    run_report(out, result.report, ReportFormat::kTsv);
  }
  {
    std::ofstream out(dir / "report.md");
    run_report(out, result.report, ReportFormat::kMarkdown);
  }
  std::ofstream out(dir / "hypotheses.tsv");
  write_hypotheses(out, result.report.hypotheses);
  return result;
}

}  // namespace crowdqc

#endif  // CROWDQC_PIPELINE_HPP_
