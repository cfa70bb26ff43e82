// crowdqc/confidence.hpp
//
// Confidence estimation. Word level: a logistic scorer over alignment,
// agreement, lexical and worker features. Utterance level: a boosted-tree
// regressor predicting the number of word errors, thresholded to accept or
// reject a response.

#ifndef CROWDQC_CONFIDENCE_HPP_
#define CROWDQC_CONFIDENCE_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "crowdqc/corpus.hpp"
#include "crowdqc/ctc.hpp"
#include "crowdqc/error.hpp"
#include "crowdqc/fusion.hpp"
#include "crowdqc/gbm.hpp"

namespace crowdqc {

// ---------------------------------------------------------------------------
// Lexicon

/// word -> log10 relative frequency. Unknown words get floor().
class Lexicon {
 public:
  Lexicon() = default;
  explicit Lexicon(std::unordered_map<std::string, double> logfreq)
      : logfreq_(std::move(logfreq)) {
    floor_ = 0.0;
    if (!logfreq_.empty()) {
      floor_ = std::numeric_limits<double>::infinity();
      for (const auto &[w, f] : logfreq_) floor_ = std::min(floor_, f);
      floor_ -= 1.0;
    }
  }

  std::optional<double> find(const std::string &word) const {
    auto it = logfreq_.find(word);
    if (it == logfreq_.end()) return std::nullopt;
    return it->second;
  }
  double floor() const { return floor_; }
  std::size_t size() const { return logfreq_.size(); }
  const std::unordered_map<std::string, double> &table() const { return logfreq_; }

 private:
  std::unordered_map<std::string, double> logfreq_;
  double floor_ = 0.0;
};

/// `word<TAB>log10_frequency` per line.
inline Lexicon load_lexicon(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open file");
  std::unordered_map<std::string, double> table;
  std::string line;
  std::size_t line_no = 0;
  while (detail::read_line(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw DataError(path + ":" + std::to_string(line_no) + ": expected word<TAB>log10_frequency");
    char *end = nullptr;
    std::string num = line.substr(tab + 1);
    double v = std::strtod(num.c_str(), &end);
    if (end == num.c_str() || *end != '\0' || !std::isfinite(v))
      throw DataError(path + ":" + std::to_string(line_no) + ": bad frequency '" + num + "'");
    table[line.substr(0, tab)] = v;
  }
  return Lexicon(std::move(table));
}

/// Sorted by word so that output is stable.
inline void save_lexicon(std::ostream &out, const Lexicon &lex) {
  std::vector<std::pair<std::string, double>> rows(lex.table().begin(), lex.table().end());
  std::sort(rows.begin(), rows.end());
  std::ostringstream s;
  s.precision(17);
  for (const auto &[w, f] : rows) s << w << '\t' << f << '\n';
  out << s.str();
}

/// Lexicon estimated from token counts of the given sequences.
inline Lexicon build_lexicon(std::span<const TokenSeq> texts) {
  std::unordered_map<std::string, double> counts;
  double total = 0.0;
  for (const auto &t : texts)
    for (const auto &w : t) {
      counts[w] += 1.0;
      total += 1.0;
    }
  for (auto &[w, c] : counts) c = std::log10(c / total);
  return Lexicon(std::move(counts));
}

// ---------------------------------------------------------------------------
// Word features

enum WordFeature : std::size_t {
  kAlignmentScore,
  kHasAlignment,
  kAgreement,
  kUnigramLogFreq,
  kWordLength,
  kOov,
  kWorkerAcceptRate,
  kNumWordFeatures,
};

inline constexpr std::array<std::string_view, kNumWordFeatures> kWordFeatureNames = {
    "alignment_score", "has_alignment", "agreement",         "unigram_logfreq",
    "word_length",     "oov",           "worker_accept_rate",
};

/// Floor applied to log alignment scores so features stay finite.
inline constexpr double kAlignmentScoreFloor = -200.0;

struct WordFeatures {
  std::array<double, kNumWordFeatures> values{};
  bool unknown_token = false;
};

/// One row per word of transcript `source` in `lattice`. `scores`, when
/// present, holds one alignment score per word; otherwise the alignment
/// feature is the 0.0 sentinel with has_alignment = 0.
inline std::vector<WordFeatures> extract_word_features(
    const WordLattice &lattice, std::size_t source,
    std::optional<std::span<const WordAlignmentScore>> scores, double worker_accept_rate,
    const Lexicon &lexicon) {
  const TokenSeq &words = lattice.transcripts()[source];
  if (scores && scores->size() != words.size())
    throw InvariantError("one alignment score per word required");
  const std::size_t slot = lattice.slot_of(source);
  const auto cols = lattice.word_columns(source);
  const std::size_t peers = lattice.num_sources() - 1;

  std::vector<WordFeatures> out(words.size());
  for (std::size_t i = 0; i < words.size(); ++i) {
    auto &f = out[i];
    const std::string &w = words[i];
    f.unknown_token = (w == kUnknownToken);
    if (scores) {
      f.values[kAlignmentScore] = std::max((*scores)[i].log_s, kAlignmentScoreFloor);
      f.values[kHasAlignment] = 1.0;
    }
    std::size_t agree = 0;
    for (std::size_t k = 0; k < lattice.num_sources(); ++k) {
      if (k == slot) continue;
      const std::string *pw = lattice.word(cols[i], k);
      if (pw && *pw == w) ++agree;
    }
    f.values[kAgreement] = peers ? static_cast<double>(agree) / static_cast<double>(peers) : 0.0;
    auto lf = lexicon.find(w);
    f.values[kUnigramLogFreq] = lf ? *lf : lexicon.floor();
    f.values[kOov] = lf ? 0.0 : 1.0;
    f.values[kWordLength] = static_cast<double>(w.size());
    f.values[kWorkerAcceptRate] = worker_accept_rate;
  }
  return out;
}

/// 1 for words matched to the reference, 0 for substituted/inserted words.
inline std::vector<int> word_labels(const TokenSeq &hyp, const TokenSeq &ref) {
  std::vector<int> labels(hyp.size(), 0);
  for (const auto &op : edit_align(hyp, ref).ops)
    if (op.op == EditOp::kMatch) labels[*op.hyp_index] = 1;
  return labels;
}

// ---------------------------------------------------------------------------
// Logistic word scorer

struct LogisticModel {
  std::vector<std::size_t> features;  // positions in the full feature row
  std::vector<double> mean;
  std::vector<double> scale;
  std::vector<double> weights;
  double bias = 0.0;
  std::size_t input_dim = kNumWordFeatures;

  bool operator==(const LogisticModel &) const = default;
};

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

/// Untrained model over the given feature positions (zero weights).
inline LogisticModel make_logistic(std::vector<std::size_t> features,
                                   std::size_t input_dim = kNumWordFeatures) {
  LogisticModel m;
  m.input_dim = input_dim;
  m.features = std::move(features);
  m.mean.assign(m.features.size(), 0.0);
  m.scale.assign(m.features.size(), 1.0);
  m.weights.assign(m.features.size(), 0.0);
  return m;
}

inline double logistic_score(const LogisticModel &m, std::span<const double> row) {
  if (row.size() != m.input_dim)
    throw DataError("feature row has " + std::to_string(row.size()) + " values, model expects " +
                    std::to_string(m.input_dim));
  double z = m.bias;
  for (std::size_t j = 0; j < m.features.size(); ++j)
    z += m.weights[j] * (row[m.features[j]] - m.mean[j]) / m.scale[j];
  return sigmoid(z);
}

/// Word confidences; the unknown token is pinned to 0.
inline std::vector<double> score_words(const LogisticModel &m, std::span<const WordFeatures> rows) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto &r : rows) out.push_back(r.unknown_token ? 0.0 : logistic_score(m, r.values));
  return out;
}

struct WordExample {
  std::vector<double> features;
  int label = 0;  // 1 = correct
};

struct LogisticOptions {
  double learning_rate = 0.5;
  int max_epochs = 10000;
  double tolerance = 1e-6;  // relative change of the mean log-loss
  std::size_t min_examples = 100;
};

/// Full-batch gradient descent on mean log-loss over standardized features.
inline LogisticModel train_word_cem(std::span<const WordExample> examples,
                                    std::vector<std::size_t> features,
                                    const LogisticOptions &opt = {}) {
  if (examples.size() < opt.min_examples)
    throw DataError("word CEM needs at least " + std::to_string(opt.min_examples) +
                    " labeled words, got " + std::to_string(examples.size()));
  const std::size_t dim = examples[0].features.size();
  std::size_t positives = 0;
  for (const auto &e : examples) {
    if (e.features.size() != dim) throw DataError("ragged word feature rows");
    positives += e.label ? 1 : 0;
  }
  if (positives == 0 || positives == examples.size())
    throw DataError("word CEM labels are all one class");
  for (auto f : features)
    if (f >= dim) throw UsageError("feature index out of range");

  LogisticModel m = make_logistic(std::move(features), dim);
  const std::size_t k = m.features.size();
  const double n = static_cast<double>(examples.size());

  // standardized rows, row-major
  std::vector<double> z(examples.size() * k);
  std::vector<double> y(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) y[i] = examples[i].label ? 1.0 : 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    double s = 0.0, s2 = 0.0;
    for (const auto &e : examples) s += e.features[m.features[j]];
    m.mean[j] = s / n;
    for (const auto &e : examples) {
      double d = e.features[m.features[j]] - m.mean[j];
      s2 += d * d;
    }
    double sd = std::sqrt(s2 / n);
    m.scale[j] = sd > 1e-12 ? sd : 1.0;
    for (std::size_t i = 0; i < examples.size(); ++i)
      z[i * k + j] = (examples[i].features[m.features[j]] - m.mean[j]) / m.scale[j];
  }

  double prev_loss = std::numeric_limits<double>::infinity();
  std::vector<double> grad(k);
  for (int epoch = 0; epoch < opt.max_epochs; ++epoch) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double grad_b = 0.0, loss = 0.0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      const double *row = z.data() + i * k;
      double a = m.bias;
      for (std::size_t j = 0; j < k; ++j) a += m.weights[j] * row[j];
      // log(1 + e^a) - y a and sigmoid(a) from one exponential
      double e = std::exp(-std::abs(a));
      loss += std::max(a, 0.0) + std::log1p(e) - y[i] * a;
      double p = a >= 0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
      double g = p - y[i];
      grad_b += g;
      for (std::size_t j = 0; j < k; ++j) grad[j] += g * row[j];
    }
    loss /= n;
    m.bias -= opt.learning_rate * grad_b / n;
    for (std::size_t j = 0; j < k; ++j) m.weights[j] -= opt.learning_rate * grad[j] / n;
    if (std::isfinite(prev_loss) && std::abs(prev_loss - loss) <= opt.tolerance * std::abs(prev_loss))
      break;
    prev_loss = loss;
  }
  return m;
}

struct BinaryScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Error-detection quality: a word is flagged as an error when its
/// confidence is below `threshold`; the positive class is "incorrect".
inline BinaryScores error_detection_scores(std::span<const double> confidence,
                                           std::span<const int> labels, double threshold = 0.5) {
  long tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    bool flagged = confidence[i] < threshold;
    bool wrong = labels[i] == 0;
    if (flagged && wrong) ++tp;
    else if (flagged) ++fp;
    else if (wrong) ++fn;
  }
  BinaryScores s;
  s.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  s.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

inline void save_logistic(std::ostream &out, const LogisticModel &m) {
  std::ostringstream s;
  s.precision(17);
  s << "crowdqc-word-cem 1\ninput_dim " << m.input_dim << "\nfeatures " << m.features.size();
  for (auto f : m.features)
    s << ' ' << (m.input_dim == kNumWordFeatures ? std::string(kWordFeatureNames[f])
                                                 : "f" + std::to_string(f));
  auto vec = [&](const char *key, const std::vector<double> &v) {
    s << '\n' << key;
    for (double x : v) s << ' ' << x;
  };
  s << "\nindices";
  for (auto f : m.features) s << ' ' << f;
  vec("mean", m.mean);
  vec("scale", m.scale);
  vec("weights", m.weights);
  s << "\nbias " << m.bias << '\n';
  out << s.str();
}

inline LogisticModel load_logistic(std::istream &in) {
  auto expect = [&](const std::string &key) {
    std::string got;
    if (!(in >> got) || got != key)
      throw DataError("word CEM model: expected '" + key + "', got '" + got + "'");
  };
  LogisticModel m;
  int version = 0;
  expect("crowdqc-word-cem");
  in >> version;
  if (version != 1) throw DataError("word CEM model: unsupported version");
  expect("input_dim");
  in >> m.input_dim;
  std::size_t k = 0;
  expect("features");
  in >> k;
  for (std::size_t j = 0; j < k; ++j) {
    std::string name;
    in >> name;
  }
  m.features.resize(k);
  m.mean.resize(k);
  m.scale.resize(k);
  m.weights.resize(k);
  expect("indices");
  for (auto &f : m.features) in >> f;
  expect("mean");
  for (auto &x : m.mean) in >> x;
  expect("scale");
  for (auto &x : m.scale) in >> x;
  expect("weights");
  for (auto &x : m.weights) in >> x;
  expect("bias");
  in >> m.bias;
  if (!in) throw DataError("word CEM model: truncated file");
  for (auto f : m.features)
    if (f >= m.input_dim) throw DataError("word CEM model: feature index out of range");
  return m;
}

// ---------------------------------------------------------------------------
// Utterance features and the accept/reject gate

enum UtteranceFeature : std::size_t {
  kAudioDuration,
  kTranscriptLength,
  kSnrDb,
  kSnrMissing,
  kSpendTime,
  kUttWorkerAcceptRate,
  kMeanPeerDistance,
  kMinPeerDistance,
  kMeanWordConfidence,
  kMinWordConfidence,
  kNumUtteranceFeatures,
};

inline constexpr std::array<std::string_view, kNumUtteranceFeatures> kUtteranceFeatureNames = {
    "audio_duration",     "transcript_length",   "snr_db",
    "snr_missing",        "spend_time",          "worker_accept_rate",
    "mean_peer_distance", "min_peer_distance",   "mean_word_confidence",
    "min_word_confidence",
};

inline std::vector<std::string> utterance_feature_names() {
  return {kUtteranceFeatureNames.begin(), kUtteranceFeatureNames.end()};
}

struct UtteranceInputs {
  std::optional<double> audio_duration;
  std::size_t transcript_length = 0;
  std::optional<double> snr_db;
  double snr_fallback_db = 15.0;
  std::optional<double> spend_time;
  double worker_accept_rate = 1.0;
  PeerAgreement agreement;
  std::span<const double> word_confidences;
};

/// Feature row for the boosted model. Missing duration and spend time read
/// as 0; an empty transcript has word confidence features 0.
inline std::vector<double> utterance_features(const UtteranceInputs &in) {
  std::vector<double> row(kNumUtteranceFeatures, 0.0);
  row[kAudioDuration] = in.audio_duration.value_or(0.0);
  row[kTranscriptLength] = static_cast<double>(in.transcript_length);
  row[kSnrDb] = in.snr_db.value_or(in.snr_fallback_db);
  row[kSnrMissing] = in.snr_db ? 0.0 : 1.0;
  row[kSpendTime] = in.spend_time.value_or(0.0);
  row[kUttWorkerAcceptRate] = in.worker_accept_rate;
  row[kMeanPeerDistance] = in.agreement.mean_peer_distance;
  row[kMinPeerDistance] = in.agreement.min_peer_distance;
  if (!in.word_confidences.empty()) {
    const auto &c = in.word_confidences;
    row[kMeanWordConfidence] = std::accumulate(c.begin(), c.end(), 0.0) / static_cast<double>(c.size());
    row[kMinWordConfidence] = *std::min_element(c.begin(), c.end());
  }
  return row;
}

inline Decision decide(double predicted_errors, double threshold) {
  return predicted_errors > threshold ? Decision::kReject : Decision::kAccept;
}

/// Threshold rejecting round(rate * n) of the given predictions (fewer when
/// predictions tie at the cut). rate 0 gives the maximum prediction; rate 1
/// gives a value below the minimum.
inline double calibrate_threshold(std::span<const double> predictions, double target_reject_rate) {
  if (predictions.empty()) throw DataError("cannot calibrate a threshold on zero rows");
  if (!(target_reject_rate >= 0.0 && target_reject_rate <= 1.0))
    throw UsageError("reject rate must lie in [0, 1]");
  std::vector<double> sorted(predictions.begin(), predictions.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const std::size_t reject = static_cast<std::size_t>(std::llround(target_reject_rate * static_cast<double>(n)));
  if (reject >= n) return sorted.front() - 1.0;
  return sorted[n - reject - 1];
}

inline double calibrate_threshold(const GbmModel &model, std::span<const std::vector<double>> rows,
                                  double target_reject_rate) {
  std::vector<double> preds;
  preds.reserve(rows.size());
  for (const auto &r : rows) preds.push_back(predict_expected_errors(model, r));
  return calibrate_threshold(preds, target_reject_rate);
}

}  // namespace crowdqc

#endif  // CROWDQC_CONFIDENCE_HPP_
