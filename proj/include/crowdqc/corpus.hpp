// crowdqc/corpus.hpp
//
// Data model and TSV ingestion for crowdsourced transcription corpora: one
// reference per utterance (optional) and any number of worker responses.

#ifndef CROWDQC_CORPUS_HPP_
#define CROWDQC_CORPUS_HPP_

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "crowdqc/error.hpp"

namespace crowdqc {

/// Reserved token for a worker's "?" uncertainty marker. It never equals a
/// reference word because normalized words cannot contain '<' or '>'.
inline constexpr std::string_view kUnknownToken = "<unk>";

using TokenSeq = std::vector<std::string>;

enum class Subset {
  kTrainOther10h,
  kTrainOther60h,
  kTrainMixed10h,
  kDevClean,
  kTestClean,
  kDevOther,
  kTestOther,
};

inline constexpr std::array<Subset, 7> kAllSubsets = {
    Subset::kTrainOther10h, Subset::kTrainOther60h, Subset::kTrainMixed10h,
    Subset::kDevClean,      Subset::kTestClean,     Subset::kDevOther,
    Subset::kTestOther,
};

inline std::string_view subset_name(Subset s) {
  switch (s) {
    case Subset::kTrainOther10h: return "train-other-10h";
    case Subset::kTrainOther60h: return "train-other-60h";
    case Subset::kTrainMixed10h: return "train-mixed-10h";
    case Subset::kDevClean: return "dev-clean";
    case Subset::kTestClean: return "test-clean";
    case Subset::kDevOther: return "dev-other";
    case Subset::kTestOther: return "test-other";
  }
  throw InvariantError("bad Subset value");
}

inline std::optional<Subset> parse_subset(std::string_view name) {
  for (Subset s : kAllSubsets)
    if (subset_name(s) == name) return s;
  return std::nullopt;
}

/// Parses a comma-separated subset list; "all" expands to every subset.
inline std::vector<Subset> parse_subset_list(std::string_view text) {
  std::vector<Subset> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t comma = text.find(',', pos);
    if (comma == std::string_view::npos) comma = text.size();
    std::string_view item = text.substr(pos, comma - pos);
    while (!item.empty() && std::isspace(static_cast<unsigned char>(item.front())))
      item.remove_prefix(1);
    while (!item.empty() && std::isspace(static_cast<unsigned char>(item.back())))
      item.remove_suffix(1);
    if (item == "all") {
      out.assign(kAllSubsets.begin(), kAllSubsets.end());
    } else if (!item.empty()) {
      auto s = parse_subset(item);
      if (!s) throw UsageError("unknown subset name '" + std::string(item) + "'");
      if (std::find(out.begin(), out.end(), *s) == out.end()) out.push_back(*s);
    }
    pos = comma + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text normalization

namespace detail {

inline bool is_word_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '\'';
}

// Lowercases ASCII, folds typographic apostrophes to '\'', and turns every
// other non-word byte into a space. '?' survives so the caller can see it.
inline std::string fold_characters(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    unsigned char c = static_cast<unsigned char>(raw[i]);
    // U+2018 / U+2019 (E2 80 98 / E2 80 99)
    if (c == 0xE2 && i + 2 < raw.size() &&
        static_cast<unsigned char>(raw[i + 1]) == 0x80 &&
        (static_cast<unsigned char>(raw[i + 2]) == 0x98 ||
         static_cast<unsigned char>(raw[i + 2]) == 0x99)) {
      out.push_back('\'');
      i += 2;
      continue;
    }
    char lc = static_cast<char>(std::tolower(c));
    if (c < 0x80 && (is_word_char(lc) || lc == '?'))
      out.push_back(lc);
    else
      out.push_back(' ');
  }
  return out;
}

}  // namespace detail

/// Lowercases, drops punctuation except intra-word apostrophes, collapses
/// whitespace and maps any word carrying a '?' to kUnknownToken. Digits are
/// kept verbatim.
inline TokenSeq normalize_text(std::string_view raw) {
  TokenSeq tokens;
  std::istringstream words{std::string(raw)};
  std::string chunk;
  while (words >> chunk) {
    if (chunk == kUnknownToken) {
      tokens.emplace_back(kUnknownToken);
      continue;
    }
    if (chunk.find('?') != std::string::npos) {
      tokens.emplace_back(kUnknownToken);
      continue;
    }
    std::istringstream parts(detail::fold_characters(chunk));
    std::string part;
    while (parts >> part) {
      std::size_t b = part.find_first_not_of('\'');
      if (b == std::string::npos) continue;
      std::size_t e = part.find_last_not_of('\'');
      part = part.substr(b, e - b + 1);
      if (part.find('?') != std::string::npos)
        tokens.emplace_back(kUnknownToken);
      else
        tokens.push_back(std::move(part));
    }
  }
  return tokens;
}

inline std::string join_tokens(const TokenSeq &tokens) {
  std::string out;
  for (const auto &t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Data model

struct Utterance {
  std::string id;
  Subset subset = Subset::kDevClean;
  std::optional<TokenSeq> reference;
  std::optional<double> audio_duration;
  std::optional<std::string> emission_ref;
};

struct Response {
  std::string utterance_id;
  std::string worker_id;
  std::string raw_text;
  TokenSeq text;
  int submit_order = 0;
  std::optional<double> spend_time;
};

struct WorkerStats {
  std::string worker_id;
  int response_count = 0;
  int decided = 0;
  int accepted = 0;
  double accept_rate = 1.0;
  double mean_spend_time = 0.0;
};

enum class Decision { kAccept, kReject };

/// Immutable after construction. Utterances are kept sorted by id and
/// responses grouped by utterance in submit order, so per-utterance response
/// lists are contiguous spans and a response's index is stable.
class Corpus {
 public:
  Corpus() = default;

  Corpus(std::vector<Utterance> utterances, std::vector<Response> responses)
      : utterances_(std::move(utterances)), responses_(std::move(responses)) {
    std::sort(utterances_.begin(), utterances_.end(),
              [](const Utterance &a, const Utterance &b) { return a.id < b.id; });
    for (std::size_t i = 0; i < utterances_.size(); ++i) {
      if (!index_.emplace(utterances_[i].id, i).second)
        throw DataError("duplicate utterance id '" + utterances_[i].id + "'");
    }
    for (const auto &r : responses_) {
      if (!index_.count(r.utterance_id))
        throw DataError("response from worker '" + r.worker_id +
                        "' references unknown utterance '" + r.utterance_id + "'");
    }
    std::stable_sort(responses_.begin(), responses_.end(),
                     [this](const Response &a, const Response &b) {
                       std::size_t ia = index_.at(a.utterance_id);
                       std::size_t ib = index_.at(b.utterance_id);
                       if (ia != ib) return ia < ib;
                       return a.submit_order < b.submit_order;
                     });
    offsets_.assign(utterances_.size() + 1, 0);
    for (const auto &r : responses_) ++offsets_[index_.at(r.utterance_id) + 1];
    for (std::size_t i = 1; i < offsets_.size(); ++i) offsets_[i] += offsets_[i - 1];
    for (std::size_t i = 1; i < responses_.size(); ++i) {
      const auto &a = responses_[i - 1];
      const auto &b = responses_[i];
      if (a.utterance_id == b.utterance_id && a.submit_order == b.submit_order)
        throw DataError("utterance '" + a.utterance_id +
                        "' has two responses with submit_order " +
                        std::to_string(a.submit_order));
    }
  }

  const std::vector<Utterance> &utterances() const { return utterances_; }
  const std::vector<Response> &responses() const { return responses_; }
  bool empty() const { return utterances_.empty(); }

  const Utterance *find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    return it == index_.end() ? nullptr : &utterances_[it->second];
  }

  std::size_t utterance_index(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end())
      throw DataError("unknown utterance '" + std::string(id) + "'");
    return it->second;
  }

  std::span<const Response> responses_for(std::size_t utterance_index) const {
    return std::span<const Response>(responses_)
        .subspan(offsets_[utterance_index],
                 offsets_[utterance_index + 1] - offsets_[utterance_index]);
  }

  std::span<const Response> responses_for(std::string_view id) const {
    return responses_for(utterance_index(id));
  }

  /// Offset of the first response of an utterance within responses().
  std::size_t first_response(std::size_t utterance_index) const {
    return offsets_[utterance_index];
  }

  std::size_t response_index(const Response &r) const {
    return static_cast<std::size_t>(&r - responses_.data());
  }

 private:
  std::vector<Utterance> utterances_;
  std::vector<Response> responses_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::size_t> offsets_;
};

// ---------------------------------------------------------------------------
// TSV ingestion

/// Maps the logical fields onto the column names of the files being read.
/// An empty name for submit_order means "use file order"; an empty name for
/// spend_time or duration means the column is absent.
struct ColumnMap {
  std::string utterance_id = "utterance_id";
  std::string worker_id = "worker_id";
  std::string submit_order = "submit_order";
  std::string spend_time = "spend_time";
  std::string raw_text = "raw_text";
  std::string ref_utterance_id = "utterance_id";
  std::string subset = "subset";
  std::string duration = "duration_s";
  std::string reference_text = "reference_text";
};

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t pos = 0;
  while (true) {
    std::size_t tab = line.find('\t', pos);
    if (tab == std::string_view::npos) {
      fields.push_back(line.substr(pos));
      break;
    }
    fields.push_back(line.substr(pos, tab - pos));
    pos = tab + 1;
  }
  return fields;
}

inline bool read_line(std::istream &in, std::string &line) {
  if (!std::getline(in, line)) return false;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return true;
}

class TsvTable {
 public:
  TsvTable(std::istream &in, std::string name) : in_(in), name_(std::move(name)) {
    std::string header;
    if (!read_line(in_, header)) throw DataError(name_ + ": missing header row");
    if (header.size() >= 3 && header.compare(0, 3, "\xEF\xBB\xBF") == 0)
      header.erase(0, 3);
    for (auto f : split_tabs(header)) columns_.emplace_back(f);
  }

  /// Column position or npos when `optional` and absent.
  std::size_t column(const std::string &name, bool optional = false) const {
    if (name.empty() && optional) return std::string::npos;
    auto it = std::find(columns_.begin(), columns_.end(), name);
    if (it == columns_.end()) {
      if (optional) return std::string::npos;
      throw DataError(name_ + ":1: header lacks required column '" + name + "'");
    }
    return static_cast<std::size_t>(it - columns_.begin());
  }

  bool next() {
    while (read_line(in_, line_)) {
      ++line_no_;
      if (line_.empty()) continue;
      fields_ = split_tabs(line_);
      return true;
    }
    return false;
  }

  std::string_view field(std::size_t col, const std::string &col_name) const {
    if (col >= fields_.size())
      throw data_error_at(name_, line_no_, col_name,
                          "missing field (row has " + std::to_string(fields_.size()) +
                              " columns)");
    return fields_[col];
  }

  std::size_t line_no() const { return line_no_; }
  const std::string &name() const { return name_; }

 private:
  std::istream &in_;
  std::string name_;
  std::vector<std::string> columns_;
  std::string line_;
  std::vector<std::string_view> fields_;
  std::size_t line_no_ = 1;
};

template <typename T>
T parse_number(const TsvTable &t, std::string_view text, const std::string &col) {
  T value{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size())
    throw data_error_at(t.name(), t.line_no(), col,
                        "not a number: '" + std::string(text) + "'");
  return value;
}

inline std::ifstream open_input(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open file");
  return in;
}

}  // namespace detail

inline std::vector<Utterance> read_references(std::istream &in, const std::string &name,
                                              const ColumnMap &cols = {}) {
  detail::TsvTable t(in, name);
  std::size_t c_id = t.column(cols.ref_utterance_id);
  std::size_t c_subset = t.column(cols.subset);
  std::size_t c_dur = t.column(cols.duration, true);
  std::size_t c_text = t.column(cols.reference_text);
  std::vector<Utterance> out;
  while (t.next()) {
    Utterance u;
    u.id = std::string(t.field(c_id, cols.ref_utterance_id));
    if (u.id.empty())
      throw data_error_at(name, t.line_no(), cols.ref_utterance_id, "empty id");
    std::string_view sub = t.field(c_subset, cols.subset);
    auto s = parse_subset(sub);
    if (!s)
      throw data_error_at(name, t.line_no(), cols.subset,
                          "unknown subset '" + std::string(sub) + "'");
    u.subset = *s;
    if (c_dur != std::string::npos) {
      std::string_view d = t.field(c_dur, cols.duration);
      if (!d.empty()) {
        double v = detail::parse_number<double>(t, d, cols.duration);
        if (!(v >= 0)) throw data_error_at(name, t.line_no(), cols.duration, "negative duration");
        u.audio_duration = v;
      }
    }
    std::string_view text = t.field(c_text, cols.reference_text);
    if (!text.empty()) u.reference = normalize_text(text);
    out.push_back(std::move(u));
  }
  return out;
}

inline std::vector<Response> read_responses(std::istream &in, const std::string &name,
                                            const ColumnMap &cols = {}) {
  detail::TsvTable t(in, name);
  std::size_t c_utt = t.column(cols.utterance_id);
  std::size_t c_worker = t.column(cols.worker_id);
  std::size_t c_order = t.column(cols.submit_order, true);
  std::size_t c_spend = t.column(cols.spend_time, true);
  std::size_t c_text = t.column(cols.raw_text);
  std::vector<Response> out;
  std::unordered_map<std::string, int> file_order;
  while (t.next()) {
    Response r;
    r.utterance_id = std::string(t.field(c_utt, cols.utterance_id));
    r.worker_id = std::string(t.field(c_worker, cols.worker_id));
    if (r.worker_id.empty())
      throw data_error_at(name, t.line_no(), cols.worker_id, "empty worker id");
    if (c_order != std::string::npos) {
      r.submit_order = detail::parse_number<int>(t, t.field(c_order, cols.submit_order),
                                                 cols.submit_order);
      if (r.submit_order < 0)
        throw data_error_at(name, t.line_no(), cols.submit_order, "negative submit_order");
    } else {
      r.submit_order = file_order[r.utterance_id]++;
    }
    if (c_spend != std::string::npos) {
      std::string_view sp = t.field(c_spend, cols.spend_time);
      if (!sp.empty()) r.spend_time = detail::parse_number<double>(t, sp, cols.spend_time);
    }
    r.raw_text = std::string(t.field(c_text, cols.raw_text));
    r.text = normalize_text(r.raw_text);
    out.push_back(std::move(r));
  }
  return out;
}

/// Optional metadata: `utterance_id<TAB>emission_ref`, header row required.
inline void apply_meta(std::istream &in, const std::string &name,
                       std::vector<Utterance> &utterances) {
  detail::TsvTable t(in, name);
  std::size_t c_id = t.column("utterance_id");
  std::size_t c_em = t.column("emission_ref");
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < utterances.size(); ++i) pos.emplace(utterances[i].id, i);
  while (t.next()) {
    std::string id(t.field(c_id, "utterance_id"));
    auto it = pos.find(id);
    if (it == pos.end())
      throw data_error_at(name, t.line_no(), "utterance_id", "unknown utterance '" + id + "'");
    std::string_view em = t.field(c_em, "emission_ref");
    if (!em.empty()) utterances[it->second].emission_ref = std::string(em);
  }
}

inline Corpus load_corpus(const std::string &response_path, const std::string &reference_path,
                          const std::optional<std::string> &meta_path = std::nullopt,
                          const ColumnMap &cols = {}) {
  auto ref_in = detail::open_input(reference_path);
  auto utterances = read_references(ref_in, reference_path, cols);
  if (meta_path) {
    auto meta_in = detail::open_input(*meta_path);
    apply_meta(meta_in, *meta_path, utterances);
  }
  auto resp_in = detail::open_input(response_path);
  auto responses = read_responses(resp_in, response_path, cols);
  return Corpus(std::move(utterances), std::move(responses));
}

/// Writes responses in the canonical column layout.
inline void write_responses(std::ostream &out, const Corpus &corpus) {
  out << "utterance_id\tworker_id\tsubmit_order\tspend_time\traw_text\n";
  std::ostringstream num;
  num.precision(17);
  for (const auto &r : corpus.responses()) {
    out << r.utterance_id << '\t' << r.worker_id << '\t' << r.submit_order << '\t';
    if (r.spend_time) {
      num.str("");
      num << *r.spend_time;
      out << num.str();
    }
    out << '\t' << r.raw_text << '\n';
  }
}

/// Writes references in the canonical column layout (normalized text).
inline void write_references(std::ostream &out, const Corpus &corpus) {
  out << "utterance_id\tsubset\tduration_s\treference_text\n";
  std::ostringstream num;
  num.precision(17);
  for (const auto &u : corpus.utterances()) {
    out << u.id << '\t' << subset_name(u.subset) << '\t';
    if (u.audio_duration) {
      num.str("");
      num << *u.audio_duration;
      out << num.str();
    }
    out << '\t' << (u.reference ? join_tokens(*u.reference) : std::string()) << '\n';
  }
}

// ---------------------------------------------------------------------------

/// Per-worker counts. `decisions` is keyed by response index; a worker with
/// no decided responses gets accept_rate 1.0.
inline std::map<std::string, WorkerStats> compute_worker_stats(
    const Corpus &corpus, const std::unordered_map<std::size_t, Decision> &decisions = {}) {
  std::map<std::string, WorkerStats> stats;
  std::map<std::string, std::pair<double, int>> spend;
  const auto &rs = corpus.responses();
  for (std::size_t i = 0; i < rs.size(); ++i) {
    auto &w = stats[rs[i].worker_id];
    w.worker_id = rs[i].worker_id;
    ++w.response_count;
    if (rs[i].spend_time) {
      auto &sp = spend[rs[i].worker_id];
      sp.first += *rs[i].spend_time;
      ++sp.second;
    }
    if (auto it = decisions.find(i); it != decisions.end()) {
      ++w.decided;
      if (it->second == Decision::kAccept) ++w.accepted;
    }
  }
  for (auto &[id, w] : stats) {
    w.accept_rate = w.decided ? static_cast<double>(w.accepted) / w.decided : 1.0;
    if (auto it = spend.find(id); it != spend.end() && it->second.second > 0)
      w.mean_spend_time = it->second.first / it->second.second;
  }
  return stats;
}

/// Restricts a corpus to the named subsets.
inline Corpus split(const Corpus &corpus, std::span<const Subset> subsets) {
  std::vector<Utterance> utts;
  std::vector<Response> resps;
  for (std::size_t i = 0; i < corpus.utterances().size(); ++i) {
    const auto &u = corpus.utterances()[i];
    if (std::find(subsets.begin(), subsets.end(), u.subset) == subsets.end()) continue;
    utts.push_back(u);
    for (const auto &r : corpus.responses_for(i)) resps.push_back(r);
  }
  return Corpus(std::move(utts), std::move(resps));
}

inline Corpus split(const Corpus &corpus, const std::vector<std::string> &names) {
  std::vector<Subset> subsets;
  for (const auto &n : names) {
    auto s = parse_subset(n);
    if (!s) throw UsageError("unknown subset name '" + n + "'");
    subsets.push_back(*s);
  }
  return split(corpus, subsets);
}

}  // namespace crowdqc

#endif  // CROWDQC_CORPUS_HPP_
