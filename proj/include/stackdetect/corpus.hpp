#pragma once

// Dataset ingestion (RFC-4180 CSV with `id,text[,label]`), seeded splitting,
// word-count statistics and stopword-filtered n-gram analysis. Texts are
// carried byte for byte; only the analysis path normalizes tokens.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stackdetect/errors.hpp"
#include "stackdetect/io.hpp"
#include "stackdetect/matrix.hpp"

namespace stackdetect {

// label: 1 = human-written, 0 = machine-generated; empty for unlabeled sets.
struct LabeledExample {
  std::int64_t id = 0;
  std::string text;
  std::optional<int> label;

  friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

using Dataset = std::vector<LabeledExample>;

inline std::vector<int> labels_of(std::span<const LabeledExample> examples) {
  std::vector<int> out;
  out.reserve(examples.size());
  for (const auto& e : examples) {
    if (!e.label) throw ValidationError("example id " + std::to_string(e.id) + " has no label");
    out.push_back(*e.label);
  }
  return out;
}

inline std::vector<std::string> texts_of(std::span<const LabeledExample> examples) {
  std::vector<std::string> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(e.text);
  return out;
}

namespace csv {

// Splits RFC-4180 content into records. Accepts LF or CRLF terminators and
// quoted fields with embedded separators, quotes ("") and newlines.
inline std::vector<std::vector<std::string>> parse(std::string_view content) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool quoted = false, field_started = false;
  std::size_t i = 0;
  auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    records.push_back(std::move(record));
    record.clear();
  };
  while (i < content.size()) {
    const char c = content[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < content.size() && content[i + 1] == '"') {
          field += '"';
          i += 2;
          continue;
        }
        quoted = false;
        ++i;
        continue;
      }
      field += c;
      ++i;
      continue;
    }
    if (c == '"' && !field_started && field.empty()) {
      quoted = true;
      field_started = true;
      ++i;
    } else if (c == ',') {
      end_field();
      ++i;
    } else if (c == '\n') {
      end_record();
      ++i;
    } else if (c == '\r' && i + 1 < content.size() && content[i + 1] == '\n') {
      end_record();
      i += 2;
    } else {
      field += c;
      field_started = true;
      ++i;
    }
  }
  if (quoted) throw SchemaError("unterminated quoted field at end of CSV");
  if (field_started || !field.empty() || !record.empty()) end_record();
  return records;
}

inline std::string quote(std::string_view field) {
  if (field.find_first_of(",\"\r\n") == std::string_view::npos && !field.empty()) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace csv

inline Dataset parse_dataset_csv(std::string_view content) {
  auto records = csv::parse(content);
  if (records.empty()) throw SchemaError("CSV has no header row");
  const auto& header = records.front();
  auto column = [&](std::string_view name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  };
  const auto id_col = column("id");
  const auto text_col = column("text");
  const auto label_col = column("label");
  if (!id_col) throw SchemaError("CSV header is missing column 'id'");
  if (!text_col) throw SchemaError("CSV header is missing column 'text'");

  Dataset out;
  std::unordered_set<std::int64_t> seen;
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& rec = records[r];
    const std::string where = "data row " + std::to_string(r);
    if (rec.size() != header.size()) {
      throw SchemaError(where + " has " + std::to_string(rec.size()) + " fields, header has " +
                        std::to_string(header.size()));
    }
    LabeledExample ex;
    const std::string& id_s = rec[*id_col];
    auto [p, ec] = std::from_chars(id_s.data(), id_s.data() + id_s.size(), ex.id);
    if (ec != std::errc() || p != id_s.data() + id_s.size()) {
      throw ValidationError(where + ": id '" + id_s + "' is not an integer");
    }
    if (!seen.insert(ex.id).second) throw ValidationError(where + ": duplicate id " + id_s);
    ex.text = rec[*text_col];
    if (ex.text.empty()) throw ValidationError(where + ": empty text");
    if (label_col) {
      const std::string& l = rec[*label_col];
      if (l != "0" && l != "1") throw ValidationError(where + ": label '" + l + "' outside {0,1}");
      ex.label = l == "1" ? 1 : 0;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline Dataset load_csv(const std::filesystem::path& path) { return parse_dataset_csv(read_file(path)); }

// Writes `id,text,label` when every example is labeled, else `id,text`.
inline std::string format_dataset_csv(std::span<const LabeledExample> examples) {
  const bool labeled = std::all_of(examples.begin(), examples.end(), [](const auto& e) { return e.label.has_value(); });
  std::string out = labeled ? "id,text,label\n" : "id,text\n";
  for (const auto& e : examples) {
    out += std::to_string(e.id);
    out += ',';
    out += csv::quote(e.text);
    if (labeled) {
      out += ',';
      out += std::to_string(*e.label);
    }
    out += '\n';
  }
  return out;
}

inline void write_csv(const std::filesystem::path& path, std::span<const LabeledExample> examples) {
  write_file_atomic(path, format_dataset_csv(examples));
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitRatios {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
};

struct SplitBundle {
  Dataset train, validation, test;
  SplitRatios ratios;
  std::uint64_t seed = 0;
};

// Seeded shuffle, then contiguous slices. Validation and test receive
// floor(N * ratio) examples; train takes the rest.
inline SplitBundle split_dataset(std::span<const LabeledExample> examples, SplitRatios ratios = {},
                                 std::uint64_t seed = 0) {
  if (examples.size() < 3) throw ValidationError("split needs at least 3 examples, got " + std::to_string(examples.size()));
  if (!(ratios.train > 0 && ratios.validation > 0 && ratios.test > 0)) throw ValidationError("split ratios must be positive");
  if (std::abs(ratios.train + ratios.validation + ratios.test - 1.0) > 1e-9) {
    throw ValidationError("split ratios must sum to 1");
  }
  const std::size_t n = examples.size();
  auto part = [n](double r) { return static_cast<std::size_t>(std::floor(static_cast<double>(n) * r + 1e-9)); };
  const std::size_t n_val = part(ratios.validation), n_test = part(ratios.test);
  const std::size_t n_train = n - n_val - n_test;

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  SplitBundle b;
  b.ratios = ratios;
  b.seed = seed;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& ex = examples[order[i]];
    if (i < n_train) b.train.push_back(ex);
    else if (i < n_train + n_val) b.validation.push_back(ex);
    else b.test.push_back(ex);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Statistics

struct DatasetStats {
  std::size_t count = 0;
  double mean_words = 0.0;
  double std_words = 0.0;  // population
  std::size_t min_words = 0;
  std::size_t max_words = 0;
  std::size_t label0 = 0;
  std::size_t label1 = 0;
  std::size_t unlabeled = 0;

  nlohmann::json to_json() const {
    return {{"count", count},
            {"word_count", {{"mean", mean_words}, {"std", std_words}, {"min", min_words}, {"max", max_words}}},
            {"labels", {{"0", label0}, {"1", label1}, {"unlabeled", unlabeled}}}};
  }
};

inline bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

inline std::vector<std::string_view> split_whitespace(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) out.push_back(text.substr(start, i - start));
  }
  return out;
}

inline std::size_t word_count(std::string_view text) { return split_whitespace(text).size(); }

// Single-pass (Welford) mean and variance.
inline DatasetStats compute_stats(std::span<const LabeledExample> examples) {
  if (examples.empty()) throw ValidationError("compute_stats on empty dataset");
  DatasetStats s;
  double mean = 0.0, m2 = 0.0;
  s.min_words = SIZE_MAX;
  for (const auto& e : examples) {
    const std::size_t w = word_count(e.text);
    ++s.count;
    const double delta = static_cast<double>(w) - mean;
    mean += delta / static_cast<double>(s.count);
    m2 += delta * (static_cast<double>(w) - mean);
    s.min_words = std::min(s.min_words, w);
    s.max_words = std::max(s.max_words, w);
    if (!e.label) ++s.unlabeled;
    else if (*e.label == 1) ++s.label1;
    else ++s.label0;
  }
  s.mean_words = mean;
  s.std_words = std::sqrt(std::max(0.0, m2 / static_cast<double>(s.count)));
  return s;
}

// ---------------------------------------------------------------------------
// N-gram analysis

struct AnalysisConfig {
  std::size_t n_low = 3;
  std::size_t n_high = 4;
  std::size_t k = 10;
  std::set<std::string> stoplist;

  void validate() const {
    if (n_low < 1 || n_low > n_high) throw ValidationError("n-gram range must satisfy 1 <= n_low <= n_high");
    if (k < 1) throw ValidationError("k must be >= 1");
  }
};

// One word per line; blank lines and lines starting with '#' are skipped.
inline std::set<std::string> parse_stoplist(std::string_view content) {
  std::set<std::string> out;
  std::size_t start = 0;
  while (start <= content.size()) {
    std::size_t end = content.find('\n', start);
    if (end == std::string_view::npos) end = content.size();
    auto words = split_whitespace(content.substr(start, end - start));
    if (!words.empty() && words.front()[0] != '#') {
      std::string w(words.front());
      for (char& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      out.insert(std::move(w));
    }
    start = end + 1;
  }
  return out;
}

inline std::set<std::string> load_stoplist(const std::filesystem::path& path) { return parse_stoplist(read_file(path)); }

inline std::string normalize_token(std::string_view tok) {
  std::size_t b = 0, e = tok.size();
  while (b < e && std::ispunct(static_cast<unsigned char>(tok[b]))) ++b;
  while (e > b && std::ispunct(static_cast<unsigned char>(tok[e - 1]))) --e;
  std::string out(tok.substr(b, e - b));
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Lowercase, whitespace split, strip edge punctuation, drop stopwords and
// empty tokens.
inline std::vector<std::string> remove_stopwords(std::string_view text, const std::set<std::string>& stoplist) {
  std::vector<std::string> out;
  for (auto raw : split_whitespace(text)) {
    std::string t = normalize_token(raw);
    if (t.empty() || stoplist.contains(t)) continue;
    out.push_back(std::move(t));
  }
  return out;
}

using PhraseCount = std::pair<std::string, std::size_t>;

// N-grams never span documents. Ordered by count descending, then phrase
// ascending.
inline std::vector<PhraseCount> top_k_ngrams(std::span<const std::string> corpus, const AnalysisConfig& cfg) {
  cfg.validate();
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& doc : corpus) {
    const auto toks = remove_stopwords(doc, cfg.stoplist);
    for (std::size_t n = cfg.n_low; n <= cfg.n_high; ++n) {
      if (toks.size() < n) break;
      for (std::size_t i = 0; i + n <= toks.size(); ++i) {
        std::string phrase = toks[i];
        for (std::size_t j = 1; j < n; ++j) {
          phrase += ' ';
          phrase += toks[i + j];
        }
        ++counts[phrase];
      }
    }
  }
  std::vector<PhraseCount> all(counts.begin(), counts.end());
  auto better = [](const PhraseCount& a, const PhraseCount& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  };
  const std::size_t k = std::min(cfg.k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), better);
  all.resize(k);
  return all;
}

inline std::vector<std::string> union_across_splits(std::span<const std::vector<PhraseCount>> per_split) {
  std::set<std::string> u;
  for (const auto& list : per_split)
    for (const auto& [phrase, count] : list) u.insert(phrase);
  return {u.begin(), u.end()};
}

}  // namespace stackdetect
