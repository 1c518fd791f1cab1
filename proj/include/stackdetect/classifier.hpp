#pragma once

// Weak learner = encoder + a single fully connected layer [d_model -> 2]
// followed by softmax. Column 0 is P(machine), column 1 is P(human).
//
// Two training modes:
//   frozen_cached  the encoder is fixed; [CLS] vectors are computed once and
//                  only the head is trained on them
//   end_to_end     gradients flow through the head and the encoder
// A third, external, has no encoder: its head is trained on [CLS] vectors
// ingested from a cache file produced elsewhere.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "stackdetect/autograd.hpp"
#include "stackdetect/corpus.hpp"
#include "stackdetect/encoder.hpp"
#include "stackdetect/errors.hpp"
#include "stackdetect/io.hpp"
#include "stackdetect/metrics.hpp"
#include "stackdetect/optim.hpp"
#include "stackdetect/tokenizer.hpp"

namespace stackdetect {

struct CacheEntry {
  std::int64_t id = 0;
  std::vector<double> vec;
  friend bool operator==(const CacheEntry&, const CacheEntry&) = default;
};

struct EmbeddingCache {
  std::string model_name;
  std::size_t dim = 0;
  std::vector<CacheEntry> entries;

  std::size_t size() const { return entries.size(); }

  void validate() const {
    std::unordered_set<std::int64_t> ids;
    for (const auto& e : entries) {
      if (e.vec.size() != dim) {
        throw DimensionError("cache entry " + std::to_string(e.id) + " has length " + std::to_string(e.vec.size()) +
                             ", expected " + std::to_string(dim));
      }
      if (!ids.insert(e.id).second) throw ValidationError("duplicate id " + std::to_string(e.id) + " in cache");
    }
  }

  Matrix as_matrix() const {
    Matrix m(entries.size(), dim);
    for (std::size_t i = 0; i < entries.size(); ++i) std::copy(entries[i].vec.begin(), entries[i].vec.end(), m.row(i).begin());
    return m;
  }

  // JSON lines: {"id": <int>, "model": <string>, "vec": [float64 x dim]}
  std::string to_jsonl() const {
    std::string out;
    for (const auto& e : entries) {
      out += nlohmann::json{{"id", e.id}, {"model", model_name}, {"vec", e.vec}}.dump();
      out += '\n';
    }
    return out;
  }

  static EmbeddingCache from_jsonl(std::string_view content) {
    EmbeddingCache c;
    std::istringstream in{std::string(content)};
    std::string line;
    std::size_t lineno = 0;
    bool first = true;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        auto j = nlohmann::json::parse(line);
        CacheEntry e{j.at("id").get<std::int64_t>(), j.at("vec").get<std::vector<double>>()};
        const auto model = j.at("model").get<std::string>();
        if (first) {
          c.model_name = model;
          c.dim = e.vec.size();
          first = false;
        } else if (model != c.model_name) {
          throw ValidationError("cache line " + std::to_string(lineno) + " has model '" + model + "', expected '" +
                                c.model_name + "'");
        }
        for (double v : e.vec)
          if (!std::isfinite(v)) throw NumericError("cache line " + std::to_string(lineno) + " has non-finite value");
        c.entries.push_back(std::move(e));
      } catch (const nlohmann::json::exception& ex) {
        throw SchemaError("cache line " + std::to_string(lineno) + ": " + ex.what());
      }
    }
    c.validate();
    return c;
  }

  void save(const std::filesystem::path& path) const { write_file_atomic(path, to_jsonl()); }
  static EmbeddingCache load(const std::filesystem::path& path) { return from_jsonl(read_file(path)); }
};

struct Head {
  Parameter W;  // [d_model x 2]
  Parameter b;  // [1 x 2]

  Head() = default;
  Head(std::size_t d_model, std::uint64_t seed, const std::string& prefix = "head.")
      : W(prefix + "W", seeded_init(d_model, 2, InitScheme::uniform_fan_in, seed)),
        b(prefix + "b", seeded_init(1, 2, InitScheme::zeros, seed)) {}

  std::size_t d_model() const { return W.value().rows(); }
  ParameterRefs refs() { return {&W, &b}; }

  Var logits(const Var& cls) const {
    if (cls.cols() != d_model()) {
      throw DimensionError("head expects [CLS] length " + std::to_string(d_model()) + ", got " +
                           std::to_string(cls.cols()));
    }
    return add_row(stackdetect::matmul(cls, W.var()), b.var());
  }

  Matrix logits(const Matrix& cls) const { return logits(Var::constant(cls)).value(); }
  Matrix proba(const Matrix& cls) const { return softmax_rows(logits(cls)); }

  nlohmann::json to_json() const {
    return {{"W", Encoder::tensor_json(W.value())}, {"b", Encoder::tensor_json(b.value())}};
  }
  static Head from_json(const nlohmann::json& j) {
    Head h;
    h.W = Parameter("head.W", Encoder::tensor_from_json(j.at("W")));
    h.b = Parameter("head.b", Encoder::tensor_from_json(j.at("b")));
    if (h.W.value().cols() != 2 || h.b.value().rows() != 1 || h.b.value().cols() != 2) {
      throw DimensionError("head tensors must be [d x 2] and [1 x 2]");
    }
    return h;
  }
};

// softmax(W^T cls + b) for one [CLS] vector.
inline std::array<double, 2> head_forward(const Head& head, std::span<const double> cls) {
  if (cls.size() != head.d_model()) {
    throw DimensionError("head_forward: [CLS] length " + std::to_string(cls.size()) + " != d_model " +
                         std::to_string(head.d_model()));
  }
  Matrix p = head.proba(Matrix::row_vector(cls));
  return {p[0], p[1]};
}

enum class LearnerMode { frozen_cached, end_to_end, external };

inline std::string to_string(LearnerMode m) {
  switch (m) {
    case LearnerMode::frozen_cached: return "frozen_cached";
    case LearnerMode::end_to_end: return "end_to_end";
    case LearnerMode::external: return "external";
  }
  return "?";
}

inline LearnerMode parse_mode(const std::string& s) {
  for (auto m : {LearnerMode::frozen_cached, LearnerMode::end_to_end, LearnerMode::external})
    if (to_string(m) == s) return m;
  throw ValidationError("unknown learner mode '" + s + "'");
}

struct WeakLearner {
  std::string name;
  LearnerMode mode = LearnerMode::frozen_cached;
  std::optional<Encoder> encoder;  // absent for external learners
  std::size_t max_len = 256;       // tokenizer truncation length
  Head head;
  bool trained = false;

  std::size_t feature_dim() const { return head.d_model(); }

  nlohmann::json to_json() const {
    nlohmann::json j{{"version", 1}, {"name", name},       {"mode", to_string(mode)},
                     {"max_len", max_len}, {"trained", trained}, {"head", head.to_json()}};
    j["encoder"] = encoder ? encoder->checkpoint_json() : nlohmann::json(nullptr);
    return j;
  }

  static WeakLearner from_json(const nlohmann::json& j) {
    try {
      if (j.at("version").get<int>() != 1) throw SchemaError("unsupported learner checkpoint version");
      WeakLearner w;
      w.name = j.at("name");
      w.mode = parse_mode(j.at("mode"));
      w.max_len = j.at("max_len");
      w.trained = j.at("trained");
      w.head = Head::from_json(j.at("head"));
      if (!j.at("encoder").is_null()) w.encoder = Encoder::from_checkpoint(j.at("encoder"));
      if (w.mode != LearnerMode::external && !w.encoder) throw SchemaError("learner " + w.name + " lacks an encoder");
      return w;
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(std::string("malformed learner checkpoint: ") + e.what());
    }
  }

  void save(const std::filesystem::path& path) const { write_file_atomic(path, to_json().dump() + "\n"); }
  static WeakLearner load(const std::filesystem::path& path) {
    try {
      return from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError(path.string() + ": " + e.what());
    }
  }
};

inline WeakLearner make_learner(std::string name, const EncoderConfig& cfg, LearnerMode mode, std::uint64_t head_seed) {
  WeakLearner w;
  w.name = std::move(name);
  w.mode = mode;
  w.encoder.emplace(cfg);
  w.max_len = cfg.max_len;
  w.head = Head(cfg.d_model, head_seed);
  return w;
}

// Drops trailing columns that are padding in every sequence of the batch.
// Masked keys contribute exactly zero, so the real rows are unchanged.
inline std::vector<TokenSequence> trim_padding(std::span<const TokenSequence> batch) {
  std::size_t longest = 1;
  for (const auto& s : batch) longest = std::max(longest, s.length);
  std::vector<TokenSequence> out(batch.begin(), batch.end());
  for (auto& s : out) {
    s.ids.resize(std::min(longest, s.ids.size()));
    s.max_len = s.ids.size();
  }
  return out;
}

inline std::vector<TokenSequence> encode_all(std::span<const std::string> texts, const Vocabulary& vocab,
                                             std::size_t max_len) {
  std::vector<TokenSequence> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(encode(t, vocab, max_len));
  return out;
}

// [CLS] vectors [N x d_model] for tokenized inputs, computed in batches.
inline Matrix cls_features(const Encoder& encoder, std::span<const TokenSequence> seqs, std::size_t batch_size = 64) {
  Matrix out(seqs.size(), encoder.config().d_model);
  for (std::size_t start = 0; start < seqs.size(); start += batch_size) {
    const std::size_t end = std::min(seqs.size(), start + batch_size);
    auto batch = trim_padding(seqs.subspan(start, end - start));
    Var cls = extract_cls(encoder.forward(batch));
    for (std::size_t i = 0; i < end - start; ++i)
      std::copy(cls.value().row(i).begin(), cls.value().row(i).end(), out.row(start + i).begin());
  }
  return out;
}

inline EmbeddingCache cache_embeddings(std::span<const LabeledExample> examples, const Encoder& encoder,
                                       const Vocabulary& vocab, const std::string& model_name,
                                       std::size_t max_len, const std::filesystem::path& out = {}) {
  auto seqs = encode_all(texts_of(examples), vocab, max_len);
  Matrix feats = cls_features(encoder, seqs);
  EmbeddingCache c;
  c.model_name = model_name;
  c.dim = encoder.config().d_model;
  for (std::size_t i = 0; i < examples.size(); ++i)
    c.entries.push_back({examples[i].id, std::vector<double>(feats.row(i).begin(), feats.row(i).end())});
  c.validate();
  if (!out.empty()) c.save(out);
  return c;
}

inline int argmax_label(double p_machine, double p_human) { return p_human > p_machine ? 1 : 0; }

inline double accuracy_of(const Matrix& probs, std::span<const int> labels) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += argmax_label(probs(i, 0), probs(i, 1)) == labels[i];
  return labels.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(labels.size());
}

// Two-class softmax objective over [n x 2] logits.
struct SoftmaxObjective {
  static Var loss(const Var& logits, std::span<const int> labels) { return softmax_cross_entropy(logits, labels); }
  static int label(const Matrix& logits, std::size_t r) { return argmax_label(logits(r, 0), logits(r, 1)); }
};

// Shared mini-batch loop: per epoch a seeded shuffle, ceil(N / batch) AdamW
// steps, and one metrics row with the size-weighted mean batch loss and the
// running accuracy. `step_fn(indices)` returns the batch logits.
template <typename Objective, typename StepFn, typename EvalFn>
MetricsLog run_epochs(std::size_t n, std::span<const int> labels, const TrainConfig& cfg, const ParameterRefs& params,
                      StepFn&& step_fn, EvalFn&& validation_fn) {
  cfg.validate();
  MetricsLog log;
  if (cfg.epochs == 0 || n == 0) return log;
  AdamW opt(cfg);
  std::vector<std::size_t> order(n);
  std::vector<int> batch_labels;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, epoch));
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      batch_labels.clear();
      for (auto i : idx) batch_labels.push_back(labels[i]);
      zero_grads(params);
      Var logits = step_fn(idx);
      Var loss = Objective::loss(logits, batch_labels);
      loss.backward();
      opt.step(params);
      loss_sum += loss.item() * static_cast<double>(idx.size());
      for (std::size_t r = 0; r < idx.size(); ++r) hits += Objective::label(logits.value(), r) == batch_labels[r];
    }
    log.push_back({epoch, "train", loss_sum / static_cast<double>(n), static_cast<double>(hits) / static_cast<double>(n)});
    if (auto v = validation_fn()) {
      v->epoch = epoch;
      log.push_back(*v);
    }
  }
  return log;
}

inline std::optional<MetricsRow> validation_row(const Matrix& probs, std::span<const int> labels) {
  if (labels.empty()) return std::nullopt;
  return MetricsRow{0, "validation", cross_entropy(probs, labels), accuracy_of(probs, labels)};
}

inline void check_alignment(std::size_t rows, std::span<const int> labels, const char* what) {
  if (rows != labels.size()) {
    throw ValidationError(std::string(what) + ": " + std::to_string(labels.size()) + " labels for " +
                          std::to_string(rows) + " examples");
  }
}

// Trains only the head on fixed [CLS] vectors.
inline MetricsLog train_head(Head& head, const EmbeddingCache& cache, std::span<const int> labels,
                             const TrainConfig& cfg, const EmbeddingCache* val_cache = nullptr,
                             std::span<const int> val_labels = {}) {
  check_alignment(cache.size(), labels, "train_head");
  check_labels(cache.size(), labels, 2);
  if (cache.dim != head.d_model()) throw DimensionError("cache dim does not match head input size");
  if (val_cache) check_alignment(val_cache->size(), val_labels, "train_head validation");
  const Matrix X = cache.as_matrix();
  const std::optional<Matrix> Xv = val_cache ? std::optional<Matrix>(val_cache->as_matrix()) : std::nullopt;
  Matrix batch;
  return run_epochs<SoftmaxObjective>(
      cache.size(), labels, cfg, head.refs(),
      [&](std::span<const std::size_t> idx) {
        batch = Matrix(idx.size(), X.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) std::copy(X.row(idx[r]).begin(), X.row(idx[r]).end(), batch.row(r).begin());
        return head.logits(Var::constant(batch));
      },
      [&]() -> std::optional<MetricsRow> {
        if (!Xv) return std::nullopt;
        return validation_row(head.proba(*Xv), val_labels);
      });
}

// Raw [N x 2] head logits.
inline Matrix predict_logits(const WeakLearner& learner, std::span<const std::string> texts, const Vocabulary& vocab) {
  if (!learner.encoder) throw StateError("learner " + learner.name + " has no encoder; predict from its cache instead");
  if (texts.empty()) return Matrix(0, 2);
  auto seqs = encode_all(texts, vocab, learner.max_len);
  return learner.head.logits(cls_features(*learner.encoder, seqs));
}

inline Matrix predict_proba(const WeakLearner& learner, std::span<const std::string> texts, const Vocabulary& vocab) {
  return softmax_rows(predict_logits(learner, texts, vocab));
}

inline Matrix predict_proba(const Head& head, const EmbeddingCache& cache) { return head.proba(cache.as_matrix()); }

// Encoder and head parameters, encoder first.
inline ParameterRefs trainable_parameters(WeakLearner& learner) {
  if (!learner.encoder) throw StateError("learner " + learner.name + " has no encoder");
  ParameterRefs params = learner.encoder->parameters();
  for (Parameter* p : learner.head.refs()) params.push_back(p);
  return params;
}

inline Var batch_logits(const WeakLearner& learner, std::span<const TokenSequence> batch) {
  if (!learner.encoder) throw StateError("learner " + learner.name + " has no encoder");
  return learner.head.logits(extract_cls(learner.encoder->forward(trim_padding(batch))));
}

// Mean cross-entropy of the full text-to-label path on one batch.
inline Var end_to_end_loss(const WeakLearner& learner, std::span<const TokenSequence> batch,
                           std::span<const int> labels) {
  return softmax_cross_entropy(batch_logits(learner, batch), labels);
}

// Trains the encoder and head jointly.
inline MetricsLog fine_tune_end_to_end(WeakLearner& learner, std::span<const LabeledExample> train,
                                       const Vocabulary& vocab, const TrainConfig& cfg,
                                       std::span<const LabeledExample> validation = {}) {
  if (learner.mode != LearnerMode::end_to_end) throw StateError("fine_tune_end_to_end requires end_to_end mode");
  if (!learner.encoder) throw StateError("learner " + learner.name + " has no encoder");
  const auto labels = labels_of(train);
  const auto val_labels = labels_of(validation);
  const auto seqs = encode_all(texts_of(train), vocab, learner.max_len);
  const auto val_texts = texts_of(validation);
  std::vector<TokenSequence> batch;
  auto log = run_epochs<SoftmaxObjective>(
      seqs.size(), labels, cfg, trainable_parameters(learner),
      [&](std::span<const std::size_t> idx) {
        batch.clear();
        for (auto i : idx) batch.push_back(seqs[i]);
        return batch_logits(learner, batch);
      },
      [&]() -> std::optional<MetricsRow> {
        if (val_labels.empty()) return std::nullopt;
        return validation_row(predict_proba(learner, val_texts, vocab), val_labels);
      });
  learner.trained = true;
  return log;
}

// Frozen mode end to end: cache train/validation vectors, then fit the head.
inline MetricsLog train_frozen(WeakLearner& learner, std::span<const LabeledExample> train, const Vocabulary& vocab,
                               const TrainConfig& cfg, std::span<const LabeledExample> validation = {}) {
  if (learner.mode != LearnerMode::frozen_cached) throw StateError("train_frozen requires frozen_cached mode");
  const auto cache = cache_embeddings(train, *learner.encoder, vocab, learner.name, learner.max_len);
  const auto labels = labels_of(train);
  MetricsLog log;
  if (!validation.empty()) {
    const auto vcache = cache_embeddings(validation, *learner.encoder, vocab, learner.name, learner.max_len);
    const auto vlabels = labels_of(validation);
    log = train_head(learner.head, cache, labels, cfg, &vcache, vlabels);
  } else {
    log = train_head(learner.head, cache, labels, cfg);
  }
  learner.trained = true;
  return log;
}

}  // namespace stackdetect
