#pragma once

// Stacking: each weak learner's [N x 2] prediction is concatenated in learner
// order into an [N x 2K] matrix, and a binary logistic regressor is trained on
// the training split's rows. Decision rule: label 1 iff sigmoid(w.x + b) > 0.5.

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stackdetect/autograd.hpp"
#include "stackdetect/classifier.hpp"
#include "stackdetect/errors.hpp"
#include "stackdetect/io.hpp"
#include "stackdetect/metrics.hpp"
#include "stackdetect/optim.hpp"

namespace stackdetect {

enum class FeatureSource { probabilities, logits };

inline std::string to_string(FeatureSource f) { return f == FeatureSource::logits ? "logits" : "probabilities"; }

inline FeatureSource parse_feature_source(const std::string& s) {
  if (s == "probabilities") return FeatureSource::probabilities;
  if (s == "logits") return FeatureSource::logits;
  throw ValidationError("unknown feature source '" + s + "'");
}

struct MetaFeatures {
  Matrix features;                      // [N x 2K]
  std::vector<std::string> model_order;
  FeatureSource source = FeatureSource::probabilities;

  std::size_t learners() const { return model_order.size(); }

  // Width 2K; in probability mode every entry lies in [0,1] and each
  // (2j, 2j+1) pair sums to 1.
  void validate() const {
    if (features.cols() != 2 * model_order.size()) {
      throw DimensionError("meta features have width " + std::to_string(features.cols()) + " for " +
                           std::to_string(model_order.size()) + " learners");
    }
    if (source != FeatureSource::probabilities) return;
    for (std::size_t r = 0; r < features.rows(); ++r)
      for (std::size_t j = 0; j < model_order.size(); ++j) {
        const double a = features(r, 2 * j), b = features(r, 2 * j + 1);
        if (a < 0.0 || a > 1.0 || b < 0.0 || b > 1.0 || std::abs(a + b - 1.0) > 1e-9) {
          throw ValidationError("meta feature pair " + std::to_string(j) + " at row " + std::to_string(r) +
                                " is not a probability pair");
        }
      }
  }
};

// Concatenates per-learner [N x 2] outputs column-wise in the given order.
inline MetaFeatures concat_predictions(std::span<const Matrix> per_learner, std::vector<std::string> names,
                                       FeatureSource source) {
  if (per_learner.empty()) throw ValidationError("stacking needs at least one learner");
  if (per_learner.size() != names.size()) throw ValidationError("learner names do not match prediction count");
  const std::size_t n = per_learner.front().rows();
  MetaFeatures mf{Matrix(n, 2 * per_learner.size()), std::move(names), source};
  for (std::size_t k = 0; k < per_learner.size(); ++k) {
    const Matrix& p = per_learner[k];
    if (p.rows() != n || p.cols() != 2) throw DimensionError("learner " + mf.model_order[k] + " output shape " + p.shape());
    for (std::size_t r = 0; r < n; ++r) {
      mf.features(r, 2 * k) = p(r, 0);
      mf.features(r, 2 * k + 1) = p(r, 1);
    }
  }
  mf.validate();
  return mf;
}

inline Matrix learner_outputs(const WeakLearner& learner, std::span<const std::string> texts, const Vocabulary& vocab,
                              FeatureSource source) {
  if (!learner.trained) throw StateError("learner " + learner.name + " is not trained");
  return source == FeatureSource::logits ? predict_logits(learner, texts, vocab) : predict_proba(learner, texts, vocab);
}

inline MetaFeatures build_meta_features(std::span<const WeakLearner> learners, std::span<const std::string> texts,
                                        const Vocabulary& vocab, FeatureSource source = FeatureSource::probabilities) {
  std::vector<Matrix> outs;
  std::vector<std::string> names;
  for (const auto& l : learners) {
    outs.push_back(learner_outputs(l, texts, vocab, source));
    names.push_back(l.name);
  }
  return concat_predictions(outs, std::move(names), source);
}

struct LogisticRegressor {
  Parameter w;  // [2K x 1]
  Parameter b;  // [1 x 1]
  bool trained = false;

  LogisticRegressor() = default;
  explicit LogisticRegressor(std::size_t width)
      : w("meta.w", Matrix(width, 1)), b("meta.b", Matrix(1, 1)) {}

  std::size_t width() const { return w.value().rows(); }
  ParameterRefs refs() { return {&w, &b}; }

  Var logits(const Var& x) const { return add_row(stackdetect::matmul(x, w.var()), b.var()); }

  // P(human) per row.
  std::vector<double> p_human(const Matrix& x) const {
    if (x.cols() != width()) {
      throw DimensionError("meta input width " + std::to_string(x.cols()) + " != " + std::to_string(width()));
    }
    Matrix z = logits(Var::constant(x)).value();
    std::vector<double> p(z.rows());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = sigmoid(z[i]);
    return p;
  }

  static int decide(double p_human) { return p_human > 0.5 ? 1 : 0; }
};

struct BinaryLogitObjective {
  static Var loss(const Var& z, std::span<const int> labels) { return bce_with_logits(z, labels); }
  static int label(const Matrix& z, std::size_t r) { return LogisticRegressor::decide(sigmoid(z[r])); }
};

struct MetaTrainResult {
  LogisticRegressor regressor;
  MetricsLog log;
};

// Binary cross-entropy with AdamW; the regressor starts at zero.
inline MetaTrainResult train_meta(const MetaFeatures& features, std::span<const int> labels, const TrainConfig& cfg,
                                  const MetaFeatures* validation = nullptr, std::span<const int> val_labels = {}) {
  features.validate();
  check_alignment(features.features.rows(), labels, "train_meta");
  check_labels(labels.size(), labels, 2);
  bool has0 = false, has1 = false;
  for (int y : labels) (y == 1 ? has1 : has0) = true;
  if (!has0) throw ValidationError("train_meta: labels contain no examples of class 0 (machine)");
  if (!has1) throw ValidationError("train_meta: labels contain no examples of class 1 (human)");
  if (validation) check_alignment(validation->features.rows(), val_labels, "train_meta validation");

  MetaTrainResult res{LogisticRegressor(features.features.cols()), {}};
  LogisticRegressor& reg = res.regressor;
  const Matrix& X = features.features;
  Matrix batch;
  res.log = run_epochs<BinaryLogitObjective>(
      X.rows(), labels, cfg, reg.refs(),
      [&](std::span<const std::size_t> idx) {
        batch = Matrix(idx.size(), X.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) std::copy(X.row(idx[r]).begin(), X.row(idx[r]).end(), batch.row(r).begin());
        return reg.logits(Var::constant(batch));
      },
      [&]() -> std::optional<MetricsRow> {
        if (!validation || val_labels.empty()) return std::nullopt;
        const auto p = reg.p_human(validation->features);
        double loss = 0.0;
        std::size_t hit = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
          const double q = val_labels[i] == 1 ? p[i] : 1.0 - p[i];
          loss -= std::log(std::max(q, 1e-300));
          hit += LogisticRegressor::decide(p[i]) == val_labels[i];
        }
        return MetricsRow{0, "validation", loss / static_cast<double>(p.size()),
                          static_cast<double>(hit) / static_cast<double>(p.size())};
      });
  reg.trained = true;
  return res;
}

struct Prediction {
  int label = 0;
  double p_human = 0.5;
};

inline std::vector<Prediction> meta_predict(const LogisticRegressor& reg, const MetaFeatures& features) {
  if (!reg.trained) throw StateError("meta-learner is not trained");
  std::vector<Prediction> out;
  for (double p : reg.p_human(features.features)) out.push_back({LogisticRegressor::decide(p), p});
  return out;
}

struct StackingEnsemble {
  std::vector<WeakLearner> learners;
  LogisticRegressor meta;
  FeatureSource feature_source = FeatureSource::probabilities;

  std::vector<std::string> model_order() const {
    std::vector<std::string> names;
    for (const auto& l : learners) names.push_back(l.name);
    return names;
  }

  nlohmann::json meta_json() const {
    std::vector<double> w(meta.w.value().data());
    return {{"version", 1},
            {"w", w},
            {"b", meta.b.value()[0]},
            {"feature_source", to_string(feature_source)},
            {"model_order", model_order()}};
  }
};

inline LogisticRegressor regressor_from_json(const nlohmann::json& j, std::vector<std::string>& model_order,
                                             FeatureSource& source) {
  try {
    auto w = j.at("w").get<std::vector<double>>();
    model_order = j.at("model_order").get<std::vector<std::string>>();
    source = parse_feature_source(j.at("feature_source"));
    if (w.size() != 2 * model_order.size()) throw DimensionError("meta w length does not equal 2 x learners");
    const std::size_t width = w.size();
    LogisticRegressor reg(width);
    reg.w.value() = Matrix(width, 1, std::move(w));
    reg.b.value() = Matrix(1, 1, j.at("b").get<double>());
    reg.trained = true;
    return reg;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed meta-regressor: ") + e.what());
  }
}

inline std::vector<Prediction> ensemble_predict(const StackingEnsemble& ens, std::span<const std::string> texts,
                                                const Vocabulary& vocab) {
  if (ens.learners.empty()) throw StateError("ensemble has no learners");
  if (!ens.meta.trained) throw StateError("ensemble meta-learner is not trained");
  if (texts.empty()) return {};
  return meta_predict(ens.meta, build_meta_features(ens.learners, texts, vocab, ens.feature_source));
}

inline std::vector<int> labels_of(std::span<const Prediction> preds) {
  std::vector<int> out;
  for (const auto& p : preds) out.push_back(p.label);
  return out;
}

// Fraction of exact label matches.
inline double evaluate(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.empty() || labels.empty()) throw ValidationError("evaluate needs nonempty inputs");
  if (predicted.size() != labels.size()) {
    throw ValidationError("evaluate: " + std::to_string(predicted.size()) + " predictions vs " +
                          std::to_string(labels.size()) + " labels");
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

inline std::vector<int> argmax_labels(const Matrix& probs) {
  std::vector<int> out(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) out[i] = argmax_label(probs(i, 0), probs(i, 1));
  return out;
}

}  // namespace stackdetect
