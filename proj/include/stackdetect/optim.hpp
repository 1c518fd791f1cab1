#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>

#include "stackdetect/autograd.hpp"
#include "stackdetect/errors.hpp"
#include "stackdetect/matrix.hpp"

namespace stackdetect {

// One optimizer/loop configuration shared by weak learners and the
// meta-learner. Defaults are the stock AdamW settings with 300 epochs and
// batches of 128.
struct TrainConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t epochs = 300;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr > 0.0)) throw ValidationError("lr must be > 0");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw ValidationError("beta1 must be in (0, 1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw ValidationError("beta2 must be in (0, 1)");
    if (!(eps > 0.0)) throw ValidationError("eps must be > 0");
    if (!(weight_decay >= 0.0)) throw ValidationError("weight_decay must be >= 0");
    if (batch_size == 0) throw ValidationError("batch_size must be >= 1");
  }
};

struct AdamWState {
  Matrix m;
  Matrix v;
  std::uint64_t step = 0;

  static AdamWState for_shape(const Matrix& like) {
    return {Matrix(like.rows(), like.cols()), Matrix(like.rows(), like.cols()), 0};
  }
};

// Decoupled weight decay: the decay term uses the pre-update value and never
// enters the moment estimates.
inline void adamw_step(Matrix& value, const Matrix& grad, AdamWState& state, const TrainConfig& cfg) {
  if (!value.same_shape(grad) || !value.same_shape(state.m) || !value.same_shape(state.v)) {
    throw DimensionError("adamw_step shape mismatch: value " + value.shape() + ", grad " + grad.shape() +
                         ", m " + state.m.shape() + ", v " + state.v.shape());
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < value.size(); ++i) {
    const double g = grad[i];
    double& m = state.m[i];
    double& v = state.v[i];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    const double m_hat = m / bc1;
    const double v_hat = v / bc2;
    const double w = value[i];
    value[i] = w - cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps) - cfg.lr * cfg.weight_decay * w;
  }
}

inline void adamw_step(Parameter& param, AdamWState& state, const TrainConfig& cfg) {
  adamw_step(param.value(), param.grad(), state, cfg);
  if (!param.value().all_finite()) throw NumericError("parameter " + param.name() + " became non-finite");
}

// Tracks one AdamWState per parameter name.
class AdamW {
 public:
  explicit AdamW(TrainConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  void step(const ParameterRefs& params) {
    for (Parameter* p : params) {
      auto it = states_.find(p->name());
      if (it == states_.end()) it = states_.emplace(p->name(), AdamWState::for_shape(p->value())).first;
      adamw_step(*p, it->second, cfg_);
    }
  }

  const TrainConfig& config() const { return cfg_; }
  const AdamWState* state(const std::string& name) const {
    auto it = states_.find(name);
    return it == states_.end() ? nullptr : &it->second;
  }

 private:
  TrainConfig cfg_;
  std::map<std::string, AdamWState> states_;
};

}  // namespace stackdetect
