#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "stackdetect/autograd.hpp"
#include "stackdetect/errors.hpp"

namespace stackdetect {

struct GradcheckCoordinate {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
  std::vector<GradcheckCoordinate> over_tolerance;  // every coordinate with rel_error > tol
};

inline double gradcheck_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

// Central difference of `loss` along one coordinate of `p`.
inline double numeric_partial(const std::function<Var()>& loss, Parameter& p, std::size_t index, double h) {
  if (!(h > 0.0)) throw ValidationError("gradcheck step h must be > 0");
  if (index >= p.value().size()) throw DimensionError("coordinate out of range for " + p.name());
  double& x = p.value()[index];
  const double orig = x;
  x = orig + h;
  const double up = loss().item();
  x = orig - h;
  const double down = loss().item();
  x = orig;
  if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("gradcheck: non-finite loss under perturbation");
  return (up - down) / (2.0 * h);
}

// Compares analytic gradients against central differences coordinate by
// coordinate. `loss` must rebuild the graph from the current parameter values
// on every call. Relative error uses max(|analytic|, |numeric|, 1e-8).
inline GradcheckResult gradcheck(const std::function<Var()>& loss, const ParameterRefs& params, double h = 1e-4,
                                 double tol = std::numeric_limits<double>::infinity()) {
  if (!(h > 0.0)) throw ValidationError("gradcheck step h must be > 0");
  zero_grads(params);
  Var l = loss();
  if (!std::isfinite(l.item())) throw NumericError("gradcheck: non-finite loss");
  l.backward();

  GradcheckResult res;
  for (Parameter* p : params) {
    const Matrix analytic = p->grad();
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      const double numeric = numeric_partial(loss, *p, i, h);
      const double rel = gradcheck_rel_error(analytic[i], numeric);
      ++res.coordinates;
      if (rel >= res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = p->name();
        res.worst_index = i;
        res.analytic = analytic[i];
        res.numeric = numeric;
      }
      if (rel > tol) res.over_tolerance.push_back({p->name(), i, analytic[i], numeric, rel});
    }
  }
  return res;
}

}  // namespace stackdetect
