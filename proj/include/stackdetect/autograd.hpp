#pragma once

// Reverse-mode differentiation over Matrix values. Every forward op records a
// node holding its output and a closure that pushes the output gradient back
// into its parents. Ops are coarse (whole matrices, fused attention, fused
// softmax + cross-entropy) so a tape stays small.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stackdetect/errors.hpp"
#include "stackdetect/matrix.hpp"

namespace stackdetect {

namespace detail {

struct Node {
  Matrix value;
  Matrix grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Matrix& ensure_grad() {
    if (!grad.same_shape(value)) grad = Matrix(value.rows(), value.cols());
    return grad;
  }
};

}  // namespace detail

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  // Untracked constant.
  static Var constant(Matrix value) {
    auto n = std::make_shared<detail::Node>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  const Matrix& value() const { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  double item() const {
    if (node_->value.size() != 1) throw DimensionError("item() on non-scalar " + node_->value.shape());
    return node_->value[0];
  }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared() const { return node_; }

  // Seeds d(self)/d(self) = 1 and propagates to every tracked ancestor.
  void backward() const {
    if (node_->value.size() != 1) throw DimensionError("backward() needs a scalar, got " + node_->value.shape());
    if (!node_->requires_grad) return;
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    // iterative post-order DFS
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        detail::Node* p = n->parents[idx++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* n = *it;
      if (n->backward && n->grad.same_shape(n->value)) n->backward(*n);
    }
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Trainable leaf: a named value whose gradient accumulates across backward
// passes until zero_grad().
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Matrix value) : name_(std::move(name)), node_(std::make_shared<detail::Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = true;
    node_->grad = Matrix(node_->value.rows(), node_->value.cols());
  }

  // Copies are deep: a copied Parameter never aliases the original's storage.
  Parameter(const Parameter& other) : name_(other.name_) {
    if (other.node_) {
      node_ = std::make_shared<detail::Node>();
      node_->value = other.node_->value;
      node_->grad = other.node_->grad;
      node_->requires_grad = true;
    }
  }
  Parameter& operator=(const Parameter& other) {
    if (this != &other) *this = Parameter(other);
    return *this;
  }
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  const std::string& name() const { return name_; }
  Matrix& value() { return node_->value; }
  const Matrix& value() const { return node_->value; }
  Matrix& grad() { return node_->ensure_grad(); }
  const Matrix& grad() const { return node_->grad; }
  void zero_grad() { node_->ensure_grad().fill(0.0); }
  Var var() const { return Var(node_); }
  std::size_t size() const { return node_->value.size(); }

 private:
  std::string name_;
  std::shared_ptr<detail::Node> node_;
};

using ParameterRefs = std::vector<Parameter*>;

inline void zero_grads(const ParameterRefs& params) {
  for (Parameter* p : params) p->zero_grad();
}

inline std::size_t parameter_count(const ParameterRefs& params) {
  std::size_t n = 0;
  for (const Parameter* p : params) n += p->size();
  return n;
}

namespace detail {

inline Var make_op(Matrix value, std::vector<std::shared_ptr<Node>> parents, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

// out += a^T * b  (a: m x n, b: m x p, out: n x p)
inline void add_at_b(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t m = a.rows(), n = a.cols(), p = b.cols();
  for (std::size_t r = 0; r < m; ++r) {
    const double* arow = a.data().data() + r * n;
    const double* brow = b.data().data() + r * p;
    for (std::size_t i = 0; i < n; ++i) {
      const double ai = arow[i];
      if (ai == 0.0) continue;
      double* o = out.data().data() + i * p;
      for (std::size_t j = 0; j < p; ++j) o[j] += ai * brow[j];
    }
  }
}

// out += a * b^T  (a: m x p, b: n x p, out: m x n); b is transposed first so
// the inner loop is a contiguous axpy.
inline void add_a_bt(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t m = a.rows(), p = a.cols(), n = b.rows();
  std::vector<double> bt(p * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = 0; k < p; ++k) bt[k * n + j] = b.data()[j * p + k];
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data().data() + i * p;
    double* o = out.data().data() + i * n;
    for (std::size_t k = 0; k < p; ++k) {
      const double aik = arow[k];
      if (aik == 0.0) continue;
      const double* brow = bt.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += aik * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementary ops

inline Var matmul(const Var& a, const Var& b) {
  Matrix out = matmul(a.value(), b.value());
  auto an = a.shared(), bn = b.shared();
  return detail::make_op(std::move(out), {an, bn}, [an, bn](detail::Node& self) {
    if (an->requires_grad) detail::add_a_bt(self.grad, bn->value, an->ensure_grad());
    if (bn->requires_grad) detail::add_at_b(an->value, self.grad, bn->ensure_grad());
  });
}

inline Var add(const Var& a, const Var& b) {
  if (!a.value().same_shape(b.value())) {
    throw DimensionError("add shape mismatch: " + a.value().shape() + " vs " + b.value().shape());
  }
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  auto an = a.shared(), bn = b.shared();
  return detail::make_op(std::move(out), {an, bn}, [an, bn](detail::Node& self) {
    for (auto* p : {an.get(), bn.get()}) {
      if (!p->requires_grad) continue;
      Matrix& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

// a[n x c] + bias[1 x c] broadcast over rows.
inline Var add_row(const Var& a, const Var& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw DimensionError("add_row shape mismatch: " + a.value().shape() + " + " + bias.value().shape());
  }
  Matrix out = a.value();
  const std::size_t c = out.cols();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t j = 0; j < c; ++j) out(r, j) += bias.value()[j];
  auto an = a.shared(), bn = bias.shared();
  return detail::make_op(std::move(out), {an, bn}, [an, bn, c](detail::Node& self) {
    if (an->requires_grad) {
      Matrix& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      Matrix& g = bn->ensure_grad();
      for (std::size_t r = 0; r < self.grad.rows(); ++r)
        for (std::size_t j = 0; j < c; ++j) g[j] += self.grad(r, j);
    }
  });
}

inline Var scale(const Var& a, double s) {
  Matrix out = a.value();
  for (double& v : out.data()) v *= s;
  auto an = a.shared();
  return detail::make_op(std::move(out), {an}, [an, s](detail::Node& self) {
    Matrix& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  auto an = a.shared();
  return detail::make_op(Matrix(1, 1, s), {an}, [an](detail::Node& self) {
    Matrix& g = an->ensure_grad();
    for (double& v : g.data()) v += self.grad[0];
  });
}

inline constexpr double kInvSqrt2 = std::numbers::sqrt2 / 2.0;

// Exact (erf-based) GELU: x * Phi(x).
inline Var gelu(const Var& a) {
  Matrix out = a.value();
  for (double& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  auto an = a.shared();
  return detail::make_op(std::move(out), {an}, [an](detail::Node& self) {
    Matrix& g = an->ensure_grad();
    const Matrix& x = an->value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2));
      const double pdf = std::exp(-0.5 * x[i] * x[i]) * std::numbers::inv_sqrtpi * kInvSqrt2;
      g[i] += self.grad[i] * (cdf + x[i] * pdf);
    }
  });
}

// Row-wise layer normalization with population variance.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  const std::size_t n = x.rows(), d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw DimensionError("layer_norm length mismatch: x " + x.value().shape() + ", gain " + gain.value().shape() +
                         ", bias " + bias.value().shape());
  }
  if (!(eps > 0.0)) throw ValidationError("layer_norm eps must be > 0");
  Matrix normed(n, d);
  std::vector<double> inv_std(n);
  Matrix out(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = x.value().row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      normed(r, j) = (row[j] - mean) * inv_std[r];
      out(r, j) = normed(r, j) * gain.value()[j] + bias.value()[j];
    }
  }
  auto xn = x.shared(), gn = gain.shared(), bn = bias.shared();
  return detail::make_op(
      std::move(out), {xn, gn, bn},
      [xn, gn, bn, normed = std::move(normed), inv_std = std::move(inv_std), n, d](detail::Node& self) {
        const Matrix& dy = self.grad;
        if (gn->requires_grad || bn->requires_grad) {
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) {
              if (gn->requires_grad) gn->ensure_grad()[j] += dy(r, j) * normed(r, j);
              if (bn->requires_grad) bn->ensure_grad()[j] += dy(r, j);
            }
        }
        if (!xn->requires_grad) return;
        Matrix& dx = xn->ensure_grad();
        std::vector<double> dn(d);
        for (std::size_t r = 0; r < n; ++r) {
          double mean_dn = 0.0, mean_dn_n = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dn[j] = dy(r, j) * gn->value[j];
            mean_dn += dn[j];
            mean_dn_n += dn[j] * normed(r, j);
          }
          mean_dn /= static_cast<double>(d);
          mean_dn_n /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j)
            dx(r, j) += inv_std[r] * (dn[j] - mean_dn - normed(r, j) * mean_dn_n);
        }
      });
}

// Gathers table rows: out[i] = table[ids[i]].
inline Var embedding(const Var& table, std::span<const std::size_t> ids) {
  const std::size_t d = table.cols();
  Matrix out(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table.rows()) {
      throw ValidationError("embedding index " + std::to_string(ids[i]) + " out of range for table with " +
                            std::to_string(table.rows()) + " rows");
    }
    std::copy_n(table.value().row(ids[i]).begin(), d, out.row(i).begin());
  }
  auto tn = table.shared();
  return detail::make_op(std::move(out), {tn},
                         [tn, idx = std::vector<std::size_t>(ids.begin(), ids.end()), d](detail::Node& self) {
                           Matrix& g = tn->ensure_grad();
                           for (std::size_t i = 0; i < idx.size(); ++i)
                             for (std::size_t j = 0; j < d; ++j) g(idx[i], j) += self.grad(i, j);
                         });
}

inline Var select_rows(const Var& x, std::span<const std::size_t> rows) {
  return embedding(x, rows);
}

// Numerically stable row softmax on a plain matrix.
inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto in = logits.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double s = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) s += (o[j] = std::exp(in[j] - mx));
    for (double& v : o) v /= s;
  }
  return out;
}

inline Var softmax_rows(const Var& logits) {
  Matrix out = softmax_rows(logits.value());
  auto ln = logits.shared();
  return detail::make_op(out, {ln}, [ln, p = out](detail::Node& self) {
    Matrix& g = ln->ensure_grad();
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < p.cols(); ++j) dot += self.grad(r, j) * p(r, j);
      for (std::size_t j = 0; j < p.cols(); ++j) g(r, j) += p(r, j) * (self.grad(r, j) - dot);
    }
  });
}

inline void check_labels(std::size_t rows, std::span<const int> labels, int n_classes) {
  if (rows != labels.size()) {
    throw ValidationError("label count " + std::to_string(labels.size()) + " does not match " + std::to_string(rows) +
                          " rows");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes) {
      throw ValidationError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                            " outside [0, " + std::to_string(n_classes - 1) + "]");
    }
  }
}

// Mean negative log-likelihood of the true class given probability rows.
inline double cross_entropy(const Matrix& probs, std::span<const int> labels) {
  check_labels(probs.rows(), labels, static_cast<int>(probs.cols()));
  if (labels.empty()) return 0.0;
  double loss = 0.0;
  for (std::size_t r = 0; r < probs.rows(); ++r) loss -= std::log(probs(r, static_cast<std::size_t>(labels[r])));
  return loss / static_cast<double>(labels.size());
}

// Fused softmax + cross-entropy on logits; backward is (p - onehot) / N.
inline Var softmax_cross_entropy(const Var& logits, std::span<const int> labels) {
  const std::size_t n = logits.rows(), c = logits.cols();
  check_labels(n, labels, static_cast<int>(c));
  if (n == 0) throw ValidationError("softmax_cross_entropy on empty batch");
  Matrix p = softmax_rows(logits.value());
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    auto row = logits.value().row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    loss -= row[static_cast<std::size_t>(labels[r])] - mx - std::log(s);
  }
  loss /= static_cast<double>(n);
  auto ln = logits.shared();
  return detail::make_op(Matrix(1, 1, loss), {ln},
                         [ln, p = std::move(p), y = std::vector<int>(labels.begin(), labels.end()), n, c](
                             detail::Node& self) {
                           Matrix& g = ln->ensure_grad();
                           const double s = self.grad[0] / static_cast<double>(n);
                           for (std::size_t r = 0; r < n; ++r)
                             for (std::size_t j = 0; j < c; ++j)
                               g(r, j) += s * (p(r, j) - (static_cast<int>(j) == y[r] ? 1.0 : 0.0));
                         });
}

inline double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

// Mean binary cross-entropy on logits z[n x 1] with labels in {0,1}.
inline Var bce_with_logits(const Var& z, std::span<const int> labels) {
  if (z.cols() != 1) throw DimensionError("bce_with_logits expects a column, got " + z.value().shape());
  check_labels(z.rows(), labels, 2);
  const std::size_t n = z.rows();
  if (n == 0) throw ValidationError("bce_with_logits on empty batch");
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = z.value()[i];
    // log(1 + e^v) - y v, stable form
    loss += std::max(v, 0.0) - v * labels[i] + std::log1p(std::exp(-std::abs(v)));
  }
  loss /= static_cast<double>(n);
  auto zn = z.shared();
  return detail::make_op(Matrix(1, 1, loss), {zn},
                         [zn, y = std::vector<int>(labels.begin(), labels.end()), n](detail::Node& self) {
                           Matrix& g = zn->ensure_grad();
                           const double s = self.grad[0] / static_cast<double>(n);
                           for (std::size_t i = 0; i < n; ++i) g[i] += s * (sigmoid(zn->value[i]) - y[i]);
                         });
}

// Shapes for batched multi-head self-attention over B sequences of length L.
struct AttentionShape {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::size_t n_heads = 0;
  // Only used with a relative bias table: offset (j - i) maps to column
  // (j - i + max_len - 1) of the [n_heads x (2 max_len - 1)] table.
  std::size_t max_len = 0;
  // Absolute position of token 0; only offsets enter the bias, so any shift
  // with position_offset + seq_len <= max_len yields the same scores.
  std::size_t position_offset = 0;
};

inline std::size_t relative_bias_column(std::size_t query_pos, std::size_t key_pos, std::size_t max_len) {
  return key_pos + max_len - 1 - query_pos;
}

// q, k, v: [(B*L) x d]. key_mask: B*L entries, 1 = attend, 0 = padding
// (excluded from the softmax, i.e. score -inf). Optional rel_bias adds a
// learned per-head scalar depending only on the key-query offset.
inline Var multi_head_attention(const Var& q, const Var& k, const Var& v, std::span<const double> key_mask,
                                const AttentionShape& shape, const std::optional<Var>& rel_bias = std::nullopt) {
  const std::size_t B = shape.batch, L = shape.seq_len, H = shape.n_heads, d = q.cols();
  if (H == 0 || d % H != 0) throw DimensionError("d_model " + std::to_string(d) + " not divisible by heads");
  for (const Var* m : {&q, &k, &v}) {
    if (m->rows() != B * L || m->cols() != d) {
      throw DimensionError("attention input shape " + m->value().shape() + " expected " +
                           Matrix::shape_string(B * L, d));
    }
  }
  if (key_mask.size() != B * L) throw DimensionError("attention mask length mismatch");
  if (rel_bias) {
    if (shape.max_len < L + shape.position_offset || rel_bias->rows() != H || rel_bias->cols() != 2 * shape.max_len - 1) {
      throw DimensionError("relative bias table shape " + rel_bias->value().shape() + " invalid for " +
                           std::to_string(H) + " heads, max_len " + std::to_string(shape.max_len));
    }
  }
  const std::size_t dh = d / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t max_len = shape.max_len, p0 = shape.position_offset;
  // probs[b][h] is L x L, stored flat.
  std::vector<double> probs(B * H * L * L, 0.0);
  Matrix out(B * L, d);
  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  std::vector<double> scores(L);
  for (std::size_t b = 0; b < B; ++b) {
    const double* mask = key_mask.data() + b * L;
    for (std::size_t h = 0; h < H; ++h) {
      double* P = probs.data() + (b * H + h) * L * L;
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < L; ++i) {
        const double* qi = (Q.data().data() + (b * L + i) * d + c0);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < L; ++j) {
          if (mask[j] == 0.0) continue;
          const double* kj = (K.data().data() + (b * L + j) * d + c0);
          double s = 0.0;
          for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
          s *= inv_sqrt;
          if (rel_bias) s += rel_bias->value()(h, relative_bias_column(p0 + i, p0 + j, max_len));
          scores[j] = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < L; ++j) {
          if (mask[j] == 0.0) continue;
          z += (P[i * L + j] = std::exp(scores[j] - mx));
        }
        double* o = (out.data().data() + (b * L + i) * d + c0);
        for (std::size_t j = 0; j < L; ++j) {
          if (mask[j] == 0.0) continue;
          const double p = (P[i * L + j] /= z);
          const double* vj = (V.data().data() + (b * L + j) * d + c0);
          for (std::size_t t = 0; t < dh; ++t) o[t] += p * vj[t];
        }
      }
    }
  }
  auto qn = q.shared(), kn = k.shared(), vn = v.shared();
  std::vector<std::shared_ptr<detail::Node>> parents{qn, kn, vn};
  std::shared_ptr<detail::Node> rn = rel_bias ? rel_bias->shared() : nullptr;
  if (rn) parents.push_back(rn);
  return detail::make_op(
      std::move(out), std::move(parents),
      [qn, kn, vn, rn, probs = std::move(probs), B, L, H, d, dh, inv_sqrt, max_len, p0](detail::Node& self) {
        const Matrix& dO = self.grad;
        Matrix& dQ = qn->ensure_grad();
        Matrix& dK = kn->ensure_grad();
        Matrix& dV = vn->ensure_grad();
        Matrix* dR = rn && rn->requires_grad ? &rn->ensure_grad() : nullptr;
        const Matrix& Q = qn->value;
        const Matrix& K = kn->value;
        const Matrix& V = vn->value;
        std::vector<double> dP(L);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            const double* P = probs.data() + (b * H + h) * L * L;
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < L; ++i) {
              const double* doi = (dO.data().data() + (b * L + i) * d + c0);
              double dot = 0.0;
              for (std::size_t j = 0; j < L; ++j) {
                const double p = P[i * L + j];
                if (p == 0.0) {
                  dP[j] = 0.0;
                  continue;
                }
                const double* vj = (V.data().data() + (b * L + j) * d + c0);
                double* dvj = (dV.data().data() + (b * L + j) * d + c0);
                double s = 0.0;
                for (std::size_t t = 0; t < dh; ++t) {
                  s += doi[t] * vj[t];
                  dvj[t] += p * doi[t];
                }
                dP[j] = s;
                dot += p * s;
              }
              const double* qi = (Q.data().data() + (b * L + i) * d + c0);
              double* dqi = (dQ.data().data() + (b * L + i) * d + c0);
              for (std::size_t j = 0; j < L; ++j) {
                const double p = P[i * L + j];
                if (p == 0.0) continue;
                const double ds = p * (dP[j] - dot);
                if (dR) (*dR)(h, relative_bias_column(p0 + i, p0 + j, max_len)) += ds;
                const double* kj = (K.data().data() + (b * L + j) * d + c0);
                double* dkj = (dK.data().data() + (b * L + j) * d + c0);
                const double g = ds * inv_sqrt;
                for (std::size_t t = 0; t < dh; ++t) {
                  dqi[t] += g * kj[t];
                  dkj[t] += g * qi[t];
                }
              }
            }
          }
        }
      });
}

}  // namespace stackdetect
