#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pseg/common.hpp"
#include "pseg/rng.hpp"

namespace pseg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Tape construction can be switched off for inference and for finite
// difference probes; ops then produce plain constants.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGrad {
  NoGrad() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGrad() { grad_mode() = prev; }
  NoGrad(const NoGrad&) = delete;
  bool prev;
};

// Dense tensor participating in a reverse-mode computation graph. The
// handle is a shared pointer to the node, so copies alias the same storage.
// Element type is float for training and double for gradient verification.
template <typename T>
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // sized on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;
  };

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from_raw(std::move(shape), {}, T(0));
  }
  static Tensor full(Shape shape, T v) {
    return from_raw(std::move(shape), {}, v);
  }
  static Tensor scalar(T v) { return from(Shape{1}, std::vector<T>{v}); }

  static Tensor from(Shape shape, std::vector<T> data) {
    if (shape_numel(shape) != data.size())
      throw ShapeError(cat("tensor data length ", data.size(),
                           " does not match shape ", shape_str(shape)));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }

  static Tensor randn(Shape shape, Rng& rng, T stddev) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
    return from(std::move(shape), std::move(v));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node()->shape; }
  std::size_t ndim() const { return node()->shape.size(); }
  std::size_t dim(std::size_t i) const { return node()->shape.at(i); }
  std::size_t numel() const { return node()->value.size(); }

  const std::vector<T>& value() const { return node()->value; }
  std::vector<T>& value() { return node()->value; }
  const std::vector<T>& grad() const { return node()->grad; }

  bool requires_grad() const { return node()->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node()->requires_grad = b;
    return *this;
  }

  T item() const {
    if (numel() != 1)
      throw ContractError(cat("item() on non-scalar tensor ",
                              shape_str(shape())));
    return node()->value[0];
  }

  T at(std::size_t i) const { return node()->value.at(i); }
  T at(std::size_t i, std::size_t j) const {
    return node()->value.at(i * dim(1) + j);
  }

  bool all_finite() const {
    for (T v : node()->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  void zero_grad() { node()->grad.assign(node()->value.size(), T(0)); }
  void clear_grad() { node()->grad.clear(); }

  // grad accumulation target; sized lazily
  std::vector<T>& grad_buffer() {
    auto& g = node()->grad;
    if (g.size() != node()->value.size()) g.assign(node()->value.size(), T(0));
    return g;
  }

  std::shared_ptr<Node> node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  static Tensor from_raw(Shape shape, std::vector<T> data, T fill) {
    auto n = std::make_shared<Node>();
    std::size_t count = shape_numel(shape);
    n->shape = std::move(shape);
    if (data.empty())
      n->value.assign(count, fill);
    else
      n->value = std::move(data);
    return Tensor(std::move(n));
  }

  const std::shared_ptr<Node>& node() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return node_;
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename T>
std::vector<T>& grad_of(typename Tensor<T>::Node& n) {
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), T(0));
  return n.grad;
}

// Builds the result node and wires the tape when any input needs it.
template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> value,
                  std::initializer_list<Tensor<T>> inputs,
                  std::function<void(typename Tensor<T>::Node&)> backprop) {
  auto out = Tensor<T>::from(std::move(shape), std::move(value));
  if (!grad_mode()) return out;
  bool needed = false;
  for (const auto& in : inputs)
    if (in.requires_grad()) needed = true;
  if (!needed) return out;
  auto n = out.node_ptr();
  n->requires_grad = true;
  for (const auto& in : inputs) n->parents.push_back(in.node_ptr());
  n->backprop = std::move(backprop);
  return out;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(cat(op, ": shapes ", shape_str(a.shape()), " and ",
                         shape_str(b.shape()), " differ"));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> v(a.numel());
  const auto &av = a.value(), &bv = b.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] + bv[i];
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_op<T>(
      a.shape(), std::move(v), {a, b},
      [an, bn](typename Tensor<T>::Node& self) {
        if (an->requires_grad) {
          auto& g = detail::grad_of<T>(*an);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
          auto& g = detail::grad_of<T>(*bn);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> v(a.numel());
  const auto &av = a.value(), &bv = b.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] - bv[i];
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_op<T>(
      a.shape(), std::move(v), {a, b},
      [an, bn](typename Tensor<T>::Node& self) {
        if (an->requires_grad) {
          auto& g = detail::grad_of<T>(*an);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
          auto& g = detail::grad_of<T>(*bn);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> v(a.numel());
  const auto &av = a.value(), &bv = b.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] * bv[i];
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_op<T>(
      a.shape(), std::move(v), {a, b},
      [an, bn](typename Tensor<T>::Node& self) {
        if (an->requires_grad) {
          auto& g = detail::grad_of<T>(*an);
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
          auto& g = detail::grad_of<T>(*bn);
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * an->value[i];
        }
      });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "div");
  std::vector<T> v(a.numel());
  const auto &av = a.value(), &bv = b.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] / bv[i];
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_op<T>(
      a.shape(), std::move(v), {a, b},
      [an, bn](typename Tensor<T>::Node& self) {
        if (an->requires_grad) {
          auto& g = detail::grad_of<T>(*an);
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] / bn->value[i];
        }
        if (bn->requires_grad) {
          auto& g = detail::grad_of<T>(*bn);
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] -= self.grad[i] * an->value[i] / (bn->value[i] * bn->value[i]);
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double c) {
  std::vector<T> v(a.numel());
  const auto& av = a.value();
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = av[i] * static_cast<T>(c);
  auto an = a.node_ptr();
  return detail::make_op<T>(a.shape(), std::move(v), {a},
                            [an, c](typename Tensor<T>::Node& self) {
                              if (!an->requires_grad) return;
                              auto& g = detail::grad_of<T>(*an);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                g[i] += self.grad[i] * static_cast<T>(c);
                            });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, -1.0);
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, double c) {
  std::vector<T> v(a.numel());
  const auto& av = a.value();
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = av[i] + static_cast<T>(c);
  auto an = a.node_ptr();
  return detail::make_op<T>(a.shape(), std::move(v), {a},
                            [an](typename Tensor<T>::Node& self) {
                              if (!an->requires_grad) return;
                              auto& g = detail::grad_of<T>(*an);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                g[i] += self.grad[i];
                            });
}

// ---------------------------------------------------------------------------
// unary nonlinearities

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  const auto& av = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] > 0 ? av[i] : T(0);
  auto an = a.node_ptr();
  return detail::make_op<T>(a.shape(), std::move(v), {a},
                            [an](typename Tensor<T>::Node& self) {
                              if (!an->requires_grad) return;
                              auto& g = detail::grad_of<T>(*an);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                if (an->value[i] > 0) g[i] += self.grad[i];
                            });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  std::vector<T> v(a.numel());
  const auto& av = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) {
    double x = static_cast<double>(av[i]);
    v[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
  }
  auto an = a.node_ptr();
  return detail::make_op<T>(
      a.shape(), std::move(v), {a},
      [an](typename Tensor<T>::Node& self) {
        if (!an->requires_grad) return;
        auto& g = detail::grad_of<T>(*an);
        for (std::size_t i = 0; i < g.size(); ++i) {
          double x = static_cast<double>(an->value[i]);
          double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
          double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
          g[i] += self.grad[i] * static_cast<T>(cdf + x * pdf);
        }
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  const auto& av = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) {
    double x = static_cast<double>(av[i]);
    double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                      : std::exp(x) / (1.0 + std::exp(x));
    v[i] = static_cast<T>(s);
  }
  auto an = a.node_ptr();
  auto vals = v;  // forward output reused in backward
  return detail::make_op<T>(
      a.shape(), std::move(v), {a},
      [an, vals = std::move(vals)](typename Tensor<T>::Node& self) {
        if (!an->requires_grad) return;
        auto& g = detail::grad_of<T>(*an);
        for (std::size_t i = 0; i < g.size(); ++i)
          g[i] += self.grad[i] * vals[i] * (T(1) - vals[i]);
      });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  std::vector<T> v(a.numel());
  const auto& av = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (av[i] < 0)
      throw NumericError(cat("sqrt of negative value ", av[i]));
    v[i] = std::sqrt(av[i]);
  }
  auto an = a.node_ptr();
  auto vals = v;
  return detail::make_op<T>(
      a.shape(), std::move(v), {a},
      [an, vals = std::move(vals)](typename Tensor<T>::Node& self) {
        if (!an->requires_grad) return;
        auto& g = detail::grad_of<T>(*an);
        for (std::size_t i = 0; i < g.size(); ++i)
          g[i] += self.grad[i] / (T(2) * vals[i]);
      });
}

// ---------------------------------------------------------------------------
// matrix ops

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError(cat("matmul: incompatible shapes ", shape_str(a.shape()),
                         " and ", shape_str(b.shape())));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> v(m * n, T(0));
  {
    const T* __restrict ap = a.value().data();
    const T* __restrict bp = b.value().data();
    T* __restrict cp = v.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = ap[i * k + p];
        const T* brow = bp + p * n;
        T* crow = cp + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
  }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_op<T>(
      Shape{m, n}, std::move(v), {a, b},
      [an, bn, m, k, n](typename Tensor<T>::Node& self) {
        const T* __restrict dc = self.grad.data();
        if (an->requires_grad) {
          // dA += dC * B^T
          T* __restrict da = detail::grad_of<T>(*an).data();
          const T* __restrict bp = bn->value.data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              const T dij = dc[i * n + j];
              const T* bcol = bp + j;
              T* darow = da + i * k;
              for (std::size_t p = 0; p < k; ++p)
                darow[p] += dij * bcol[p * n];
            }
        }
        if (bn->requires_grad) {
          // dB += A^T * dC
          T* __restrict db = detail::grad_of<T>(*bn).data();
          const T* __restrict ap = an->value.data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const T aip = ap[i * k + p];
              const T* dcrow = dc + i * n;
              T* dbrow = db + p * n;
              for (std::size_t j = 0; j < n; ++j) dbrow[j] += aip * dcrow[j];
            }
        }
      });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.ndim() != 2)
    throw ShapeError(cat("transpose expects a matrix, got ",
                         shape_str(a.shape())));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> v(r * c);
  const auto& av = a.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[j * r + i] = av[i * c + j];
  auto an = a.node_ptr();
  return detail::make_op<T>(
      Shape{c, r}, std::move(v), {a},
      [an, r, c](typename Tensor<T>::Node& self) {
        if (!an->requires_grad) return;
        auto& g = detail::grad_of<T>(*an);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            g[i * c + j] += self.grad[j * r + i];
      });
}

// bias broadcast over rows: a[r x c] + v[c]
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& vec) {
  if (a.ndim() != 2 || vec.numel() != a.dim(1))
    throw ShapeError(cat("add_rowvec: ", shape_str(a.shape()), " with ",
                         shape_str(vec.shape())));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> v(r * c);
  const auto &av = a.value(), &bv = vec.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] = av[i * c + j] + bv[j];
  auto an = a.node_ptr();
  auto vn = vec.node_ptr();
  return detail::make_op<T>(
      a.shape(), std::move(v), {a, vec},
      [an, vn, r, c](typename Tensor<T>::Node& self) {
        if (an->requires_grad) {
          auto& g = detail::grad_of<T>(*an);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (vn->requires_grad) {
          auto& g = detail::grad_of<T>(*vn);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
        }
      });
}

// ---------------------------------------------------------------------------
// normalization / attention pieces

// Row-stabilized softmax. Rejects NaN input; -inf entries get weight zero.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  if (a.ndim() != 2)
    throw ShapeError(cat("softmax_rows expects a matrix, got ",
                         shape_str(a.shape())));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> v(r * c);
  const auto& av = a.value();
  for (std::size_t i = 0; i < r; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      T x = av[i * c + j];
      if (std::isnan(static_cast<double>(x)))
        throw NumericError(cat("softmax_rows: NaN input at row ", i));
      mx = std::max(mx, x);
    }
    if (!std::isfinite(static_cast<double>(mx)))
      throw NumericError(cat("softmax_rows: row ", i, " has no finite entry"));
    T sum = 0;
    for (std::size_t j = 0; j < c; ++j) {
      T e = std::exp(av[i * c + j] - mx);
      v[i * c + j] = e;
      sum += e;
    }
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] /= sum;
  }
  auto an = a.node_ptr();
  auto vals = v;
  return detail::make_op<T>(
      a.shape(), std::move(v), {a},
      [an, vals = std::move(vals), r, c](typename Tensor<T>::Node& self) {
        if (!an->requires_grad) return;
        auto& g = detail::grad_of<T>(*an);
        for (std::size_t i = 0; i < r; ++i) {
          T dot = 0;
          for (std::size_t j = 0; j < c; ++j)
            dot += self.grad[i * c + j] * vals[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            g[i * c + j] += vals[i * c + j] * (self.grad[i * c + j] - dot);
        }
      });
}

// Normalizes each trailing-dimension vector to zero mean / unit variance,
// then applies the affine gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, double eps = 1e-5) {
  if (x.ndim() == 0) throw ShapeError("layer_norm on empty shape");
  const std::size_t d = x.dim(x.ndim() - 1);
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError(cat("layer_norm: last dim ", d, " but gain ",
                         shape_str(gain.shape()), ", bias ",
                         shape_str(bias.shape())));
  const std::size_t rows = x.numel() / std::max<std::size_t>(d, 1);
  std::vector<T> v(x.numel());
  std::vector<T> inv_std(rows), means(rows);
  const auto &xv = x.value(), &gv = gain.value(), &bv = bias.value();
  for (std::size_t i = 0; i < rows; ++i) {
    const T* row = xv.data() + i * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      T t = row[j] - mean;
      var += t * t;
    }
    var /= static_cast<T>(d);
    T istd = T(1) / std::sqrt(var + static_cast<T>(eps));
    means[i] = mean;
    inv_std[i] = istd;
    for (std::size_t j = 0; j < d; ++j)
      v[i * d + j] = (row[j] - mean) * istd * gv[j] + bv[j];
  }
  auto xn = x.node_ptr();
  auto gn = gain.node_ptr();
  auto bn = bias.node_ptr();
  return detail::make_op<T>(
      x.shape(), std::move(v), {x, gain, bias},
      [xn, gn, bn, rows, d, means = std::move(means),
       inv_std = std::move(inv_std)](typename Tensor<T>::Node& self) {
        for (std::size_t i = 0; i < rows; ++i) {
          const T* xrow = xn->value.data() + i * d;
          const T* grow = self.grad.data() + i * d;
          const T mean = means[i], istd = inv_std[i];
          if (gn->requires_grad || bn->requires_grad) {
            auto* gg = gn->requires_grad ? detail::grad_of<T>(*gn).data()
                                         : nullptr;
            auto* bg = bn->requires_grad ? detail::grad_of<T>(*bn).data()
                                         : nullptr;
            for (std::size_t j = 0; j < d; ++j) {
              T xhat = (xrow[j] - mean) * istd;
              if (gg) gg[j] += grow[j] * xhat;
              if (bg) bg[j] += grow[j];
            }
          }
          if (xn->requires_grad) {
            auto& xg = detail::grad_of<T>(*xn);
            // dxhat_j = grow_j * gain_j; then standard layer-norm backward
            T sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (std::size_t j = 0; j < d; ++j) {
              T xhat = (xrow[j] - mean) * istd;
              T dxhat = grow[j] * gn->value[j];
              sum_dxhat += dxhat;
              sum_dxhat_xhat += dxhat * xhat;
            }
            const T inv_d = T(1) / static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              T xhat = (xrow[j] - mean) * istd;
              T dxhat = grow[j] * gn->value[j];
              xg[i * d + j] += istd * (dxhat - inv_d * sum_dxhat -
                                       inv_d * xhat * sum_dxhat_xhat);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.value()) s += v;
  auto an = a.node_ptr();
  return detail::make_op<T>(Shape{1}, std::vector<T>{s}, {a},
                            [an](typename Tensor<T>::Node& self) {
                              if (!an->requires_grad) return;
                              auto& g = detail::grad_of<T>(*an);
                              for (auto& x : g) x += self.grad[0];
                            });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

template <typename T>
Tensor<T> row_sums(const Tensor<T>& a) {
  if (a.ndim() != 2)
    throw ShapeError(cat("row_sums expects a matrix, got ",
                         shape_str(a.shape())));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> v(r, T(0));
  const auto& av = a.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[i] += av[i * c + j];
  auto an = a.node_ptr();
  return detail::make_op<T>(Shape{r}, std::move(v), {a},
                            [an, r, c](typename Tensor<T>::Node& self) {
                              if (!an->requires_grad) return;
                              auto& g = detail::grad_of<T>(*an);
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < c; ++j)
                                  g[i * c + j] += self.grad[i];
                            });
}

// ---------------------------------------------------------------------------
// indexing / layout ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError(cat("reshape ", shape_str(a.shape()), " -> ",
                         shape_str(shape), " changes element count"));
  std::vector<T> v = a.value();
  auto an = a.node_ptr();
  return detail::make_op<T>(std::move(shape), std::move(v), {a},
                            [an](typename Tensor<T>::Node& self) {
                              if (!an->requires_grad) return;
                              auto& g = detail::grad_of<T>(*an);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                g[i] += self.grad[i];
                            });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::vector<std::size_t> idx) {
  if (a.ndim() != 2)
    throw ShapeError(cat("gather_rows expects a matrix, got ",
                         shape_str(a.shape())));
  const std::size_t r = a.dim(0), c = a.dim(1);
  for (auto i : idx)
    if (i >= r)
      throw ContractError(cat("gather_rows: index ", i, " out of range ", r));
  std::vector<T> v(idx.size() * c);
  const auto& av = a.value();
  for (std::size_t o = 0; o < idx.size(); ++o)
    std::copy_n(av.data() + idx[o] * c, c, v.data() + o * c);
  auto an = a.node_ptr();
  const std::size_t out_rows = idx.size();
  return detail::make_op<T>(
      Shape{out_rows, c}, std::move(v), {a},
      [an, idx = std::move(idx), c](typename Tensor<T>::Node& self) {
        if (!an->requires_grad) return;
        auto& g = detail::grad_of<T>(*an);
        for (std::size_t o = 0; o < idx.size(); ++o)
          for (std::size_t j = 0; j < c; ++j)
            g[idx[o] * c + j] += self.grad[o * c + j];
      });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t c0, std::size_t c1) {
  if (a.ndim() != 2 || c0 > c1 || c1 > a.dim(1))
    throw ShapeError(cat("slice_cols [", c0, ",", c1, ") of ",
                         shape_str(a.shape())));
  const std::size_t r = a.dim(0), c = a.dim(1), w = c1 - c0;
  std::vector<T> v(r * w);
  const auto& av = a.value();
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(av.data() + i * c + c0, w, v.data() + i * w);
  auto an = a.node_ptr();
  return detail::make_op<T>(
      Shape{r, w}, std::move(v), {a},
      [an, r, c, c0, w](typename Tensor<T>::Node& self) {
        if (!an->requires_grad) return;
        auto& g = detail::grad_of<T>(*an);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j)
            g[i * c + c0 + j] += self.grad[i * w + j];
      });
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError(cat("concat_rows: ", shape_str(a.shape()), " with ",
                         shape_str(b.shape())));
  const std::size_t ra = a.dim(0), rb = b.dim(0), c = a.dim(1);
  std::vector<T> v;
  v.reserve((ra + rb) * c);
  v.insert(v.end(), a.value().begin(), a.value().end());
  v.insert(v.end(), b.value().begin(), b.value().end());
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_op<T>(
      Shape{ra + rb, c}, std::move(v), {a, b},
      [an, bn, ra, rb, c](typename Tensor<T>::Node& self) {
        if (an->requires_grad) {
          auto& g = detail::grad_of<T>(*an);
          for (std::size_t i = 0; i < ra * c; ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
          auto& g = detail::grad_of<T>(*bn);
          for (std::size_t i = 0; i < rb * c; ++i)
            g[i] += self.grad[ra * c + i];
        }
      });
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(0) != b.dim(0))
    throw ShapeError(cat("concat_cols: ", shape_str(a.shape()), " with ",
                         shape_str(b.shape())));
  const std::size_t r = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  std::vector<T> v(r * (ca + cb));
  const auto &av = a.value(), &bv = b.value();
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(av.data() + i * ca, ca, v.data() + i * (ca + cb));
    std::copy_n(bv.data() + i * cb, cb, v.data() + i * (ca + cb) + ca);
  }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_op<T>(
      Shape{r, ca + cb}, std::move(v), {a, b},
      [an, bn, r, ca, cb](typename Tensor<T>::Node& self) {
        const std::size_t c = ca + cb;
        if (an->requires_grad) {
          auto& g = detail::grad_of<T>(*an);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < ca; ++j)
              g[i * ca + j] += self.grad[i * c + j];
        }
        if (bn->requires_grad) {
          auto& g = detail::grad_of<T>(*bn);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < cb; ++j)
              g[i * cb + j] += self.grad[i * c + ca + j];
        }
      });
}

// Repeats a [1 x c] row n times.
template <typename T>
Tensor<T> tile_rows(const Tensor<T>& a, std::size_t n) {
  if (a.ndim() != 2 || a.dim(0) != 1)
    throw ShapeError(cat("tile_rows expects [1 x c], got ",
                         shape_str(a.shape())));
  const std::size_t c = a.dim(1);
  std::vector<T> v(n * c);
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(a.value().data(), c, v.data() + i * c);
  auto an = a.node_ptr();
  return detail::make_op<T>(Shape{n, c}, std::move(v), {a},
                            [an, n, c](typename Tensor<T>::Node& self) {
                              if (!an->requires_grad) return;
                              auto& g = detail::grad_of<T>(*an);
                              for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t j = 0; j < c; ++j)
                                  g[j] += self.grad[i * c + j];
                            });
}

// [g*g x 4c] -> [(2g)*(2g) x c]: each input row expands to a 2x2 pixel
// block, the inverse layout of a stride-2 kernel-2 transposed convolution.
template <typename T>
Tensor<T> pixel_shuffle2(const Tensor<T>& a, std::size_t g) {
  if (a.ndim() != 2 || a.dim(0) != g * g || a.dim(1) % 4 != 0)
    throw ShapeError(cat("pixel_shuffle2: ", shape_str(a.shape()),
                         " with grid ", g));
  const std::size_t c = a.dim(1) / 4;
  const std::size_t g2 = 2 * g;
  std::vector<T> v(g2 * g2 * c);
  const auto& av = a.value();
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = 0; j < g; ++j)
      for (std::size_t sub = 0; sub < 4; ++sub) {
        const std::size_t oi = 2 * i + sub / 2, oj = 2 * j + sub % 2;
        const T* src = av.data() + (i * g + j) * 4 * c + sub * c;
        std::copy_n(src, c, v.data() + (oi * g2 + oj) * c);
      }
  auto an = a.node_ptr();
  return detail::make_op<T>(
      Shape{g2 * g2, c}, std::move(v), {a},
      [an, g, c](typename Tensor<T>::Node& self) {
        if (!an->requires_grad) return;
        auto& gr = detail::grad_of<T>(*an);
        const std::size_t g2 = 2 * g;
        for (std::size_t i = 0; i < g; ++i)
          for (std::size_t j = 0; j < g; ++j)
            for (std::size_t sub = 0; sub < 4; ++sub) {
              const std::size_t oi = 2 * i + sub / 2, oj = 2 * j + sub % 2;
              const T* src = self.grad.data() + (oi * g2 + oj) * c;
              T* dst = gr.data() + (i * g + j) * 4 * c + sub * c;
              for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
            }
      });
}

namespace detail {

struct BilinearTap {
  std::size_t idx;
  double wgt;
};

// Half-pixel aligned source taps for output pixel (oi, oj) of a 2x upsample.
inline std::array<BilinearTap, 4> bilinear2x_taps(std::size_t oi,
                                                  std::size_t oj,
                                                  std::size_t h,
                                                  std::size_t w) {
  auto src = [](std::size_t o) {
    return (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
  };
  auto clampi = [](long x, long hi) { return std::max(0L, std::min(x, hi)); };
  const double sr = src(oi), sc = src(oj);
  long r0 = clampi(static_cast<long>(std::floor(sr)), static_cast<long>(h) - 1);
  long c0 = clampi(static_cast<long>(std::floor(sc)), static_cast<long>(w) - 1);
  long r1 = clampi(r0 + 1, static_cast<long>(h) - 1);
  long c1 = clampi(c0 + 1, static_cast<long>(w) - 1);
  double fr = std::min(std::max(sr - static_cast<double>(r0), 0.0), 1.0);
  double fc = std::min(std::max(sc - static_cast<double>(c0), 0.0), 1.0);
  return {{{std::size_t(r0) * w + std::size_t(c0), (1 - fr) * (1 - fc)},
           {std::size_t(r0) * w + std::size_t(c1), (1 - fr) * fc},
           {std::size_t(r1) * w + std::size_t(c0), fr * (1 - fc)},
           {std::size_t(r1) * w + std::size_t(c1), fr * fc}}};
}

}  // namespace detail

// Bilinear 2x upsampling of an [h x w] grid, half-pixel aligned.
template <typename T>
Tensor<T> upsample_bilinear2x(const Tensor<T>& a) {
  if (a.ndim() != 2)
    throw ShapeError(cat("upsample_bilinear2x expects [h x w], got ",
                         shape_str(a.shape())));
  const std::size_t h = a.dim(0), w = a.dim(1);
  const std::size_t oh = 2 * h, ow = 2 * w;
  std::vector<T> v(oh * ow, T(0));
  const auto& av = a.value();
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      auto taps = detail::bilinear2x_taps(i, j, h, w);
      double acc = 0;
      for (auto& t : taps) acc += t.wgt * static_cast<double>(av[t.idx]);
      v[i * ow + j] = static_cast<T>(acc);
    }
  auto an = a.node_ptr();
  return detail::make_op<T>(
      Shape{oh, ow}, std::move(v), {a},
      [an, h, w](typename Tensor<T>::Node& self) {
        if (!an->requires_grad) return;
        auto& g = detail::grad_of<T>(*an);
        const std::size_t oh = 2 * h, ow = 2 * w;
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            auto taps = detail::bilinear2x_taps(i, j, h, w);
            for (auto& t : taps)
              g[t.idx] += static_cast<T>(t.wgt) * self.grad[i * ow + j];
          }
      });
}

// ---------------------------------------------------------------------------
// losses

// Numerically stable binary cross-entropy on logits with constant
// per-element targets and weights; returns sum(w*bce)/sum(w).
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const std::vector<T>& target,
                          const std::vector<T>& weight) {
  if (target.size() != logits.numel() || weight.size() != logits.numel())
    throw ShapeError(cat("bce_with_logits: logits ", shape_str(logits.shape()),
                         " vs target length ", target.size()));
  const auto& xv = logits.value();
  double wsum = 0, acc = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    double x = static_cast<double>(xv[i]);
    double t = static_cast<double>(target[i]);
    double l = std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
    acc += static_cast<double>(weight[i]) * l;
    wsum += static_cast<double>(weight[i]);
  }
  if (wsum <= 0) throw ContractError("bce_with_logits: zero weight sum");
  auto xn = logits.node_ptr();
  return detail::make_op<T>(
      Shape{1}, std::vector<T>{static_cast<T>(acc / wsum)}, {logits},
      [xn, target, weight, wsum](typename Tensor<T>::Node& self) {
        if (!xn->requires_grad) return;
        auto& g = detail::grad_of<T>(*xn);
        for (std::size_t i = 0; i < g.size(); ++i) {
          double x = static_cast<double>(xn->value[i]);
          double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                            : std::exp(x) / (1.0 + std::exp(x));
          double d = static_cast<double>(weight[i]) *
                     (s - static_cast<double>(target[i])) / wsum;
          g[i] += self.grad[0] * static_cast<T>(d);
        }
      });
}

// ---------------------------------------------------------------------------
// backward

// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
// into every reachable tensor with requires_grad; the tape is released
// afterwards, so a second sweep over the same graph is a no-op.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw ContractError(cat("backward on non-scalar tensor ",
                            shape_str(loss.shape())));
  using Node = typename Tensor<T>::Node;
  auto root = loss.node_ptr();
  if (!root || !root->requires_grad) return;  // constant loss: all grads zero

  // iterative post-order DFS over parents
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  detail::grad_of<T>(*root)[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }
  // release the tape
  for (Node* n : order) {
    n->backprop = nullptr;
    n->parents.clear();
  }
}

}  // namespace pseg
