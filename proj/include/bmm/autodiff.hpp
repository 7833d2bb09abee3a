#pragma once

// Define-by-run reverse-mode automatic differentiation. A Graph is a tape:
// every operator appends a node holding its output value and a closure that
// maps the output gradient onto its inputs. The tape is rebuilt for every
// forward pass.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <deque>
#include <vector>

#include "bmm/kernels.hpp"
#include "bmm/rng.hpp"
#include "bmm/tensor.hpp"

namespace bmm {

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

enum class Mode { train, infer };

enum class OpKind {
  leaf,
  conv2d,
  conv2d_transpose,
  upsample_nearest,
  dense,
  batchnorm,
  activation,
  dropout,
  reshape,
  add,
  mul,
  scale,
  sum,
  mean,
  mse_loss,
  bce_loss,
};

template <typename T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, const Tensor<T>& grad_out)>;

  struct Node {
    OpKind op = OpKind::leaf;
    std::vector<NodeId> inputs;
    Tensor<T> value;
    bool requires_grad = false;
    Backward backward;
  };

  /// Leaf that never receives a gradient.
  NodeId constant(Tensor<T> value) { return push_leaf(std::move(value), false); }

  /// Leaf whose gradient is collected by backward().
  NodeId parameter(Tensor<T> value) { return push_leaf(std::move(value), true); }

  NodeId record(OpKind op, std::vector<NodeId> inputs, Tensor<T> value, Backward backward) {
    bool needs = false;
    for (auto id : inputs) {
      check(id);
      needs = needs || nodes_[id.index].requires_grad;
    }
    nodes_.push_back(Node{op, std::move(inputs), std::move(value), needs,
                          needs ? std::move(backward) : Backward{}});
    return NodeId{nodes_.size() - 1};
  }

  const Tensor<T>& value(NodeId id) const {
    check(id);
    return nodes_[id.index].value;
  }
  const Shape& shape(NodeId id) const { return value(id).shape(); }
  bool requires_grad(NodeId id) const {
    check(id);
    return nodes_[id.index].requires_grad;
  }
  OpKind op(NodeId id) const {
    check(id);
    return nodes_[id.index].op;
  }
  const std::vector<NodeId>& inputs(NodeId id) const {
    check(id);
    return nodes_[id.index].inputs;
  }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Accumulates d(loss)/d(node) for every node reachable from `loss`.
  void backward(NodeId loss) {
    check(loss);
    if (nodes_[loss.index].value.size() != 1) {
      throw ShapeError("backward: loss node must hold a scalar, got shape " +
                       shape_string(nodes_[loss.index].value.shape()));
    }
    grads_.assign(nodes_.size(), std::nullopt);
    if (!nodes_[loss.index].requires_grad) return;
    grads_[loss.index].emplace(nodes_[loss.index].value.shape(), T{1});
    for (std::size_t i = loss.index + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (!grads_[i] || !node.backward) continue;
      // Closures only accumulate into earlier nodes, so the reference
      // stays valid and unaliased.
      node.backward(*this, *grads_[i]);
    }
  }

  /// Gradient of the last backward() loss with respect to `id`, if reached.
  const Tensor<T>* grad(NodeId id) const {
    check(id);
    if (id.index >= grads_.size() || !grads_[id.index]) return nullptr;
    return &*grads_[id.index];
  }

  /// Used by backward closures.
  void accumulate(NodeId id, const Tensor<T>& g) {
    check(id);
    if (!nodes_[id.index].requires_grad) return;
    if (g.shape() != nodes_[id.index].value.shape()) {
      throw ShapeError("gradient shape " + shape_string(g.shape()) +
                       " does not match value shape " +
                       shape_string(nodes_[id.index].value.shape()));
    }
    auto& slot = grads_[id.index];
    if (!slot) {
      slot = g;
      return;
    }
    auto dst = slot->data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  void accumulate(NodeId id, Tensor<T>&& g) {
    check(id);
    if (!nodes_[id.index].requires_grad) return;
    auto& slot = grads_[id.index];
    if (!slot) {
      if (g.shape() != nodes_[id.index].value.shape()) {
        throw ShapeError("gradient shape " + shape_string(g.shape()) +
                         " does not match value shape " +
                         shape_string(nodes_[id.index].value.shape()));
      }
      slot = std::move(g);
      return;
    }
    accumulate(id, static_cast<const Tensor<T>&>(g));
  }

 private:
  NodeId push_leaf(Tensor<T> value, bool requires_grad) {
    nodes_.push_back(Node{OpKind::leaf, {}, std::move(value), requires_grad, {}});
    return NodeId{nodes_.size() - 1};
  }

  void check(NodeId id) const {
    if (id.index >= nodes_.size()) {
      throw ValidationError("node id " + std::to_string(id.index) + " not in graph");
    }
  }

  std::deque<Node> nodes_;  // deque: value() references survive later pushes
  std::vector<std::optional<Tensor<T>>> grads_;
};

// ---------------------------------------------------------------------------
// Convolutions, upsampling, affine

template <typename T>
NodeId conv2d(Graph<T>& g, NodeId input, NodeId kernel, std::optional<NodeId> bias,
              kernels::ConvGeometry geo) {
  const Tensor<T>* b = bias ? &g.value(*bias) : nullptr;
  auto out = kernels::conv2d_forward(g.value(input), g.value(kernel), b, geo);
  std::vector<NodeId> ins{input, kernel};
  if (bias) ins.push_back(*bias);
  return g.record(OpKind::conv2d, ins, std::move(out),
                  [=](Graph<T>& gr, const Tensor<T>& dy) {
                    auto grads = kernels::conv2d_backward(
                        gr.value(input), gr.value(kernel), dy, geo, gr.requires_grad(input),
                        gr.requires_grad(kernel), bias && gr.requires_grad(*bias));
                    if (grads.input) gr.accumulate(input, std::move(*grads.input));
                    if (grads.kernel) gr.accumulate(kernel, std::move(*grads.kernel));
                    if (grads.bias) gr.accumulate(*bias, std::move(*grads.bias));
                  });
}

template <typename T>
NodeId conv2d_transpose(Graph<T>& g, NodeId input, NodeId kernel, std::optional<NodeId> bias,
                        kernels::ConvGeometry geo) {
  const Tensor<T>* b = bias ? &g.value(*bias) : nullptr;
  auto out = kernels::conv2d_transpose_forward(g.value(input), g.value(kernel), b, geo);
  std::vector<NodeId> ins{input, kernel};
  if (bias) ins.push_back(*bias);
  return g.record(OpKind::conv2d_transpose, ins, std::move(out),
                  [=](Graph<T>& gr, const Tensor<T>& dy) {
                    auto grads = kernels::conv2d_transpose_backward(
                        gr.value(input), gr.value(kernel), dy, geo, gr.requires_grad(input),
                        gr.requires_grad(kernel), bias && gr.requires_grad(*bias));
                    if (grads.input) gr.accumulate(input, std::move(*grads.input));
                    if (grads.kernel) gr.accumulate(kernel, std::move(*grads.kernel));
                    if (grads.bias) gr.accumulate(*bias, std::move(*grads.bias));
                  });
}

template <typename T>
NodeId upsample_nearest(Graph<T>& g, NodeId input, std::size_t factor) {
  auto out = kernels::upsample_nearest_forward(g.value(input), factor);
  const Shape in_shape = g.shape(input);
  return g.record(OpKind::upsample_nearest, {input}, std::move(out),
                  [=](Graph<T>& gr, const Tensor<T>& dy) {
                    gr.accumulate(input, kernels::upsample_nearest_backward(in_shape, dy, factor));
                  });
}

template <typename T>
NodeId dense(Graph<T>& g, NodeId input, NodeId weight, std::optional<NodeId> bias) {
  const Tensor<T>* b = bias ? &g.value(*bias) : nullptr;
  auto out = kernels::dense_forward(g.value(input), g.value(weight), b);
  std::vector<NodeId> ins{input, weight};
  if (bias) ins.push_back(*bias);
  return g.record(
      OpKind::dense, ins, std::move(out), [=](Graph<T>& gr, const Tensor<T>& dy) {
        using kernels::ConstMatrixMap;
        using kernels::MatrixMap;
        const auto& x = gr.value(input);
        const auto& w = gr.value(weight);
        const std::size_t n = x.dim(0), d = x.dim(1), m = w.dim(1);
        ConstMatrixMap<T> dym(dy.data().data(), n, m);
        if (gr.requires_grad(input)) {
          Tensor<T> dx(x.shape());
          MatrixMap<T>(dx.data().data(), n, d).noalias() =
              dym * ConstMatrixMap<T>(w.data().data(), d, m).transpose();
          gr.accumulate(input, std::move(dx));
        }
        if (gr.requires_grad(weight)) {
          Tensor<T> dw(w.shape());
          MatrixMap<T>(dw.data().data(), d, m).noalias() =
              ConstMatrixMap<T>(x.data().data(), n, d).transpose() * dym;
          gr.accumulate(weight, std::move(dw));
        }
        if (bias && gr.requires_grad(*bias)) {
          Tensor<T> db(Shape{m});
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j) db[j] += dym(i, j);
          }
          gr.accumulate(*bias, std::move(db));
        }
      });
}

// ---------------------------------------------------------------------------
// Batch normalization over (N,H,W) per channel

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  explicit BatchNormState(std::size_t channels = 1)
      : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.9;
  Mode mode = Mode::train;
};

template <typename T>
NodeId batchnorm(Graph<T>& g, NodeId input, NodeId gamma, NodeId beta, BatchNormState<T>& state,
                 BatchNormOptions opt = {}) {
  const auto& x = g.value(input);
  require_rank(x.shape(), 4, "batchnorm input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const std::size_t count = n * hw;
  if (g.value(gamma).size() != c || g.value(beta).size() != c) {
    throw ShapeError("batchnorm: gamma/beta length must equal channel count " +
                     std::to_string(c));
  }
  if (state.running_mean.size() != c || state.running_var.size() != c) {
    throw ShapeError("batchnorm: running statistics length must equal channel count " +
                     std::to_string(c));
  }
  if (opt.mode == Mode::train && count < 2) {
    throw ShapeError("batchnorm: train mode needs N*H*W >= 2 to estimate a variance");
  }

  std::vector<T> mean(c), inv_std(c);
  if (opt.mode == Mode::train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.data().data() + (i * c + ch) * hw;
        for (std::size_t k = 0; k < hw; ++k) s += p[k];
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.data().data() + (i * c + ch) * hw;
        for (std::size_t k = 0; k < hw; ++k) ss += (p[k] - mu) * (p[k] - mu);
      }
      const double var = ss / static_cast<double>(count);
      mean[ch] = static_cast<T>(mu);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
      const double unbiased = ss / static_cast<double>(count - 1);
      state.running_mean[ch] =
          static_cast<T>(opt.momentum * state.running_mean[ch] + (1.0 - opt.momentum) * mu);
      state.running_var[ch] =
          static_cast<T>(opt.momentum * state.running_var[ch] + (1.0 - opt.momentum) * unbiased);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = state.running_mean[ch];
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(double(state.running_var[ch]) + opt.eps));
    }
  }

  const auto& gm = g.value(gamma);
  const auto& bt = g.value(beta);
  Tensor<T> xhat(x.shape());
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) {
        const T v = (x[off + k] - mean[ch]) * inv_std[ch];
        xhat[off + k] = v;
        out[off + k] = gm[ch] * v + bt[ch];
      }
    }
  }

  const bool train = opt.mode == Mode::train;
  return g.record(
      OpKind::batchnorm, {input, gamma, beta}, std::move(out),
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<T>& gr,
                                                                 const Tensor<T>& dy) {
        const auto& gmv = gr.value(gamma);
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (i * c + ch) * hw;
            for (std::size_t k = 0; k < hw; ++k) {
              sum_dy[ch] += dy[off + k];
              sum_dy_xhat[ch] += double(dy[off + k]) * xhat[off + k];
            }
          }
        }
        if (gr.requires_grad(input)) {
          Tensor<T> dx(xhat.shape());
          const double m = static_cast<double>(n * hw);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t off = (i * c + ch) * hw;
              const double scale = double(gmv[ch]) * inv_std[ch];
              for (std::size_t k = 0; k < hw; ++k) {
                if (train) {
                  dx[off + k] = static_cast<T>(
                      scale * (dy[off + k] - sum_dy[ch] / m - xhat[off + k] * sum_dy_xhat[ch] / m));
                } else {
                  dx[off + k] = static_cast<T>(scale * dy[off + k]);
                }
              }
            }
          }
          gr.accumulate(input, std::move(dx));
        }
        if (gr.requires_grad(gamma)) {
          Tensor<T> dg(Shape{c});
          for (std::size_t ch = 0; ch < c; ++ch) dg[ch] = static_cast<T>(sum_dy_xhat[ch]);
          gr.accumulate(gamma, std::move(dg));
        }
        if (gr.requires_grad(beta)) {
          Tensor<T> db(Shape{c});
          for (std::size_t ch = 0; ch < c; ++ch) db[ch] = static_cast<T>(sum_dy[ch]);
          gr.accumulate(beta, std::move(db));
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise activations

enum class ActivationKind { relu, leaky_relu, sigmoid, tanh };

struct Activation {
  ActivationKind kind = ActivationKind::relu;
  double alpha = 0.2;  // leaky_relu slope for x < 0
};

inline const char* activation_name(ActivationKind k) {
  switch (k) {
    case ActivationKind::relu: return "relu";
    case ActivationKind::leaky_relu: return "leaky_relu";
    case ActivationKind::sigmoid: return "sigmoid";
    case ActivationKind::tanh: return "tanh";
  }
  return "?";
}

inline ActivationKind parse_activation(const std::string& name) {
  if (name == "relu") return ActivationKind::relu;
  if (name == "leaky_relu") return ActivationKind::leaky_relu;
  if (name == "sigmoid") return ActivationKind::sigmoid;
  if (name == "tanh") return ActivationKind::tanh;
  throw ConfigError("unknown activation '" + name + "'");
}

template <typename T>
NodeId activation(Graph<T>& g, NodeId input, Activation act) {
  const auto& x = g.value(input);
  Tensor<T> out(x.shape());
  const T alpha = static_cast<T>(act.alpha);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    switch (act.kind) {
      case ActivationKind::relu: out[i] = v >= T{0} ? v : T{0}; break;
      case ActivationKind::leaky_relu: out[i] = v >= T{0} ? v : alpha * v; break;
      case ActivationKind::sigmoid: out[i] = T{1} / (T{1} + std::exp(-v)); break;
      case ActivationKind::tanh: out[i] = std::tanh(v); break;
    }
  }
  return g.record(OpKind::activation, {input}, out,
                  [=](Graph<T>& gr, const Tensor<T>& dy) {
                    const auto& xin = gr.value(input);
                    Tensor<T> dx(xin.shape());
                    for (std::size_t i = 0; i < dx.size(); ++i) {
                      const T v = xin[i];
                      T d{};
                      switch (act.kind) {
                        case ActivationKind::relu: d = v >= T{0} ? T{1} : T{0}; break;
                        case ActivationKind::leaky_relu: d = v >= T{0} ? T{1} : alpha; break;
                        case ActivationKind::sigmoid: d = out[i] * (T{1} - out[i]); break;
                        case ActivationKind::tanh: d = T{1} - out[i] * out[i]; break;
                      }
                      dx[i] = dy[i] * d;
                    }
                    gr.accumulate(input, std::move(dx));
                  });
}

// ---------------------------------------------------------------------------
// Inverted dropout. The mask is a counter-based hash of (seed, index), so a
// fixed seed always yields the same mask regardless of call history.

inline bool dropout_keeps(std::uint64_t seed, std::size_t index, double rate) {
  return unit_double(mix64(seed ^ mix64(static_cast<std::uint64_t>(index)))) >= rate;
}

template <typename T>
NodeId dropout(Graph<T>& g, NodeId input, double rate, std::uint64_t seed, Mode mode) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0,1), got " + std::to_string(rate));
  }
  const auto& x = g.value(input);
  if (mode == Mode::infer || rate == 0.0) {
    return g.record(OpKind::dropout, {input}, x,
                    [=](Graph<T>& gr, const Tensor<T>& dy) { gr.accumulate(input, dy); });
  }
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.size());
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = dropout_keeps(seed, i, rate) ? keep_scale : T{0};
    out[i] = x[i] * mask[i];
  }
  return g.record(OpKind::dropout, {input}, std::move(out),
                  [=, mask = std::move(mask)](Graph<T>& gr, const Tensor<T>& dy) {
                    Tensor<T> dx(dy.shape());
                    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = dy[i] * mask[i];
                    gr.accumulate(input, std::move(dx));
                  });
}

// ---------------------------------------------------------------------------
// Structural and reduction ops

template <typename T>
NodeId reshape(Graph<T>& g, NodeId input, Shape shape) {
  const Shape in_shape = g.shape(input);
  auto out = g.value(input).reshaped(std::move(shape));
  return g.record(OpKind::reshape, {input}, std::move(out),
                  [=](Graph<T>& gr, const Tensor<T>& dy) {
                    gr.accumulate(input, dy.reshaped(in_shape));
                  });
}

template <typename T>
NodeId add(Graph<T>& g, NodeId a, NodeId b) {
  const auto& x = g.value(a);
  const auto& y = g.value(b);
  if (x.shape() != y.shape()) {
    throw ShapeError("add: operand shapes " + shape_string(x.shape()) + " and " +
                     shape_string(y.shape()) + " differ");
  }
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return g.record(OpKind::add, {a, b}, std::move(out), [=](Graph<T>& gr, const Tensor<T>& dy) {
    gr.accumulate(a, dy);
    gr.accumulate(b, dy);
  });
}

template <typename T>
NodeId mul(Graph<T>& g, NodeId a, NodeId b) {
  const auto& x = g.value(a);
  const auto& y = g.value(b);
  if (x.shape() != y.shape()) {
    throw ShapeError("mul: operand shapes " + shape_string(x.shape()) + " and " +
                     shape_string(y.shape()) + " differ");
  }
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return g.record(OpKind::mul, {a, b}, std::move(out), [=](Graph<T>& gr, const Tensor<T>& dy) {
    const auto& xa = gr.value(a);
    const auto& xb = gr.value(b);
    if (gr.requires_grad(a)) {
      Tensor<T> da(dy.shape());
      for (std::size_t i = 0; i < da.size(); ++i) da[i] = dy[i] * xb[i];
      gr.accumulate(a, std::move(da));
    }
    if (gr.requires_grad(b)) {
      Tensor<T> db(dy.shape());
      for (std::size_t i = 0; i < db.size(); ++i) db[i] = dy[i] * xa[i];
      gr.accumulate(b, std::move(db));
    }
  });
}

template <typename T>
NodeId scale(Graph<T>& g, NodeId input, double factor) {
  const auto& x = g.value(input);
  Tensor<T> out(x.shape());
  const T f = static_cast<T>(factor);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * f;
  return g.record(OpKind::scale, {input}, std::move(out),
                  [=](Graph<T>& gr, const Tensor<T>& dy) {
                    Tensor<T> dx(dy.shape());
                    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = dy[i] * f;
                    gr.accumulate(input, std::move(dx));
                  });
}

template <typename T>
NodeId sum(Graph<T>& g, NodeId input) {
  double acc = 0.0;
  for (T v : g.value(input).data()) acc += v;
  const Shape in_shape = g.shape(input);
  return g.record(OpKind::sum, {input}, Tensor<T>::scalar(static_cast<T>(acc)),
                  [=](Graph<T>& gr, const Tensor<T>& dy) {
                    gr.accumulate(input, Tensor<T>(in_shape, dy[0]));
                  });
}

template <typename T>
NodeId mean(Graph<T>& g, NodeId input) {
  const std::size_t count = g.value(input).size();
  return scale(g, sum(g, input), 1.0 / static_cast<double>(count));
}

}  // namespace bmm
