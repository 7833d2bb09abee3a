#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "bmm/autodiff.hpp"

namespace bmm {

// ---------------------------------------------------------------------------
// Layer descriptions

enum class LayerKind {
  conv,
  deconv,
  dense,
  batchnorm,
  activation,
  dropout,
  upsample,
  reshape,
  skip_add,
};

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::deconv: return "deconv";
    case LayerKind::dense: return "dense";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::activation: return "activation";
    case LayerKind::dropout: return "dropout";
    case LayerKind::upsample: return "upsample";
    case LayerKind::reshape: return "reshape";
    case LayerKind::skip_add: return "skip_add";
  }
  return "?";
}

/// skip_add source that refers to the network input rather than a layer.
inline constexpr std::size_t skip_input = static_cast<std::size_t>(-1);

struct LayerSpec {
  LayerSpec() = default;
  LayerSpec(LayerKind k, std::string n) : kind(k), name(std::move(n)) {}

  LayerKind kind = LayerKind::activation;
  std::string name;

  std::size_t filters = 0;  // conv/deconv output channels, dense output width
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t output_padding = 0;
  Activation act{};
  double dropout_rate = 0.0;
  std::size_t factor = 1;   // upsample
  Shape target;             // reshape, per-sample (batch axis excluded)
  std::size_t skip_source = 0;  // skip_add: index of the layer whose output is added, or skip_input

  bool has_parameters() const {
    return kind == LayerKind::conv || kind == LayerKind::deconv || kind == LayerKind::dense ||
           kind == LayerKind::batchnorm;
  }

  /// Trainable parameter names, in a fixed order.
  std::vector<std::string> parameter_names() const {
    switch (kind) {
      case LayerKind::conv:
      case LayerKind::deconv:
      case LayerKind::dense: return {name + ".weight", name + ".bias"};
      case LayerKind::batchnorm: return {name + ".gamma", name + ".beta"};
      default: return {};
    }
  }
};

inline void check_unique_parameter_names(const std::vector<LayerSpec>& layers) {
  std::set<std::string> seen;
  for (const auto& l : layers) {
    for (const auto& n : l.parameter_names()) {
      if (!seen.insert(n).second) throw ConfigError("duplicate parameter name '" + n + "'");
    }
  }
}

// ---------------------------------------------------------------------------
// Losses

/// Mean binary cross-entropy on probabilities, clamped to [1e-7, 1-1e-7].
template <typename T>
NodeId bce_loss(Graph<T>& g, NodeId pred, const Tensor<T>& target) {
  constexpr double lo = 1e-7, hi = 1.0 - 1e-7;
  const auto& p = g.value(pred);
  if (p.size() != target.size()) {
    throw ShapeError("bce_loss: prediction size " + std::to_string(p.size()) +
                     " does not match target size " + std::to_string(target.size()));
  }
  const double count = static_cast<double>(p.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(double(p[i]), lo, hi);
    const double t = target[i];
    acc -= t * std::log(q) + (1.0 - t) * std::log(1.0 - q);
  }
  return g.record(OpKind::bce_loss, {pred}, Tensor<T>::scalar(static_cast<T>(acc / count)),
                  [=](Graph<T>& gr, const Tensor<T>& dy) {
                    const auto& pv = gr.value(pred);
                    Tensor<T> dp(pv.shape());
                    for (std::size_t i = 0; i < pv.size(); ++i) {
                      const double q = pv[i];
                      if (q < lo || q > hi) continue;  // flat region of the clamp
                      const double t = target[i];
                      dp[i] = static_cast<T>(dy[0] * (-t / q + (1.0 - t) / (1.0 - q)) / count);
                    }
                    gr.accumulate(pred, std::move(dp));
                  });
}

template <typename T>
NodeId mse_loss(Graph<T>& g, NodeId pred, const Tensor<T>& target) {
  const auto& p = g.value(pred);
  if (p.shape() != target.shape()) {
    throw ShapeError("mse_loss: prediction shape " + shape_string(p.shape()) +
                     " does not match target shape " + shape_string(target.shape()));
  }
  const double count = static_cast<double>(p.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = double(p[i]) - double(target[i]);
    acc += d * d;
  }
  return g.record(OpKind::mse_loss, {pred}, Tensor<T>::scalar(static_cast<T>(acc / count)),
                  [=](Graph<T>& gr, const Tensor<T>& dy) {
                    const auto& pv = gr.value(pred);
                    Tensor<T> dp(pv.shape());
                    const double k = 2.0 * double(dy[0]) / count;
                    for (std::size_t i = 0; i < pv.size(); ++i) {
                      dp[i] = static_cast<T>(k * (double(pv[i]) - double(target[i])));
                    }
                    gr.accumulate(pred, std::move(dp));
                  });
}

// ---------------------------------------------------------------------------
// Adam

struct OptimizerConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in [0,1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in [0,1)");
    if (!(eps > 0.0)) throw ConfigError("optimizer eps must be > 0");
  }
};

template <typename T>
using TensorMap = std::map<std::string, Tensor<T>>;

template <typename T>
struct AdamState {
  TensorMap<T> first_moment;
  TensorMap<T> second_moment;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Parameters without an entry in `grads` are left untouched, but the step
/// counter is shared.
template <typename T>
void adam_step(TensorMap<T>& params, const TensorMap<T>& grads, AdamState<T>& state,
               const OptimizerConfig& config) {
  config.validate();
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ShapeError("adam_step: gradient for unknown parameter " + name);
    if (it->second.shape() != g.shape()) {
      throw ShapeError("adam_step: gradient shape " + shape_string(g.shape()) +
                       " does not match parameter " + name + " " +
                       shape_string(it->second.shape()));
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(config.beta1, t);
  const double correction2 = 1.0 - std::pow(config.beta2, t);
  const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
  for (const auto& [name, g] : grads) {
    auto& p = params.at(name);
    auto& m = state.first_moment.try_emplace(name, p.shape()).first->second;
    auto& v = state.second_moment.try_emplace(name, p.shape()).first->second;
    if (m.shape() != p.shape() || v.shape() != p.shape()) {
      throw ShapeError("adam_step: moment shape mismatch for parameter " + name);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (T{1} - b1) * g[i];
      v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      p[i] = static_cast<T>(p[i] - config.learning_rate * m_hat / (std::sqrt(v_hat) + config.eps));
    }
  }
}

}  // namespace bmm
