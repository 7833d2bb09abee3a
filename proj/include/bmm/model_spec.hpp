#pragma once

// Declarative networks: a ModelSpec is an ordered layer list interpreted
// onto a Graph by forward(). Parameters live outside the spec in a
// ModelState so the same spec can be instantiated in float or double.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bmm/layers.hpp"
#include "bmm/rng.hpp"

namespace bmm {

struct ModelSpec {
  std::string kind;
  Shape input_shape;  // per sample, batch axis excluded
  std::vector<LayerSpec> layers;
};

/// Per-sample output shape of every layer; validates the whole stack.
inline std::vector<Shape> infer_shapes(const ModelSpec& spec) {
  check_unique_parameter_names(spec.layers);
  std::vector<Shape> out;
  out.reserve(spec.layers.size());
  Shape cur = spec.input_shape;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    auto where = [&] { return spec.kind + " layer " + std::to_string(i) + " (" + l.name + ")"; };
    auto need_image = [&] {
      if (cur.size() != 3) {
        throw ConfigError(where() + ": expects a [C,H,W] input, got " + shape_string(cur));
      }
    };
    switch (l.kind) {
      case LayerKind::conv: {
        need_image();
        if (l.filters == 0) throw ConfigError(where() + ": zero filters");
        kernels::ConvGeometry geo{l.stride, l.padding, 0};
        try {
          cur = {l.filters, kernels::conv_output_extent(cur[1], l.kernel, geo, "height"),
                 kernels::conv_output_extent(cur[2], l.kernel, geo, "width")};
        } catch (const ShapeError& e) {
          throw ConfigError(where() + ": " + e.what());
        }
        break;
      }
      case LayerKind::deconv: {
        need_image();
        if (l.filters == 0) throw ConfigError(where() + ": zero filters");
        kernels::ConvGeometry geo{l.stride, l.padding, l.output_padding};
        try {
          cur = {l.filters, kernels::transpose_output_extent(cur[1], l.kernel, geo, "height"),
                 kernels::transpose_output_extent(cur[2], l.kernel, geo, "width")};
        } catch (const ShapeError& e) {
          throw ConfigError(where() + ": " + e.what());
        }
        break;
      }
      case LayerKind::dense:
        if (cur.size() != 1) {
          throw ConfigError(where() + ": dense expects a flat input, got " + shape_string(cur));
        }
        if (l.filters == 0) throw ConfigError(where() + ": zero output width");
        cur = {l.filters};
        break;
      case LayerKind::batchnorm: need_image(); break;
      case LayerKind::activation: break;
      case LayerKind::dropout:
        if (!(l.dropout_rate >= 0.0 && l.dropout_rate < 1.0)) {
          throw ConfigError(where() + ": dropout rate must lie in [0,1)");
        }
        break;
      case LayerKind::upsample:
        need_image();
        if (l.factor == 0) throw ConfigError(where() + ": upsample factor must be >= 1");
        cur = {cur[0], cur[1] * l.factor, cur[2] * l.factor};
        break;
      case LayerKind::reshape:
        if (shape_size(l.target) != shape_size(cur)) {
          throw ConfigError(where() + ": cannot reshape " + shape_string(cur) + " to " +
                            shape_string(l.target));
        }
        cur = l.target;
        break;
      case LayerKind::skip_add: {
        if (l.skip_source != skip_input && l.skip_source >= i) {
          throw ConfigError(where() + ": skip source must be an earlier layer");
        }
        const Shape& src = l.skip_source == skip_input ? spec.input_shape : out[l.skip_source];
        if (src != cur) {
          throw ConfigError(where() + ": skip source shape " + shape_string(src) +
                            " does not match " + shape_string(cur));
        }
        break;
      }
    }
    out.push_back(cur);
  }
  return out;
}

inline Shape output_shape(const ModelSpec& spec) {
  auto shapes = infer_shapes(spec);
  return shapes.empty() ? spec.input_shape : shapes.back();
}

/// Trainable parameter shapes keyed by parameter name.
inline std::map<std::string, Shape> parameter_shapes(const ModelSpec& spec) {
  const auto shapes = infer_shapes(spec);
  std::map<std::string, Shape> params;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const Shape& in = i == 0 ? spec.input_shape : shapes[i - 1];
    switch (l.kind) {
      case LayerKind::conv:
        params[l.name + ".weight"] = {l.filters, in[0], l.kernel, l.kernel};
        params[l.name + ".bias"] = {l.filters};
        break;
      case LayerKind::deconv:
        params[l.name + ".weight"] = {in[0], l.filters, l.kernel, l.kernel};
        params[l.name + ".bias"] = {l.filters};
        break;
      case LayerKind::dense:
        params[l.name + ".weight"] = {in[0], l.filters};
        params[l.name + ".bias"] = {l.filters};
        break;
      case LayerKind::batchnorm:
        params[l.name + ".gamma"] = {in[0]};
        params[l.name + ".beta"] = {in[0]};
        break;
      default: break;
    }
  }
  return params;
}

inline std::size_t parameter_count(const ModelSpec& spec) {
  std::size_t total = 0;
  for (const auto& [name, shape] : parameter_shapes(spec)) total += shape_size(shape);
  return total;
}

template <typename T>
struct ModelState {
  TensorMap<T> params;
  std::map<std::string, BatchNormState<T>> norms;  // keyed by batchnorm layer name
};

/// Weights ~ truncated normal(0, init_std); biases and beta zero; gamma one.
/// Draw order follows layer order so a seed fixes every parameter.
template <typename T>
ModelState<T> init_model(const ModelSpec& spec, Rng& rng, double init_std) {
  const auto shapes = parameter_shapes(spec);
  ModelState<T> state;
  for (const auto& l : spec.layers) {
    if (!l.has_parameters()) continue;
    if (l.kind == LayerKind::batchnorm) {
      const auto& s = shapes.at(l.name + ".gamma");
      state.params.emplace(l.name + ".gamma", Tensor<T>(s, T{1}));
      state.params.emplace(l.name + ".beta", Tensor<T>(s, T{0}));
      state.norms.emplace(l.name, BatchNormState<T>(s[0]));
      continue;
    }
    Tensor<T> w(shapes.at(l.name + ".weight"));
    for (auto& v : w.data()) v = static_cast<T>(rng.truncated_normal(init_std));
    state.params.emplace(l.name + ".weight", std::move(w));
    state.params.emplace(l.name + ".bias", Tensor<T>(shapes.at(l.name + ".bias"), T{0}));
  }
  return state;
}

template <typename To, typename From>
ModelState<To> cast_state(const ModelState<From>& s) {
  ModelState<To> out;
  for (const auto& [k, v] : s.params) out.params.emplace(k, tensor_cast<To>(v));
  for (const auto& [k, v] : s.norms) {
    BatchNormState<To> n;
    n.running_mean = tensor_cast<To>(v.running_mean);
    n.running_var = tensor_cast<To>(v.running_var);
    out.norms.emplace(k, std::move(n));
  }
  return out;
}

struct ForwardOptions {
  Mode mode = Mode::train;
  std::uint64_t dropout_seed = 0;
  bool trainable = true;  // false registers parameters as constants (frozen)
  BatchNormOptions norm{};
};

struct ForwardResult {
  NodeId output;
  std::map<std::string, NodeId> parameters;
  std::vector<NodeId> layer_outputs;
};

template <typename T>
ForwardResult forward(Graph<T>& g, const ModelSpec& spec, ModelState<T>& state, NodeId input,
                      const ForwardOptions& opt) {
  const Shape& in_shape = g.shape(input);
  if (in_shape.size() != spec.input_shape.size() + 1 ||
      !std::equal(spec.input_shape.begin(), spec.input_shape.end(), in_shape.begin() + 1)) {
    throw ShapeError(spec.kind + ": input shape " + shape_string(in_shape) +
                     " does not match [N]+" + shape_string(spec.input_shape));
  }
  const std::size_t batch = in_shape[0];
  ForwardResult res;
  auto param = [&](const std::string& name) {
    auto it = state.params.find(name);
    if (it == state.params.end()) throw ValidationError(spec.kind + ": missing parameter " + name);
    const NodeId id = opt.trainable ? g.parameter(it->second) : g.constant(it->second);
    res.parameters.emplace(name, id);
    return id;
  };

  NodeId cur = input;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::conv: {
        const NodeId w = param(l.name + ".weight");
        const NodeId b = param(l.name + ".bias");
        cur = conv2d(g, cur, w, b, {l.stride, l.padding, 0});
        break;
      }
      case LayerKind::deconv: {
        const NodeId w = param(l.name + ".weight");
        const NodeId b = param(l.name + ".bias");
        cur = conv2d_transpose(g, cur, w, b, {l.stride, l.padding, l.output_padding});
        break;
      }
      case LayerKind::dense: {
        const NodeId w = param(l.name + ".weight");
        const NodeId b = param(l.name + ".bias");
        cur = dense(g, cur, w, b);
        break;
      }
      case LayerKind::batchnorm: {
        const NodeId gm = param(l.name + ".gamma");
        const NodeId bt = param(l.name + ".beta");
        auto it = state.norms.find(l.name);
        if (it == state.norms.end()) {
          throw ValidationError(spec.kind + ": missing running statistics for " + l.name);
        }
        BatchNormOptions bn = opt.norm;
        bn.mode = opt.mode;
        cur = batchnorm(g, cur, gm, bt, it->second, bn);
        break;
      }
      case LayerKind::activation: cur = activation(g, cur, l.act); break;
      case LayerKind::dropout:
        cur = dropout(g, cur, l.dropout_rate, derive_seed(opt.dropout_seed, i), opt.mode);
        break;
      case LayerKind::upsample: cur = upsample_nearest(g, cur, l.factor); break;
      case LayerKind::reshape: {
        Shape s{batch};
        s.insert(s.end(), l.target.begin(), l.target.end());
        cur = reshape(g, cur, std::move(s));
        break;
      }
      case LayerKind::skip_add:
        if (l.skip_source == skip_input) {
          cur = add(g, cur, input);
          break;
        }
        if (l.skip_source >= i) throw ConfigError(spec.kind + ": skip source must precede layer");
        cur = add(g, cur, res.layer_outputs[l.skip_source]);
        break;
    }
    res.layer_outputs.push_back(cur);
  }
  res.output = cur;
  return res;
}

template <typename T>
TensorMap<T> collect_gradients(const Graph<T>& g, const ForwardResult& res) {
  TensorMap<T> grads;
  for (const auto& [name, id] : res.parameters) {
    if (const auto* gr = g.grad(id)) grads.emplace(name, *gr);
  }
  return grads;
}

}  // namespace bmm
