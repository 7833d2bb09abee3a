#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "bmm/autodiff.hpp"

namespace bmm {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_element = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Builds the operator under test on a fresh graph. Receives one node per
/// input tensor and returns the output node (any shape).
template <typename T>
using GradCheckOp = std::function<NodeId(Graph<T>&, std::span<const NodeId>)>;

/// Compares tape gradients against central finite differences.
///
/// A non-scalar output is reduced with a fixed random projection, so every
/// output component contributes. Relative error per element is
/// |a - n| / max(|a|, |n|, 1e-8).
template <typename T>
GradCheckResult grad_check_detailed(const GradCheckOp<T>& op, std::vector<Tensor<T>> inputs,
                                    double eps, std::uint64_t projection_seed = 0x5eed) {
  if (!(eps >= 1e-5 && eps <= 1e-2)) {
    throw ConfigError("grad_check: eps must lie in [1e-5, 1e-2]");
  }
  std::vector<T> projection;

  auto evaluate = [&](bool with_backward, std::vector<Tensor<T>>* grads) -> double {
    Graph<T> g;
    std::vector<NodeId> ids;
    ids.reserve(inputs.size());
    for (const auto& t : inputs) ids.push_back(g.parameter(t));
    const NodeId out = op(g, ids);
    const auto& y = g.value(out);
    if (projection.empty()) {
      Rng rng(projection_seed);
      projection.resize(y.size());
      for (auto& r : projection) r = static_cast<T>(rng.uniform(-1.0, 1.0));
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) loss += double(y[i]) * double(projection[i]);
    if (with_backward) {
      const NodeId w = g.constant(Tensor<T>(y.shape(), projection));
      const NodeId l = sum(g, mul(g, out, w));
      g.backward(l);
      for (std::size_t k = 0; k < ids.size(); ++k) {
        const auto* gr = g.grad(ids[k]);
        grads->push_back(gr ? *gr : Tensor<T>(inputs[k].shape()));
      }
    }
    return loss;
  };

  std::vector<Tensor<T>> analytic;
  evaluate(true, &analytic);

  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const T original = inputs[k][i];
      inputs[k][i] = static_cast<T>(original + eps);
      const double plus = evaluate(false, nullptr);
      inputs[k][i] = static_cast<T>(original - eps);
      const double minus = evaluate(false, nullptr);
      inputs[k][i] = original;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > result.max_relative_error) {
        result = {rel, k, i, a, numeric};
      }
    }
  }
  return result;
}

template <typename T>
double grad_check(const GradCheckOp<T>& op, std::vector<Tensor<T>> inputs, double eps) {
  return grad_check_detailed(op, std::move(inputs), eps).max_relative_error;
}

}  // namespace bmm
