#pragma once

// Test-only helpers: random tensors and a central finite-difference oracle that
// never touches the analytic backward path it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hyperloop/ops.hpp"
#include "hyperloop/rng.hpp"
#include "hyperloop/tensor.hpp"

namespace hyperloop::testing {

inline Tensord random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0, bool requires_grad = true) {
  CounterRng rng(CounterRng::mix(seed + 12345));
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = scale * rng.normal();
  return Tensord::from_vector(std::move(shape), std::move(v), requires_grad);
}

inline Tensorf random_tensorf(Shape shape, std::uint64_t seed, float scale = 1.0f) {
  CounterRng rng(CounterRng::mix(seed + 777));
  std::vector<float> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = scale * static_cast<float>(rng.normal());
  return Tensorf::from_vector(std::move(shape), std::move(v));
}

/// sum(x * R) for a fixed random R, so every output element gets a distinct upstream gradient.
inline Tensord weighted_sum(const Tensord& x, std::uint64_t seed = 99) {
  return sum(mul(x, random_tensor(x.shape(), seed, 1.0, false)));
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;
};

/// Compares analytic gradients of `loss_fn` w.r.t. each leaf against central
/// differences with step h. The relative error uses max(|a|, |n|, floor) as denominator.
inline GradCheckResult gradcheck(std::vector<std::pair<std::string, Tensord>> leaves,
                                 const std::function<Tensord()>& loss_fn, double h = 1e-5, double floor = 1e-6) {
  for (auto& [_, t] : leaves) t.zero_grad();
  loss_fn().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& [_, t] : leaves) {
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(static_cast<std::size_t>(t.numel()), 0.0);
  }
  GradCheckResult res;
  NoGradGuard no_grad;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto data = leaves[li].second.data_mut();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double fp = loss_fn().item();
      data[i] = orig - h;
      const double fm = loss_fn().item();
      data[i] = orig;
      const double num = (fp - fm) / (2.0 * h);
      const double a = analytic[li][i];
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst = leaves[li].first + "[" + std::to_string(i) + "] analytic=" + std::to_string(a) +
                    " numeric=" + std::to_string(num);
      }
    }
  }
  return res;
}

}  // namespace hyperloop::testing
