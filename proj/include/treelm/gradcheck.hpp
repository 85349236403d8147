#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "treelm/tensor.hpp"

namespace treelm {

struct GradCheckOptions {
  double eps = 1e-3;
  // Entries checked per tensor; 0 = all. Large tensors are subsampled with a
  // seeded pick so the run stays deterministic.
  int max_samples_per_tensor = 0;
  std::uint64_t seed = 17;
};

// Central finite differences against the analytic gradient stored in each
// parameter's grad buffer, on the double instantiation of the computation.
//
// `f` must evaluate the scalar loss from the current parameter values and,
// when `with_grad` is true, leave d loss / d param in every grad buffer
// (overwriting, not accumulating). Returns the max relative error
// |analytic − fd| / max(1, |analytic|, |fd|).
inline double grad_check(const std::function<double(bool with_grad)>& f,
                         const std::vector<Parameter<double>>& params,
                         GradCheckOptions opt = {}) {
  const double base = f(/*with_grad=*/true);
  if (!std::isfinite(base))
    fail(Error::Kind::Numeric, "grad_check: non-finite loss");

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Parameter<double>& p : params) {
    if (!p.tensor->has_grad())
      fail(Error::Kind::Shape, "grad_check: no gradient for " + p.name);
    analytic.emplace_back(p.tensor->grad(),
                          p.tensor->grad() + p.tensor->size());
  }

  std::mt19937_64 rng(opt.seed);
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<double>& t = *params[pi].tensor;
    const std::int64_t n = t.size();
    std::vector<std::int64_t> picks;
    if (opt.max_samples_per_tensor > 0 && n > opt.max_samples_per_tensor) {
      std::uniform_int_distribution<std::int64_t> u(0, n - 1);
      for (int s = 0; s < opt.max_samples_per_tensor; ++s) picks.push_back(u(rng));
    } else {
      picks.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) picks[static_cast<std::size_t>(i)] = i;
    }
    for (std::int64_t idx : picks) {
      const double keep = t.data()[idx];
      t.data()[idx] = keep + opt.eps;
      const double up = f(false);
      t.data()[idx] = keep - opt.eps;
      const double down = f(false);
      t.data()[idx] = keep;
      if (!std::isfinite(up) || !std::isfinite(down))
        fail(Error::Kind::Numeric, "grad_check: non-finite perturbed loss");
      const double fd = (up - down) / (2.0 * opt.eps);
      const double an = analytic[pi][static_cast<std::size_t>(idx)];
      const double rel =
          std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace treelm
