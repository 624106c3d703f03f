#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>

#include "diger/tape.hpp"

namespace diger {

// Scalar-valued function of one tensor argument, rebuilt on a fresh tape per
// call. Must be deterministic: any randomness has to come from a fixed
// counter-based stream captured by the closure.
using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;

// Central-difference check of the analytic gradient of f at `point`.
// Returns max over coordinates of
//   |analytic - central| / (|analytic| + |central| + 1e-12).
inline double finite_diff_check(const ScalarFn& f, const Tensor& point, double step) {
  if (step <= 0.0) throw std::invalid_argument("finite_diff_check: step must be positive");

  Tensor x = Tensor::from(point.shape(), point.values());
  Tape tape;
  Tensor loss = f(tape, x);
  if (loss.numel() != 1) throw std::invalid_argument("finite_diff_check: f must return a scalar");
  tape.backward(loss);
  const std::vector<double> analytic = x.grad();

  const auto eval = [&](const std::vector<double>& v) {
    Tensor p = Tensor::from(point.shape(), v);
    Tape fwd(false);
    return f(fwd, p).value();
  };

  std::vector<double> v = point.values();
  double worst = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double keep = v[i];
    v[i] = keep + step;
    const double up = eval(v);
    v[i] = keep - step;
    const double down = eval(v);
    v[i] = keep;
    const double central = (up - down) / (2.0 * step);
    const double err = std::abs(analytic[i] - central) / (std::abs(analytic[i]) + std::abs(central) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace diger
