#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "gmvit/tensor.hpp"

namespace gmvit {

struct GradCheckOptions {
  double eps = 1e-5;                     // scaled by max(1, |value|) per coordinate
  std::int64_t max_coords_per_tensor = 0;  // 0 = check every coordinate
  std::uint64_t sample_seed = 17;        // coordinate sampling when capped
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::int64_t coords_checked = 0;
  std::string worst;  // "<tensor index>[<coord>]"
};

/// Central-difference gradient verification. `forward` must rebuild the
/// whole computation from the current input values and return the scalar
/// loss; it is invoked once under a fresh tape for the analytic gradients
/// and twice per checked coordinate (no tape) for the finite differences.
/// Relative error uses the symmetric denominator max(floor, |a| + |f|).
template <typename T>
GradCheckReport check_gradients(std::vector<Tensor<T>> inputs,
                                const std::function<Tensor<T>()>& forward,
                                GradCheckOptions opts = {}) {
  static_assert(std::is_same_v<T, double>, "gradient checks run in double precision");
  for (auto& t : inputs) {
    detail::require(t.requires_grad(), "check_gradients: all inputs must require gradients");
    t.zero_grad();
  }

  Tape<T> tape;
  {
    TapeScope<T> scope(tape);
    Tensor<T> loss = forward();
    tape.backward(loss);
  }

  GradCheckReport report;
  std::mt19937_64 rng(opts.sample_seed);
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor<T>& t = inputs[ti];
    std::vector<std::int64_t> coords;
    const std::int64_t n = t.numel();
    if (opts.max_coords_per_tensor > 0 && n > opts.max_coords_per_tensor) {
      std::vector<std::int64_t> all(static_cast<std::size_t>(n));
      std::iota(all.begin(), all.end(), 0);
      std::shuffle(all.begin(), all.end(), rng);
      coords.assign(all.begin(), all.begin() + opts.max_coords_per_tensor);
    } else {
      coords.resize(static_cast<std::size_t>(n));
      std::iota(coords.begin(), coords.end(), 0);
    }
    for (auto i : coords) {
      const T saved = t.data()[i];
      const T eps = static_cast<T>(opts.eps) * std::max(T(1), std::abs(saved));
      t.data()[i] = saved + eps;
      const T f_plus = forward().item();
      t.data()[i] = saved - eps;
      const T f_minus = forward().item();
      t.data()[i] = saved;
      const T fd = (f_plus - f_minus) / (2 * eps);
      const T an = t.grad()[i];
      const double denom = std::max(1e-6, std::abs(static_cast<double>(an)) +
                                              std::abs(static_cast<double>(fd)));
      const double rel = std::abs(static_cast<double>(an - fd)) / denom;
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = "tensor " + detail::str(static_cast<std::int64_t>(ti)) + "[" +
                       detail::str(i) + "]";
      }
    }
  }
  return report;
}

}  // namespace gmvit
