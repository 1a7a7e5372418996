#pragma once

#include <cmath>
#include <vector>

#include "gmvit/tensor.hpp"

namespace gmvit {

/// Cosine annealing over epochs, clamped at the horizon:
/// lr(e) = end + (start - end)/2 * (1 + cos(pi * min(e, H) / H)).
/// Monotone non-increasing on [0, H]; lr(0) = start, lr(H) = end.
template <typename T>
struct CosineSchedule {
  T start_lr;
  T end_lr;
  std::int64_t horizon_epochs;

  T lr(std::int64_t epoch) const {
    const double e = static_cast<double>(std::min(epoch, horizon_epochs));
    const double h = static_cast<double>(horizon_epochs);
    return end_lr + (start_lr - end_lr) * static_cast<T>(0.5 * (1.0 + std::cos(M_PI * e / h)));
  }
};

/// SGD with momentum and weight decay over a fixed parameter list.
/// Momentum buffers are index-aligned with the parameters handed to the
/// constructor.
template <typename T>
class SgdState {
public:
  SgdState(std::vector<Tensor<T>> params, T momentum, T weight_decay, CosineSchedule<T> schedule)
      : params_(std::move(params)),
        momentum_(momentum),
        weight_decay_(weight_decay),
        schedule_(schedule) {
    buffers_.reserve(params_.size());
    for (const auto& p : params_) buffers_.emplace_back(p.numel(), T(0));
  }

  const std::vector<Tensor<T>>& params() const { return params_; }
  std::vector<std::vector<T>>& buffers() { return buffers_; }
  const CosineSchedule<T>& schedule() const { return schedule_; }
  T momentum() const { return momentum_; }
  T weight_decay() const { return weight_decay_; }

  /// v <- mu*v + g + wd*theta; theta <- theta - lr(epoch)*v; grads cleared.
  void step(std::int64_t epoch) {
    const T lr = schedule_.lr(epoch);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor<T>& p = params_[k];
      detail::require(p.has_grad(), "sgd_step: parameter " + detail::str(static_cast<std::int64_t>(k)) +
                                        " has no gradient");
      auto& v = buffers_[k];
      auto& theta = p.data();
      auto& g = p.grad();
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = momentum_ * v[i] + g[i] + weight_decay_ * theta[i];
        theta[i] -= lr * v[i];
      }
      p.zero_grad();
    }
  }

private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> buffers_;
  T momentum_;
  T weight_decay_;
  CosineSchedule<T> schedule_;
};

template <typename T>
void sgd_step(SgdState<T>& state, std::int64_t epoch) {
  state.step(epoch);
}

}  // namespace gmvit
