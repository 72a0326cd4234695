#pragma once

#include <cmath>
#include <vector>

#include "bixnas/graph.hpp"

namespace bixnas {

// Adam over a single parameter group. Moment buffers are keyed by position
// in the params vector, so the set and order of parameters must not change
// after construction.
template <class S>
class Adam {
 public:
  Adam(std::vector<ParamPtr<S>> params, S lr, S beta1 = S(0.9), S beta2 = S(0.999), S eps = S(1e-8))
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.emplace_back(p->value.shape);
      v_.emplace_back(p->value.shape);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  void set_lr(S lr) { lr_ = lr; }
  S lr() const { return lr_; }
  i64 step_count() const { return t_; }
  const std::vector<ParamPtr<S>>& params() const { return params_; }

  void step() {
    ++t_;
    const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta1_), static_cast<double>(t_)));
    const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta2_), static_cast<double>(t_)));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      auto& m = m_[i].data;
      auto& v = v_[i].data;
      for (std::size_t j = 0; j < p.value.data.size(); ++j) {
        const S g = p.grad.data[j];
        m[j] = beta1_ * m[j] + (S(1) - beta1_) * g;
        v[j] = beta2_ * v[j] + (S(1) - beta2_) * g * g;
        const S mhat = m[j] / bc1;
        const S vhat = v[j] / bc2;
        p.value.data[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

 private:
  std::vector<ParamPtr<S>> params_;
  S lr_, beta1_, beta2_, eps_;
  i64 t_ = 0;
  std::vector<Tensor<S>> m_, v_;
};

// lr0 / (1 + decay * epoch), epoch counted from 0.
inline double inverse_time_lr(double lr0, double decay, i64 epoch) {
  return lr0 / (1.0 + decay * static_cast<double>(epoch));
}

// lr0 divided by `factor` after every `step_epochs` completed epochs.
inline double step_decay_lr(double lr0, double factor, i64 step_epochs, i64 epoch) {
  double lr = lr0;
  for (i64 e = step_epochs; e <= epoch; e += step_epochs) lr /= factor;
  return lr;
}

}  // namespace bixnas
