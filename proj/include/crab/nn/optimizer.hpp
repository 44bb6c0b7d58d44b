#pragma once

#include <vector>

#include "crab/common.hpp"
#include "crab/nn/layers.hpp"

namespace crab::nn {

// RMSprop with a running mean of squared gradients:
//   s <- a*s + (1-a)*g^2,  p <- p - lr * g / (sqrt(s) + eps)
template <typename T>
class RmsProp {
 public:
  RmsProp(T lr, T alpha = T(0.99), T eps = T(1e-8))
      : lr_(lr), alpha_(alpha), eps_(eps) {}

  void step(ParamStore<T>& store) {
    if (sq_.empty()) {
      sq_.resize(store.size());
      for (std::size_t i = 0; i < store.size(); ++i)
        sq_[i] = Matrix<T>::Zero(store[i].value.rows(), store[i].value.cols());
    }
    require<ShapeError>(sq_.size() == store.size(), "RmsProp: store size changed");
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto& p = store[i];
      if (!p.trainable) continue;
      sq_[i] = alpha_ * sq_[i].array() + (T(1) - alpha_) * p.grad.array().square();
      p.value.array() -= lr_ * p.grad.array() / (sq_[i].array().sqrt() + eps_);
    }
  }

  T learning_rate() const { return lr_; }
  void set_learning_rate(T lr) { lr_ = lr; }

  std::vector<Matrix<T>>& state() { return sq_; }
  const std::vector<Matrix<T>>& state() const { return sq_; }

 private:
  T lr_, alpha_, eps_;
  std::vector<Matrix<T>> sq_;
};

}  // namespace crab::nn
