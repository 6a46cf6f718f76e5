#pragma once

#include <cmath>
#include <unordered_map>
#include <vector>

#include "sketchnet/nn/tape.hpp"

namespace sketchnet::nn {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.998;
  double epsilon = 1e-8;
};

/// Adam with bias correction. Frozen parameters are skipped.
template <class T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>*> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    for (auto* p : params_) {
      state_[p].m.setZero(p->value.rows(), p->value.cols());
      state_[p].v.setZero(p->value.rows(), p->value.cols());
    }
  }

  void step() {
    ++steps_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    const T lr = static_cast<T>(config_.learning_rate);
    const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
    const T eps = static_cast<T>(config_.epsilon);
    for (auto* p : params_) {
      if (p->frozen || p->grad.size() != p->value.size()) continue;
      auto& s = state_[p];
      s.m = b1 * s.m + (T(1) - b1) * p->grad;
      s.v = b2 * s.v + (T(1) - b2) * p->grad.cwiseProduct(p->grad);
      p->value.array() -= lr * (s.m.array() / static_cast<T>(c1)) /
                          ((s.v.array() / static_cast<T>(c2)).sqrt() + eps);
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  long steps() const { return steps_; }
  const std::vector<Parameter<T>*>& params() const { return params_; }

 private:
  struct Moments {
    Matrix<T> m, v;
  };
  std::vector<Parameter<T>*> params_;
  AdamConfig config_;
  std::unordered_map<Parameter<T>*, Moments> state_;
  long steps_ = 0;
};

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
template <class T>
double clip_grad_norm(const std::vector<Parameter<T>*>& params, double max_norm) {
  double sq = 0.0;
  for (auto* p : params) {
    if (p->grad.size() == p->value.size()) sq += static_cast<double>(p->grad.squaredNorm());
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto* p : params) {
      if (p->grad.size() == p->value.size()) p->grad *= f;
    }
  }
  return norm;
}

}  // namespace sketchnet::nn
