#pragma once

#include <span>
#include <unordered_map>
#include <vector>

#include "egs/common.hpp"

namespace egs {

// First-order adaptive-moment gradient descent with bias correction.
struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  explicit Adam(size_t n, AdamConfig cfg = {}) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  void step(std::span<double> params, std::span<const double> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw InvalidParameter("Adam::step: size mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i] * grads[i];
      params[i] -= cfg_.lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.eps);
    }
  }

 private:
  AdamConfig cfg_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

// Per-scalar moments addressable by a stable key; survives points being
// spawned and pruned between steps.
class KeyedAdam {
 public:
  explicit KeyedAdam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }

  double update(uint64_t key, double grad) {
    auto& s = state_[key];
    ++s.t;
    s.m = cfg_.beta1 * s.m + (1.0 - cfg_.beta1) * grad;
    s.v = cfg_.beta2 * s.v + (1.0 - cfg_.beta2) * grad * grad;
    const double c1 = 1.0 - std::pow(cfg_.beta1, s.t);
    const double c2 = 1.0 - std::pow(cfg_.beta2, s.t);
    return cfg_.lr * (s.m / c1) / (std::sqrt(s.v / c2) + cfg_.eps);
  }

  void erase_prefix(uint64_t lo, uint64_t hi) {
    for (auto it = state_.begin(); it != state_.end();) {
      if (it->first >= lo && it->first < hi)
        it = state_.erase(it);
      else
        ++it;
    }
  }

 private:
  struct Moments {
    double m = 0.0, v = 0.0;
    long t = 0;
  };
  AdamConfig cfg_;
  std::unordered_map<uint64_t, Moments> state_;
};

}  // namespace egs
