#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

// SGD with classical momentum and bias-corrected ADAM over a flat parameter
// view (raw pointers gathered by the caller), plus a step-decay schedule.
// One optimizer instance covers weights and quantizer latents alike.

namespace dq {

struct LrSchedule {
  double base_lr = 0.01;
  std::vector<long> milestones;  // strictly increasing step indices
  double factor = 0.1;

  void validate() const {
    for (std::size_t i = 1; i < milestones.size(); ++i)
      if (milestones[i] <= milestones[i - 1])
        throw std::invalid_argument("LrSchedule: milestones must be strictly increasing");
  }
};

// base_lr * factor^(number of milestones <= step)
inline double lr_at(const LrSchedule& s, long step) {
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  int hits = 0;
  for (long m : s.milestones)
    if (m <= step) ++hits;
  return s.base_lr * std::pow(s.factor, hits);
}

class SgdMomentum {
public:
  explicit SgdMomentum(std::size_t n, double momentum = 0.9)
      : mu_(momentum), v_(n, 0.0) {}

  // v <- mu*v + g; p <- p - lr*v
  void step(double lr, const std::vector<double*>& params, const std::vector<double>& grads) {
    if (params.size() != v_.size() || grads.size() != v_.size())
      throw std::invalid_argument("SgdMomentum: size mismatch");
    for (std::size_t i = 0; i < v_.size(); ++i) {
      v_[i] = mu_ * v_[i] + grads[i];
      *params[i] -= lr * v_[i];
    }
  }

private:
  double mu_;
  std::vector<double> v_;
};

class Adam {
public:
  explicit Adam(std::size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : b1_(beta1), b2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  void step(double lr, const std::vector<double*>& params, const std::vector<double>& grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw std::invalid_argument("Adam: size mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < m_.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * grads[i];
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * grads[i] * grads[i];
      const double mhat = m_[i] / c1;
      const double vhat = v_[i] / c2;
      *params[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }

private:
  double b1_, b2_, eps_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace dq
