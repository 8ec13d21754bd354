#pragma once

// AdamW with decoupled weight decay and a linear warmup that starts from a
// small initial rate and then holds the base rate.

#include <cmath>
#include <vector>

#include "semtrace/neural/model.hpp"

namespace semtrace::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 1e-2;
  double warmup_init = 1e-7;
  std::size_t warmup_steps = 0;  // optimizer steps spent ramping up
  double clip_norm = 0;          // global gradient-norm clip, 0 disables
};

template <class T>
class AdamW {
 public:
  explicit AdamW(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::size_t steps() const { return t_; }

  double lr_at(std::size_t step) const {
    if (step >= cfg_.warmup_steps) return cfg_.lr;
    return cfg_.warmup_init + (cfg_.lr - cfg_.warmup_init) * static_cast<double>(step) / static_cast<double>(cfg_.warmup_steps);
  }

  /// Applies one update from the accumulated gradients, scaled by
  /// `grad_scale`, then clears them.
  void step(Model<T>& m, double grad_scale = 1.0) {
    std::vector<Tensor<T>*> ts;
    m.for_each_tensor([&](Tensor<T>& t) { ts.push_back(&t); });
    if (m1_.empty()) {
      for (auto* t : ts) {
        m1_.push_back(Mat<T>::Zero(t->value.rows(), t->value.cols()));
        m2_.push_back(Mat<T>::Zero(t->value.rows(), t->value.cols()));
      }
    }
    double sq = 0;
    for (auto* t : ts) {
      if (t->grad.size() == 0) t->zero_grad();
      if (!t->grad.allFinite()) throw NonFiniteGradient(t->name);
      sq += static_cast<double>(t->grad.squaredNorm());
    }
    double s = grad_scale;
    const double norm = std::sqrt(sq) * grad_scale;
    if (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) s *= cfg_.clip_norm / norm;

    const double lr = lr_at(t_);
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      auto& p = ts[i]->value;
      const Mat<T> g = ts[i]->grad * static_cast<T>(s);
      m1_[i] = b1 * m1_[i] + (T(1) - b1) * g;
      m2_[i] = b2 * m2_[i] + (T(1) - b2) * g.cwiseProduct(g);
      const auto mhat = m1_[i].array() / static_cast<T>(bc1);
      const auto vhat = m2_[i].array() / static_cast<T>(bc2);
      p.array() -= static_cast<T>(lr) * (mhat / (vhat.sqrt() + static_cast<T>(cfg_.eps)) +
                                         static_cast<T>(cfg_.weight_decay) * p.array());
      ts[i]->zero_grad();
    }
  }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<Mat<T>> m1_, m2_;
};

}  // namespace semtrace::nn
