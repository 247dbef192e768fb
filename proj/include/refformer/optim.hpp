#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "refformer/tensor.hpp"

namespace refformer {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

/// AdamW with decoupled weight decay, bias correction and optional global
/// gradient-norm clipping. Moments live in double.
template <class T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::vector<Tensor<T>> params, AdamWConfig cfg) : cfg_(cfg) {
    for (auto& p : params) {
      if (!p.requires_grad()) continue;
      params_.push_back(p);
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  std::size_t step_count() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  const std::vector<Tensor<T>>& params() const { return params_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }

  /// Global L2 norm of the current gradients.
  double grad_norm() const {
    double sq = 0.0;
    for (const auto& p : params_)
      if (p.has_grad())
        for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(sq);
  }

  /// Applies one update; returns the pre-clipping gradient norm.
  double step() {
    const double norm = grad_norm();
    const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i];
      if (!p.requires_grad()) continue;
      auto data = p.mutable_data();
      const bool has = p.has_grad();
      for (std::size_t j = 0; j < data.size(); ++j) {
        const double g = has ? static_cast<double>(p.grad()[j]) * clip : 0.0;
        double& m = m_[i][j];
        double& v = v_[i][j];
        m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
        v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g;
        double theta = static_cast<double>(data[j]);
        theta -= cfg_.lr * cfg_.weight_decay * theta;
        theta -= cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        data[j] = static_cast<T>(theta);
      }
    }
    return norm;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
};

}  // namespace refformer
