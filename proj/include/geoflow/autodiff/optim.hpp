#pragma once

#include "geoflow/autodiff/tensor.hpp"

#include <cmath>
#include <vector>

namespace geoflow::ad {

/// Global L2 norm over all parameter gradients; rescales them in place when
/// it exceeds `max_norm`. Returns the norm before clipping.
template <typename Scalar>
Scalar clip_grad_norm(std::vector<Tensor<Scalar>>& params, Scalar max_norm) {
  Scalar sq = 0;
  for (const auto& p : params) {
    if (p.has_grad()) sq += p.grad().squaredNorm();
  }
  const Scalar norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm && max_norm > Scalar(0)) {
    const Scalar f = max_norm / (norm + Scalar(1e-6));
    for (auto& p : params) {
      if (p.has_grad()) p.node()->grad *= f;
    }
  }
  return norm;
}

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// Adam with decoupled weight decay.
template <typename Scalar>
class AdamW {
 public:
  AdamW(std::vector<Tensor<Scalar>> params, AdamWOptions options = {})
      : params_(std::move(params)), options_(options) {
    for (const auto& p : params_) {
      m_.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
      v_.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    const auto b1 = static_cast<Scalar>(options_.beta1);
    const auto b2 = static_cast<Scalar>(options_.beta2);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      const Matrix<Scalar>& g = p.grad();
      m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g;
      v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g.cwiseAbs2();
      Matrix<Scalar>& w = p.mutable_value();
      w *= static_cast<Scalar>(1.0 - lr * options_.weight_decay);
      const auto step_size = static_cast<Scalar>(lr / bc1);
      const auto denom = (v_[i].array() / static_cast<Scalar>(bc2)).sqrt() + static_cast<Scalar>(options_.eps);
      w.array() -= step_size * m_[i].array() / denom;
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::vector<Tensor<Scalar>>& params() { return params_; }
  long steps() const { return t_; }

 private:
  std::vector<Tensor<Scalar>> params_;
  AdamWOptions options_;
  std::vector<Matrix<Scalar>> m_;
  std::vector<Matrix<Scalar>> v_;
  long t_ = 0;
};

}  // namespace geoflow::ad
