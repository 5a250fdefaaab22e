#pragma once

#include <cmath>

#include <Eigen/Dense>

namespace sparsedict {

struct AdamParams {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// First/second moment state for one parameter tensor. The step counter is
// shared by the caller so that all tensors see the same bias correction.
template <typename Tensor>
class AdamState {
 public:
  using Scalar = typename Tensor::Scalar;

  explicit AdamState(const Tensor& like)
      : m_(Tensor::Zero(like.rows(), like.cols())), v_(Tensor::Zero(like.rows(), like.cols())) {}

  template <typename Grad>
  void step(Tensor& param, const Grad& grad, long t, const AdamParams& p) {
    const auto b1 = static_cast<Scalar>(p.beta1);
    const auto b2 = static_cast<Scalar>(p.beta2);
    m_ = b1 * m_ + (Scalar(1) - b1) * grad;
    v_ = b2 * v_ + (Scalar(1) - b2) * grad.cwiseProduct(grad);
    const auto m_corr = static_cast<Scalar>(1.0 - std::pow(p.beta1, static_cast<double>(t)));
    const auto v_corr = static_cast<Scalar>(1.0 - std::pow(p.beta2, static_cast<double>(t)));
    const auto lr = static_cast<Scalar>(p.learning_rate);
    const auto eps = static_cast<Scalar>(p.epsilon);
    param.array() -=
        lr * (m_.array() / m_corr) / ((v_.array() / v_corr).sqrt() + eps);
  }

  // Zeroes the moments of one row (a reinitialized feature).
  void reset_row(Eigen::Index row) {
    m_.row(row).setZero();
    v_.row(row).setZero();
  }

 private:
  Tensor m_;
  Tensor v_;
};

}  // namespace sparsedict
