#include "mse2d/optimizer.hpp"

#include <cmath>

namespace mse2d {

AdamW::AdamW(std::vector<Tensor> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
  for (const Tensor& p : params_) {
    first_moment_.emplace_back(p.numel(), 0.0);
    second_moment_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step() {
  ++step_;
  const double t = static_cast<double>(step_);
  const double correction1 = 1.0 - std::pow(options_.beta1, t);
  const double correction2 = 1.0 - std::pow(options_.beta2, t);
  const double lr = options_.learning_rate;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    auto data = p.mutable_data();
    auto& m = first_moment_[i];
    auto& v = second_moment_[i];
    const bool has_grad = p.has_grad();
    const auto grad = has_grad ? p.grad() : std::span<const double>{};
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = has_grad ? grad[j] : 0.0;
      m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * g;
      v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * g * g;
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      data[j] -= lr * (m_hat / (std::sqrt(v_hat) + options_.eps) + options_.weight_decay * data[j]);
    }
  }
}

void AdamW::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

}  // namespace mse2d
