#pragma once

#include <cstddef>
#include <vector>

#include "mse2d/tensor.hpp"

namespace mse2d {

struct AdamWOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// AdamW with decoupled weight decay and a constant learning rate.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWOptions options);

  // Applies one update from the accumulated grads. Parameters without a
  // gradient buffer are treated as having zero gradient.
  void step();
  void zero_grad();
  std::size_t steps_taken() const { return step_; }
  const AdamWOptions& options() const { return options_; }

 private:
  std::vector<Tensor> params_;
  AdamWOptions options_;
  std::vector<std::vector<double>> first_moment_;
  std::vector<std::vector<double>> second_moment_;
  std::size_t step_ = 0;
};

}  // namespace mse2d
