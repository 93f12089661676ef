#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mse2d {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

class Tape;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  const Tape* tape = nullptr;  // tape that produced this tensor, if any
  std::size_t node_index = 0;

  // Returns the gradient buffer, allocating zeros on first use.
  std::vector<double>& ensure_grad();
};

// Dense row-major float64 array. Copies share storage (handle semantics);
// use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double at(std::size_t flat) const { return impl_->data.at(flat); }
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool has_grad() const { return !impl_->grad.empty(); }
  // Gradient view; all zeros when nothing has been accumulated yet.
  std::span<const double> grad() const;
  std::span<double> mutable_grad() { return impl_->ensure_grad(); }
  void zero_grad();

  // Deep copy with no tape history; requires_grad is preserved.
  Tensor clone() const;
  // Same values, cut off from the tape, never requires grad.
  Tensor detach() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Define-by-run record of differentiable operations. Rebuilt every forward
// pass; one tape per thread at a time.
class Tape {
 public:
  struct Node {
    std::string_view op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::string_view op, std::vector<std::shared_ptr<TensorImpl>> inputs,
              std::shared_ptr<TensorImpl> output, std::function<void()> backward);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  bool contains(const Tensor& t) const;

  // Seeds d(loss)/d(loss) = 1 and runs every node's rule once, newest first.
  // Gradients accumulate; callers zero parameter grads between steps.
  void backward(const Tensor& loss) const;
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

// Makes a tape the thread's active recording target for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording (inference mode) for its lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// Backward through the tape that recorded `loss`.
void backward(const Tensor& loss);

}  // namespace mse2d
