#include "mse2d/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "mse2d/errors.hpp"

namespace mse2d {

namespace {
thread_local Tape* g_active_tape = nullptr;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& TensorImpl::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t s : shape) {
    if (s == 0) throw DimensionError("tensor shape " + shape_to_string(shape) + " has a zero extent");
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_to_string(shape) + " does not match " +
                         std::to_string(data.size()) + " elements");
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::ones(Shape shape, bool requires_grad) { return full(std::move(shape), 1.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_to_string(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw DimensionError("at(row, col) on tensor of shape " + shape_to_string(shape()));
  return impl_->data.at(row * impl_->shape[1] + col);
}

std::span<const double> Tensor::grad() const { return impl_->ensure_grad(); }

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->data, impl_->requires_grad); }

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

void Tape::record(std::string_view op, std::vector<std::shared_ptr<TensorImpl>> inputs,
                  std::shared_ptr<TensorImpl> output, std::function<void()> backward) {
  output->tape = this;
  output->node_index = nodes_.size();
  output->requires_grad = true;
  nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(backward)});
}

bool Tape::contains(const Tensor& t) const {
  const auto& impl = t.impl();
  return impl && impl->tape == this && impl->node_index < nodes_.size() &&
         nodes_[impl->node_index].output.get() == impl.get();
}

void Tape::backward(const Tensor& loss) const {
  if (!loss.defined()) throw TapeError("backward on an undefined tensor");
  if (loss.numel() != 1) {
    throw TapeError("backward requires a scalar loss, got shape " + shape_to_string(loss.shape()));
  }
  if (!contains(loss)) throw TapeError("backward: loss was not recorded on this tape");
  auto& seed = loss.impl()->ensure_grad();
  seed[0] += 1.0;
  for (std::size_t i = loss.impl()->node_index + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (node.output->grad.empty()) continue;
    node.backward();
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }

NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.impl()->tape == nullptr) {
    throw TapeError("backward: loss was not recorded on any tape");
  }
  loss.impl()->tape->backward(loss);
}

}  // namespace mse2d
