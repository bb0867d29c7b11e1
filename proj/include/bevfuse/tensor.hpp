#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace bevfuse {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

/// One recorded operation on the autodiff tape.
struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Reads out.grad and accumulates into the gradients of `inputs`.
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient reaches this tensor
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

/// Dense row-major float64 tensor with reverse-mode differentiation.
///
/// A Tensor is a shared handle: copies alias the same storage. Ops never
/// mutate their inputs, so handles may be read from several threads; only the
/// optimizer writes to leaf parameters between steps.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  /// Writable view; only meant for leaf tensors (parameters, inputs).
  std::span<double> mutable_values();
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();

  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  void zero_grad();

  /// New leaf sharing no graph history (values are copied).
  Tensor detach() const;

  /// Reverse pass from a scalar. Gradients accumulate into every
  /// requires_grad ancestor; the recorded graph is released afterwards.
  void backward() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace detail {

/// Builds an op result. Throws NumericError (naming `op`) if any value is not
/// finite, and records a tape node when grad mode is on and an input needs it.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl& out)> backward);

/// Gradient buffer of an input (allocated on demand), or nullptr when the
/// input does not take part in differentiation.
double* grad_of(const std::shared_ptr<TensorImpl>& t);

}  // namespace detail

}  // namespace bevfuse
