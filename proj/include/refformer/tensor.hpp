#pragma once

// Dense row-major tensors with an explicit reverse-mode tape.
//
// A Tensor is a shared handle to a node holding shape, values and (lazily)
// a gradient buffer. Operations record a backward closure on the active tape
// of the current thread whenever a tape is active and at least one input
// requires a gradient; without an active tape everything runs in inference
// mode and nothing is recorded.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace refformer {

/// Raised when tensor extents are incompatible with an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a caller violates an API precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

template <class T>
class Tape;

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<TensorNode<T>>()) {
    for (std::size_t d : shape)
      if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<TensorNode<T>>()) {
    for (std::size_t d : shape)
      if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != values.size())
      throw DimensionError("value count " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  const T* ptr() const { return node_->data.data(); }
  T at(std::size_t i) const { return node_->data.at(i); }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    if (!flag) node_->grad.clear();
    return *this;
  }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no tape participation.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  TensorNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Ordered record of differentiable operations for one forward pass.
template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<TensorNode<T>> output, std::function<void()> backward_fn) {
    entries_.push_back({std::move(output), std::move(backward_fn)});
  }

  std::size_t size() const { return entries_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Intermediate
  /// gradients are reset first, so repeated calls accumulate only on leaves.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw ContractError("backward: loss must be a scalar, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    if (!loss.requires_grad()) throw ContractError("backward: loss is not on the tape");
    for (auto& e : entries_) e.output->grad.clear();
    loss.node()->ensure_grad();
    loss.node()->grad[0] = T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
  }

  void clear() { entries_.clear(); }

  static Tape* active() { return active_; }

 private:
  template <class>
  friend class TapeScope;

  struct Entry {
    std::shared_ptr<TensorNode<T>> output;
    std::function<void()> backward;
  };

  std::vector<Entry> entries_;
  static inline thread_local Tape* active_ = nullptr;
};

/// Makes a tape the recording target for the current thread; a null tape
/// suspends recording until the scope ends.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : TapeScope(&tape) {}
  explicit TapeScope(Tape<T>* tape) : previous_(Tape<T>::active_) { Tape<T>::active_ = tape; }
  ~TapeScope() { Tape<T>::active_ = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <class T>
class NoGradScope : TapeScope<T> {
 public:
  NoGradScope() : TapeScope<T>(static_cast<Tape<T>*>(nullptr)) {}
};

namespace detail {

/// Returns the active tape if the result of an op over `inputs` must be recorded.
template <class T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return nullptr;
  for (const Tensor<T>* t : inputs)
    if (t->requires_grad()) return tape;
  return nullptr;
}

template <class T>
Tape<T>* recording_tape(const std::vector<Tensor<T>>& inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return nullptr;
  for (const Tensor<T>& t : inputs)
    if (t.requires_grad()) return tape;
  return nullptr;
}

}  // namespace detail
}  // namespace refformer
