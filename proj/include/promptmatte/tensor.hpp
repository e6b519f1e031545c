#pragma once

// Dense row-major tensors with tape-free reverse-mode differentiation.
//
// Every op that receives at least one operand with requires_grad() set
// records a Node holding its inputs and a backward closure. backward() on a
// scalar walks those nodes in reverse topological order exactly once and
// accumulates d(root)/d(leaf) into each leaf's grad buffer. Unless
// retain_graph is requested the nodes are released as they are visited and
// a second traversal raises StateError.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pmatte {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { kFloat32 = 0, kFloat64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
  return DType::kFloat32;
}
template <>
constexpr DType dtype_of<double>() {
  return DType::kFloat64;
}

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct Node;

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::shared_ptr<Node<T>> grad_fn;
};

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

template <typename T>
using BackwardFn = std::function<void(const std::vector<T>& out,
                                      const std::vector<T>& grad_out,
                                      std::span<const ImplPtr<T>> inputs)>;

template <typename T>
struct Node {
  const char* op = "";
  std::vector<ImplPtr<T>> inputs;
  BackwardFn<T> backward;
  bool consumed = false;
};

// Grad buffer of `impl`, allocated as zeros on first use.
template <typename T>
std::vector<T>& grad_buffer(TensorImpl<T>& impl) {
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), T(0));
  return impl.grad;
}

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);
  explicit Tensor(detail::ImplPtr<T> impl) : impl_(std::move(impl)) {}

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const T> data() const;
  // Mutable view of a leaf's values; raises StateError on op results.
  std::span<T> data_mut();
  T item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> grad_mut();
  void zero_grad();

  void backward(bool retain_graph = false) const;

  // Copy of the values with no graph attached.
  Tensor detach() const;

  const detail::ImplPtr<T>& impl() const { return impl_; }

 private:
  detail::ImplPtr<T> impl_;
};

// Builds an op result. A Node is attached only when grad mode is on and one
// of `inputs` requires grad. Raises NumericError on non-finite output.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::vector<Tensor<T>> inputs, detail::BackwardFn<T> fn);

// Binary "PMT1" format: magic, dtype code (u8), rank (u8), u64 LE extents,
// LE payload.
template <typename T>
void write_pmt(std::ostream& out, const Tensor<T>& t);
template <typename T>
Tensor<T> read_pmt(std::istream& in);
template <typename T>
void save_pmt(const std::string& path, const Tensor<T>& t);
template <typename T>
Tensor<T> load_pmt(const std::string& path);
DType peek_pmt_dtype(const std::string& path);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace pmatte
