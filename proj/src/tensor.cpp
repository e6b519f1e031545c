#include "promptmatte/tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "promptmatte/errors.hpp"

namespace pmatte {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor rank must be at least 1");
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  }
}
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) {
  check_shape(shape);
  impl_ = std::make_shared<detail::TensorImpl<T>>();
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) {
  check_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  }
  impl_ = std::make_shared<detail::TensorImpl<T>>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!impl_) throw StateError("undefined tensor");
  return impl_->shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw DimensionError("axis out of range for " + shape_str(s));
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return shape_numel(shape());
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  if (!impl_) throw StateError("undefined tensor");
  return impl_->data;
}

template <typename T>
std::span<T> Tensor<T>::data_mut() {
  if (!impl_) throw StateError("undefined tensor");
  if (impl_->grad_fn) throw StateError("cannot mutate the values of an op result");
  return impl_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (!impl_) throw StateError("undefined tensor");
  if (!is_leaf()) throw StateError("requires_grad can only be set on leaves");
  impl_->requires_grad = on;
  return *this;
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return impl_ && !impl_->grad_fn;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return impl_ && !impl_->grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) throw StateError("tensor has no gradient");
  return impl_->grad;
}

template <typename T>
std::span<T> Tensor<T>::grad_mut() {
  if (!impl_) throw StateError("undefined tensor");
  return detail::grad_buffer(*impl_);
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (impl_) impl_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), impl_->data);
}

template <typename T>
void Tensor<T>::backward(bool retain_graph) const {
  using Impl = detail::TensorImpl<T>;
  if (!impl_) throw StateError("backward on undefined tensor");
  if (impl_->data.size() != 1) {
    throw ArgumentError("backward requires a scalar root, got " + shape_str(impl_->shape));
  }
  if (!impl_->requires_grad) throw ArgumentError("backward root is not connected to any leaf");
  if (impl_->grad_fn && impl_->grad_fn->consumed) {
    throw StateError("graph already consumed by a previous backward");
  }

  // Post-order DFS; reversed it is a topological order from the root. The
  // order holds owning pointers since released nodes drop their inputs.
  std::vector<detail::ImplPtr<T>> order;
  std::unordered_set<const Impl*> visited;
  std::vector<std::pair<detail::ImplPtr<T>, std::size_t>> stack;
  stack.emplace_back(impl_, 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& top = stack.back();
    const auto& fn = top.first->grad_fn;
    if (fn && top.second < fn->inputs.size()) {
      detail::ImplPtr<T> child = fn->inputs[top.second++];
      if (child->requires_grad && !visited.count(child.get())) {
        visited.insert(child.get());
        stack.emplace_back(std::move(child), 0);
      }
      continue;
    }
    order.push_back(std::move(top.first));
    stack.pop_back();
  }

  impl_->grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* cur = it->get();
    auto& fn = cur->grad_fn;
    if (!fn) continue;  // leaf keeps its accumulated grad
    if (fn->consumed) throw StateError("graph already consumed by a previous backward");
    if (!cur->grad.empty()) {
      fn->backward(cur->data, cur->grad, fn->inputs);
    }
    cur->grad.clear();
    cur->grad.shrink_to_fit();
    if (!retain_graph) {
      fn->consumed = true;
      fn->backward = nullptr;
      fn->inputs.clear();
    }
  }
}

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::vector<Tensor<T>> inputs, detail::BackwardFn<T> fn) {
  for (const T& v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
  Tensor<T> out(std::move(shape), std::move(values));
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<detail::Node<T>>();
  node->op = op;
  node->inputs.reserve(inputs.size());
  for (const auto& in : inputs) node->inputs.push_back(in.impl());
  node->backward = std::move(fn);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
  return out;
}

// ---------------------------------------------------------------------------
// PMT1 serialization

namespace {

constexpr std::array<char, 4> kMagic = {'P', 'M', 'T', '1'};

template <typename U>
void put_le(std::ostream& out, U value) {
  static_assert(std::is_integral_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.put(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
}

template <typename U>
U get_le(std::istream& in) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    int c = in.get();
    if (c == EOF) throw IoError("truncated PMT1 stream");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<U>(v);
}

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

struct Header {
  DType dtype;
  Shape shape;
};

Header read_header(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  if (!in || magic != kMagic) throw IoError("not a PMT1 stream");
  auto code = get_le<std::uint8_t>(in);
  if (code > 1) throw IoError("unknown PMT1 dtype code " + std::to_string(code));
  auto rank = get_le<std::uint8_t>(in);
  Header h{static_cast<DType>(code), {}};
  for (std::uint8_t i = 0; i < rank; ++i) h.shape.push_back(get_le<std::uint64_t>(in));
  return h;
}

}  // namespace

template <typename T>
void write_pmt(std::ostream& out, const Tensor<T>& t) {
  out.write(kMagic.data(), 4);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(dtype_of<T>()));
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) put_le<std::uint64_t>(out, e);
  for (T v : t.data()) put_le<Bits<T>>(out, std::bit_cast<Bits<T>>(v));
  if (!out) throw IoError("failed writing PMT1 stream");
}

template <typename T>
Tensor<T> read_pmt(std::istream& in) {
  Header h = read_header(in);
  if (h.dtype != dtype_of<T>()) throw IoError("PMT1 dtype does not match requested type");
  std::vector<T> values(shape_numel(h.shape));
  for (T& v : values) v = std::bit_cast<T>(get_le<Bits<T>>(in));
  return Tensor<T>(std::move(h.shape), std::move(values));
}

template <typename T>
void save_pmt(const std::string& path, const Tensor<T>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_pmt(out, t);
}

template <typename T>
Tensor<T> load_pmt(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return read_pmt<T>(in);
}

DType peek_pmt_dtype(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return read_header(in).dtype;
}

template class Tensor<float>;
template class Tensor<double>;

#define PMATTE_INSTANTIATE(T)                                                                 \
  template Tensor<T> make_result<T>(const char*, Shape, std::vector<T>,                       \
                                    std::vector<Tensor<T>>, detail::BackwardFn<T>);           \
  template void write_pmt<T>(std::ostream&, const Tensor<T>&);                                \
  template Tensor<T> read_pmt<T>(std::istream&);                                              \
  template void save_pmt<T>(const std::string&, const Tensor<T>&);                            \
  template Tensor<T> load_pmt<T>(const std::string&);

PMATTE_INSTANTIATE(float)
PMATTE_INSTANTIATE(double)
#undef PMATTE_INSTANTIATE

}  // namespace pmatte
