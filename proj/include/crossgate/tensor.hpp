/*
 * Copyright (c) 2026 The crossgate Authors
 *
 * Licensed under the Apache License, Version 2.0;
 * You may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an 'AS IS' BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <atomic>
#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace crossgate {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace debug {
/// When enabled, every primitive rejects non-finite inputs.
#ifdef NDEBUG
inline std::atomic<bool> finite_checks{false};
#else
inline std::atomic<bool> finite_checks{true};
#endif
inline void set_finite_checks(bool on) { finite_checks.store(on); }
}  // namespace debug

/// Extents of a dense tensor. Rank 0 is a scalar; every extent is >= 1.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) : dims_(dims) { validate(); }
  explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) { validate(); }

  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t operator[](std::size_t i) const { return dims_.at(i); }
  std::size_t back() const { return dims_.empty() ? 1 : dims_.back(); }
  const std::vector<std::size_t>& dims() const noexcept { return dims_; }

  std::size_t numel() const noexcept {
    return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>{});
  }

  /// Shape with the given axis removed.
  Shape without(std::size_t axis) const {
    auto d = dims_;
    d.erase(d.begin() + static_cast<std::ptrdiff_t>(axis));
    return Shape(std::move(d));
  }

  /// True when `other` equals the trailing dims of this shape.
  bool has_suffix(const Shape& other) const {
    if (other.rank() > rank()) return false;
    return std::equal(other.dims_.begin(), other.dims_.end(), dims_.end() - static_cast<std::ptrdiff_t>(other.rank()));
  }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
    os << ']';
    return os.str();
  }

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  void validate() const {
    for (auto d : dims_)
      if (d == 0) throw ShapeError("Shape: extents must be >= 1, got " + str());
  }

  std::vector<std::size_t> dims_;
};

enum class OpKind {
  leaf,
  matmul,
  add,
  mul,
  scale,
  concat,
  slice,
  reshape,
  transpose,
  mean,
  sum,
  gelu,
  sigmoid,
  softmax,
  layer_norm,
  embedding,
  cross_entropy,
};

constexpr std::string_view op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::reshape: return "reshape";
    case OpKind::transpose: return "transpose";
    case OpKind::mean: return "mean";
    case OpKind::sum: return "sum";
    case OpKind::gelu: return "gelu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::softmax: return "softmax";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::embedding: return "embedding";
    case OpKind::cross_entropy: return "cross_entropy";
  }
  return "?";
}

template <std::floating_point T>
class Tape;

template <std::floating_point T>
class Gradients;

/// Dense row-major tensor with value semantics.
///
/// Copies share the underlying buffer; mutable_data() un-shares it first, so
/// a copy never observes writes made through another handle. A tensor that
/// was produced on a Tape carries a node handle and is immutable.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : Tensor(Shape{}) {}
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(shape_.numel(), fill)) {}
  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(values))) {
    if (data_->size() != shape_.numel())
      throw ShapeError("Tensor: " + std::to_string(data_->size()) + " values for shape " + shape_.str());
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.rank(); }
  std::size_t numel() const noexcept { return data_->size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }

  std::span<const T> data() const noexcept { return {data_->data(), data_->size()}; }
  const std::shared_ptr<std::vector<T>>& buffer() const noexcept { return data_; }

  std::span<T> mutable_data() {
    if (tracked()) throw std::logic_error("Tensor: cannot mutate a tensor recorded on a tape");
    if (data_.use_count() > 1) data_ = std::make_shared<std::vector<T>>(*data_);
    return {data_->data(), data_->size()};
  }

  T item() const {
    if (numel() != 1) throw ShapeError("Tensor::item: shape " + shape_.str() + " is not a single value");
    return (*data_)[0];
  }

  /// Element access by full multi-index.
  T at(std::initializer_list<std::size_t> index) const { return (*data_)[offset(index)]; }
  T operator[](std::size_t flat) const { return (*data_)[flat]; }

  bool tracked() const noexcept { return tape_ != nullptr; }
  Tape<T>* tape() const noexcept { return tape_; }
  std::size_t node() const noexcept { return node_; }
  std::uint64_t generation() const noexcept { return generation_; }

  /// Same values, no tape handle.
  Tensor detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  template <std::floating_point U>
  Tensor<U> cast() const {
    std::vector<U> v(data_->begin(), data_->end());
    return Tensor<U>(shape_, std::move(v));
  }

 private:
  friend class Tape<T>;

  std::size_t offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw ShapeError("Tensor::at: index rank mismatch for " + shape_.str());
    std::size_t off = 0, i = 0;
    for (auto x : index) {
      if (x >= shape_[i]) throw std::out_of_range("Tensor::at: index out of range for " + shape_.str());
      off = off * shape_[i] + x;
      ++i;
    }
    return off;
  }

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  Tape<T>* tape_ = nullptr;
  std::size_t node_ = 0;
  std::uint64_t generation_ = 0;
};

/// Which gradients backward() keeps once the sweep is done.
enum class Retain { all, leaves };

/// Append-only record of primitive applications for reverse-mode
/// differentiation. Single owner; clear() invalidates every tensor handle
/// issued before it.
template <std::floating_point T>
class Tape {
 public:
  /// Accumulates d(root)/d(input_i) into grad_in[i]; null entries are inputs
  /// that are not on the tape.
  using Backward = std::function<void(std::span<const T> grad_out, std::span<std::vector<T>* const> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a leaf; the returned handle shares the value's buffer.
  Tensor<T> watch(const Tensor<T>& value) {
    Tensor<T> out = value.detach();
    return attach(OpKind::leaf, {}, std::move(out), nullptr);
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  OpKind kind(std::size_t node) const { return nodes_.at(node).kind; }
  const std::vector<std::size_t>& inputs(std::size_t node) const { return nodes_.at(node).inputs; }
  std::uint64_t generation() const noexcept { return generation_; }

  void clear() {
    nodes_.clear();
    ++generation_;
  }

  bool owns(const Tensor<T>& t) const noexcept {
    return t.tape_ == this && t.generation_ == generation_ && t.node_ < nodes_.size();
  }

  /// Records an op output. Inputs that are not on this tape contribute no
  /// gradient.
  Tensor<T> record(OpKind kind, std::initializer_list<const Tensor<T>*> inputs, Tensor<T> out, Backward backward) {
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const auto* in : inputs) ids.push_back(in && owns(*in) ? in->node_ : kNoNode);
    return attach(kind, std::move(ids), std::move(out), std::move(backward));
  }

  Tensor<T> record(OpKind kind, const std::vector<const Tensor<T>*>& inputs, Tensor<T> out, Backward backward) {
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const auto* in : inputs) ids.push_back(in && owns(*in) ? in->node_ : kNoNode);
    return attach(kind, std::move(ids), std::move(out), std::move(backward));
  }

  Gradients<T> backward(const Tensor<T>& root, Retain retain = Retain::all) const;

  static constexpr std::size_t kNoNode = static_cast<std::size_t>(-1);

 private:
  struct Node {
    OpKind kind;
    Shape shape;
    std::vector<std::size_t> inputs;
    Backward backward;
  };

  Tensor<T> attach(OpKind kind, std::vector<std::size_t> inputs, Tensor<T> out, Backward backward) {
    out.tape_ = this;
    out.node_ = nodes_.size();
    out.generation_ = generation_;
    nodes_.push_back(Node{kind, out.shape_, std::move(inputs), std::move(backward)});
    return out;
  }

  std::vector<Node> nodes_;
  std::uint64_t generation_ = 0;
};

/// Result of Tape::backward: d(root)/d(node) for every node reachable from
/// the root.
template <std::floating_point T>
class Gradients {
 public:
  bool contains(const Tensor<T>& t) const { return lookup(t) != nullptr; }

  const Tensor<T>& at(const Tensor<T>& t) const {
    const auto* g = lookup(t);
    if (!g) throw std::out_of_range("Gradients::at: tensor is not reachable from the root");
    return *g;
  }

  std::optional<Tensor<T>> find(const Tensor<T>& t) const {
    const auto* g = lookup(t);
    return g ? std::optional<Tensor<T>>(*g) : std::nullopt;
  }

  std::size_t count() const {
    return static_cast<std::size_t>(std::count_if(grads_.begin(), grads_.end(), [](auto& g) { return g.has_value(); }));
  }

 private:
  friend class Tape<T>;

  const Tensor<T>* lookup(const Tensor<T>& t) const {
    if (t.tape() != tape_ || t.generation() != generation_ || t.node() >= grads_.size()) return nullptr;
    const auto& g = grads_[t.node()];
    return g ? &*g : nullptr;
  }

  const Tape<T>* tape_ = nullptr;
  std::uint64_t generation_ = 0;
  std::vector<std::optional<Tensor<T>>> grads_;
};

template <std::floating_point T>
Gradients<T> Tape<T>::backward(const Tensor<T>& root, Retain retain) const {
  if (!owns(root)) throw std::invalid_argument("backward: root is not recorded on this tape");
  if (root.rank() != 0) throw ShapeError("backward: root must be a scalar, got shape " + root.shape().str());

  std::vector<std::vector<T>> buf(nodes_.size());
  buf[root.node_].assign(1, T(1));
  std::vector<std::vector<T>*> ptrs;
  for (std::size_t id = root.node_ + 1; id-- > 0;) {
    if (buf[id].empty()) continue;
    const Node& n = nodes_[id];
    if (!n.backward) continue;
    ptrs.assign(n.inputs.size(), nullptr);
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      const auto in = n.inputs[i];
      if (in == kNoNode) continue;
      if (buf[in].empty()) buf[in].assign(nodes_[in].shape.numel(), T(0));
      ptrs[i] = &buf[in];
    }
    n.backward(std::span<const T>(buf[id]), std::span<std::vector<T>* const>(ptrs));
    if (retain == Retain::leaves && id != root.node_) {
      buf[id].clear();
      buf[id].shrink_to_fit();
      buf[id].reserve(0);
    }
  }

  Gradients<T> out;
  out.tape_ = this;
  out.generation_ = generation_;
  out.grads_.resize(nodes_.size());
  for (std::size_t id = 0; id <= root.node_; ++id) {
    const bool keep = retain == Retain::all || nodes_[id].kind == OpKind::leaf || id == root.node_;
    if (keep && !buf[id].empty()) out.grads_[id] = Tensor<T>(nodes_[id].shape, std::move(buf[id]));
  }
  return out;
}

}  // namespace crossgate
