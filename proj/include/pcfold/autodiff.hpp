#pragma once

// Dense tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle to a value buffer (row-major, contiguous) and an
// optional gradient buffer of the same shape. Operations take an explicit
// Graph, which records one backward closure per differentiable op in append
// order; Graph::backward replays them in reverse exactly once.
//
// Every reduction in this file accumulates sequentially in index order, so a
// forward pass is bitwise reproducible for fixed inputs.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pcfold::ad {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  // Empty span when no gradient has been accumulated.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad();

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  // Fresh handle with a copy of the values, detached from any graph.
  Tensor detach() const;
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

template <typename T>
class Graph {
 public:
  // A disabled graph records nothing; useful for inference.
  explicit Graph(bool enabled = true) : enabled_(enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool enabled() const { return enabled_; }
  std::size_t size() const { return nodes_.size(); }

  // Marks `out` as requiring grad and appends `backward` when any input
  // requires grad. The closure must accumulate into input gradient buffers.
  void record(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs,
              std::function<void()> backward);
  void record(Tensor<T>& out, const std::vector<const Tensor<T>*>& inputs,
              std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and runs every recorded rule in reverse.
  void backward(Tensor<T>& loss);

  // Fingerprint of discrete decisions (argmax picks, activation masks,
  // neighbor sets). Only maintained when tracking is switched on.
  void track_structure(bool on) { tracking_ = on; }
  bool tracking_structure() const { return tracking_; }
  void note_structure(std::span<const std::size_t> decisions);
  void note_structure(std::span<const std::uint8_t> decisions);
  std::uint64_t structure_hash() const { return structure_hash_; }

 private:
  bool enabled_;
  bool backward_done_ = false;
  bool tracking_ = false;
  std::uint64_t structure_hash_ = 1469598103934665603ull;
  std::vector<std::function<void()>> nodes_;
};

// Linear algebra.
template <typename T>
Tensor<T> matmul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> transpose(Graph<T>& g, const Tensor<T>& x);

// x: C_in x H x W, w: C_out x C_in x Kh x Kw, optional bias: C_out.
template <typename T>
Tensor<T> conv2d(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<T>* bias, std::size_t stride, std::size_t padding);
// Nearest-neighbor resize of C x H x W to C x out_h x out_w.
template <typename T>
Tensor<T> upsample_nearest(Graph<T>& g, const Tensor<T>& x, std::size_t out_h,
                           std::size_t out_w);

// Elementwise.
template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& x, T factor);
// s must hold exactly one element.
template <typename T>
Tensor<T> mul_scalar(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& s);
// Adds b (length x.dim(axis)) broadcast over every other axis.
template <typename T>
Tensor<T> add_broadcast(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& b,
                        std::size_t axis);
template <typename T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& x);
template <typename T>
Tensor<T> leaky_relu(Graph<T>& g, const Tensor<T>& x, T slope);

// Layout.
template <typename T>
Tensor<T> reshape(Graph<T>& g, const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> concat(Graph<T>& g, const std::vector<Tensor<T>>& parts, std::size_t axis);
// Selects slices along axis 0; repeated indices duplicate rows.
template <typename T>
Tensor<T> gather_rows(Graph<T>& g, const Tensor<T>& x,
                      std::span<const std::size_t> rows);

// Reductions. Axis reductions drop the reduced axis.
template <typename T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& x);
template <typename T>
Tensor<T> mean(Graph<T>& g, const Tensor<T>& x);
template <typename T>
Tensor<T> reduce_mean(Graph<T>& g, const Tensor<T>& x, std::size_t axis);
// Gradient routes to the first maximal element along the axis.
template <typename T>
Tensor<T> reduce_max(Graph<T>& g, const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> softmax(Graph<T>& g, const Tensor<T>& x, std::size_t axis);

}  // namespace pcfold::ad
