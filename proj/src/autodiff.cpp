#include "pcfold/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace pcfold::ad {

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  for (std::size_t e : shape)
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
}

// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// C[m x n] += A[m x p] * B[p x n]; the k loop is outermost per row so each
// output element accumulates in ascending k.
template <typename T>
void gemm_nn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t p, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * p;
    for (std::size_t k = 0; k < p; ++k) {
      const T av = arow[k];
      const T* brow = b + k * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[p x n] += A^T * B with A[m x p], B[m x n].
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t p, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * p;
    const T* brow = b + i * n;
    for (std::size_t k = 0; k < p; ++k) {
      const T av = arow[k];
      T* crow = c + k * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
std::vector<T> transposed(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  return out;
}

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data) {
  return Tensor<T>(std::move(shape), std::move(data), false);
}

}  // namespace

// ---------------------------------------------------------------- Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : node_(std::make_shared<TensorNode<T>>()) {
  check_shape(shape);
  if (element_count(shape) != data.size())
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     to_string(shape));
  node_->shape = std::move(shape);
  node_->value = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return filled(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::filled(Shape shape, T value, bool requires_grad) {
  check_shape(shape);
  const std::size_t n = element_count(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
  return node_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape()));
  return node_->value[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("index rank mismatch for " + to_string(shape()));
  std::size_t flat = 0, axis = 0;
  for (std::size_t i : index) {
    if (i >= node_->shape[axis]) throw ShapeError("index out of range for " + to_string(shape()));
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

template <typename T>
void Tensor<T>::zero_grad() {
  node_->grad.assign(node_->value.size(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->value, false);
}

// ---------------------------------------------------------------- Graph

template <typename T>
void Graph<T>::record(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void()> backward) {
  record(out, std::vector<const Tensor<T>*>(inputs), std::move(backward));
}

template <typename T>
void Graph<T>::record(Tensor<T>& out, const std::vector<const Tensor<T>*>& inputs,
                      std::function<void()> backward) {
  if (!enabled_) return;
  const bool needed =
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>* t) { return t->requires_grad(); });
  if (!needed) return;
  out.set_requires_grad(true);
  nodes_.push_back(std::move(backward));
}

template <typename T>
void Graph<T>::backward(Tensor<T>& loss) {
  if (loss.size() != 1)
    throw ShapeError("backward requires a scalar loss, got " + to_string(loss.shape()));
  if (backward_done_) throw std::logic_error("backward already ran on this graph");
  backward_done_ = true;
  if (!loss.requires_grad()) return;
  loss.mutable_grad()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

namespace {
constexpr std::uint64_t kFnvPrime = 1099511628211ull;
}

template <typename T>
void Graph<T>::note_structure(std::span<const std::size_t> decisions) {
  if (!tracking_) return;
  for (std::size_t v : decisions) {
    structure_hash_ ^= static_cast<std::uint64_t>(v);
    structure_hash_ *= kFnvPrime;
  }
  structure_hash_ ^= 0xffu;
  structure_hash_ *= kFnvPrime;
}

template <typename T>
void Graph<T>::note_structure(std::span<const std::uint8_t> decisions) {
  if (!tracking_) return;
  for (std::uint8_t v : decisions) {
    structure_hash_ ^= v;
    structure_hash_ *= kFnvPrime;
  }
  structure_hash_ ^= 0xfeu;
  structure_hash_ *= kFnvPrime;
}

// ---------------------------------------------------------------- linear algebra

template <typename T>
Tensor<T> matmul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: cannot multiply " + to_string(a.shape()) + " by " +
                     to_string(b.shape()));
  const std::size_t m = a.dim(0), p = a.dim(1), n = b.dim(1);
  std::vector<T> c(m * n, T(0));
  gemm_nn_acc(a.data().data(), b.data().data(), c.data(), m, p, n);
  Tensor<T> out = make_result<T>({m, n}, std::move(c));
  NodePtr<T> an = a.node(), bn = b.node(), on = out.node();
  g.record(out, {&a, &b}, [an, bn, on, m, p, n] {
    const std::vector<T>& dc = on->grad;
    if (dc.empty()) return;
    if (an->requires_grad) {
      std::vector<T> bt = transposed(bn->value.data(), p, n);
      gemm_nn_acc(dc.data(), bt.data(), an->grad_buffer().data(), m, n, p);
    }
    if (bn->requires_grad) gemm_tn_acc(an->value.data(), dc.data(), bn->grad_buffer().data(), m, p, n);
  });
  return out;
}

template <typename T>
Tensor<T> transpose(Graph<T>& g, const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("transpose expects a matrix, got " + to_string(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor<T> out = make_result<T>({c, r}, transposed(x.data().data(), r, c));
  NodePtr<T> xn = x.node(), on = out.node();
  g.record(out, {&x}, [xn, on, r, c] {
    if (on->grad.empty()) return;
    std::vector<T>& dx = xn->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += on->grad[j * r + i];
  });
  return out;
}

template <typename T>
Tensor<T> conv2d(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                 std::size_t stride, std::size_t padding) {
  if (x.rank() != 3 || w.rank() != 4)
    throw ShapeError("conv2d expects CxHxW input and OxIxKhxKw kernel, got " + to_string(x.shape()) +
                     " and " + to_string(w.shape()));
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  const std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != ci)
    throw ShapeError("conv2d: kernel expects " + std::to_string(w.dim(1)) + " input channels, got " +
                     std::to_string(ci));
  if (bias && (bias->size() != co))
    throw ShapeError("conv2d: bias length must equal output channels");
  const long long hp = static_cast<long long>(h + 2 * padding) - static_cast<long long>(kh);
  const long long wp = static_cast<long long>(wd + 2 * padding) - static_cast<long long>(kw);
  if (hp < 0 || wp < 0)
    throw ShapeError("conv2d: non-positive output extent for input " + to_string(x.shape()) +
                     ", kernel " + to_string(w.shape()));
  const std::size_t ho = static_cast<std::size_t>(hp) / stride + 1;
  const std::size_t wo = static_cast<std::size_t>(wp) / stride + 1;
  const std::size_t q = ci * kh * kw, s = ho * wo;

  // im2col: col[(c, ky, kx), (oy, ox)]
  auto col = std::make_shared<std::vector<T>>(q * s, T(0));
  const T* xv = x.data().data();
  for (std::size_t c = 0; c < ci; ++c)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* crow = col->data() + ((c * kh + ky) * kw + kx) * s;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long long iy = static_cast<long long>(oy * stride + ky) - static_cast<long long>(padding);
          if (iy < 0 || iy >= static_cast<long long>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long long ix =
                static_cast<long long>(ox * stride + kx) - static_cast<long long>(padding);
            if (ix < 0 || ix >= static_cast<long long>(wd)) continue;
            crow[oy * wo + ox] = xv[(c * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)];
          }
        }
      }

  std::vector<T> y(co * s, T(0));
  gemm_nn_acc(w.data().data(), col->data(), y.data(), co, q, s);
  if (bias) {
    const T* bv = bias->data().data();
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t i = 0; i < s; ++i) y[o * s + i] += bv[o];
  }
  Tensor<T> out = make_result<T>({co, ho, wo}, std::move(y));

  NodePtr<T> xn = x.node(), wn = w.node(), on = out.node();
  NodePtr<T> bn = bias ? bias->node() : nullptr;
  std::vector<const Tensor<T>*> inputs{&x, &w};
  if (bias) inputs.push_back(bias);
  g.record(out, inputs, [=] {
    const std::vector<T>& dy = on->grad;
    if (dy.empty()) return;
    if (bn && bn->requires_grad) {
      std::vector<T>& db = bn->grad_buffer();
      for (std::size_t o = 0; o < co; ++o) {
        T acc = T(0);
        for (std::size_t i = 0; i < s; ++i) acc += dy[o * s + i];
        db[o] += acc;
      }
    }
    if (wn->requires_grad) {
      // dW[o, :] += sum_i dy[o, i] * col[:, i]
      std::vector<T> colt = transposed(col->data(), q, s);
      gemm_nn_acc(dy.data(), colt.data(), wn->grad_buffer().data(), co, s, q);
    }
    if (xn->requires_grad) {
      std::vector<T> dcol(q * s, T(0));
      gemm_tn_acc(wn->value.data(), dy.data(), dcol.data(), co, q, s);
      std::vector<T>& dx = xn->grad_buffer();
      for (std::size_t c = 0; c < ci; ++c)
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const T* crow = dcol.data() + ((c * kh + ky) * kw + kx) * s;
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const long long iy =
                  static_cast<long long>(oy * stride + ky) - static_cast<long long>(padding);
              if (iy < 0 || iy >= static_cast<long long>(h)) continue;
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const long long ix =
                    static_cast<long long>(ox * stride + kx) - static_cast<long long>(padding);
                if (ix < 0 || ix >= static_cast<long long>(wd)) continue;
                dx[(c * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)] +=
                    crow[oy * wo + ox];
              }
            }
          }
    }
  });
  return out;
}

template <typename T>
Tensor<T> upsample_nearest(Graph<T>& g, const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 3) throw ShapeError("upsample_nearest expects CxHxW, got " + to_string(x.shape()));
  if (out_h == 0 || out_w == 0) throw ShapeError("upsample_nearest: output extents must be positive");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  // source cell for each output cell
  auto src = std::make_shared<std::vector<std::size_t>>(out_h * out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy)
    for (std::size_t ox = 0; ox < out_w; ++ox)
      (*src)[oy * out_w + ox] = (oy * h / out_h) * w + (ox * w / out_w);
  std::vector<T> y(c * out_h * out_w);
  const T* xv = x.data().data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < out_h * out_w; ++i) y[ch * out_h * out_w + i] = xv[ch * h * w + (*src)[i]];
  Tensor<T> out = make_result<T>({c, out_h, out_w}, std::move(y));
  NodePtr<T> xn = x.node(), on = out.node();
  g.record(out, {&x}, [=] {
    if (on->grad.empty()) return;
    std::vector<T>& dx = xn->grad_buffer();
    const std::size_t plane = out_h * out_w;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < plane; ++i) dx[ch * h * w + (*src)[i]] += on->grad[ch * plane + i];
  });
  return out;
}

// ---------------------------------------------------------------- elementwise

namespace {
template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
}
}  // namespace

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] + b.data()[i];
  Tensor<T> out = make_result<T>(a.shape(), std::move(y));
  NodePtr<T> an = a.node(), bn = b.node(), on = out.node();
  g.record(out, {&a, &b}, [an, bn, on] {
    if (on->grad.empty()) return;
    for (const NodePtr<T>& n : {an, bn}) {
      if (!n->requires_grad) continue;
      std::vector<T>& d = n->grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += on->grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] - b.data()[i];
  Tensor<T> out = make_result<T>(a.shape(), std::move(y));
  NodePtr<T> an = a.node(), bn = b.node(), on = out.node();
  g.record(out, {&a, &b}, [an, bn, on] {
    if (on->grad.empty()) return;
    if (an->requires_grad) {
      std::vector<T>& d = an->grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      std::vector<T>& d = bn->grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= on->grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  std::vector<T> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] * b.data()[i];
  Tensor<T> out = make_result<T>(a.shape(), std::move(y));
  NodePtr<T> an = a.node(), bn = b.node(), on = out.node();
  g.record(out, {&a, &b}, [an, bn, on] {
    if (on->grad.empty()) return;
    if (an->requires_grad) {
      std::vector<T>& d = an->grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += on->grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      std::vector<T>& d = bn->grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += on->grad[i] * an->value[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& x, T factor) {
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.data()[i] * factor;
  Tensor<T> out = make_result<T>(x.shape(), std::move(y));
  NodePtr<T> xn = x.node(), on = out.node();
  g.record(out, {&x}, [xn, on, factor] {
    if (on->grad.empty()) return;
    std::vector<T>& d = xn->grad_buffer();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += on->grad[i] * factor;
  });
  return out;
}

template <typename T>
Tensor<T> mul_scalar(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& s) {
  if (s.size() != 1) throw ShapeError("mul_scalar: factor must hold one element, got " + to_string(s.shape()));
  const T sv = s.data()[0];
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = sv * x.data()[i];
  Tensor<T> out = make_result<T>(x.shape(), std::move(y));
  NodePtr<T> xn = x.node(), sn = s.node(), on = out.node();
  g.record(out, {&x, &s}, [xn, sn, on] {
    if (on->grad.empty()) return;
    if (xn->requires_grad) {
      std::vector<T>& d = xn->grad_buffer();
      const T sv = sn->value[0];
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += sv * on->grad[i];
    }
    if (sn->requires_grad) {
      T acc = T(0);
      for (std::size_t i = 0; i < on->grad.size(); ++i) acc += on->grad[i] * xn->value[i];
      sn->grad_buffer()[0] += acc;
    }
  });
  return out;
}

template <typename T>
Tensor<T> add_broadcast(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& b, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (b.size() != s.extent)
    throw ShapeError("add_broadcast: bias length " + std::to_string(b.size()) + " does not match axis extent " +
                     std::to_string(s.extent));
  std::vector<T> y(x.data().begin(), x.data().end());
  const T* bv = b.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e) {
      T* row = y.data() + (o * s.extent + e) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) row[i] += bv[e];
    }
  Tensor<T> out = make_result<T>(x.shape(), std::move(y));
  NodePtr<T> xn = x.node(), bn = b.node(), on = out.node();
  g.record(out, {&x, &b}, [xn, bn, on, s] {
    if (on->grad.empty()) return;
    if (xn->requires_grad) {
      std::vector<T>& d = xn->grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += on->grad[i];
    }
    if (bn->requires_grad) {
      std::vector<T>& d = bn->grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < s.extent; ++e) {
          const T* row = on->grad.data() + (o * s.extent + e) * s.inner;
          T acc = T(0);
          for (std::size_t i = 0; i < s.inner; ++i) acc += row[i];
          d[e] += acc;
        }
    }
  });
  return out;
}

namespace {
template <typename T>
Tensor<T> piecewise_linear(Graph<T>& g, const Tensor<T>& x, T negative_slope) {
  const std::size_t n = x.size();
  auto mask = std::make_shared<std::vector<std::uint8_t>>(n);
  std::vector<T> y(n);
  const T* xv = x.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = xv[i] > T(0);
    (*mask)[i] = pos ? 1 : 0;
    y[i] = pos ? xv[i] : xv[i] * negative_slope;
  }
  g.note_structure(std::span<const std::uint8_t>(*mask));
  Tensor<T> out = make_result<T>(x.shape(), std::move(y));
  NodePtr<T> xn = x.node(), on = out.node();
  g.record(out, {&x}, [xn, on, mask, negative_slope] {
    if (on->grad.empty()) return;
    std::vector<T>& d = xn->grad_buffer();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += (*mask)[i] ? on->grad[i] : on->grad[i] * negative_slope;
  });
  return out;
}
}  // namespace

template <typename T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& x) {
  return piecewise_linear(g, x, T(0));
}

template <typename T>
Tensor<T> leaky_relu(Graph<T>& g, const Tensor<T>& x, T slope) {
  return piecewise_linear(g, x, slope);
}

// ---------------------------------------------------------------- layout

template <typename T>
Tensor<T> reshape(Graph<T>& g, const Tensor<T>& x, Shape shape) {
  check_shape(shape);
  if (element_count(shape) != x.size())
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  Tensor<T> out = make_result<T>(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  NodePtr<T> xn = x.node(), on = out.node();
  g.record(out, {&x}, [xn, on] {
    if (on->grad.empty()) return;
    std::vector<T>& d = xn->grad_buffer();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += on->grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> concat(Graph<T>& g, const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + to_string(ref));
  Shape shape = ref;
  shape[axis] = 0;
  for (const Tensor<T>& p : parts) {
    if (p.rank() != ref.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis && p.shape()[i] != ref[i])
        throw ShapeError("concat: shape mismatch " + to_string(p.shape()) + " vs " + to_string(ref));
    shape[axis] += p.shape()[axis];
  }
  const AxisSplit s = split_axis(shape, axis);
  std::vector<T> y(element_count(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor<T>& p : parts) {
    const std::size_t chunk = p.shape()[axis] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(p.data().data() + o * chunk, chunk, y.data() + o * s.extent * s.inner + offset);
    offsets.push_back(offset);
    offset += chunk;
  }
  Tensor<T> out = make_result<T>(shape, std::move(y));
  std::vector<NodePtr<T>> nodes;
  std::vector<const Tensor<T>*> inputs;
  for (const Tensor<T>& p : parts) {
    nodes.push_back(p.node());
    inputs.push_back(&p);
  }
  NodePtr<T> on = out.node();
  g.record(out, inputs, [nodes, offsets, on, s, axis] {
    if (on->grad.empty()) return;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (!nodes[k]->requires_grad) continue;
      const std::size_t chunk = nodes[k]->shape[axis] * s.inner;
      std::vector<T>& d = nodes[k]->grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o) {
        const T* src = on->grad.data() + o * s.extent * s.inner + offsets[k];
        T* dst = d.data() + o * chunk;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> gather_rows(Graph<T>& g, const Tensor<T>& x, std::span<const std::size_t> rows) {
  if (rows.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t nrows = x.dim(0);
  const std::size_t inner = x.size() / nrows;
  for (std::size_t r : rows)
    if (r >= nrows)
      throw ShapeError("gather_rows: index " + std::to_string(r) + " out of range for " + to_string(x.shape()));
  Shape shape = x.shape();
  shape[0] = rows.size();
  std::vector<T> y(rows.size() * inner);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.data().data() + rows[i] * inner, inner, y.data() + i * inner);
  Tensor<T> out = make_result<T>(std::move(shape), std::move(y));
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  NodePtr<T> xn = x.node(), on = out.node();
  g.record(out, {&x}, [xn, on, idx, inner] {
    if (on->grad.empty()) return;
    std::vector<T>& d = xn->grad_buffer();
    for (std::size_t i = 0; i < idx->size(); ++i) {
      T* dst = d.data() + (*idx)[i] * inner;
      const T* src = on->grad.data() + i * inner;
      for (std::size_t j = 0; j < inner; ++j) dst[j] += src[j];
    }
  });
  return out;
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  NodePtr<T> xn = x.node(), on = out.node();
  g.record(out, {&x}, [xn, on] {
    if (on->grad.empty()) return;
    std::vector<T>& d = xn->grad_buffer();
    const T gv = on->grad[0];
    for (T& v : d) v += gv;
  });
  return out;
}

template <typename T>
Tensor<T> mean(Graph<T>& g, const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  const T inv = T(1) / static_cast<T>(x.size());
  Tensor<T> out = Tensor<T>::scalar(acc * inv);
  NodePtr<T> xn = x.node(), on = out.node();
  g.record(out, {&x}, [xn, on, inv] {
    if (on->grad.empty()) return;
    std::vector<T>& d = xn->grad_buffer();
    const T gv = on->grad[0] * inv;
    for (T& v : d) v += gv;
  });
  return out;
}

namespace {
Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out.push_back(shape[i]);
  if (out.empty()) out.push_back(1);
  return out;
}
}  // namespace

template <typename T>
Tensor<T> reduce_mean(Graph<T>& g, const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  const T inv = T(1) / static_cast<T>(s.extent);
  std::vector<T> y(s.outer * s.inner, T(0));
  const T* xv = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e) {
      const T* row = xv + (o * s.extent + e) * s.inner;
      T* dst = y.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += row[i];
    }
  for (T& v : y) v *= inv;
  Tensor<T> out = make_result<T>(drop_axis(x.shape(), axis), std::move(y));
  NodePtr<T> xn = x.node(), on = out.node();
  g.record(out, {&x}, [xn, on, s, inv] {
    if (on->grad.empty()) return;
    std::vector<T>& d = xn->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t e = 0; e < s.extent; ++e) {
        T* dst = d.data() + (o * s.extent + e) * s.inner;
        const T* src = on->grad.data() + o * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i] * inv;
      }
  });
  return out;
}

template <typename T>
Tensor<T> reduce_max(Graph<T>& g, const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  const std::size_t n = s.outer * s.inner;
  std::vector<T> y(n);
  auto arg = std::make_shared<std::vector<std::size_t>>(n);
  const T* xv = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      std::size_t best = 0;
      T bv = xv[base];
      for (std::size_t e = 1; e < s.extent; ++e) {
        const T v = xv[base + e * s.inner];
        if (v > bv) {  // strict: earliest maximum wins
          bv = v;
          best = e;
        }
      }
      y[o * s.inner + i] = bv;
      (*arg)[o * s.inner + i] = best;
    }
  g.note_structure(std::span<const std::size_t>(*arg));
  Tensor<T> out = make_result<T>(drop_axis(x.shape(), axis), std::move(y));
  NodePtr<T> xn = x.node(), on = out.node();
  g.record(out, {&x}, [xn, on, arg, s] {
    if (on->grad.empty()) return;
    std::vector<T>& d = xn->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t k = o * s.inner + i;
        d[o * s.extent * s.inner + (*arg)[k] * s.inner + i] += on->grad[k];
      }
  });
  return out;
}

template <typename T>
Tensor<T> softmax(Graph<T>& g, const Tensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<T> y(x.size());
  const T* xv = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T mx = xv[base];
      for (std::size_t e = 1; e < s.extent; ++e) mx = std::max(mx, xv[base + e * s.inner]);
      T total = T(0);
      for (std::size_t e = 0; e < s.extent; ++e) {
        const T v = std::exp(xv[base + e * s.inner] - mx);
        y[base + e * s.inner] = v;
        total += v;
      }
      const T inv = T(1) / total;
      for (std::size_t e = 0; e < s.extent; ++e) y[base + e * s.inner] *= inv;
    }
  Tensor<T> out = make_result<T>(x.shape(), std::move(y));
  NodePtr<T> xn = x.node(), on = out.node();
  g.record(out, {&x}, [xn, on, s] {
    if (on->grad.empty()) return;
    std::vector<T>& d = xn->grad_buffer();
    const std::vector<T>& yv = on->value;
    const std::vector<T>& dy = on->grad;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        T dot = T(0);
        for (std::size_t e = 0; e < s.extent; ++e) dot += dy[base + e * s.inner] * yv[base + e * s.inner];
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t k = base + e * s.inner;
          d[k] += yv[k] * (dy[k] - dot);
        }
      }
  });
  return out;
}

// ---------------------------------------------------------------- instantiation

#define PCFOLD_INSTANTIATE_AD(T)                                                                    \
  template class Tensor<T>;                                                                         \
  template class Graph<T>;                                                                          \
  template Tensor<T> matmul(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> transpose(Graph<T>&, const Tensor<T>&);                                        \
  template Tensor<T> conv2d(Graph<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>*,        \
                            std::size_t, std::size_t);                                              \
  template Tensor<T> upsample_nearest(Graph<T>&, const Tensor<T>&, std::size_t, std::size_t);       \
  template Tensor<T> add(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> sub(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> mul(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> scale(Graph<T>&, const Tensor<T>&, T);                                         \
  template Tensor<T> mul_scalar(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> add_broadcast(Graph<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);     \
  template Tensor<T> relu(Graph<T>&, const Tensor<T>&);                                             \
  template Tensor<T> leaky_relu(Graph<T>&, const Tensor<T>&, T);                                    \
  template Tensor<T> reshape(Graph<T>&, const Tensor<T>&, Shape);                                   \
  template Tensor<T> concat(Graph<T>&, const std::vector<Tensor<T>>&, std::size_t);                 \
  template Tensor<T> gather_rows(Graph<T>&, const Tensor<T>&, std::span<const std::size_t>);        \
  template Tensor<T> sum(Graph<T>&, const Tensor<T>&);                                              \
  template Tensor<T> mean(Graph<T>&, const Tensor<T>&);                                             \
  template Tensor<T> reduce_mean(Graph<T>&, const Tensor<T>&, std::size_t);                         \
  template Tensor<T> reduce_max(Graph<T>&, const Tensor<T>&, std::size_t);                          \
  template Tensor<T> softmax(Graph<T>&, const Tensor<T>&, std::size_t);

PCFOLD_INSTANTIATE_AD(float)
PCFOLD_INSTANTIATE_AD(double)

}  // namespace pcfold::ad
