#include "pcfold/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <string>

namespace pcfold::geometry {

std::vector<double> PointCloud::flat() const {
  std::vector<double> out;
  out.reserve(points.size() * 3);
  for (const Vec3& p : points) out.insert(out.end(), p.begin(), p.end());
  return out;
}

PointCloud PointCloud::from_flat(std::span<const double> xyz) {
  if (xyz.size() % 3 != 0) throw GeometryError("flat coordinate buffer length must be a multiple of 3");
  PointCloud pc;
  pc.points.resize(xyz.size() / 3);
  for (std::size_t i = 0; i < pc.points.size(); ++i) pc.points[i] = {xyz[3 * i], xyz[3 * i + 1], xyz[3 * i + 2]};
  return pc;
}

void normalize_jointly(const PointCloud& reference, std::span<PointCloud*> clouds) {
  if (reference.empty()) throw GeometryError("cannot normalize an empty point cloud");
  Vec3 centroid{0, 0, 0}, lo, hi;
  lo.fill(std::numeric_limits<double>::infinity());
  hi.fill(-std::numeric_limits<double>::infinity());
  for (const Vec3& p : reference.points)
    for (int a = 0; a < 3; ++a) {
      if (!std::isfinite(p[a])) throw GeometryError("point cloud contains non-finite coordinates");
      centroid[a] += p[a];
      lo[a] = std::min(lo[a], p[a]);
      hi[a] = std::max(hi[a], p[a]);
    }
  for (double& c : centroid) c /= static_cast<double>(reference.size());
  double half_extent = 0.0;
  for (const Vec3& p : reference.points)
    for (int a = 0; a < 3; ++a) half_extent = std::max(half_extent, std::abs(p[a] - centroid[a]));
  const double factor = half_extent > 0.0 ? 2.0 * half_extent : 1.0;
  const double diagonal =
      std::sqrt((hi[0] - lo[0]) * (hi[0] - lo[0]) + (hi[1] - lo[1]) * (hi[1] - lo[1]) +
                (hi[2] - lo[2]) * (hi[2] - lo[2]));
  for (PointCloud* pc : clouds) {
    for (Vec3& p : pc->points)
      for (int a = 0; a < 3; ++a) p[a] = (p[a] - centroid[a]) / factor;
    pc->source_center = centroid;
    pc->source_scale = diagonal;
    pc->normalization_factor = factor;
  }
}

PointCloud normalized(PointCloud cloud) {
  const PointCloud reference = cloud;
  PointCloud* target = &cloud;
  normalize_jointly(reference, std::span<PointCloud*>(&target, 1));
  return cloud;
}

// ---------------------------------------------------------------- kd-tree

template <typename T>
KdTree<T>::KdTree(std::span<const T> xyz, std::size_t leaf_size)
    : xyz_(xyz), leaf_size_(std::max<std::size_t>(1, leaf_size)) {
  if (xyz.empty() || xyz.size() % 3 != 0) throw GeometryError("kd-tree needs a non-empty N x 3 buffer");
  order_.resize(size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  nodes_.reserve(2 * size() / leaf_size_ + 2);
  build(0, size());
}

template <typename T>
std::size_t KdTree<T>::build(std::size_t begin, std::size_t end) {
  const std::size_t id = nodes_.size();
  nodes_.push_back(Node{begin, end});
  if (end - begin <= leaf_size_) return id;
  T lo[3], hi[3];
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::numeric_limits<T>::infinity();
    hi[a] = -std::numeric_limits<T>::infinity();
  }
  for (std::size_t i = begin; i < end; ++i)
    for (int a = 0; a < 3; ++a) {
      const T v = xyz_[3 * order_[i] + a];
      lo[a] = std::min(lo[a], v);
      hi[a] = std::max(hi[a], v);
    }
  int axis = 0;
  for (int a = 1; a < 3; ++a)
    if (hi[a] - lo[a] > hi[axis] - lo[axis]) axis = a;
  const std::size_t mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                   order_.begin() + static_cast<std::ptrdiff_t>(mid),
                   order_.begin() + static_cast<std::ptrdiff_t>(end), [&](std::size_t i, std::size_t j) {
                     return xyz_[3 * i + axis] < xyz_[3 * j + axis];
                   });
  const T split = xyz_[3 * order_[mid] + axis];
  const std::size_t left = build(begin, mid);
  const std::size_t right = build(mid, end);
  Node& n = nodes_[id];
  n.axis = axis;
  n.split = split;
  n.left = left;
  n.right = right;
  return id;
}

namespace {
template <typename T>
bool closer(T d, std::size_t i, T best_d, std::size_t best_i) {
  return d < best_d || (d == best_d && i < best_i);
}
}  // namespace

template <typename T>
Neighbor<T> KdTree<T>::nearest(const T* query) const {
  Neighbor<T> best{std::numeric_limits<std::size_t>::max(), std::numeric_limits<T>::infinity()};
  search_nearest(0, query, best);
  return best;
}

template <typename T>
void KdTree<T>::search_nearest(std::size_t id, const T* q, Neighbor<T>& best) const {
  const Node& n = nodes_[id];
  if (n.axis < 0) {
    for (std::size_t i = n.begin; i < n.end; ++i) {
      const std::size_t p = order_[i];
      const T d = squared_distance(q, xyz_.data() + 3 * p);
      if (closer(d, p, best.sq_distance, best.index)) best = {p, d};
    }
    return;
  }
  const T delta = q[n.axis] - n.split;
  const bool go_left = delta < T(0);
  search_nearest(go_left ? n.left : n.right, q, best);
  // Strict comparison keeps equal-distance candidates reachable for the
  // lowest-index tie rule.
  if (!(delta * delta > best.sq_distance)) search_nearest(go_left ? n.right : n.left, q, best);
}

template <typename T>
std::vector<Neighbor<T>> KdTree<T>::nearest_k(const T* query, std::size_t k) const {
  if (k > size()) throw GeometryError("requested " + std::to_string(k) + " neighbors from " + std::to_string(size()) + " points");
  std::vector<Neighbor<T>> heap;
  heap.reserve(k + 1);
  if (k == 0) return heap;
  search_k(0, query, k, heap);
  std::sort(heap.begin(), heap.end(), [](const Neighbor<T>& a, const Neighbor<T>& b) {
    return closer(a.sq_distance, a.index, b.sq_distance, b.index);
  });
  return heap;
}

template <typename T>
void KdTree<T>::search_k(std::size_t id, const T* q, std::size_t k, std::vector<Neighbor<T>>& heap) const {
  const auto worse = [](const Neighbor<T>& a, const Neighbor<T>& b) {
    return closer(a.sq_distance, a.index, b.sq_distance, b.index);
  };
  const Node& n = nodes_[id];
  if (n.axis < 0) {
    for (std::size_t i = n.begin; i < n.end; ++i) {
      const std::size_t p = order_[i];
      const T d = squared_distance(q, xyz_.data() + 3 * p);
      if (heap.size() < k) {
        heap.push_back({p, d});
        std::push_heap(heap.begin(), heap.end(), worse);
      } else if (closer(d, p, heap.front().sq_distance, heap.front().index)) {
        std::pop_heap(heap.begin(), heap.end(), worse);
        heap.back() = {p, d};
        std::push_heap(heap.begin(), heap.end(), worse);
      }
    }
    return;
  }
  const T delta = q[n.axis] - n.split;
  const bool go_left = delta < T(0);
  search_k(go_left ? n.left : n.right, q, k, heap);
  if (heap.size() < k || !(delta * delta > heap.front().sq_distance))
    search_k(go_left ? n.right : n.left, q, k, heap);
}

// ---------------------------------------------------------------- Chamfer

namespace {
template <typename T>
void check_cloud(std::span<const T> xyz, const char* what) {
  if (xyz.empty()) throw GeometryError(std::string(what) + ": point set is empty");
  if (xyz.size() % 3 != 0) throw GeometryError(std::string(what) + ": buffer length is not a multiple of 3");
}

template <typename T>
T directed(std::span<const T> from, const KdTree<T>& to, std::vector<std::size_t>& argmin) {
  const std::size_t n = from.size() / 3;
  argmin.resize(n);
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    const Neighbor<T> nb = to.nearest(from.data() + 3 * i);
    argmin[i] = nb.index;
    acc += nb.sq_distance;
  }
  return acc / static_cast<T>(n);
}
}  // namespace

template <typename T>
ChamferResult<T> chamfer(std::span<const T> x, std::span<const T> y) {
  check_cloud(x, "chamfer");
  check_cloud(y, "chamfer");
  ChamferResult<T> r;
  const KdTree<T> ty(y), tx(x);
  r.x_to_y = directed(x, ty, r.nearest_in_y);
  r.y_to_x = directed(y, tx, r.nearest_in_x);
  return r;
}

double chamfer(const PointCloud& x, const PointCloud& y) {
  const std::vector<double> fx = x.flat(), fy = y.flat();
  return chamfer<double>(fx, fy).total();
}

double directed_chamfer(const PointCloud& x, const PointCloud& y) {
  const std::vector<double> fx = x.flat(), fy = y.flat();
  check_cloud<double>(fx, "directed_chamfer");
  check_cloud<double>(fy, "directed_chamfer");
  const KdTree<double> ty(fy);
  std::vector<std::size_t> argmin;
  return directed<double>(fx, ty, argmin);
}

template <typename T>
ad::Tensor<T> chamfer_loss(ad::Graph<T>& g, const ad::Tensor<T>& x, const ad::Tensor<T>& y) {
  if (x.rank() != 2 || x.dim(1) != 3 || y.rank() != 2 || y.dim(1) != 3)
    throw GeometryError("chamfer_loss expects N x 3 and M x 3 tensors, got " + ad::to_string(x.shape()) +
                        " and " + ad::to_string(y.shape()));
  auto r = std::make_shared<ChamferResult<T>>(chamfer<T>(x.data(), y.data()));
  g.note_structure(std::span<const std::size_t>(r->nearest_in_y));
  g.note_structure(std::span<const std::size_t>(r->nearest_in_x));
  ad::Tensor<T> out = ad::Tensor<T>::scalar(r->total());
  auto xn = x.node(), yn = y.node(), on = out.node();
  g.record(out, {&x, &y}, [xn, yn, on, r] {
    if (on->grad.empty()) return;
    const T gv = on->grad[0];
    const std::size_t nx = xn->value.size() / 3, ny = yn->value.size() / 3;
    const T wx = T(2) * gv / static_cast<T>(nx), wy = T(2) * gv / static_cast<T>(ny);
    std::vector<T>* dx = xn->requires_grad ? &xn->grad_buffer() : nullptr;
    std::vector<T>* dy = yn->requires_grad ? &yn->grad_buffer() : nullptr;
    for (std::size_t i = 0; i < nx; ++i) {
      const std::size_t j = r->nearest_in_y[i];
      for (int a = 0; a < 3; ++a) {
        const T diff = xn->value[3 * i + a] - yn->value[3 * j + a];
        if (dx) (*dx)[3 * i + a] += wx * diff;
        if (dy) (*dy)[3 * j + a] -= wx * diff;
      }
    }
    for (std::size_t j = 0; j < ny; ++j) {
      const std::size_t i = r->nearest_in_x[j];
      for (int a = 0; a < 3; ++a) {
        const T diff = yn->value[3 * j + a] - xn->value[3 * i + a];
        if (dy) (*dy)[3 * j + a] += wy * diff;
        if (dx) (*dx)[3 * i + a] -= wy * diff;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------- sampling / neighbors

template <typename T>
std::vector<std::size_t> farthest_point_sampling(std::span<const T> xyz, std::size_t count, std::size_t start) {
  check_cloud(xyz, "farthest_point_sampling");
  const std::size_t n = xyz.size() / 3;
  if (count == 0 || count > n)
    throw GeometryError("farthest_point_sampling: cannot select " + std::to_string(count) + " of " +
                        std::to_string(n) + " points");
  if (start >= n) throw GeometryError("farthest_point_sampling: start index out of range");
  std::vector<T> min_d(n, std::numeric_limits<T>::infinity());
  std::vector<char> taken(n, 0);
  std::vector<std::size_t> out;
  out.reserve(count);
  std::size_t last = start;
  out.push_back(last);
  taken[last] = 1;
  while (out.size() < count) {
    const T* lp = xyz.data() + 3 * last;
    std::size_t best = n;
    T best_d = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      min_d[i] = std::min(min_d[i], squared_distance(xyz.data() + 3 * i, lp));
      if (min_d[i] > best_d) {
        best_d = min_d[i];
        best = i;
      }
    }
    last = best;
    taken[last] = 1;
    out.push_back(last);
  }
  return out;
}

template <typename T>
std::vector<std::size_t> knn(std::span<const T> queries, std::span<const T> base, std::size_t k) {
  check_cloud(queries, "knn");
  check_cloud(base, "knn");
  const std::size_t nb = base.size() / 3;
  if (k == 0 || k > nb)
    throw GeometryError("knn: cannot take " + std::to_string(k) + " neighbors from " + std::to_string(nb) + " points");
  const KdTree<T> tree(base);
  const std::size_t nq = queries.size() / 3;
  std::vector<std::size_t> out(nq * k);
  for (std::size_t i = 0; i < nq; ++i) {
    const std::vector<Neighbor<T>> nbrs = tree.nearest_k(queries.data() + 3 * i, k);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = nbrs[j].index;
  }
  return out;
}

template <typename T>
std::vector<std::size_t> knn_rows(std::span<const T> features, std::size_t rows, std::size_t cols, std::size_t k) {
  if (rows == 0 || features.size() != rows * cols) throw GeometryError("knn_rows: feature buffer shape mismatch");
  if (k == 0 || k > rows)
    throw GeometryError("knn_rows: cannot take " + std::to_string(k) + " neighbors from " + std::to_string(rows) + " rows");
  std::vector<std::size_t> out(rows * k);
  std::vector<std::pair<T, std::size_t>> cand(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const T* fi = features.data() + i * cols;
    for (std::size_t j = 0; j < rows; ++j) {
      const T* fj = features.data() + j * cols;
      T d = T(0);
      for (std::size_t c = 0; c < cols; ++c) {
        const T diff = fi[c] - fj[c];
        d += diff * diff;
      }
      cand[j] = {d, j};
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = cand[j].second;
  }
  return out;
}

FScore fscore(const PointCloud& x, const PointCloud& y, double tau) {
  if (x.empty() || y.empty()) throw GeometryError("fscore: point set is empty");
  if (!(tau > 0.0)) throw GeometryError("fscore: threshold must be positive");
  const std::vector<double> fx = x.flat(), fy = y.flat();
  const KdTree<double> tx(fx), ty(fy);
  const auto fraction_within = [tau](const std::vector<double>& from, const KdTree<double>& to) {
    const std::size_t n = from.size() / 3;
    std::size_t hit = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (std::sqrt(to.nearest(from.data() + 3 * i).sq_distance) <= tau) ++hit;
    return static_cast<double>(hit) / static_cast<double>(n);
  };
  FScore s;
  s.precision = fraction_within(fx, ty);
  s.recall = fraction_within(fy, tx);
  s.f = (s.precision + s.recall) > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

#define PCFOLD_INSTANTIATE_GEOMETRY(T)                                                                   \
  template class KdTree<T>;                                                                              \
  template ChamferResult<T> chamfer(std::span<const T>, std::span<const T>);                             \
  template ad::Tensor<T> chamfer_loss(ad::Graph<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&);        \
  template std::vector<std::size_t> farthest_point_sampling(std::span<const T>, std::size_t, std::size_t); \
  template std::vector<std::size_t> knn(std::span<const T>, std::span<const T>, std::size_t);            \
  template std::vector<std::size_t> knn_rows(std::span<const T>, std::size_t, std::size_t, std::size_t);

PCFOLD_INSTANTIATE_GEOMETRY(float)
PCFOLD_INSTANTIATE_GEOMETRY(double)

}  // namespace pcfold::geometry
