#pragma once

// Point-set primitives: kd-tree neighbor search, Chamfer distance, farthest
// point sampling, k-nearest neighbors and F-score.
//
// Coordinates are passed as flat row-major N x 3 spans. Every search breaks
// distance ties by the lowest index, so results match an exhaustive scan
// exactly, not just up to ties.

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "pcfold/autodiff.hpp"

namespace pcfold::geometry {

using Vec3 = std::array<double, 3>;

class GeometryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Points in model units. When produced by normalize(), the original
// coordinates are `p * normalization_factor + source_center`.
struct PointCloud {
  std::vector<Vec3> points;
  Vec3 source_center{0.0, 0.0, 0.0};
  double source_scale = 1.0;  // diagonal of the original bounding box
  double normalization_factor = 1.0;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  std::vector<double> flat() const;
  static PointCloud from_flat(std::span<const double> xyz);
};

// Centers on the centroid of `reference` and scales so that `reference` fits
// in [-0.5, 0.5]^3; the same transform is applied to every cloud in `clouds`.
void normalize_jointly(const PointCloud& reference, std::span<PointCloud*> clouds);
PointCloud normalized(PointCloud cloud);

template <typename T>
inline T squared_distance(const T* a, const T* b) {
  const T dx = a[0] - b[0];
  const T dy = a[1] - b[1];
  const T dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

template <typename T>
struct Neighbor {
  std::size_t index = 0;
  T sq_distance = T(0);
};

// Balanced kd-tree: median split on the widest axis, leaves of at most
// `leaf_size` points. Keeps a reference to the coordinate buffer.
template <typename T>
class KdTree {
 public:
  explicit KdTree(std::span<const T> xyz, std::size_t leaf_size = 16);

  std::size_t size() const { return xyz_.size() / 3; }
  Neighbor<T> nearest(const T* query) const;
  // Ascending (distance, index).
  std::vector<Neighbor<T>> nearest_k(const T* query, std::size_t k) const;

 private:
  struct Node {
    std::size_t begin = 0, end = 0;
    int axis = -1;  // -1 for leaves
    T split = T(0);
    std::size_t left = 0, right = 0;
  };

  std::size_t build(std::size_t begin, std::size_t end);
  void search_nearest(std::size_t node, const T* q, Neighbor<T>& best) const;
  void search_k(std::size_t node, const T* q, std::size_t k, std::vector<Neighbor<T>>& heap) const;

  std::span<const T> xyz_;
  std::size_t leaf_size_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

template <typename T>
struct ChamferResult {
  T x_to_y = T(0);  // mean over x of min_y |x-y|^2
  T y_to_x = T(0);
  std::vector<std::size_t> nearest_in_y;  // per x
  std::vector<std::size_t> nearest_in_x;  // per y
  T total() const { return x_to_y + y_to_x; }
};

// Squared-distance Chamfer distance; both sets must be non-empty.
template <typename T>
ChamferResult<T> chamfer(std::span<const T> x, std::span<const T> y);
double chamfer(const PointCloud& x, const PointCloud& y);
// One-directional term: mean over x of the squared distance to the nearest y.
double directed_chamfer(const PointCloud& x, const PointCloud& y);

// Differentiable Chamfer loss between N x 3 and M x 3 coordinate tensors.
// Gradients route through the recorded argmins.
template <typename T>
ad::Tensor<T> chamfer_loss(ad::Graph<T>& g, const ad::Tensor<T>& x, const ad::Tensor<T>& y);

// Greedy farthest point sampling starting from `start`.
template <typename T>
std::vector<std::size_t> farthest_point_sampling(std::span<const T> xyz, std::size_t count,
                                                 std::size_t start = 0);

// Row-major |queries| x k index matrix, each row ascending by distance.
template <typename T>
std::vector<std::size_t> knn(std::span<const T> queries, std::span<const T> base, std::size_t k);

// Self k-nearest neighbors among the rows of a rows x cols feature matrix
// (exhaustive; used for neighborhoods in feature space).
template <typename T>
std::vector<std::size_t> knn_rows(std::span<const T> features, std::size_t rows, std::size_t cols,
                                  std::size_t k);

struct FScore {
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

// Euclidean (unsquared) distance threshold.
FScore fscore(const PointCloud& x, const PointCloud& y, double tau);

}  // namespace pcfold::geometry
