#include "pcfold/sparse_encoding.hpp"

#include <algorithm>
#include <stdexcept>

#include "pcfold/geometry.hpp"

namespace pcfold::sparse {

template <typename T>
EdgeConvParams<T> EdgeConvParams<T>::create(ParamStore<T>& store, const std::string& prefix, std::size_t in_width,
                                            const std::vector<std::size_t>& widths, std::size_t neighbors, Rng& rng) {
  if (widths.empty()) throw std::invalid_argument("edgeconv: at least one layer is required");
  if (neighbors == 0) throw std::invalid_argument("edgeconv: neighbor count must be at least 1");
  EdgeConvParams p;
  p.neighbors = neighbors;
  std::size_t width = in_width;
  for (std::size_t l = 0; l < widths.size(); ++l) {
    p.layers.push_back(Linear<T>::create(store, prefix + ".edge" + std::to_string(l), 2 * width, widths[l], true, rng));
    width = widths[l];
  }
  return p;
}

template <typename T>
ad::Tensor<T> edge_conv(ad::Graph<T>& g, const ad::Tensor<T>& x, std::span<const std::size_t> neighbors,
                        std::size_t kappa, const Linear<T>& mlp, T slope) {
  const std::size_t n = x.dim(0);
  if (neighbors.size() != n * kappa)
    throw ad::ShapeError("edge_conv: expected " + std::to_string(n * kappa) + " neighbor indices, got " +
                         std::to_string(neighbors.size()));
  const auto anchors = ad::gather_rows(g, x, ifnet::replicate_index(n, kappa));
  const auto others = ad::gather_rows(g, x, neighbors);
  const auto edges = ad::concat(g, std::vector<ad::Tensor<T>>{ad::sub(g, others, anchors), anchors}, 1);
  const auto h = ad::leaky_relu(g, mlp(g, edges), slope);
  return ad::reduce_max(g, ad::reshape(g, h, {n, kappa, h.dim(1)}), 1);
}

template <typename T>
ad::Tensor<T> edgeconv_encode(ad::Graph<T>& g, const ad::Tensor<T>& points, const EdgeConvParams<T>& params) {
  if (points.rank() != 2 || points.dim(1) != 3)
    throw ad::ShapeError("edgeconv_encode expects N x 3 points, got " + ad::to_string(points.shape()));
  const std::size_t n = points.dim(0), kappa = params.neighbors;
  if (kappa > n)
    throw std::invalid_argument("edgeconv: neighbor count " + std::to_string(kappa) + " exceeds point count " +
                                std::to_string(n));
  const T slope = static_cast<T>(params.leaky_slope);
  ad::Tensor<T> x = points;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const std::vector<std::size_t> nbr = l == 0 ? geometry::knn<T>(x.data(), x.data(), kappa)
                                                : geometry::knn_rows<T>(x.data(), n, x.dim(1), kappa);
    if (g.tracking_structure()) g.note_structure(nbr);
    x = edge_conv(g, x, nbr, kappa, params.layers[l], slope);
  }
  return x;
}

template <typename T>
SparseParams<T> SparseParams<T>::create(const SparseConfig& config, ParamStore<T>& store, const std::string& prefix,
                                        Rng& rng) {
  if (config.neighbor_widths.empty() || config.reuse_width == 0)
    throw std::invalid_argument("sparse encoding: layer widths must be positive");
  SparseParams p;
  p.sparse_points = config.sparse_points;
  p.neighbor = EdgeConvParams<T>::create(store, prefix + ".ne", 3, config.neighbor_widths, config.neighbors, rng);
  p.neighbor.leaky_slope = config.leaky_slope;
  const std::size_t w = config.reuse_width;
  FeatureReuseParams<T>& r = p.reuse;
  r.point1 = Linear<T>::create(store, prefix + ".fr.point1", config.input_width, w, false, rng);
  r.point2 = Linear<T>::create(store, prefix + ".fr.point2", w, w, false, rng);
  r.grid1 = Conv2d<T>::create(store, prefix + ".fr.grid1", config.coarse_channels, w, 3, 1, 1, false, rng);
  r.align = Conv2d<T>::create(store, prefix + ".fr.align", w, w, 3, 2, 1, false, rng);
  for (std::size_t u = 0; u < config.attention_units; ++u)
    r.attention.push_back(
        ifnet::SelfAttentionParams<T>::create(store, prefix + ".fr.sa" + std::to_string(u), 2 * w, rng));
  r.neighbors = config.neighbors;
  r.leaky_slope = config.leaky_slope;
  return p;
}

template <typename T>
Sampled<T> merge_and_sample(ad::Graph<T>& g, const ad::Tensor<T>& input_points, const ad::Tensor<T>& coarse_points,
                            std::size_t count) {
  if (input_points.dim(1) != 3 || coarse_points.dim(1) != 3)
    throw ad::ShapeError("merge_and_sample expects N x 3 point tensors");
  const std::size_t total = input_points.dim(0) + coarse_points.dim(0);
  if (count == 0 || count > total)
    throw std::invalid_argument("merge_and_sample: cannot select " + std::to_string(count) + " of " +
                                std::to_string(total) + " merged points");
  const auto merged = ad::concat(g, std::vector<ad::Tensor<T>>{input_points, coarse_points}, 0);
  Sampled<T> s;
  s.selected = geometry::farthest_point_sampling<T>(merged.data(), count, 0);
  if (g.tracking_structure()) g.note_structure(s.selected);
  s.points = ad::gather_rows(g, merged, s.selected);
  return s;
}

template <typename T>
ad::Tensor<T> feature_reuse(ad::Graph<T>& g, const ad::Tensor<T>& input_features, const ad::Tensor<T>& coarse_features,
                            std::span<const std::size_t> selected, const ad::Tensor<T>& sparse_points,
                            const FeatureReuseParams<T>& params) {
  if (coarse_features.rank() != 3) throw ad::ShapeError("feature_reuse expects C^c x k x d coarse features");
  const T slope = static_cast<T>(params.leaky_slope);
  const auto act = [&](const ad::Tensor<T>& x) { return ad::leaky_relu(g, x, slope); };

  const auto from_input = act(params.point2(g, act(params.point1(g, input_features))));
  const auto grid = act(params.align(g, act(params.grid1(g, coarse_features))));  // w x k/2 x d/2
  const std::size_t width = grid.dim(0), cells = grid.dim(1) * grid.dim(2);
  const auto from_coarse = ad::transpose(g, ad::reshape(g, grid, {width, cells}));
  const auto table = ad::concat(g, std::vector<ad::Tensor<T>>{from_input, from_coarse}, 0);
  for (std::size_t idx : selected)
    if (idx >= table.dim(0))
      throw std::out_of_range("feature_reuse: selected index " + std::to_string(idx) + " out of range (" +
                              std::to_string(table.dim(0)) + " merged rows)");
  const auto rows = ad::gather_rows(g, table, selected);

  const std::size_t n = rows.dim(0);
  if (sparse_points.dim(0) != n) throw ad::ShapeError("feature_reuse: sparse point count does not match selection");
  const std::size_t kappa = std::min(params.neighbors, n);
  const std::vector<std::size_t> nbr = geometry::knn<T>(sparse_points.data(), sparse_points.data(), kappa);
  if (g.tracking_structure()) g.note_structure(nbr);
  const auto pooled = ad::reduce_max(g, ad::reshape(g, ad::gather_rows(g, rows, nbr), {n, kappa, width}), 1);
  ad::Tensor<T> y = ad::concat(g, std::vector<ad::Tensor<T>>{rows, pooled}, 1);
  for (const auto& sa : params.attention) y = ifnet::self_attention(g, y, sa);
  return y;
}

template <typename T>
SparseResult<T> sparse_encode(ad::Graph<T>& g, const ad::Tensor<T>& input_points, const ad::Tensor<T>& input_features,
                              const ad::Tensor<T>& coarse_points, const ad::Tensor<T>& coarse_features,
                              const SparseParams<T>& params) {
  if (input_features.dim(0) != input_points.dim(0))
    throw ad::ShapeError("sparse_encode: input features and points disagree on N^i");
  if (coarse_features.dim(1) * coarse_features.dim(2) != 4 * coarse_points.dim(0))
    throw ad::ShapeError("sparse_encode: coarse features do not align with the coarse points");
  Sampled<T> s = merge_and_sample(g, input_points, coarse_points, params.sparse_points);
  const auto ne = edgeconv_encode(g, s.points, params.neighbor);
  const auto fr = feature_reuse(g, input_features, coarse_features, s.selected, s.points, params.reuse);
  SparseResult<T> r;
  r.features = ad::concat(g, std::vector<ad::Tensor<T>>{ne, fr}, 1);
  r.points = s.points;
  r.selected = std::move(s.selected);
  return r;
}

#define PCFOLD_INSTANTIATE_SPARSE(T)                                                                                \
  template struct EdgeConvParams<T>;                                                                                \
  template struct SparseParams<T>;                                                                                  \
  template ad::Tensor<T> edge_conv(ad::Graph<T>&, const ad::Tensor<T>&, std::span<const std::size_t>, std::size_t, \
                                   const Linear<T>&, T);                                                            \
  template ad::Tensor<T> edgeconv_encode(ad::Graph<T>&, const ad::Tensor<T>&, const EdgeConvParams<T>&);            \
  template Sampled<T> merge_and_sample(ad::Graph<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&, std::size_t);     \
  template ad::Tensor<T> feature_reuse(ad::Graph<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&,                   \
                                       std::span<const std::size_t>, const ad::Tensor<T>&,                          \
                                       const FeatureReuseParams<T>&);                                               \
  template SparseResult<T> sparse_encode(ad::Graph<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&,                 \
                                         const ad::Tensor<T>&, const ad::Tensor<T>&, const SparseParams<T>&);

PCFOLD_INSTANTIATE_SPARSE(float)
PCFOLD_INSTANTIATE_SPARSE(double)

}  // namespace pcfold::sparse
