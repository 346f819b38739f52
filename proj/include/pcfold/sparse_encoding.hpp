#pragma once

// Sparse encoding: farthest point sampling over the merged input and coarse
// clouds, then two feature paths concatenated channel-wise.
//
//   neighbor encoding   stacked EdgeConv layers on the sampled coordinates
//   feature reuse       encoder features of input points and aligned decoder
//                       features of coarse points, gathered at the sampled
//                       rows, grouped over spatial neighbors, refined by
//                       self-attention units
//
// EdgeConv is shared with the point encoder.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pcfold/autodiff.hpp"
#include "pcfold/ifnet.hpp"
#include "pcfold/layers.hpp"

namespace pcfold::sparse {

// Layer l maps [x_j - x_i, x_i] (width 2*C_l) to C_{l+1} with a leaky relu and
// max-pools over the kappa neighbors of i. Layer 0 finds neighbors by
// coordinate distance, later layers by feature distance.
template <typename T>
struct EdgeConvParams {
  std::vector<Linear<T>> layers;
  std::size_t neighbors = 8;
  double leaky_slope = 0.2;

  static EdgeConvParams create(ParamStore<T>& store, const std::string& prefix, std::size_t in_width,
                               const std::vector<std::size_t>& widths, std::size_t neighbors, Rng& rng);
  std::size_t out_width() const { return layers.back().out_width(); }
};

// One EdgeConv layer over explicit neighbor lists (rows x kappa, row-major).
template <typename T>
ad::Tensor<T> edge_conv(ad::Graph<T>& g, const ad::Tensor<T>& x, std::span<const std::size_t> neighbors,
                        std::size_t kappa, const Linear<T>& mlp, T slope);

// points: N x 3.
template <typename T>
ad::Tensor<T> edgeconv_encode(ad::Graph<T>& g, const ad::Tensor<T>& points, const EdgeConvParams<T>& params);

struct SparseConfig {
  std::size_t sparse_points = 128;            // N^s
  std::size_t neighbors = 8;                  // kappa
  std::vector<std::size_t> neighbor_widths = {32, 32};  // C_ne is the last entry
  std::size_t input_width = 64;               // C^i
  std::size_t coarse_channels = 32;           // C^c
  std::size_t reuse_width = 32;               // common width before point-axis concat
  std::size_t attention_units = 2;
  double leaky_slope = 0.2;

  std::size_t neighbor_width() const { return neighbor_widths.back(); }
  std::size_t reuse_out_width() const { return 2 * reuse_width; }  // C_fr
  std::size_t sparse_width() const { return neighbor_width() + reuse_out_width(); }  // C^s
};

// Every layer of the reuse path is bias-free.
template <typename T>
struct FeatureReuseParams {
  Linear<T> point1, point2;     // C^i -> w -> w
  Conv2d<T> grid1, align;       // C^c -> w (3x3), w -> w (3x3, stride 2)
  std::vector<ifnet::SelfAttentionParams<T>> attention;  // width 2w
  std::size_t neighbors = 8;
  double leaky_slope = 0.2;
};

template <typename T>
struct SparseParams {
  EdgeConvParams<T> neighbor;
  FeatureReuseParams<T> reuse;
  std::size_t sparse_points = 128;

  static SparseParams create(const SparseConfig& config, ParamStore<T>& store, const std::string& prefix, Rng& rng);
};

template <typename T>
struct Sampled {
  ad::Tensor<T> points;               // N^s x 3
  std::vector<std::size_t> selected;  // indices into [P^i; P^c]
};

// Concatenates input then coarse points and runs FPS from index 0.
template <typename T>
Sampled<T> merge_and_sample(ad::Graph<T>& g, const ad::Tensor<T>& input_points, const ad::Tensor<T>& coarse_points,
                            std::size_t count);

// input_features: N^i x C^i, coarse_features: C^c x k x d, sparse_points: N^s x 3
// (used for grouping neighborhoods).
template <typename T>
ad::Tensor<T> feature_reuse(ad::Graph<T>& g, const ad::Tensor<T>& input_features, const ad::Tensor<T>& coarse_features,
                            std::span<const std::size_t> selected, const ad::Tensor<T>& sparse_points,
                            const FeatureReuseParams<T>& params);

template <typename T>
struct SparseResult {
  ad::Tensor<T> points;    // P^s, N^s x 3
  ad::Tensor<T> features;  // F^s, N^s x C^s
  std::vector<std::size_t> selected;
};

template <typename T>
SparseResult<T> sparse_encode(ad::Graph<T>& g, const ad::Tensor<T>& input_points, const ad::Tensor<T>& input_features,
                              const ad::Tensor<T>& coarse_points, const ad::Tensor<T>& coarse_features,
                              const SparseParams<T>& params);

}  // namespace pcfold::sparse
