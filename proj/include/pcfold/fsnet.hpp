#pragma once

// Feature structuring: multi-head attention pooling of an unordered set of
// point features into an h x k x d structured feature map (SFM).
//
// A learnable query set S (k x C) attends over the N input features. Each
// head projects queries, keys and values to width d; its k x d output is one
// channel of the SFM. Heads are stacked without an output projection.

#include <cstddef>
#include <string>
#include <vector>

#include "pcfold/autodiff.hpp"
#include "pcfold/layers.hpp"

namespace pcfold::fsnet {

struct FSNetConfig {
  std::size_t input_width = 64;  // C^i
  std::size_t heads = 4;         // h
  std::size_t rows = 16;         // k
  std::size_t cols = 16;         // d
};

template <typename T>
struct FSNetParams {
  ad::Tensor<T> queries;  // k x C^i
  // per head, C^i x d, bias-free
  std::vector<ad::Tensor<T>> query_proj, key_proj, value_proj;

  static FSNetParams create(const FSNetConfig& config, ParamStore<T>& store, const std::string& prefix,
                            Rng& rng);
  std::size_t heads() const { return query_proj.size(); }
};

template <typename T>
struct Aggregation {
  ad::Tensor<T> sfm;          // h x k x d
  ad::Tensor<T> attention;    // h x k x N, columns in input row order (not differentiable)
};

// Rows are visited in lexicographic order of their feature values, so every
// reduction over the point axis, and therefore the SFM, is bitwise
// independent of the input row order.
template <typename T>
Aggregation<T> aggregate(ad::Graph<T>& g, const ad::Tensor<T>& features, const FSNetParams<T>& params);

// Per-point weights of one channel, averaged over the k query rows and
// min-max normalized to [0, 1]. A zero span yields all zeros.
template <typename T>
std::vector<double> attention_heatmap(const ad::Tensor<T>& attention, std::size_t channel);

// Permutation sorting rows lexicographically (ties by index).
template <typename T>
std::vector<std::size_t> canonical_row_order(std::span<const T> values, std::size_t rows, std::size_t cols);

}  // namespace pcfold::fsnet
