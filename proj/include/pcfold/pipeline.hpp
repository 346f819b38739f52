#pragma once

// The full completion model: EdgeConv encoder -> FSNet -> coarse decoder ->
// sparse encoding -> IFNet -> offset regression, plus the global-feature
// baseline used for the aggregation ablation.

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "pcfold/autodiff.hpp"
#include "pcfold/decoder.hpp"
#include "pcfold/fsnet.hpp"
#include "pcfold/geometry.hpp"
#include "pcfold/ifnet.hpp"
#include "pcfold/layers.hpp"
#include "pcfold/sparse_encoding.hpp"

namespace pcfold::pipeline {

enum class Aggregator { kStructured, kGlobal };

std::string_view to_string(Aggregator aggregator);
Aggregator parse_aggregator(std::string_view text);  // "sfm" or "gfv"

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::size_t input_points = 256;  // N^i
  std::size_t encoder_neighbors = 8;
  std::vector<std::size_t> encoder_widths = {64, 64};  // last entry is C^i
  Aggregator aggregator = Aggregator::kStructured;
  std::size_t heads = 4;  // h
  std::size_t rows = 16;  // k
  std::size_t cols = 16;  // d
  std::size_t level1_channels = 32;
  std::size_t level2_channels = 64;
  std::size_t coarse_channels = 32;  // C^c
  std::size_t gfv_hidden = 128;
  std::size_t sparse_points = 128;  // N^s
  std::size_t neighbors = 8;        // kappa
  std::vector<std::size_t> neighbor_widths = {32, 32};
  std::size_t reuse_width = 32;
  std::size_t attention_units = 2;
  std::size_t width = 16;  // c
  std::size_t ratio = 4;   // r
  std::size_t steps = 5;   // T
  std::size_t offset_hidden = 32;
  ifnet::ExpansionMode expansion = ifnet::ExpansionMode::kFeedback;
  double leaky_slope = 0.2;

  static ModelConfig desk();
  static ModelConfig full_scale();

  std::size_t input_width() const { return encoder_widths.back(); }
  std::size_t coarse_points() const { return (rows / 2) * (cols / 2); }
  std::size_t dense_points() const { return ratio * sparse_points; }

  fsnet::FSNetConfig fsnet() const;
  decoder::DecoderConfig decoder() const;
  sparse::SparseConfig sparse() const;
  ifnet::IFNetConfig ifnet() const;

  // Throws ConfigError on inconsistent sizes.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

// Parameters for one model. Sub-structs hold handles into `store`, which owns
// every tensor under a unique dotted name.
template <typename T>
struct ModelParams {
  ModelConfig config;
  ParamStore<T> store;
  sparse::EdgeConvParams<T> encoder;
  // structured path
  fsnet::FSNetParams<T> fsnet;
  decoder::DecoderParams<T> decoder;
  sparse::SparseParams<T> sparse;
  ifnet::IFNetParams<T> ifnet;
  ifnet::OffsetParams<T> offset;
  // global-feature path
  Linear<T> gfv_hidden, gfv_out;

  static ModelParams create(const ModelConfig& config, std::uint64_t seed);

  // Independent parameters with the same config and copied values.
  ModelParams clone() const;
  void copy_values_from(const ModelParams& other);
};

template <typename T>
struct ForwardResult {
  std::vector<std::size_t> input_order;  // canonical row i is input point input_order[i]
  ad::Tensor<T> input;                   // N^i x 3 in canonical order
  ad::Tensor<T> input_features;          // F^i
  ad::Tensor<T> sfm;
  ad::Tensor<T> attention;  // h x k x N^i, columns in the caller's point order
  ad::Tensor<T> coarse_features;
  ad::Tensor<T> coarse_grid;
  ad::Tensor<T> coarse;  // P^c
  ad::Tensor<T> sparse;  // P^s
  std::vector<std::size_t> sparse_selected;
  ad::Tensor<T> sparse_features;
  std::vector<ifnet::FeedbackState<T>> states;
  ad::Tensor<T> dense;  // P^d
};

// Input points are processed in lexicographic order, so every output is
// independent of the order of `partial`. With `coarse_only` the forward pass
// stops after the decoder.
template <typename T>
ForwardResult<T> forward(ad::Graph<T>& g, const geometry::PointCloud& partial, const ModelParams<T>& params,
                         bool coarse_only = false);

// Global-feature baseline: max-pool F^i, then an MLP to N^c x 3.
template <typename T>
ad::Tensor<T> gfv_baseline_forward(ad::Graph<T>& g, const geometry::PointCloud& partial, const ModelParams<T>& params);

// CD(P^s, P^g) + CD(P^d, P^g), plus CD(P^c, P^g) when `include_coarse`.
template <typename T>
ad::Tensor<T> joint_loss(ad::Graph<T>& g, const ad::Tensor<T>& coarse, const ad::Tensor<T>& sparse,
                         const ad::Tensor<T>& dense, const ad::Tensor<T>& target, bool include_coarse);

template <typename T>
ad::Tensor<T> to_tensor(const geometry::PointCloud& cloud);
template <typename T>
geometry::PointCloud to_cloud(const ad::Tensor<T>& points);

}  // namespace pcfold::pipeline
