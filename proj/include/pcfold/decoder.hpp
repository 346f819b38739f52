#pragma once

// Coarse decoder: a two-level UNet over the structured feature map followed
// by a stride-2 regression conv producing a 3 x (k/2) x (d/2) coordinate grid.

#include <cstddef>
#include <string>

#include "pcfold/autodiff.hpp"
#include "pcfold/geometry.hpp"
#include "pcfold/layers.hpp"

namespace pcfold::decoder {

struct DecoderConfig {
  std::size_t in_channels = 4;      // h
  std::size_t rows = 16;            // k
  std::size_t cols = 16;            // d
  std::size_t level1_channels = 32;
  std::size_t level2_channels = 64;  // also the bottleneck width
  std::size_t coarse_channels = 32;  // C^c
  double leaky_slope = 0.2;

  // Throws std::invalid_argument unless k and d are even and >= 4.
  void validate() const;
  std::size_t coarse_points() const { return (rows / 2) * (cols / 2); }
};

template <typename T>
struct DecoderParams {
  Conv2d<T> enc1, down1, down2;  // h->32, 32->64 (s2), 64->64 (s2)
  Conv2d<T> up2, up1;            // (64+64)->32, (32+32)->C^c after nearest upsampling
  Conv2d<T> regress;             // C^c->3, stride 2, linear
  double leaky_slope = 0.2;

  static DecoderParams create(const DecoderConfig& config, ParamStore<T>& store, const std::string& prefix, Rng& rng);
};

template <typename T>
struct CoarseResult {
  ad::Tensor<T> coarse_features;  // C^c x k x d
  ad::Tensor<T> grid;             // 3 x (k/2) x (d/2)
  ad::Tensor<T> points;           // N^c x 3, row-major reshape of the grid
};

template <typename T>
CoarseResult<T> decode(ad::Graph<T>& g, const ad::Tensor<T>& sfm, const DecoderParams<T>& params);

// Converts a 3 x H x W coordinate grid into N x 3 points, cell (r, c) -> row r*W + c.
template <typename T>
ad::Tensor<T> grid_to_points(ad::Graph<T>& g, const ad::Tensor<T>& grid);

struct Window {
  std::size_t row = 0, col = 0, height = 1, width = 1;
};

// Points whose grid cells fall inside the window, in row-major cell order.
template <typename T>
geometry::PointCloud extract_patch_region(const ad::Tensor<T>& grid, const Window& window);

}  // namespace pcfold::decoder
