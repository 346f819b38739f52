#include "pcfold/decoder.hpp"

#include <stdexcept>

namespace pcfold::decoder {

void DecoderConfig::validate() const {
  if (rows % 2 != 0 || cols % 2 != 0 || rows < 4 || cols < 4)
    throw std::invalid_argument("decoder: k and d must be even and at least 4, got k=" + std::to_string(rows) +
                                " d=" + std::to_string(cols));
  if (in_channels == 0 || level1_channels == 0 || level2_channels == 0 || coarse_channels == 0)
    throw std::invalid_argument("decoder: channel counts must be positive");
}

template <typename T>
DecoderParams<T> DecoderParams<T>::create(const DecoderConfig& config, ParamStore<T>& store,
                                          const std::string& prefix, Rng& rng) {
  config.validate();
  const std::size_t c1 = config.level1_channels, c2 = config.level2_channels;
  DecoderParams p;
  p.enc1 = Conv2d<T>::create(store, prefix + ".enc1", config.in_channels, c1, 3, 1, 1, true, rng);
  p.down1 = Conv2d<T>::create(store, prefix + ".down1", c1, c2, 3, 2, 1, true, rng);
  p.down2 = Conv2d<T>::create(store, prefix + ".down2", c2, c2, 3, 2, 1, true, rng);
  p.up2 = Conv2d<T>::create(store, prefix + ".up2", c2 + c2, c1, 3, 1, 1, true, rng);
  p.up1 = Conv2d<T>::create(store, prefix + ".up1", c1 + c1, config.coarse_channels, 3, 1, 1, true, rng);
  p.regress = Conv2d<T>::create(store, prefix + ".regress", config.coarse_channels, 3, 3, 2, 1, true, rng);
  p.leaky_slope = config.leaky_slope;
  return p;
}

template <typename T>
ad::Tensor<T> grid_to_points(ad::Graph<T>& g, const ad::Tensor<T>& grid) {
  if (grid.rank() != 3 || grid.dim(0) != 3) throw ad::ShapeError("grid_to_points expects 3 x H x W");
  const std::size_t n = grid.dim(1) * grid.dim(2);
  return ad::transpose(g, ad::reshape(g, grid, {3, n}));
}

template <typename T>
CoarseResult<T> decode(ad::Graph<T>& g, const ad::Tensor<T>& sfm, const DecoderParams<T>& params) {
  if (sfm.rank() != 3) throw ad::ShapeError("decode expects an h x k x d feature map, got " + ad::to_string(sfm.shape()));
  if (sfm.dim(1) % 2 != 0 || sfm.dim(2) % 2 != 0 || sfm.dim(1) < 4 || sfm.dim(2) < 4)
    throw std::invalid_argument("decode: k and d must be even and at least 4");
  const T slope = static_cast<T>(params.leaky_slope);
  const auto act = [&](const ad::Tensor<T>& x) { return ad::leaky_relu(g, x, slope); };

  const auto e1 = act(params.enc1(g, sfm));                    // c1 x k x d
  const auto e2 = act(params.down1(g, e1));                    // c2 x k/2 x d/2
  const auto bottleneck = act(params.down2(g, e2));            // c2 x k/4 x d/4
  const auto u2 = ad::upsample_nearest(g, bottleneck, e2.dim(1), e2.dim(2));
  const auto d2 = act(params.up2(g, ad::concat(g, std::vector<ad::Tensor<T>>{u2, e2}, 0)));
  const auto u1 = ad::upsample_nearest(g, d2, e1.dim(1), e1.dim(2));
  CoarseResult<T> r;
  r.coarse_features = act(params.up1(g, ad::concat(g, std::vector<ad::Tensor<T>>{u1, e1}, 0)));
  r.grid = params.regress(g, r.coarse_features);
  r.points = grid_to_points(g, r.grid);
  return r;
}

template <typename T>
geometry::PointCloud extract_patch_region(const ad::Tensor<T>& grid, const Window& window) {
  if (grid.rank() != 3 || grid.dim(0) != 3) throw ad::ShapeError("extract_patch_region expects 3 x H x W");
  const std::size_t h = grid.dim(1), w = grid.dim(2);
  if (window.height == 0 || window.width == 0 || window.row + window.height > h || window.col + window.width > w)
    throw std::out_of_range("patch window (" + std::to_string(window.row) + "," + std::to_string(window.col) + "," +
                            std::to_string(window.height) + "," + std::to_string(window.width) +
                            ") exceeds the " + std::to_string(h) + "x" + std::to_string(w) + " grid");
  geometry::PointCloud pc;
  const auto v = grid.data();
  for (std::size_t r = window.row; r < window.row + window.height; ++r)
    for (std::size_t c = window.col; c < window.col + window.width; ++c) {
      const std::size_t cell = r * w + c;
      pc.points.push_back({static_cast<double>(v[cell]), static_cast<double>(v[h * w + cell]),
                           static_cast<double>(v[2 * h * w + cell])});
    }
  return pc;
}

template struct DecoderParams<float>;
template struct DecoderParams<double>;
template CoarseResult<float> decode(ad::Graph<float>&, const ad::Tensor<float>&, const DecoderParams<float>&);
template CoarseResult<double> decode(ad::Graph<double>&, const ad::Tensor<double>&, const DecoderParams<double>&);
template ad::Tensor<float> grid_to_points(ad::Graph<float>&, const ad::Tensor<float>&);
template ad::Tensor<double> grid_to_points(ad::Graph<double>&, const ad::Tensor<double>&);
template geometry::PointCloud extract_patch_region(const ad::Tensor<float>&, const Window&);
template geometry::PointCloud extract_patch_region(const ad::Tensor<double>&, const Window&);

}  // namespace pcfold::decoder
