#include "pcfold/fsnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace pcfold::fsnet {

template <typename T>
FSNetParams<T> FSNetParams<T>::create(const FSNetConfig& config, ParamStore<T>& store, const std::string& prefix,
                                      Rng& rng) {
  if (config.input_width == 0 || config.heads == 0 || config.rows == 0 || config.cols == 0)
    throw std::invalid_argument("fsnet: widths and counts must be positive");
  FSNetParams p;
  p.queries = store.normal(prefix + ".queries", {config.rows, config.input_width}, 0.02, rng);
  const double bound = 1.0 / std::sqrt(static_cast<double>(config.input_width));
  for (std::size_t h = 0; h < config.heads; ++h) {
    const std::string head = prefix + ".head" + std::to_string(h);
    p.query_proj.push_back(store.uniform(head + ".query", {config.input_width, config.cols}, bound, rng));
    p.key_proj.push_back(store.uniform(head + ".key", {config.input_width, config.cols}, bound, rng));
    p.value_proj.push_back(store.uniform(head + ".value", {config.input_width, config.cols}, bound, rng));
  }
  return p;
}

template <typename T>
std::vector<std::size_t> canonical_row_order(std::span<const T> values, std::size_t rows, std::size_t cols) {
  std::vector<std::size_t> order(rows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const T* ra = values.data() + a * cols;
    const T* rb = values.data() + b * cols;
    return std::lexicographical_compare(ra, ra + cols, rb, rb + cols);
  });
  return order;
}

template <typename T>
Aggregation<T> aggregate(ad::Graph<T>& g, const ad::Tensor<T>& features, const FSNetParams<T>& params) {
  if (features.rank() != 2) throw ad::ShapeError("fsnet: features must be N x C, got " + ad::to_string(features.shape()));
  const std::size_t n = features.dim(0), width = features.dim(1);
  if (width != params.queries.dim(1))
    throw ad::ShapeError("fsnet: feature width " + std::to_string(width) + " does not match query width " +
                         std::to_string(params.queries.dim(1)));
  const std::size_t k = params.queries.dim(0);
  const std::size_t d = params.value_proj.front().dim(1);
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));

  const std::vector<std::size_t> order = canonical_row_order<T>(features.data(), n, width);
  const ad::Tensor<T> canon = ad::gather_rows(g, features, order);

  std::vector<ad::Tensor<T>> channels;
  std::vector<T> attention(params.heads() * k * n);
  for (std::size_t h = 0; h < params.heads(); ++h) {
    const auto q = ad::matmul(g, params.queries, params.query_proj[h]);  // k x d
    const auto key = ad::matmul(g, canon, params.key_proj[h]);           // N x d
    const auto value = ad::matmul(g, canon, params.value_proj[h]);       // N x d
    const auto logits = ad::scale(g, ad::matmul(g, q, ad::transpose(g, key)), inv_sqrt_d);
    const auto weights = ad::softmax(g, logits, 1);                        // k x N
    const auto head = ad::matmul(g, weights, value);                       // k x d
    channels.push_back(ad::reshape(g, head, {1, k, d}));
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t c = 0; c < n; ++c) attention[(h * k + r) * n + order[c]] = weights.data()[r * n + c];
  }
  Aggregation<T> out;
  out.sfm = ad::concat(g, channels, 0);
  out.attention = ad::Tensor<T>({params.heads(), k, n}, std::move(attention));
  return out;
}

template <typename T>
std::vector<double> attention_heatmap(const ad::Tensor<T>& attention, std::size_t channel) {
  if (attention.rank() != 3) throw ad::ShapeError("attention_heatmap expects h x k x N weights");
  const std::size_t h = attention.dim(0), k = attention.dim(1), n = attention.dim(2);
  if (channel >= h)
    throw std::out_of_range("attention channel " + std::to_string(channel) + " out of range (" + std::to_string(h) +
                            " channels)");
  std::vector<double> out(n, 0.0);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t c = 0; c < n; ++c) out[c] += static_cast<double>(attention.data()[(channel * k + r) * n + c]);
  for (double& v : out) v /= static_cast<double>(k);
  const auto [lo, hi] = std::minmax_element(out.begin(), out.end());
  const double low = *lo, span = *hi - *lo;
  if (!(span > 0.0)) return std::vector<double>(n, 0.0);
  for (double& v : out) v = (v - low) / span;
  return out;
}

template struct FSNetParams<float>;
template struct FSNetParams<double>;
template Aggregation<float> aggregate(ad::Graph<float>&, const ad::Tensor<float>&, const FSNetParams<float>&);
template Aggregation<double> aggregate(ad::Graph<double>&, const ad::Tensor<double>&, const FSNetParams<double>&);
template std::vector<double> attention_heatmap(const ad::Tensor<float>&, std::size_t);
template std::vector<double> attention_heatmap(const ad::Tensor<double>&, std::size_t);
template std::vector<std::size_t> canonical_row_order(std::span<const float>, std::size_t, std::size_t);
template std::vector<std::size_t> canonical_row_order(std::span<const double>, std::size_t, std::size_t);

}  // namespace pcfold::fsnet
