#pragma once

// Named parameter storage and the two parametric building blocks used by
// every network stage: pointwise linear maps and 2D convolutions.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pcfold/autodiff.hpp"
#include "pcfold/rng.hpp"

namespace pcfold {

template <typename T>
class ParamStore {
 public:
  // Throws on duplicate names.
  ad::Tensor<T> add(const std::string& name, ad::Tensor<T> tensor);
  ad::Tensor<T> zeros(const std::string& name, ad::Shape shape);
  ad::Tensor<T> uniform(const std::string& name, ad::Shape shape, double bound, Rng& rng);
  ad::Tensor<T> normal(const std::string& name, ad::Shape shape, double stddev, Rng& rng);

  const std::vector<std::pair<std::string, ad::Tensor<T>>>& entries() const { return entries_; }
  const ad::Tensor<T>* find(const std::string& name) const;
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, ad::Tensor<T>>> entries_;
};

template <typename T>
struct Linear {
  ad::Tensor<T> weight;  // in x out
  std::optional<ad::Tensor<T>> bias;

  // Fan-in scaled uniform weights, zero bias.
  static Linear create(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                       bool with_bias, Rng& rng);
  std::size_t in_width() const { return weight.dim(0); }
  std::size_t out_width() const { return weight.dim(1); }
  // x: rows x in
  ad::Tensor<T> operator()(ad::Graph<T>& g, const ad::Tensor<T>& x) const;
};

template <typename T>
struct Conv2d {
  ad::Tensor<T> weight;  // out x in x k x k
  std::optional<ad::Tensor<T>> bias;
  std::size_t stride = 1;
  std::size_t padding = 1;

  static Conv2d create(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                       std::size_t kernel, std::size_t stride, std::size_t padding, bool with_bias, Rng& rng);
  ad::Tensor<T> operator()(ad::Graph<T>& g, const ad::Tensor<T>& x) const;
};

}  // namespace pcfold
