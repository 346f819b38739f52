#include "pcfold/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace pcfold {

template <typename T>
ad::Tensor<T> ParamStore<T>::add(const std::string& name, ad::Tensor<T> tensor) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  tensor.set_requires_grad(true);
  entries_.emplace_back(name, tensor);
  return tensor;
}

template <typename T>
ad::Tensor<T> ParamStore<T>::zeros(const std::string& name, ad::Shape shape) {
  return add(name, ad::Tensor<T>::zeros(std::move(shape)));
}

template <typename T>
ad::Tensor<T> ParamStore<T>::uniform(const std::string& name, ad::Shape shape, double bound, Rng& rng) {
  std::vector<T> data(ad::element_count(shape));
  for (T& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
  return add(name, ad::Tensor<T>(std::move(shape), std::move(data)));
}

template <typename T>
ad::Tensor<T> ParamStore<T>::normal(const std::string& name, ad::Shape shape, double stddev, Rng& rng) {
  std::vector<T> data(ad::element_count(shape));
  for (T& v : data) v = static_cast<T>(stddev * rng.normal());
  return add(name, ad::Tensor<T>(std::move(shape), std::move(data)));
}

template <typename T>
const ad::Tensor<T>* ParamStore<T>::find(const std::string& name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return &t;
  return nullptr;
}

template <typename T>
std::size_t ParamStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.size();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

template <typename T>
Linear<T> Linear<T>::create(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                            bool with_bias, Rng& rng) {
  Linear l;
  l.weight = store.uniform(name + ".weight", {in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  if (with_bias) l.bias = store.zeros(name + ".bias", {out});
  return l;
}

template <typename T>
ad::Tensor<T> Linear<T>::operator()(ad::Graph<T>& g, const ad::Tensor<T>& x) const {
  ad::Tensor<T> y = ad::matmul(g, x, weight);
  if (bias) y = ad::add_broadcast(g, y, *bias, 1);
  return y;
}

template <typename T>
Conv2d<T> Conv2d<T>::create(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                            std::size_t kernel, std::size_t stride, std::size_t padding, bool with_bias,
                            Rng& rng) {
  Conv2d c;
  const double fan_in = static_cast<double>(in * kernel * kernel);
  c.weight = store.uniform(name + ".weight", {out, in, kernel, kernel}, 1.0 / std::sqrt(fan_in), rng);
  if (with_bias) c.bias = store.zeros(name + ".bias", {out});
  c.stride = stride;
  c.padding = padding;
  return c;
}

template <typename T>
ad::Tensor<T> Conv2d<T>::operator()(ad::Graph<T>& g, const ad::Tensor<T>& x) const {
  return ad::conv2d(g, x, weight, bias ? &*bias : nullptr, stride, padding);
}

template class ParamStore<float>;
template class ParamStore<double>;
template struct Linear<float>;
template struct Linear<double>;
template struct Conv2d<float>;
template struct Conv2d<double>;

}  // namespace pcfold
