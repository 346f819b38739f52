#include "pcfold/ifnet.hpp"

#include <cmath>
#include <stdexcept>

namespace pcfold::ifnet {

std::string_view to_string(ExpansionMode mode) {
  switch (mode) {
    case ExpansionMode::kFeedback: return "feedback";
    case ExpansionMode::kDuplication: return "duplication";
    case ExpansionMode::kMultiBranch: return "multibranch";
  }
  return "unknown";
}

ExpansionMode parse_expansion_mode(std::string_view text) {
  if (text == "feedback") return ExpansionMode::kFeedback;
  if (text == "duplication") return ExpansionMode::kDuplication;
  if (text == "multibranch") return ExpansionMode::kMultiBranch;
  throw std::invalid_argument("unknown expansion mode '" + std::string(text) +
                              "' (expected feedback, duplication or multibranch)");
}

std::vector<std::size_t> replicate_index(std::size_t rows, std::size_t ratio) {
  std::vector<std::size_t> idx(rows * ratio);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < ratio; ++j) idx[i * ratio + j] = i;
  return idx;
}

template <typename T>
UpParams<T> UpParams<T>::create(ParamStore<T>& store, const std::string& name, std::size_t width, std::size_t ratio,
                                Rng& rng) {
  if (ratio == 0) throw std::invalid_argument("upsampling ratio must be at least 1");
  UpParams p;
  // Distinct codes break the symmetry between replicas of one point.
  p.codes = store.normal(name + ".codes", {ratio, width}, 0.5, rng);
  p.mlp = Linear<T>::create(store, name + ".mlp", width, width, false, rng);
  return p;
}

template <typename T>
DownParams<T> DownParams<T>::create(ParamStore<T>& store, const std::string& name, std::size_t width,
                                    std::size_t ratio, Rng& rng) {
  DownParams p;
  p.mlp = Linear<T>::create(store, name + ".mlp", width * ratio, width, true, rng);
  return p;
}

template <typename T>
SelfAttentionParams<T> SelfAttentionParams<T>::create(ParamStore<T>& store, const std::string& name,
                                                      std::size_t width, Rng& rng) {
  const std::size_t reduced = std::max<std::size_t>(1, width / 2);
  SelfAttentionParams p;
  p.query = Linear<T>::create(store, name + ".query", width, reduced, false, rng);
  p.key = Linear<T>::create(store, name + ".key", width, reduced, false, rng);
  p.value = Linear<T>::create(store, name + ".value", width, width, false, rng);
  p.gamma = store.zeros(name + ".gamma", {1});
  return p;
}

template <typename T>
IFNetParams<T> IFNetParams<T>::create(const IFNetConfig& config, ParamStore<T>& store, const std::string& prefix,
                                      Rng& rng) {
  if (config.ratio == 0 || config.width == 0) throw std::invalid_argument("ifnet: ratio and width must be positive");
  IFNetParams p;
  p.ratio = config.ratio;
  p.mode = config.mode;
  p.leaky_slope = config.leaky_slope;
  p.reduce = Linear<T>::create(store, prefix + ".reduce", config.input_width, config.width, true, rng);
  switch (config.mode) {
    case ExpansionMode::kFeedback:
      p.initial_up = UpParams<T>::create(store, prefix + ".up0", config.width, config.ratio, rng);
      for (std::size_t t = 0; t < config.steps; ++t) {
        const std::string block = prefix + ".block" + std::to_string(t);
        FeedbackBlockParams<T> b;
        b.down = DownParams<T>::create(store, block + ".down", config.width, config.ratio, rng);
        b.attention = SelfAttentionParams<T>::create(store, block + ".sa", config.width, rng);
        b.up = UpParams<T>::create(store, block + ".up", config.width, config.ratio, rng);
        p.blocks.push_back(std::move(b));
      }
      break;
    case ExpansionMode::kDuplication:
      p.initial_up = UpParams<T>::create(store, prefix + ".up0", config.width, config.ratio, rng);
      break;
    case ExpansionMode::kMultiBranch:
      for (std::size_t j = 0; j < config.ratio; ++j)
        p.branches.push_back(
            Linear<T>::create(store, prefix + ".branch" + std::to_string(j), config.width, config.width, true, rng));
      break;
  }
  return p;
}

template <typename T>
OffsetParams<T> OffsetParams<T>::create(const IFNetConfig& config, ParamStore<T>& store, const std::string& prefix,
                                        Rng& rng) {
  OffsetParams p;
  p.hidden = Linear<T>::create(store, prefix + ".hidden", config.width, config.offset_hidden, true, rng);
  p.output = Linear<T>::create(store, prefix + ".output", config.offset_hidden, 3, true, rng);
  p.leaky_slope = config.leaky_slope;
  return p;
}

template <typename T>
ad::Tensor<T> up(ad::Graph<T>& g, const ad::Tensor<T>& x, std::size_t ratio, const UpParams<T>& params) {
  if (ratio == 0) throw std::invalid_argument("up: ratio must be at least 1");
  if (x.rank() != 2) throw ad::ShapeError("up expects N x c features, got " + ad::to_string(x.shape()));
  if (params.codes.dim(0) != ratio || params.codes.dim(1) != x.dim(1))
    throw ad::ShapeError("up: code table " + ad::to_string(params.codes.shape()) + " does not match ratio " +
                         std::to_string(ratio) + " and width " + std::to_string(x.dim(1)));
  const std::size_t n = x.dim(0);
  const auto replicated = ad::gather_rows(g, x, replicate_index(n, ratio));
  std::vector<std::size_t> code_rows(n * ratio);
  for (std::size_t i = 0; i < code_rows.size(); ++i) code_rows[i] = i % ratio;
  const auto codes = ad::gather_rows(g, params.codes, code_rows);
  const auto modulated = ad::add(g, replicated, ad::mul(g, replicated, codes));
  return params.mlp(g, modulated);
}

template <typename T>
ad::Tensor<T> down(ad::Graph<T>& g, const ad::Tensor<T>& x, std::size_t ratio, const DownParams<T>& params) {
  if (ratio == 0) throw std::invalid_argument("down: ratio must be at least 1");
  if (x.rank() != 2 || x.dim(0) % ratio != 0)
    throw ad::ShapeError("down: row count of " + ad::to_string(x.shape()) + " is not divisible by ratio " +
                         std::to_string(ratio));
  const auto grouped = ad::reshape(g, x, {x.dim(0) / ratio, x.dim(1) * ratio});
  return params.mlp(g, grouped);
}

template <typename T>
ad::Tensor<T> self_attention(ad::Graph<T>& g, const ad::Tensor<T>& x, const SelfAttentionParams<T>& params) {
  const auto q = params.query(g, x);
  const auto k = params.key(g, x);
  const auto v = params.value(g, x);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(q.dim(1)));
  const auto weights = ad::softmax(g, ad::scale(g, ad::matmul(g, q, ad::transpose(g, k)), inv_sqrt), 1);
  const auto attended = ad::matmul(g, weights, v);
  return ad::add(g, x, ad::mul_scalar(g, attended, params.gamma));
}

template <typename T>
FeedbackState<T> feedback_block(ad::Graph<T>& g, const FeedbackState<T>& state, std::size_t ratio,
                                const FeedbackBlockParams<T>& params) {
  if (state.dense.dim(0) != state.sparse.dim(0) * ratio)
    throw ad::ShapeError("feedback_block: dense rows " + std::to_string(state.dense.dim(0)) + " != " +
                         std::to_string(ratio) + " x sparse rows " + std::to_string(state.sparse.dim(0)));
  FeedbackState<T> next;
  next.sparse = down(g, state.dense, ratio, params.down);
  const auto error = self_attention(g, ad::sub(g, next.sparse, state.sparse), params.attention);
  const auto dense_error = up(g, error, ratio, params.up);
  next.dense = ad::add(g, state.dense, dense_error);
  next.step = state.step + 1;
  return next;
}

template <typename T>
Expansion<T> expand(ad::Graph<T>& g, const ad::Tensor<T>& sparse_features, const IFNetParams<T>& params) {
  const T slope = static_cast<T>(params.leaky_slope);
  FeedbackState<T> state;
  state.sparse = ad::leaky_relu(g, params.reduce(g, sparse_features), slope);
  const std::size_t n = state.sparse.dim(0);
  Expansion<T> out;
  switch (params.mode) {
    case ExpansionMode::kFeedback:
    case ExpansionMode::kDuplication: {
      state.dense = up(g, state.sparse, params.ratio, params.initial_up);
      out.states.push_back(state);
      for (const FeedbackBlockParams<T>& block : params.blocks) {
        state = feedback_block(g, state, params.ratio, block);
        out.states.push_back(state);
      }
      break;
    }
    case ExpansionMode::kMultiBranch: {
      std::vector<ad::Tensor<T>> parts;
      for (const Linear<T>& branch : params.branches) parts.push_back(ad::leaky_relu(g, branch(g, state.sparse), slope));
      // branch-major rows -> interleaved (row i*r + j comes from branch j)
      const auto stacked = ad::concat(g, parts, 0);
      std::vector<std::size_t> order(n * params.ratio);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < params.ratio; ++j) order[i * params.ratio + j] = j * n + i;
      state.dense = ad::gather_rows(g, stacked, order);
      out.states.push_back(state);
      break;
    }
  }
  out.dense = state.dense;
  return out;
}

template <typename T>
ad::Tensor<T> offset_regress(ad::Graph<T>& g, const ad::Tensor<T>& sparse_points, const ad::Tensor<T>& dense_features,
                             std::size_t ratio, const OffsetParams<T>& params) {
  if (sparse_points.rank() != 2 || sparse_points.dim(1) != 3)
    throw ad::ShapeError("offset_regress expects N x 3 sparse points");
  if (dense_features.dim(0) != sparse_points.dim(0) * ratio)
    throw ad::ShapeError("offset_regress: dense rows " + std::to_string(dense_features.dim(0)) + " != " +
                         std::to_string(ratio) + " x " + std::to_string(sparse_points.dim(0)));
  const T slope = static_cast<T>(params.leaky_slope);
  const auto offsets = params.output(g, ad::leaky_relu(g, params.hidden(g, dense_features), slope));
  const auto replicated = ad::gather_rows(g, sparse_points, replicate_index(sparse_points.dim(0), ratio));
  return ad::add(g, replicated, offsets);
}

template <typename T>
std::vector<ad::Tensor<T>> intermediate_clouds(const std::vector<FeedbackState<T>>& states,
                                               const ad::Tensor<T>& sparse_points, std::size_t ratio,
                                               const OffsetParams<T>& params) {
  ad::Graph<T> g(false);
  std::vector<ad::Tensor<T>> out;
  for (const FeedbackState<T>& s : states) out.push_back(offset_regress(g, sparse_points, s.dense, ratio, params));
  return out;
}

#define PCFOLD_INSTANTIATE_IFNET(T)                                                                             \
  template struct UpParams<T>;                                                                                  \
  template struct DownParams<T>;                                                                                \
  template struct SelfAttentionParams<T>;                                                                       \
  template struct IFNetParams<T>;                                                                               \
  template struct OffsetParams<T>;                                                                              \
  template ad::Tensor<T> up(ad::Graph<T>&, const ad::Tensor<T>&, std::size_t, const UpParams<T>&);              \
  template ad::Tensor<T> down(ad::Graph<T>&, const ad::Tensor<T>&, std::size_t, const DownParams<T>&);          \
  template ad::Tensor<T> self_attention(ad::Graph<T>&, const ad::Tensor<T>&, const SelfAttentionParams<T>&);    \
  template FeedbackState<T> feedback_block(ad::Graph<T>&, const FeedbackState<T>&, std::size_t,                 \
                                           const FeedbackBlockParams<T>&);                                      \
  template Expansion<T> expand(ad::Graph<T>&, const ad::Tensor<T>&, const IFNetParams<T>&);                     \
  template ad::Tensor<T> offset_regress(ad::Graph<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&, std::size_t, \
                                        const OffsetParams<T>&);                                                \
  template std::vector<ad::Tensor<T>> intermediate_clouds(const std::vector<FeedbackState<T>>&,                 \
                                                          const ad::Tensor<T>&, std::size_t, const OffsetParams<T>&);

PCFOLD_INSTANTIATE_IFNET(float)
PCFOLD_INSTANTIATE_IFNET(double)

}  // namespace pcfold::ifnet
