#pragma once

// Iterative feedback expansion of sparse point features into dense features,
// and offset regression from dense features to dense coordinates.
//
// One feedback block maps (F^s_t, F^d_t) to (F^s_{t+1}, F^d_{t+1}):
//
//   F^s_{t+1} = DOWN_t(F^d_t, r)
//   E^s_t     = SA_t(F^s_{t+1} - F^s_t)
//   E^d_t     = UP_t(E^s_t, r)
//   F^d_{t+1} = F^d_t + E^d_t
//
// UP and the SA value path carry no bias and SA is gated by a scalar that
// starts at zero, so a state with DOWN(F^d_t) == F^s_t is an exact fixed point.

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pcfold/autodiff.hpp"
#include "pcfold/layers.hpp"

namespace pcfold::ifnet {

enum class ExpansionMode { kFeedback, kDuplication, kMultiBranch };

std::string_view to_string(ExpansionMode mode);
// Accepts "feedback", "duplication", "multibranch"; throws std::invalid_argument otherwise.
ExpansionMode parse_expansion_mode(std::string_view text);

// Duplicates every row r times. Replica j of row i is x_i + code_j * x_i
// (elementwise), placed at output row i*r + j, then mapped by a bias-free
// pointwise linear layer.
template <typename T>
struct UpParams {
  ad::Tensor<T> codes;  // r x c
  Linear<T> mlp;        // c -> c
  static UpParams create(ParamStore<T>& store, const std::string& name, std::size_t width, std::size_t ratio, Rng& rng);
};

// Concatenates each run of r consecutive rows (width r*c) and maps it to c.
template <typename T>
struct DownParams {
  Linear<T> mlp;  // r*c -> c
  static DownParams create(ParamStore<T>& store, const std::string& name, std::size_t width, std::size_t ratio, Rng& rng);
};

// y = x + gamma * softmax(Q K^T / sqrt(c')) V with Q, K of width c' = max(1, c/2).
template <typename T>
struct SelfAttentionParams {
  Linear<T> query, key, value;
  ad::Tensor<T> gamma;  // scalar, starts at 0
  static SelfAttentionParams create(ParamStore<T>& store, const std::string& name, std::size_t width, Rng& rng);
};

template <typename T>
struct FeedbackBlockParams {
  UpParams<T> up;
  DownParams<T> down;
  SelfAttentionParams<T> attention;
};

struct IFNetConfig {
  std::size_t input_width = 96;  // C^s
  std::size_t width = 16;        // c
  std::size_t ratio = 4;         // r
  std::size_t steps = 5;         // T
  std::size_t offset_hidden = 32;
  ExpansionMode mode = ExpansionMode::kFeedback;
  double leaky_slope = 0.2;
};

template <typename T>
struct IFNetParams {
  Linear<T> reduce;                     // C^s -> c
  UpParams<T> initial_up;
  std::vector<FeedbackBlockParams<T>> blocks;  // T entries in feedback mode
  std::vector<Linear<T>> branches;      // r entries in multi-branch mode
  std::size_t ratio = 1;
  ExpansionMode mode = ExpansionMode::kFeedback;
  double leaky_slope = 0.2;

  static IFNetParams create(const IFNetConfig& config, ParamStore<T>& store, const std::string& prefix, Rng& rng);
};

template <typename T>
struct OffsetParams {
  Linear<T> hidden;  // c -> hidden
  Linear<T> output;  // hidden -> 3
  double leaky_slope = 0.2;
  static OffsetParams create(const IFNetConfig& config, ParamStore<T>& store, const std::string& prefix, Rng& rng);
};

template <typename T>
struct FeedbackState {
  ad::Tensor<T> sparse;  // N^s x c
  ad::Tensor<T> dense;   // r*N^s x c
  std::size_t step = 0;
};

template <typename T>
ad::Tensor<T> up(ad::Graph<T>& g, const ad::Tensor<T>& x, std::size_t ratio, const UpParams<T>& params);
template <typename T>
ad::Tensor<T> down(ad::Graph<T>& g, const ad::Tensor<T>& x, std::size_t ratio, const DownParams<T>& params);
template <typename T>
ad::Tensor<T> self_attention(ad::Graph<T>& g, const ad::Tensor<T>& x, const SelfAttentionParams<T>& params);
template <typename T>
FeedbackState<T> feedback_block(ad::Graph<T>& g, const FeedbackState<T>& state, std::size_t ratio,
                                const FeedbackBlockParams<T>& params);

template <typename T>
struct Expansion {
  ad::Tensor<T> dense;                   // r*N^s x c
  std::vector<FeedbackState<T>> states;  // t = 0..T (feedback mode), t = 0 otherwise
};

template <typename T>
Expansion<T> expand(ad::Graph<T>& g, const ad::Tensor<T>& sparse_features, const IFNetParams<T>& params);

// P^d[i*r + j] = P^s[i] + MLP(F^d)[i*r + j].
template <typename T>
ad::Tensor<T> offset_regress(ad::Graph<T>& g, const ad::Tensor<T>& sparse_points, const ad::Tensor<T>& dense_features,
                             std::size_t ratio, const OffsetParams<T>& params);

// Offset regression applied to each recorded state, for inspection only.
template <typename T>
std::vector<ad::Tensor<T>> intermediate_clouds(const std::vector<FeedbackState<T>>& states,
                                               const ad::Tensor<T>& sparse_points, std::size_t ratio,
                                               const OffsetParams<T>& params);

// Row indices repeating each of `rows` rows `ratio` times in place.
std::vector<std::size_t> replicate_index(std::size_t rows, std::size_t ratio);

}  // namespace pcfold::ifnet
