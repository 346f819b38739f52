#pragma once

// Adam training with step decay, dataset loading and held-out evaluation.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcfold/config.hpp"
#include "pcfold/geometry.hpp"
#include "pcfold/pipeline.hpp"

namespace pcfold::train {

struct Sample {
  std::string id;
  std::string category;
  geometry::PointCloud partial;
  geometry::PointCloud complete;
};

// lr * decay^floor(epoch / decay_every), epochs counted from 0.
double learning_rate_at(const config::TrainConfig& config, std::size_t epoch);

// Bias-corrected Adam over every tensor of a parameter store. Moments are
// kept in double precision.
template <typename T>
class Adam {
 public:
  Adam(const ParamStore<T>& store, double beta1, double beta2, double epsilon);
  // `gradient` is the concatenation of all parameter gradients in store order.
  void step(ParamStore<T>& store, std::span<const double> gradient, double lr);
  std::size_t steps() const { return steps_; }

 private:
  double beta1_, beta2_, epsilon_;
  std::size_t steps_ = 0;
  std::vector<double> m_, v_;
};

struct Evaluation {
  double coarse_cd = 0.0;
  std::optional<double> dense_cd;  // absent when only the coarse stage runs
  double loss = 0.0;               // mean training objective
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean objective over the epoch's updates
  Evaluation eval;
};

struct TrainResult {
  Evaluation initial;
  std::vector<EpochLog> log;
};

// Training objective of one sample, recorded on `g`.
template <typename T>
ad::Tensor<T> sample_loss(ad::Graph<T>& g, const Sample& sample, const pipeline::ModelParams<T>& params,
                          const config::TrainConfig& config);

// Mean squared-distance Chamfer values over `samples`, fanned out over workers
// and averaged in sample order.
template <typename T>
Evaluation evaluate(const pipeline::ModelParams<T>& params, std::span<const Sample> samples,
                    const config::TrainConfig& config, std::size_t workers);

// Trains `params` in place. The evaluation in each log row is on `heldout`,
// or on `train_set` when `heldout` is empty. Per-sample gradients are summed
// in sample order, so results are independent of `workers`.
template <typename T>
TrainResult train(pipeline::ModelParams<T>& params, std::span<const Sample> train_set, std::span<const Sample> heldout,
                  const config::TrainConfig& config, std::size_t workers,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

std::string log_csv(const std::vector<EpochLog>& log);

// Reads a directory written by `gen-data`: manifest.json with entries
// {id, category, split, partial, complete}. `split` filters when non-empty.
std::vector<Sample> load_dataset(const std::filesystem::path& dir, const std::string& split = "");

// In-memory synthetic dataset with the same ids and contents gen-data writes.
std::vector<Sample> synthetic_dataset(std::size_t count, std::uint64_t seed, std::size_t partial_points = 256,
                                      std::size_t complete_points = 1024, std::size_t workers = 1);

}  // namespace pcfold::train
