#pragma once

// Central finite-difference checks of backward rules in double precision.
//
// Each check projects an op's output onto a fixed random tensor to get a
// scalar, back-propagates once, then perturbs sampled entries of every target
// tensor by +-step. Entries whose perturbation changes a discrete decision
// (activation mask, argmax, neighbor set, FPS pick) are skipped, as read from
// the graph's structure hash.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pcfold/autodiff.hpp"
#include "pcfold/pipeline.hpp"

namespace pcfold::gradcheck {

struct Options {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::size_t max_entries = 0;           // per tensor; 0 checks every entry
  std::size_t pipeline_max_entries = 6;  // per tensor for the full model
  std::uint64_t seed = 1;
};

struct TensorResult {
  std::string name;
  std::size_t size = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  double worst = 0.0;
};

struct ModuleResult {
  std::string module;
  std::vector<TensorResult> tensors;
  double worst() const;
  std::size_t checked() const;
  std::size_t skipped() const;
  bool passed(double tolerance) const { return checked() > 0 && worst() <= tolerance; }
};

using Targets = std::vector<std::pair<std::string, ad::Tensor<double>>>;
using LossFn = std::function<ad::Tensor<double>(ad::Graph<double>&)>;

// |a - b| / max(|a|, |b|, 1e-6)
double relative_error(double analytic, double numeric);

ModuleResult check(const std::string& module, const LossFn& loss, const Targets& targets, const Options& options,
                   std::size_t max_entries);

// Every differentiable op and module, then the full model built from `model`
// (an instance small enough for exhaustive sampling, e.g. 32 input points).
std::vector<ModuleResult> run_suite(const pipeline::ModelConfig& model, const Options& options,
                                    const std::function<void(const ModuleResult&)>& on_module = {});

// Desk model resized to a 32-point input.
pipeline::ModelConfig small_pipeline_config();

// x -> x^2 with a backward rule of 3x. Must fail.
ModuleResult negative_control(const Options& options);

}  // namespace pcfold::gradcheck
