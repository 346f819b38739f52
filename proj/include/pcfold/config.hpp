#pragma once

// Run configuration files: UTF-8 lines of `key = value`, `#` starts a
// comment. Keys are applied in file order; `preset` replaces every model key
// with a named preset, so it normally comes first. List values are comma
// separated. See README for the key reference.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "pcfold/pipeline.hpp"

namespace pcfold::config {

struct TrainConfig {
  double learning_rate = 1e-3;
  double lr_decay = 0.7;
  std::size_t lr_decay_every = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 8;
  std::size_t epochs = 50;
  std::uint64_t seed = 1;
  bool coarse_loss = false;  // add CD(P^c, P^g) to the joint loss
  bool coarse_only = false;  // train the coarse stage alone on CD(P^c, P^g)

  // Throws pipeline::ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
};

struct RunConfig {
  pipeline::ModelConfig model = pipeline::ModelConfig::desk();
  TrainConfig train;
};

// Throws pipeline::ConfigError with "origin:line: message".
RunConfig parse(const std::string& text, const std::string& origin = "<config>");
RunConfig load(const std::filesystem::path& path);

}  // namespace pcfold::config
