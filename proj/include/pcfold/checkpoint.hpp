#pragma once

// Binary checkpoints, little-endian:
//
//   magic      8 bytes  "PCFOLD1\0"
//   version    u32      (1)
//   count      u32      number of tensors
//   meta       u32 length + UTF-8 JSON {"model": ..., "design": ..., ...}
//   count x    u16 name length + name bytes, u8 dtype (0 = f32, 1 = f64),
//              u8 rank, rank x u64 extents, raw element data

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "pcfold/pipeline.hpp"

namespace pcfold::checkpoint {

inline constexpr std::uint32_t kVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IncompatibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StoredTensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::variant<std::vector<float>, std::vector<double>> values;
};

struct CheckpointFile {
  nlohmann::json meta;
  std::vector<StoredTensor> tensors;
};

// Fixed record of the architectural choices baked into the parameter layout.
nlohmann::json design_metadata();

std::string encode(const CheckpointFile& file);
CheckpointFile decode(const std::string& bytes);

CheckpointFile read_file(const std::filesystem::path& path);

// `extra` is merged into the metadata object next to "model" and "design".
template <typename T>
void save(const std::filesystem::path& path, const pipeline::ModelParams<T>& params,
          const nlohmann::json& extra = nlohmann::json::object());

// Stored tensors must match the parameter names and shapes created from the
// stored config; values of the other precision are converted.
template <typename T>
pipeline::ModelParams<T> load(const std::filesystem::path& path);

// Throws IncompatibleError listing every differing key.
void check_compatible(const pipeline::ModelConfig& runtime, const pipeline::ModelConfig& stored);

}  // namespace pcfold::checkpoint
