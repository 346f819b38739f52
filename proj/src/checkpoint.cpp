#include "pcfold/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <map>

#include "pcfold/cloud_io.hpp"

namespace pcfold::checkpoint {

namespace {

constexpr char kMagic[8] = {'P', 'C', 'F', 'O', 'L', 'D', '1', '\0'};

template <typename U>
void put(std::string& out, U value) {
  char buf[sizeof(U)];
  std::memcpy(buf, &value, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  template <typename U>
  std::vector<U> array(std::size_t n, const char* what) {
    if (n > (bytes_.size() - pos_) / sizeof(U)) throw FormatError(std::string("truncated checkpoint: ") + what);
    std::vector<U> v(n);
    std::memcpy(v.data(), bytes_.data() + pos_, n * sizeof(U));
    pos_ += n * sizeof(U);
    return v;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("truncated checkpoint: ") + what);
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

nlohmann::json design_metadata() {
  return {{"chamfer", "mean of squared nearest-neighbor distances, both directions"},
          {"input_order", "lexicographic by coordinates"},
          {"fsnet_projection_bias", false},
          {"fsnet_output_projection", false},
          {"decoder_normalization", "none"},
          {"decoder_upsampling", "nearest + 3x3 conv"},
          {"up_unit", "replica j = x * (1 + code_j), bias-free pointwise linear"},
          {"down_unit", "concat r consecutive rows, linear with bias"},
          {"self_attention", "y = x + gamma * softmax(QK^T / sqrt(c/2)) V, bias-free, gamma starts at 0"},
          {"block_parameters", "untied per step, initial UP separate"},
          {"feature_reuse_bias", false},
          {"grouping", "max over kappa nearest sampled points"}};
}

std::string encode(const CheckpointFile& file) {
  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(file.tensors.size()));
  const std::string meta = file.meta.dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  for (const StoredTensor& t : file.tensors) {
    if (t.name.size() > 0xffff) throw FormatError("tensor name too long: " + t.name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    const bool f64 = std::holds_alternative<std::vector<double>>(t.values);
    put<std::uint8_t>(out, f64 ? 1 : 0);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape.size()));
    for (std::uint64_t e : t.shape) put<std::uint64_t>(out, e);
    std::visit(
        [&](const auto& v) {
          out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(v[0]));
        },
        t.values);
  }
  return out;
}

CheckpointFile decode(const std::string& bytes) {
  static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");
  Reader r(bytes);
  if (r.take(8, "magic") != std::string(kMagic, sizeof kMagic)) throw FormatError("bad checkpoint magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kVersion) + ")");
  const auto count = r.get<std::uint32_t>("tensor count");
  const auto meta_len = r.get<std::uint32_t>("metadata length");
  CheckpointFile file;
  try {
    file.meta = nlohmann::json::parse(r.take(meta_len, "metadata"));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.take(r.get<std::uint16_t>("name length"), "name");
    const auto dtype = r.get<std::uint8_t>("dtype");
    const auto rank = r.get<std::uint8_t>("rank");
    std::uint64_t n = 1;
    for (std::uint8_t a = 0; a < rank; ++a) {
      t.shape.push_back(r.get<std::uint64_t>("extent"));
      n *= t.shape.back();
    }
    if (dtype == 0)
      t.values = r.array<float>(n, "tensor data");
    else if (dtype == 1)
      t.values = r.array<double>(n, "tensor data");
    else
      throw FormatError("unknown dtype tag " + std::to_string(dtype) + " for tensor '" + t.name + "'");
    file.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError("trailing bytes after the last tensor");
  return file;
}

CheckpointFile read_file(const std::filesystem::path& path) {
  try {
    return decode(io::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

template <typename T>
void save(const std::filesystem::path& path, const pipeline::ModelParams<T>& params, const nlohmann::json& extra) {
  CheckpointFile file;
  file.meta = nlohmann::json::object();
  file.meta["model"] = params.config.to_json();
  file.meta["design"] = design_metadata();
  for (const auto& [k, v] : extra.items()) file.meta[k] = v;
  for (const auto& [name, tensor] : params.store.entries()) {
    StoredTensor t;
    t.name = name;
    t.shape.assign(tensor.shape().begin(), tensor.shape().end());
    t.values = std::vector<T>(tensor.data().begin(), tensor.data().end());
    file.tensors.push_back(std::move(t));
  }
  io::write_file(path, encode(file));
}

template <typename T>
pipeline::ModelParams<T> load(const std::filesystem::path& path) {
  const CheckpointFile file = read_file(path);
  if (!file.meta.contains("model")) throw FormatError(path.string() + ": metadata has no model config");
  pipeline::ModelParams<T> params = pipeline::ModelParams<T>::create(pipeline::ModelConfig::from_json(file.meta["model"]), 0);
  std::map<std::string, const StoredTensor*> by_name;
  for (const StoredTensor& t : file.tensors) by_name[t.name] = &t;
  if (by_name.size() != params.store.entries().size())
    throw FormatError(path.string() + ": holds " + std::to_string(by_name.size()) + " tensors, the model has " +
                      std::to_string(params.store.entries().size()));
  for (const auto& [name, tensor] : params.store.entries()) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError(path.string() + ": missing tensor '" + name + "'");
    const StoredTensor& s = *it->second;
    if (!std::equal(s.shape.begin(), s.shape.end(), tensor.shape().begin(), tensor.shape().end()))
      throw FormatError(path.string() + ": tensor '" + name + "' has the wrong shape");
    ad::Tensor<T> dst = tensor;
    std::visit(
        [&](const auto& v) {
          auto out = dst.mutable_data();
          for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(v[i]);
        },
        s.values);
  }
  return params;
}

void check_compatible(const pipeline::ModelConfig& runtime, const pipeline::ModelConfig& stored) {
  const nlohmann::json a = runtime.to_json(), b = stored.to_json();
  std::string diff;
  for (const auto& [key, value] : a.items())
    if (!b.contains(key) || b[key] != value)
      diff += "\n  " + key + ": runtime " + value.dump() + ", checkpoint " + (b.contains(key) ? b[key].dump() : "absent");
  if (!diff.empty()) throw IncompatibleError("checkpoint config does not match the runtime config:" + diff);
}

template void save(const std::filesystem::path&, const pipeline::ModelParams<float>&, const nlohmann::json&);
template void save(const std::filesystem::path&, const pipeline::ModelParams<double>&, const nlohmann::json&);
template pipeline::ModelParams<float> load(const std::filesystem::path&);
template pipeline::ModelParams<double> load(const std::filesystem::path&);

}  // namespace pcfold::checkpoint
