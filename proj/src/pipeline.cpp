#include "pcfold/pipeline.hpp"

#include <stdexcept>

namespace pcfold::pipeline {

std::string_view to_string(Aggregator aggregator) {
  return aggregator == Aggregator::kStructured ? "sfm" : "gfv";
}

Aggregator parse_aggregator(std::string_view text) {
  if (text == "sfm") return Aggregator::kStructured;
  if (text == "gfv") return Aggregator::kGlobal;
  throw ConfigError("unknown aggregator '" + std::string(text) + "' (expected sfm or gfv)");
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.input_points = 2048;
  c.encoder_neighbors = 16;
  c.heads = 32;
  c.rows = 64;
  c.cols = 64;
  c.sparse_points = 1024;
  c.neighbors = 16;
  c.ratio = 16;
  c.steps = 9;
  return c;
}

fsnet::FSNetConfig ModelConfig::fsnet() const { return {input_width(), heads, rows, cols}; }

decoder::DecoderConfig ModelConfig::decoder() const {
  decoder::DecoderConfig d;
  d.in_channels = heads;
  d.rows = rows;
  d.cols = cols;
  d.level1_channels = level1_channels;
  d.level2_channels = level2_channels;
  d.coarse_channels = coarse_channels;
  d.leaky_slope = leaky_slope;
  return d;
}

sparse::SparseConfig ModelConfig::sparse() const {
  sparse::SparseConfig s;
  s.sparse_points = sparse_points;
  s.neighbors = neighbors;
  s.neighbor_widths = neighbor_widths;
  s.input_width = input_width();
  s.coarse_channels = coarse_channels;
  s.reuse_width = reuse_width;
  s.attention_units = attention_units;
  s.leaky_slope = leaky_slope;
  return s;
}

ifnet::IFNetConfig ModelConfig::ifnet() const {
  ifnet::IFNetConfig f;
  f.input_width = sparse().sparse_width();
  f.width = width;
  f.ratio = ratio;
  f.steps = expansion == ifnet::ExpansionMode::kFeedback ? steps : 0;
  f.offset_hidden = offset_hidden;
  f.mode = expansion;
  f.leaky_slope = leaky_slope;
  return f;
}

void ModelConfig::validate() const {
  const auto fail = [](const std::string& what) { throw ConfigError("invalid model config: " + what); };
  if (encoder_widths.empty() || neighbor_widths.empty()) fail("layer width lists must not be empty");
  for (std::size_t w : encoder_widths)
    if (w == 0) fail("encoder widths must be positive");
  for (std::size_t w : neighbor_widths)
    if (w == 0) fail("neighbor encoding widths must be positive");
  if (input_points == 0) fail("input_points must be positive");
  if (encoder_neighbors == 0 || encoder_neighbors > input_points) fail("encoder_neighbors must be in [1, input_points]");
  if (heads == 0) fail("heads must be positive");
  if (rows % 2 != 0 || cols % 2 != 0 || rows < 4 || cols < 4) fail("rows (k) and cols (d) must be even and >= 4");
  if (level1_channels == 0 || level2_channels == 0 || coarse_channels == 0 || gfv_hidden == 0)
    fail("decoder channel counts must be positive");
  if (sparse_points == 0 || sparse_points > input_points + coarse_points())
    fail("sparse_points must be in [1, input_points + coarse points]");
  if (neighbors == 0 || neighbors > sparse_points) fail("neighbors must be in [1, sparse_points]");
  if (reuse_width == 0 || width == 0 || ratio == 0 || offset_hidden == 0) fail("widths and ratio must be positive");
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) fail("leaky_slope must be in [0, 1)");
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j;
  j["input_points"] = input_points;
  j["encoder_neighbors"] = encoder_neighbors;
  j["encoder_widths"] = encoder_widths;
  j["aggregator"] = std::string(to_string(aggregator));
  j["heads"] = heads;
  j["rows"] = rows;
  j["cols"] = cols;
  j["level1_channels"] = level1_channels;
  j["level2_channels"] = level2_channels;
  j["coarse_channels"] = coarse_channels;
  j["gfv_hidden"] = gfv_hidden;
  j["sparse_points"] = sparse_points;
  j["neighbors"] = neighbors;
  j["neighbor_widths"] = neighbor_widths;
  j["reuse_width"] = reuse_width;
  j["attention_units"] = attention_units;
  j["width"] = width;
  j["ratio"] = ratio;
  j["steps"] = steps;
  j["offset_hidden"] = offset_hidden;
  j["expansion"] = std::string(ifnet::to_string(expansion));
  j["leaky_slope"] = leaky_slope;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.input_points = j.at("input_points").get<std::size_t>();
    c.encoder_neighbors = j.at("encoder_neighbors").get<std::size_t>();
    c.encoder_widths = j.at("encoder_widths").get<std::vector<std::size_t>>();
    c.aggregator = parse_aggregator(j.at("aggregator").get<std::string>());
    c.heads = j.at("heads").get<std::size_t>();
    c.rows = j.at("rows").get<std::size_t>();
    c.cols = j.at("cols").get<std::size_t>();
    c.level1_channels = j.at("level1_channels").get<std::size_t>();
    c.level2_channels = j.at("level2_channels").get<std::size_t>();
    c.coarse_channels = j.at("coarse_channels").get<std::size_t>();
    c.gfv_hidden = j.at("gfv_hidden").get<std::size_t>();
    c.sparse_points = j.at("sparse_points").get<std::size_t>();
    c.neighbors = j.at("neighbors").get<std::size_t>();
    c.neighbor_widths = j.at("neighbor_widths").get<std::vector<std::size_t>>();
    c.reuse_width = j.at("reuse_width").get<std::size_t>();
    c.attention_units = j.at("attention_units").get<std::size_t>();
    c.width = j.at("width").get<std::size_t>();
    c.ratio = j.at("ratio").get<std::size_t>();
    c.steps = j.at("steps").get<std::size_t>();
    c.offset_hidden = j.at("offset_hidden").get<std::size_t>();
    c.expansion = ifnet::parse_expansion_mode(j.at("expansion").get<std::string>());
    c.leaky_slope = j.at("leaky_slope").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  return c;
}

template <typename T>
ModelParams<T> ModelParams<T>::create(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams p;
  p.config = config;
  Rng rng = Rng::stream(seed, "init");
  p.encoder = sparse::EdgeConvParams<T>::create(p.store, "encoder", 3, config.encoder_widths, config.encoder_neighbors,
                                                rng);
  p.encoder.leaky_slope = config.leaky_slope;
  if (config.aggregator == Aggregator::kGlobal) {
    p.gfv_hidden = Linear<T>::create(p.store, "gfv.hidden", config.input_width(), config.gfv_hidden, true, rng);
    p.gfv_out = Linear<T>::create(p.store, "gfv.out", config.gfv_hidden, 3 * config.coarse_points(), true, rng);
    return p;
  }
  p.fsnet = fsnet::FSNetParams<T>::create(config.fsnet(), p.store, "fsnet", rng);
  p.decoder = decoder::DecoderParams<T>::create(config.decoder(), p.store, "decoder", rng);
  p.sparse = sparse::SparseParams<T>::create(config.sparse(), p.store, "sparse", rng);
  p.ifnet = ifnet::IFNetParams<T>::create(config.ifnet(), p.store, "ifnet", rng);
  p.offset = ifnet::OffsetParams<T>::create(config.ifnet(), p.store, "offset", rng);
  return p;
}

template <typename T>
ModelParams<T> ModelParams<T>::clone() const {
  ModelParams p = create(config, 0);
  p.copy_values_from(*this);
  return p;
}

template <typename T>
void ModelParams<T>::copy_values_from(const ModelParams& other) {
  const auto& dst = store.entries();
  const auto& src = other.store.entries();
  if (dst.size() != src.size()) throw ConfigError("copy_values_from: parameter sets differ");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].first != src[i].first || dst[i].second.shape() != src[i].second.shape())
      throw ConfigError("copy_values_from: parameter '" + dst[i].first + "' does not match");
    ad::Tensor<T> t = dst[i].second;
    const auto from = src[i].second.data();
    std::copy(from.begin(), from.end(), t.mutable_data().begin());
  }
}

template <typename T>
ad::Tensor<T> to_tensor(const geometry::PointCloud& cloud) {
  std::vector<T> v(cloud.size() * 3);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (int a = 0; a < 3; ++a) v[3 * i + a] = static_cast<T>(cloud.points[i][a]);
  return ad::Tensor<T>({cloud.size(), 3}, std::move(v));
}

template <typename T>
geometry::PointCloud to_cloud(const ad::Tensor<T>& points) {
  if (points.rank() != 2 || points.dim(1) != 3) throw ad::ShapeError("to_cloud expects N x 3 points");
  geometry::PointCloud c;
  c.points.resize(points.dim(0));
  const auto v = points.data();
  for (std::size_t i = 0; i < c.points.size(); ++i)
    for (int a = 0; a < 3; ++a) c.points[i][a] = static_cast<double>(v[3 * i + a]);
  return c;
}

namespace {

template <typename T>
ad::Tensor<T> canonical_input(const geometry::PointCloud& partial, std::vector<std::size_t>& order) {
  const ad::Tensor<T> raw = to_tensor<T>(partial);
  order = fsnet::canonical_row_order<T>(raw.data(), raw.dim(0), 3);
  std::vector<T> v(raw.size());
  for (std::size_t i = 0; i < order.size(); ++i)
    for (int a = 0; a < 3; ++a) v[3 * i + a] = raw.data()[3 * order[i] + a];
  return ad::Tensor<T>({raw.dim(0), 3}, std::move(v));
}

void check_input(const geometry::PointCloud& partial, const ModelConfig& config) {
  if (partial.empty()) throw geometry::GeometryError("forward: empty input cloud");
  if (partial.size() < config.encoder_neighbors)
    throw geometry::GeometryError("forward: input has " + std::to_string(partial.size()) +
                                  " points, fewer than the encoder neighbor count " +
                                  std::to_string(config.encoder_neighbors));
}

}  // namespace

template <typename T>
ForwardResult<T> forward(ad::Graph<T>& g, const geometry::PointCloud& partial, const ModelParams<T>& params,
                         bool coarse_only) {
  const ModelConfig& cfg = params.config;
  if (cfg.aggregator != Aggregator::kStructured)
    throw ConfigError("forward requires the structured (sfm) aggregator; use gfv_baseline_forward");
  check_input(partial, cfg);
  ForwardResult<T> r;
  r.input = canonical_input<T>(partial, r.input_order);
  r.input_features = sparse::edgeconv_encode(g, r.input, params.encoder);
  fsnet::Aggregation<T> agg = fsnet::aggregate(g, r.input_features, params.fsnet);
  r.sfm = agg.sfm;
  {
    const std::size_t heads = agg.attention.dim(0), k = agg.attention.dim(1), n = agg.attention.dim(2);
    std::vector<T> att(agg.attention.size());
    for (std::size_t row = 0; row < heads * k; ++row)
      for (std::size_t c = 0; c < n; ++c) att[row * n + r.input_order[c]] = agg.attention.data()[row * n + c];
    r.attention = ad::Tensor<T>({heads, k, n}, std::move(att));
  }
  decoder::CoarseResult<T> coarse = decoder::decode(g, r.sfm, params.decoder);
  r.coarse_features = coarse.coarse_features;
  r.coarse_grid = coarse.grid;
  r.coarse = coarse.points;
  if (coarse_only) return r;

  sparse::SparseResult<T> s =
      sparse::sparse_encode(g, r.input, r.input_features, r.coarse, r.coarse_features, params.sparse);
  r.sparse = s.points;
  r.sparse_selected = std::move(s.selected);
  r.sparse_features = s.features;
  ifnet::Expansion<T> e = ifnet::expand(g, r.sparse_features, params.ifnet);
  r.states = std::move(e.states);
  r.dense = ifnet::offset_regress(g, r.sparse, e.dense, cfg.ratio, params.offset);
  return r;
}

template <typename T>
ad::Tensor<T> gfv_baseline_forward(ad::Graph<T>& g, const geometry::PointCloud& partial, const ModelParams<T>& params) {
  const ModelConfig& cfg = params.config;
  if (cfg.aggregator != Aggregator::kGlobal) throw ConfigError("gfv_baseline_forward requires the gfv aggregator");
  check_input(partial, cfg);
  std::vector<std::size_t> order;
  const ad::Tensor<T> input = canonical_input<T>(partial, order);
  const auto features = sparse::edgeconv_encode(g, input, params.encoder);
  const auto pooled = ad::reshape(g, ad::reduce_max(g, features, 0), {1, features.dim(1)});
  const auto hidden = ad::leaky_relu(g, params.gfv_hidden(g, pooled), static_cast<T>(cfg.leaky_slope));
  return ad::reshape(g, params.gfv_out(g, hidden), {cfg.coarse_points(), 3});
}

template <typename T>
ad::Tensor<T> joint_loss(ad::Graph<T>& g, const ad::Tensor<T>& coarse, const ad::Tensor<T>& sparse,
                         const ad::Tensor<T>& dense, const ad::Tensor<T>& target, bool include_coarse) {
  ad::Tensor<T> total =
      ad::add(g, geometry::chamfer_loss(g, sparse, target), geometry::chamfer_loss(g, dense, target));
  if (include_coarse) total = ad::add(g, total, geometry::chamfer_loss(g, coarse, target));
  return total;
}

#define PCFOLD_INSTANTIATE_PIPELINE(T)                                                                             \
  template struct ModelParams<T>;                                                                                  \
  template ForwardResult<T> forward(ad::Graph<T>&, const geometry::PointCloud&, const ModelParams<T>&, bool);      \
  template ad::Tensor<T> gfv_baseline_forward(ad::Graph<T>&, const geometry::PointCloud&, const ModelParams<T>&);  \
  template ad::Tensor<T> joint_loss(ad::Graph<T>&, const ad::Tensor<T>&, const ad::Tensor<T>&,                     \
                                    const ad::Tensor<T>&, const ad::Tensor<T>&, bool);                             \
  template ad::Tensor<T> to_tensor(const geometry::PointCloud&);                                                   \
  template geometry::PointCloud to_cloud(const ad::Tensor<T>&);

PCFOLD_INSTANTIATE_PIPELINE(float)
PCFOLD_INSTANTIATE_PIPELINE(double)

}  // namespace pcfold::pipeline
