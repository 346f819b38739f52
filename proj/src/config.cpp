#include "pcfold/config.hpp"

#include <charconv>
#include <functional>
#include <map>
#include <sstream>

#include "pcfold/cloud_io.hpp"

namespace pcfold::config {

using pipeline::ConfigError;

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must be in (0, 1]");
  if (lr_decay_every == 0) throw ConfigError("lr_decay_every must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must be in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"lr_decay", lr_decay}, {"lr_decay_every", lr_decay_every},
          {"beta1", beta1},                 {"beta2", beta2},       {"epsilon", epsilon},
          {"batch_size", batch_size},       {"epochs", epochs},     {"seed", seed},
          {"coarse_loss", coarse_loss},     {"coarse_only", coarse_only}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    const auto read = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    read("learning_rate", c.learning_rate);
    read("lr_decay", c.lr_decay);
    read("lr_decay_every", c.lr_decay_every);
    read("beta1", c.beta1);
    read("beta2", c.beta2);
    read("epsilon", c.epsilon);
    read("batch_size", c.batch_size);
    read("epochs", c.epochs);
    read("seed", c.seed);
    read("coarse_loss", c.coarse_loss);
    read("coarse_only", c.coarse_only);
  } catch (const nlohmann::json::exception& e) {
    throw pipeline::ConfigError(std::string("malformed train config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename U>
U parse_number(const std::string& v) {
  U out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw std::invalid_argument("not a number");
  return out;
}

std::size_t parse_size(const std::string& v) { return parse_number<std::size_t>(v); }
double parse_double(const std::string& v) { return parse_number<double>(v); }

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("not a boolean");
}

std::vector<std::size_t> parse_list(const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size(trim(item)));
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto size_key = [&t](const std::string& key, std::size_t pipeline::ModelConfig::*field) {
      t[key] = [field](RunConfig& c, const std::string& v) { c.model.*field = parse_size(v); };
    };
    t["preset"] = [](RunConfig& c, const std::string& v) {
      if (v == "desk")
        c.model = pipeline::ModelConfig::desk();
      else if (v == "full")
        c.model = pipeline::ModelConfig::full_scale();
      else
        throw std::invalid_argument("expected desk or full");
    };
    size_key("input_points", &pipeline::ModelConfig::input_points);
    size_key("encoder_neighbors", &pipeline::ModelConfig::encoder_neighbors);
    size_key("heads", &pipeline::ModelConfig::heads);
    size_key("rows", &pipeline::ModelConfig::rows);
    size_key("cols", &pipeline::ModelConfig::cols);
    size_key("level1_channels", &pipeline::ModelConfig::level1_channels);
    size_key("level2_channels", &pipeline::ModelConfig::level2_channels);
    size_key("coarse_channels", &pipeline::ModelConfig::coarse_channels);
    size_key("gfv_hidden", &pipeline::ModelConfig::gfv_hidden);
    size_key("sparse_points", &pipeline::ModelConfig::sparse_points);
    size_key("neighbors", &pipeline::ModelConfig::neighbors);
    size_key("reuse_width", &pipeline::ModelConfig::reuse_width);
    size_key("attention_units", &pipeline::ModelConfig::attention_units);
    size_key("width", &pipeline::ModelConfig::width);
    size_key("ratio", &pipeline::ModelConfig::ratio);
    size_key("steps", &pipeline::ModelConfig::steps);
    size_key("offset_hidden", &pipeline::ModelConfig::offset_hidden);
    t["encoder_widths"] = [](RunConfig& c, const std::string& v) { c.model.encoder_widths = parse_list(v); };
    t["neighbor_widths"] = [](RunConfig& c, const std::string& v) { c.model.neighbor_widths = parse_list(v); };
    t["aggregator"] = [](RunConfig& c, const std::string& v) { c.model.aggregator = pipeline::parse_aggregator(v); };
    t["expansion"] = [](RunConfig& c, const std::string& v) { c.model.expansion = ifnet::parse_expansion_mode(v); };
    t["leaky_slope"] = [](RunConfig& c, const std::string& v) { c.model.leaky_slope = parse_double(v); };

    t["learning_rate"] = [](RunConfig& c, const std::string& v) { c.train.learning_rate = parse_double(v); };
    t["lr_decay"] = [](RunConfig& c, const std::string& v) { c.train.lr_decay = parse_double(v); };
    t["lr_decay_every"] = [](RunConfig& c, const std::string& v) { c.train.lr_decay_every = parse_size(v); };
    t["beta1"] = [](RunConfig& c, const std::string& v) { c.train.beta1 = parse_double(v); };
    t["beta2"] = [](RunConfig& c, const std::string& v) { c.train.beta2 = parse_double(v); };
    t["epsilon"] = [](RunConfig& c, const std::string& v) { c.train.epsilon = parse_double(v); };
    t["batch_size"] = [](RunConfig& c, const std::string& v) { c.train.batch_size = parse_size(v); };
    t["epochs"] = [](RunConfig& c, const std::string& v) { c.train.epochs = parse_size(v); };
    t["seed"] = [](RunConfig& c, const std::string& v) { c.train.seed = parse_number<std::uint64_t>(v); };
    t["coarse_loss"] = [](RunConfig& c, const std::string& v) { c.train.coarse_loss = parse_bool(v); };
    t["coarse_only"] = [](RunConfig& c, const std::string& v) { c.train.coarse_only = parse_bool(v); };
    return t;
  }();
  return table;
}

}  // namespace

RunConfig parse(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  const auto fail = [&](const std::string& msg) {
    throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected key = value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) fail("unknown key '" + key + "'");
    if (value.empty()) fail("missing value for '" + key + "'");
    try {
      it->second(cfg, value);
    } catch (const std::exception& e) {
      fail("invalid value '" + value + "' for '" + key + "' (" + e.what() + ")");
    }
  }
  try {
    cfg.model.validate();
    cfg.train.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  if (cfg.model.aggregator == pipeline::Aggregator::kGlobal && !cfg.train.coarse_only)
    throw ConfigError(origin + ": the gfv aggregator only has a coarse stage; set coarse_only = true");
  return cfg;
}

RunConfig load(const std::filesystem::path& path) { return parse(io::read_file(path), path.string()); }

}  // namespace pcfold::config
