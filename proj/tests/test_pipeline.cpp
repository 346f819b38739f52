#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "oracles.hpp"
#include "pcfold/checkpoint.hpp"
#include "pcfold/cloud_io.hpp"
#include "pcfold/config.hpp"
#include "pcfold/pipeline.hpp"
#include "pcfold/train.hpp"

using namespace pcfold;
using T = ad::Tensor<double>;
using G = ad::Graph<double>;
using geometry::PointCloud;

namespace {

bool same_bits(const T& a, const T& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

PointCloud random_cloud(Rng& rng, std::size_t n, double scale = 0.4) {
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) c.points.push_back({rng.uniform(-scale, scale), rng.uniform(-scale, scale), rng.uniform(-scale, scale)});
  return c;
}

PointCloud shuffled(const PointCloud& c, Rng& rng) {
  PointCloud out = c;
  rng.shuffle(std::span<geometry::Vec3>(out.points));
  return out;
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "pcfold_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

template <typename P>
bool stores_equal(const P& a, const P& b) {
  const auto& x = a.store.entries();
  const auto& y = b.store.entries();
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i].first != y[i].first || x[i].second.shape() != y[i].second.shape()) return false;
    if (!std::equal(x[i].second.data().begin(), x[i].second.data().end(), y[i].second.data().begin())) return false;
  }
  return true;
}

pipeline::ModelConfig tiny_model() {
  pipeline::ModelConfig m = pipeline::ModelConfig::desk();
  m.input_points = 64;
  m.sparse_points = 64;
  m.steps = 2;
  return m;
}

}  // namespace

TEST_CASE("forward output counts and diagnostics") {
  const auto params = pipeline::ModelParams<double>::create(pipeline::ModelConfig::desk(), 3);
  Rng rng(1);
  const PointCloud partial = random_cloud(rng, 256);
  G g(false);
  const auto r = pipeline::forward(g, partial, params);
  CHECK(r.coarse.shape() == ad::Shape{64, 3});
  CHECK(r.sparse.shape() == ad::Shape{128, 3});
  CHECK(r.dense.shape() == ad::Shape{512, 3});
  CHECK(r.sfm.shape() == ad::Shape{4, 16, 16});
  CHECK(r.attention.shape() == ad::Shape{4, 16, 256});
  CHECK(r.states.size() == 6);

  // the last recorded state regresses to P^d exactly
  const auto clouds = ifnet::intermediate_clouds(r.states, r.sparse, 4, params.offset);
  REQUIRE(clouds.size() == 6);
  CHECK(same_bits(clouds.back(), r.dense));

  const auto c = pipeline::forward(g, partial, params, true);
  CHECK(same_bits(c.coarse, r.coarse));
  CHECK(c.states.empty());

  CHECK_THROWS_AS(pipeline::forward(g, random_cloud(rng, 5), params), geometry::GeometryError);
  CHECK_THROWS_AS(pipeline::forward(g, PointCloud{}, params), geometry::GeometryError);
}

TEST_CASE("forward is permutation invariant and deterministic") {
  const auto params = pipeline::ModelParams<double>::create(pipeline::ModelConfig::desk(), 4);
  const auto twin = pipeline::ModelParams<double>::create(pipeline::ModelConfig::desk(), 4);
  CHECK(stores_equal(params, twin));
  Rng rng(2);
  const PointCloud partial = random_cloud(rng, 256);
  G g(false);
  const auto base = pipeline::forward(g, partial, params);
  const auto again = pipeline::forward(g, partial, twin);
  CHECK(same_bits(base.dense, again.dense));
  for (int t = 0; t < 4; ++t) {
    const auto r = pipeline::forward(g, shuffled(partial, rng), params);
    CHECK(same_bits(r.sfm, base.sfm));
    CHECK(same_bits(r.coarse, base.coarse));
    CHECK(same_bits(r.sparse, base.sparse));
    CHECK(same_bits(r.dense, base.dense));
  }
}

TEST_CASE("global-feature baseline") {
  auto cfg = pipeline::ModelConfig::desk();
  cfg.aggregator = pipeline::Aggregator::kGlobal;
  const auto params = pipeline::ModelParams<double>::create(cfg, 5);
  CHECK(params.store.find("gfv.hidden.weight") != nullptr);
  Rng rng(3);
  const PointCloud partial = random_cloud(rng, 256);
  G g(false);
  const T out = pipeline::gfv_baseline_forward(g, partial, params);
  CHECK(out.shape() == ad::Shape{64, 3});
  CHECK(same_bits(pipeline::gfv_baseline_forward(g, shuffled(partial, rng), params), out));
  CHECK_THROWS_AS(pipeline::forward(g, partial, params), pipeline::ConfigError);

  const auto sfm = pipeline::ModelParams<double>::create(pipeline::ModelConfig::desk(), 5);
  CHECK(sfm.store.find("gfv.hidden.weight") == nullptr);
  CHECK_THROWS_AS(pipeline::gfv_baseline_forward(g, partial, sfm), pipeline::ConfigError);
  CHECK(pipeline::parse_aggregator("gfv") == pipeline::Aggregator::kGlobal);
  CHECK_THROWS_AS(pipeline::parse_aggregator("mean"), pipeline::ConfigError);
}

TEST_CASE("joint loss") {
  G g(false);
  const T s({2, 3}, {0, 0, 0, 2, 0, 0}), d({1, 3}, {1, 0, 0}), gt({1, 3}, {1, 0, 0});
  CHECK(pipeline::joint_loss(g, d, s, d, gt, false).item() == 2.0);
  CHECK(pipeline::joint_loss(g, gt, gt, gt, gt, true).item() == 0.0);

  Rng rng(6);
  const T c = oracle::random_tensor({20, 3}, rng), sp = oracle::random_tensor({30, 3}, rng);
  const T de = oracle::random_tensor({40, 3}, rng), target = oracle::random_tensor({50, 3}, rng);
  const auto cd = [](const T& a, const T& b) {
    const auto o = oracle::chamfer(a.data(), b.data());
    return o.x_to_y + o.y_to_x;
  };
  const double plain = pipeline::joint_loss(g, c, sp, de, target, false).item();
  const double with = pipeline::joint_loss(g, c, sp, de, target, true).item();
  CHECK(std::abs(plain - (cd(sp, target) + cd(de, target))) <= 1e-12 * plain);
  CHECK(std::abs(with - (cd(c, target) + cd(sp, target) + cd(de, target))) <= 1e-12 * with);

  // joint rigid translation
  const auto moved = [](const T& x) {
    std::vector<double> v(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += (i % 3 == 0 ? 3.5 : i % 3 == 1 ? -1.25 : 0.75);
    return T(x.shape(), std::move(v));
  };
  CHECK(std::abs(pipeline::joint_loss(g, moved(c), moved(sp), moved(de), moved(target), true).item() - with) <= 1e-10);
}

TEST_CASE("learning rate schedule") {
  config::TrainConfig tc;
  CHECK(train::learning_rate_at(tc, 0) == 1e-3);
  CHECK(train::learning_rate_at(tc, 9) == 1e-3);
  CHECK(std::abs(train::learning_rate_at(tc, 10) - 1e-3 * 0.7) <= 1e-12 * 1e-3);
  CHECK(std::abs(train::learning_rate_at(tc, 20) - 1e-3 * 0.49) <= 1e-12 * 1e-3);
  CHECK(std::abs(train::learning_rate_at(tc, 29) - 1e-3 * 0.49) <= 1e-12 * 1e-3);
}

TEST_CASE("adam first step moves by about lr") {
  ParamStore<double> store;
  store.add("w", T({2}, {1.0, -2.0}, true));
  train::Adam<double> adam(store, 0.9, 0.999, 1e-8);
  const std::vector<double> grad = {0.3, -5.0};
  adam.step(store, grad, 1e-3);
  const auto w = store.entries()[0].second.data();
  CHECK(std::abs((1.0 - w[0]) - 1e-3) <= 1e-3 * 1e-6);
  CHECK(std::abs((w[1] + 2.0) - 1e-3) <= 1e-3 * 1e-6);
  CHECK(adam.steps() == 1);
}

TEST_CASE("training is reproducible and independent of the worker count") {
  const auto data = train::synthetic_dataset(6, 11, 64, 256);
  REQUIRE(data.size() == 6);
  config::TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  auto a = pipeline::ModelParams<double>::create(tiny_model(), 1);
  auto b = pipeline::ModelParams<double>::create(tiny_model(), 1);
  const auto ra = train::train<double>(a, data, {}, tc, 1);
  const auto rb = train::train<double>(b, data, {}, tc, 3);
  CHECK(stores_equal(a, b));
  REQUIRE(ra.log.size() == 2);
  CHECK(ra.log[1].train_loss == rb.log[1].train_loss);
  CHECK(ra.log[1].eval.dense_cd == rb.log[1].eval.dense_cd);
  CHECK(ra.log[0].lr == 1e-3);

  const std::string csv = train::log_csv(ra.log);
  CHECK(csv.rfind("epoch,lr,train_loss,coarse_cd,dense_cd\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

  // the logged evaluation is the evaluation of the final parameters
  const auto ev = train::evaluate<double>(a, data, tc, 2);
  CHECK(ev.coarse_cd == ra.log.back().eval.coarse_cd);
  CHECK(ev.dense_cd == ra.log.back().eval.dense_cd);
}

TEST_CASE("coarse-only training leaves the fine stages untouched") {
  const auto data = train::synthetic_dataset(3, 12, 64, 256);
  config::TrainConfig tc;
  tc.epochs = 1;
  tc.coarse_only = true;
  auto p = pipeline::ModelParams<double>::create(tiny_model(), 2);
  const auto before = p.clone();
  const auto r = train::train<double>(p, data, {}, tc, 1);
  CHECK(!r.log[0].eval.dense_cd.has_value());
  const auto* w0 = before.store.find("offset.output.weight");
  const auto* w1 = p.store.find("offset.output.weight");
  REQUIRE(w0);
  REQUIRE(w1);
  CHECK(same_bits(*w0, *w1));
  CHECK(!same_bits(*before.store.find("decoder.regress.weight"), *p.store.find("decoder.regress.weight")));
}

TEST_CASE("checkpoint round trip and errors") {
  const auto params = pipeline::ModelParams<float>::create(pipeline::ModelConfig::desk(), 9);
  const auto path = scratch("model.ckpt");
  checkpoint::save(path, params, {{"note", "x"}});
  const auto loaded = checkpoint::load<float>(path);
  CHECK(loaded.config == params.config);
  CHECK(stores_equal(loaded, params));
  const auto file = checkpoint::read_file(path);
  CHECK(file.meta.at("note") == "x");
  CHECK(file.meta.contains("design"));

  const auto widened = checkpoint::load<double>(path);
  CHECK(widened.store.entries()[0].second.data()[0] == static_cast<double>(params.store.entries()[0].second.data()[0]));

  std::string bytes = io::read_file(path);
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(checkpoint::decode(bad), checkpoint::FormatError);
  CHECK_THROWS_AS(checkpoint::decode(bytes.substr(0, bytes.size() - 5)), checkpoint::FormatError);
  CHECK_THROWS_AS(checkpoint::decode(bytes + "z"), checkpoint::FormatError);
  std::string version = bytes;
  version[8] = 7;
  CHECK_THROWS_AS(checkpoint::decode(version), checkpoint::FormatError);
  CHECK(checkpoint::encode(checkpoint::decode(bytes)) == bytes);

  auto other = params.config;
  other.steps = 3;
  other.ratio = 2;
  try {
    checkpoint::check_compatible(other, params.config);
    FAIL("expected an incompatibility");
  } catch (const checkpoint::IncompatibleError& e) {
    CHECK(std::string(e.what()).find("steps") != std::string::npos);
    CHECK(std::string(e.what()).find("ratio") != std::string::npos);
  }
  CHECK_NOTHROW(checkpoint::check_compatible(params.config, params.config));
}

TEST_CASE("config files") {
  const auto rc = config::parse("# comment\npreset = desk\nsteps = 3\nlearning_rate = 2e-3  # trailing\ncoarse_loss = true\n");
  CHECK(rc.model.steps == 3);
  CHECK(rc.train.learning_rate == 2e-3);
  CHECK(rc.train.coarse_loss);
  CHECK(config::parse("preset = full\n").model == pipeline::ModelConfig::full_scale());
  CHECK(config::parse("expansion = duplication\n").model.expansion == ifnet::ExpansionMode::kDuplication);

  const auto message = [](const std::string& text) -> std::string {
    try {
      config::parse(text, "run.cfg");
    } catch (const pipeline::ConfigError& e) {
      return e.what();
    }
    return "";
  };
  CHECK(message("steps = 2\nbogus = 1\n") == "run.cfg:2: unknown key 'bogus'");
  CHECK(message("\n\nsteps = two\n").rfind("run.cfg:3:", 0) == 0);
  CHECK(message("steps\n").rfind("run.cfg:1:", 0) == 0);
  CHECK(message("lr_decay = 1.5\n") != "");
  CHECK(message("sparse_points = 100000\n") != "");
}

TEST_CASE("full-scale preset") {
  const auto f = pipeline::ModelConfig::full_scale();
  CHECK(f.input_points == 2048);
  CHECK(f.rows == 64);
  CHECK(f.cols == 64);
  CHECK(f.heads == 32);
  CHECK(f.sparse_points == 1024);
  CHECK(f.ratio == 16);
  CHECK(f.steps == 9);
  CHECK(f.neighbors == 16);
  CHECK(f.dense_points() == 16384);
  CHECK_NOTHROW(f.validate());
  CHECK(pipeline::ModelConfig::from_json(f.to_json()) == f);
}
