#include "pcfold/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>

#include "pcfold/decoder.hpp"
#include "pcfold/fsnet.hpp"
#include "pcfold/ifnet.hpp"
#include "pcfold/rng.hpp"
#include "pcfold/sparse_encoding.hpp"
#include "pcfold/synthetic.hpp"

namespace pcfold::gradcheck {

using Tensor = ad::Tensor<double>;
using Graph = ad::Graph<double>;

double ModuleResult::worst() const {
  double w = 0.0;
  for (const auto& t : tensors) w = std::max(w, t.worst);
  return w;
}

std::size_t ModuleResult::checked() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.checked;
  return n;
}

std::size_t ModuleResult::skipped() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.skipped;
  return n;
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

namespace {

struct Probe {
  double value;
  std::uint64_t structure;
};

Probe evaluate(const LossFn& loss) {
  Graph g(false);
  g.track_structure(true);
  const double v = loss(g).item();
  return {v, g.structure_hash()};
}

std::vector<std::size_t> sample_entries(std::size_t size, std::size_t limit, Rng& rng) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (limit == 0 || size <= limit) return idx;
  rng.shuffle(std::span<std::size_t>(idx));
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

ModuleResult check(const std::string& module, const LossFn& loss, const Targets& targets, const Options& options,
                   std::size_t max_entries) {
  for (auto [name, t] : targets) t.zero_grad();
  Graph g;
  g.track_structure(true);
  Tensor l = loss(g);
  g.backward(l);
  const std::uint64_t base = g.structure_hash();

  ModuleResult result;
  result.module = module;
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    Tensor t = targets[ti].second;
    TensorResult tr;
    tr.name = targets[ti].first;
    tr.size = t.size();
    const std::vector<double> analytic =
        t.grad().empty() ? std::vector<double>(t.size(), 0.0) : std::vector<double>(t.grad().begin(), t.grad().end());
    Rng rng = Rng::stream(options.seed, "gradcheck:" + module + ":" + tr.name);
    for (std::size_t i : sample_entries(t.size(), max_entries, rng)) {
      double& entry = t.mutable_data()[i];
      const double original = entry;
      entry = original + options.step;
      const Probe plus = evaluate(loss);
      entry = original - options.step;
      const Probe minus = evaluate(loss);
      entry = original;
      if (plus.structure != base || minus.structure != base) {
        ++tr.skipped;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * options.step);
      tr.worst = std::max(tr.worst, relative_error(analytic[i], numeric));
      ++tr.checked;
    }
    result.tensors.push_back(tr);
  }
  for (auto [name, t] : targets) t.zero_grad();
  return result;
}

namespace {

Tensor random_tensor(ad::Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = true) {
  std::vector<double> v(ad::element_count(shape));
  for (double& x : v) x = stddev * rng.normal();
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Scalar loss sum_k sum(out_k * W_k) with fixed random W_k drawn on first use.
LossFn projected(std::function<std::vector<Tensor>(Graph&)> op, std::uint64_t seed) {
  auto weights = std::make_shared<std::vector<Tensor>>();
  return [op = std::move(op), weights, seed](Graph& g) {
    std::vector<Tensor> outs = op(g);
    if (weights->empty()) {
      Rng rng = Rng::stream(seed, "projection");
      for (const Tensor& o : outs) weights->push_back(random_tensor(o.shape(), rng, 1.0, false));
    }
    Tensor total;
    for (std::size_t k = 0; k < outs.size(); ++k) {
      Tensor term = ad::sum(g, ad::mul(g, outs[k], (*weights)[k]));
      total = total.defined() ? ad::add(g, total, term) : term;
    }
    return total;
  };
}

Targets store_targets(const ParamStore<double>& store, const std::string& skip_prefix = "") {
  Targets out;
  for (const auto& [name, t] : store.entries())
    if (skip_prefix.empty() || name.rfind(skip_prefix, 0) != 0) out.emplace_back(name, t);
  return out;
}

// Attention gates start at zero, which would zero every gradient behind them.
void open_gates(ParamStore<double>& store, Rng& rng) {
  for (const auto& [name, t] : store.entries())
    if (name.size() >= 6 && name.compare(name.size() - 6, 6, ".gamma") == 0) {
      Tensor h = t;
      for (double& v : h.mutable_data()) v = rng.uniform(0.3, 0.9);
    }
}

Targets operator+(Targets a, const Targets& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

Tensor broken_square(Graph& g, const Tensor& x) {
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.data()[i] * x.data()[i];
  Tensor out(x.shape(), std::move(y));
  auto xn = x.node(), on = out.node();
  g.record(out, {&x}, [xn, on] {
    if (on->grad.empty()) return;
    std::vector<double>& d = xn->grad_buffer();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += 3.0 * xn->value[i] * on->grad[i];
  });
  return out;
}

}  // namespace

pipeline::ModelConfig small_pipeline_config() {
  pipeline::ModelConfig c = pipeline::ModelConfig::desk();
  c.input_points = 32;
  c.sparse_points = 64;
  return c;
}

ModuleResult negative_control(const Options& options) {
  Rng rng = Rng::stream(options.seed, "negative_control");
  Tensor x = random_tensor({4, 3}, rng);
  return check("negative_control", projected([=](Graph& g) { return std::vector<Tensor>{broken_square(g, x)}; }, 1),
               {{"x", x}}, options, options.max_entries);
}

std::vector<ModuleResult> run_suite(const pipeline::ModelConfig& model, const Options& options,
                                    const std::function<void(const ModuleResult&)>& on_module) {
  std::vector<ModuleResult> results;
  std::uint64_t counter = 0;
  const auto run = [&](const std::string& name, std::function<std::vector<Tensor>(Graph&)> op, const Targets& targets,
                       std::size_t max_entries) {
    results.push_back(check(name, projected(std::move(op), options.seed + ++counter), targets, options, max_entries));
    if (on_module) on_module(results.back());
  };
  const std::size_t cap = options.max_entries;
  const auto rng_for = [&](const std::string& name) { return Rng::stream(options.seed, "gradcheck-input:" + name); };

  {
    Rng rng = rng_for("matmul");
    Tensor a = random_tensor({5, 7}, rng), b = random_tensor({7, 3}, rng);
    run("matmul", [=](Graph& g) { return std::vector{ad::matmul(g, a, b)}; }, {{"a", a}, {"b", b}}, cap);
  }
  {
    Rng rng = rng_for("transpose");
    Tensor x = random_tensor({4, 6}, rng);
    run("transpose", [=](Graph& g) { return std::vector{ad::transpose(g, x)}; }, {{"x", x}}, cap);
  }
  {
    Rng rng = rng_for("conv2d");
    Tensor x = random_tensor({2, 6, 6}, rng), w = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
    run("conv2d", [=](Graph& g) { return std::vector{ad::conv2d(g, x, w, &b, 1, 1)}; },
        {{"x", x}, {"w", w}, {"bias", b}}, cap);
    Tensor x2 = random_tensor({2, 7, 7}, rng), w2 = random_tensor({3, 2, 3, 3}, rng);
    run("conv2d_stride2", [=](Graph& g) { return std::vector{ad::conv2d<double>(g, x2, w2, nullptr, 2, 1)}; },
        {{"x", x2}, {"w", w2}}, cap);
  }
  {
    Rng rng = rng_for("upsample_nearest");
    Tensor x = random_tensor({2, 3, 3}, rng);
    run("upsample_nearest", [=](Graph& g) { return std::vector{ad::upsample_nearest(g, x, 6, 6)}; }, {{"x", x}}, cap);
  }
  {
    Rng rng = rng_for("elementwise");
    Tensor a = random_tensor({4, 5}, rng), b = random_tensor({4, 5}, rng), s = random_tensor({1}, rng);
    Tensor x3 = random_tensor({3, 4, 5}, rng), bias = random_tensor({4}, rng);
    run("add", [=](Graph& g) { return std::vector{ad::add(g, a, b)}; }, {{"a", a}, {"b", b}}, cap);
    run("sub", [=](Graph& g) { return std::vector{ad::sub(g, a, b)}; }, {{"a", a}, {"b", b}}, cap);
    run("mul", [=](Graph& g) { return std::vector{ad::mul(g, a, b)}; }, {{"a", a}, {"b", b}}, cap);
    run("scale", [=](Graph& g) { return std::vector{ad::scale(g, a, 1.7)}; }, {{"x", a}}, cap);
    run("mul_scalar", [=](Graph& g) { return std::vector{ad::mul_scalar(g, a, s)}; }, {{"x", a}, {"s", s}}, cap);
    run("add_broadcast", [=](Graph& g) { return std::vector{ad::add_broadcast(g, x3, bias, 1)}; },
        {{"x", x3}, {"b", bias}}, cap);
    run("relu", [=](Graph& g) { return std::vector{ad::relu(g, a)}; }, {{"x", a}}, cap);
    run("leaky_relu", [=](Graph& g) { return std::vector{ad::leaky_relu(g, a, 0.2)}; }, {{"x", a}}, cap);
    run("reshape", [=](Graph& g) { return std::vector{ad::reshape(g, a, {2, 10})}; }, {{"x", a}}, cap);
    Tensor c = random_tensor({2, 5}, rng), d = random_tensor({4, 2}, rng);
    run("concat", [=](Graph& g) { return std::vector{ad::concat(g, {a, c}, 0), ad::concat(g, {a, d}, 1)}; },
        {{"a", a}, {"rows", c}, {"cols", d}}, cap);
    const std::vector<std::size_t> rows = {0, 0, 3, 1, 3};
    run("gather_rows", [=](Graph& g) { return std::vector{ad::gather_rows(g, a, rows)}; }, {{"x", a}}, cap);
    run("sum", [=](Graph& g) { return std::vector{ad::sum(g, a)}; }, {{"x", a}}, cap);
    run("mean", [=](Graph& g) { return std::vector{ad::mean(g, a)}; }, {{"x", a}}, cap);
    run("reduce_mean", [=](Graph& g) { return std::vector{ad::reduce_mean(g, x3, 1)}; }, {{"x", x3}}, cap);
    run("reduce_max", [=](Graph& g) { return std::vector{ad::reduce_max(g, x3, 0), ad::reduce_max(g, x3, 2)}; },
        {{"x", x3}}, cap);
    run("softmax", [=](Graph& g) { return std::vector{ad::softmax(g, a, 0), ad::softmax(g, x3, 2)}; },
        {{"x", a}, {"x3", x3}}, cap);
  }
  {
    Rng rng = rng_for("chamfer_loss");
    Tensor x = random_tensor({20, 3}, rng, 0.3), y = random_tensor({25, 3}, rng, 0.3);
    run("chamfer_loss", [=](Graph& g) { return std::vector{geometry::chamfer_loss(g, x, y)}; }, {{"x", x}, {"y", y}},
        cap);
  }
  {
    Rng rng = rng_for("linear");
    auto store = std::make_shared<ParamStore<double>>();
    Linear<double> lin = Linear<double>::create(*store, "linear", 5, 4, true, rng);
    Tensor x = random_tensor({6, 5}, rng);
    run("linear", [=](Graph& g) { return std::vector{lin(g, x)}; }, store_targets(*store) + Targets{{"x", x}}, cap);
  }
  {
    Rng rng = rng_for("fsnet");
    auto store = std::make_shared<ParamStore<double>>();
    const auto params = fsnet::FSNetParams<double>::create({8, 2, 4, 4}, *store, "fsnet", rng);
    Tensor f = random_tensor({12, 8}, rng);
    run("fsnet", [=](Graph& g) { return std::vector{fsnet::aggregate(g, f, params).sfm}; },
        store_targets(*store) + Targets{{"features", f}}, cap);
  }
  {
    Rng rng = rng_for("decoder");
    auto store = std::make_shared<ParamStore<double>>();
    decoder::DecoderConfig dc;
    dc.in_channels = 2;
    dc.rows = dc.cols = 8;
    dc.level1_channels = 4;
    dc.level2_channels = 6;
    dc.coarse_channels = 5;
    const auto params = decoder::DecoderParams<double>::create(dc, *store, "decoder", rng);
    Tensor sfm = random_tensor({2, 8, 8}, rng);
    run("decoder",
        [=](Graph& g) {
          const auto r = decoder::decode(g, sfm, params);
          return std::vector{r.points, r.coarse_features};
        },
        store_targets(*store) + Targets{{"sfm", sfm}}, cap);
  }
  {
    Rng rng = rng_for("edgeconv");
    auto store = std::make_shared<ParamStore<double>>();
    const auto params = sparse::EdgeConvParams<double>::create(*store, "edge", 3, {6, 5}, 4, rng);
    Tensor pts = random_tensor({16, 3}, rng, 0.5);
    run("edgeconv", [=](Graph& g) { return std::vector{sparse::edgeconv_encode(g, pts, params)}; },
        store_targets(*store) + Targets{{"points", pts}}, cap);
  }
  {
    Rng rng = rng_for("sparse");
    auto store = std::make_shared<ParamStore<double>>();
    sparse::SparseConfig sc;
    sc.sparse_points = 10;
    sc.neighbors = 4;
    sc.neighbor_widths = {5, 6};
    sc.input_width = 6;
    sc.coarse_channels = 4;
    sc.reuse_width = 5;
    sc.attention_units = 2;
    const auto params = sparse::SparseParams<double>::create(sc, *store, "sparse", rng);
    open_gates(*store, rng);
    Tensor pi = random_tensor({12, 3}, rng, 0.5), fi = random_tensor({12, 6}, rng);
    Tensor pc = random_tensor({16, 3}, rng, 0.5), fc = random_tensor({4, 8, 8}, rng);
    std::vector<std::size_t> selected(28);
    std::iota(selected.begin(), selected.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(selected));
    selected.resize(10);
    Tensor ps = random_tensor({10, 3}, rng, 0.5);
    run("feature_reuse", [=](Graph& g) { return std::vector{sparse::feature_reuse(g, fi, fc, selected, ps, params.reuse)}; },
        store_targets(*store, "sparse.ne") + Targets{{"input_features", fi}, {"coarse_features", fc}}, cap);
    run("sparse_encode",
        [=](Graph& g) {
          const auto r = sparse::sparse_encode(g, pi, fi, pc, fc, params);
          return std::vector{r.points, r.features};
        },
        store_targets(*store) +
            Targets{{"input_points", pi}, {"input_features", fi}, {"coarse_points", pc}, {"coarse_features", fc}},
        cap);
  }
  {
    Rng rng = rng_for("ifnet");
    auto store = std::make_shared<ParamStore<double>>();
    const auto upp = ifnet::UpParams<double>::create(*store, "up", 6, 3, rng);
    const auto dnp = ifnet::DownParams<double>::create(*store, "down", 6, 3, rng);
    const auto sap = ifnet::SelfAttentionParams<double>::create(*store, "sa", 6, rng);
    const ifnet::FeedbackBlockParams<double> block{ifnet::UpParams<double>::create(*store, "block.up", 6, 3, rng),
                                                   ifnet::DownParams<double>::create(*store, "block.down", 6, 3, rng),
                                                   ifnet::SelfAttentionParams<double>::create(*store, "block.sa", 6, rng)};
    open_gates(*store, rng);
    const auto group = [&](const std::string& prefix) {
      Targets t;
      for (const auto& [name, tensor] : store->entries())
        if (name.rfind(prefix, 0) == 0) t.emplace_back(name, tensor);
      return t;
    };
    Tensor xs = random_tensor({5, 6}, rng), xd = random_tensor({15, 6}, rng);
    run("up", [=](Graph& g) { return std::vector{ifnet::up(g, xs, 3, upp)}; }, group("up.") + Targets{{"x", xs}}, cap);
    run("down", [=](Graph& g) { return std::vector{ifnet::down(g, xd, 3, dnp)}; }, group("down.") + Targets{{"x", xd}},
        cap);
    run("self_attention", [=](Graph& g) { return std::vector{ifnet::self_attention(g, xs, sap)}; },
        group("sa.") + Targets{{"x", xs}}, cap);
    run("feedback_block",
        [=](Graph& g) {
          const auto s = ifnet::feedback_block(g, ifnet::FeedbackState<double>{xs, xd, 0}, 3, block);
          return std::vector{s.sparse, s.dense};
        },
        group("block.") + Targets{{"sparse", xs}, {"dense", xd}}, cap);

    for (ifnet::ExpansionMode mode :
         {ifnet::ExpansionMode::kFeedback, ifnet::ExpansionMode::kDuplication, ifnet::ExpansionMode::kMultiBranch}) {
      auto s2 = std::make_shared<ParamStore<double>>();
      ifnet::IFNetConfig ic;
      ic.input_width = 8;
      ic.width = 6;
      ic.ratio = 3;
      ic.steps = mode == ifnet::ExpansionMode::kFeedback ? 2 : 0;
      ic.offset_hidden = 7;
      ic.mode = mode;
      const auto ip = ifnet::IFNetParams<double>::create(ic, *s2, "ifnet", rng);
      const auto op = ifnet::OffsetParams<double>::create(ic, *s2, "offset", rng);
      open_gates(*s2, rng);
      Tensor fs = random_tensor({5, 8}, rng), ps = random_tensor({5, 3}, rng, 0.5);
      run("expand_" + std::string(ifnet::to_string(mode)),
          [=](Graph& g) {
            const auto e = ifnet::expand(g, fs, ip);
            return std::vector{ifnet::offset_regress(g, ps, e.dense, 3, op)};
          },
          store_targets(*s2) + Targets{{"sparse_features", fs}, {"sparse_points", ps}}, cap);
    }
  }
  {
    model.validate();
    Rng rng = rng_for("pipeline");
    synthetic::ShapeSpec spec = synthetic::random_spec(synthetic::ShapeKind::kTorus, rng,
                                                       std::max<std::size_t>(64, 2 * model.input_points),
                                                       model.input_points);
    const synthetic::ShapePair pair = synthetic::gen_synthetic(spec, options.seed);
    const Tensor target = pipeline::to_tensor<double>(pair.complete);

    auto params = std::make_shared<pipeline::ModelParams<double>>(pipeline::ModelParams<double>::create(model, options.seed));
    open_gates(params->store, rng);
    const geometry::PointCloud partial = pair.partial;
    run("pipeline",
        [=](Graph& g) {
          const auto r = pipeline::forward(g, partial, *params);
          return std::vector{pipeline::joint_loss(g, r.coarse, r.sparse, r.dense, target, true)};
        },
        store_targets(params->store), options.pipeline_max_entries);

    pipeline::ModelConfig global = model;
    global.aggregator = pipeline::Aggregator::kGlobal;
    auto gfv = std::make_shared<pipeline::ModelParams<double>>(pipeline::ModelParams<double>::create(global, options.seed));
    run("pipeline_gfv",
        [=](Graph& g) {
          return std::vector{geometry::chamfer_loss(g, pipeline::gfv_baseline_forward(g, partial, *gfv), target)};
        },
        store_targets(gfv->store), options.pipeline_max_entries);
  }
  return results;
}

}  // namespace pcfold::gradcheck
