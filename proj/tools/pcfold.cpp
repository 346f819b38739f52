// pcfold command-line entry points.
//
// Exit codes: 0 success, 1 verification failure, 2 usage or I/O error.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pcfold/checkpoint.hpp"
#include "pcfold/cloud_io.hpp"
#include "pcfold/config.hpp"
#include "pcfold/decoder.hpp"
#include "pcfold/fsnet.hpp"
#include "pcfold/gradcheck.hpp"
#include "pcfold/metrics.hpp"
#include "pcfold/parallel.hpp"
#include "pcfold/pipeline.hpp"
#include "pcfold/synthetic.hpp"
#include "pcfold/train.hpp"

namespace fs = std::filesystem;
using namespace pcfold;

namespace {

constexpr int kOk = 0;
constexpr int kVerificationFailed = 1;

// Thrown for bad arguments discovered after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw io::IoError(dir.string() + ": cannot create directory");
}

std::string extension_for(const std::string& format) {
  if (format == "xyz") return ".xyz";
  if (format == "ply") return ".ply";
  throw UsageError("unknown cloud format '" + format + "' (expected xyz or ply)");
}

// ------------------------------------------------------------------ gen-data

struct GenDataArgs {
  fs::path out;
  std::size_t count = 0, test_count = 0, views = 1, complete = 1024, partial = 256;
  std::uint64_t seed = 1;
  std::string format = "xyz";
};

int gen_data(const GenDataArgs& a) {
  const std::string ext = extension_for(a.format);
  ensure_dir(a.out / "partial");
  ensure_dir(a.out / "complete");
  const auto entries = synthetic::dataset_entries(a.count + a.test_count, a.seed, a.views, a.complete, a.partial);
  std::vector<synthetic::ShapePair> pairs(entries.size());
  parallel_for(entries.size(), worker_count(), [&](std::size_t i, std::size_t) {
    pairs[i] = synthetic::gen_synthetic(entries[i].spec, entries[i].seed);
  });
  nlohmann::json shapes = nlohmann::json::array();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    const std::string partial = "partial/" + e.id + ext, complete = "complete/" + e.id + ext;
    io::write_cloud(a.out / partial, pairs[i].partial);
    io::write_cloud(a.out / complete, pairs[i].complete);
    shapes.push_back({{"id", e.id},
                      {"category", std::string(synthetic::to_string(e.spec.kind))},
                      {"split", e.object < a.count ? "train" : "test"},
                      {"object", e.object},
                      {"view", e.view},
                      {"seed", e.seed},
                      {"spec", e.spec.to_json()},
                      {"partial", partial},
                      {"complete", complete}});
  }
  nlohmann::json manifest = {{"seed", a.seed}, {"train_count", a.count}, {"test_count", a.test_count},
                             {"views", a.views}, {"shapes", shapes}};
  io::write_file(a.out / "manifest.json", manifest.dump(2) + "\n");
  std::cerr << "wrote " << entries.size() << " shape pairs to " << a.out.string() << "\n";
  return kOk;
}

// --------------------------------------------------------------------- train

struct TrainArgs {
  fs::path data, config, out, log;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
};

int train_cmd(const TrainArgs& a) {
  config::RunConfig cfg = a.config.empty() ? config::RunConfig{} : config::load(a.config);
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.epochs) cfg.train.epochs = *a.epochs;
  cfg.train.validate();
  if (cfg.model.aggregator == pipeline::Aggregator::kGlobal && !cfg.train.coarse_only)
    throw pipeline::ConfigError("aggregator = gfv produces only a coarse cloud; set coarse_only = true");

  const std::vector<train::Sample> train_set = train::load_dataset(a.data, "train");
  const std::vector<train::Sample> heldout = train::load_dataset(a.data, "test");
  if (train_set.empty()) throw io::IoError(a.data.string() + ": manifest lists no training shapes");

  auto params = pipeline::ModelParams<float>::create(cfg.model, cfg.train.seed);
  const fs::path log_path = a.log.empty() ? fs::path(a.out.string() + ".log.csv") : a.log;
  const auto start = std::chrono::steady_clock::now();
  const train::TrainResult result =
      train::train(params, train_set, heldout, cfg.train, worker_count(), [&](const train::EpochLog& row) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::fprintf(stderr, "epoch %zu lr %.3g loss %.6g coarse %.6g", row.epoch, row.lr, row.train_loss,
                     row.eval.coarse_cd);
        if (row.eval.dense_cd) std::fprintf(stderr, " dense %.6g", *row.eval.dense_cd);
        std::fprintf(stderr, " (%.1fs)\n", secs);
      });
  io::write_file(log_path, train::log_csv(result.log));

  nlohmann::json final_eval = nlohmann::json::object();
  if (!result.log.empty()) {
    const auto& last = result.log.back().eval;
    final_eval["coarse_cd"] = last.coarse_cd;
    if (last.dense_cd) final_eval["dense_cd"] = *last.dense_cd;
    final_eval["split"] = heldout.empty() ? "train" : "test";
  }
  checkpoint::save(a.out, params, {{"train", cfg.train.to_json()}, {"final", final_eval}});
  std::cerr << "wrote " << a.out.string() << " and " << log_path.string() << "\n";
  return kOk;
}

// ------------------------------------------------------------------ complete

struct Loaded {
  pipeline::ModelParams<float> params;
  bool coarse_only = false;
};

Loaded load_model(const fs::path& ckpt, const fs::path& config_path) {
  const checkpoint::CheckpointFile file = checkpoint::read_file(ckpt);
  Loaded l{checkpoint::load<float>(ckpt), false};
  if (file.meta.contains("train") && file.meta["train"].contains("coarse_only"))
    l.coarse_only = file.meta["train"]["coarse_only"].get<bool>();
  if (l.params.config.aggregator == pipeline::Aggregator::kGlobal) l.coarse_only = true;
  if (!config_path.empty()) checkpoint::check_compatible(config::load(config_path).model, l.params.config);
  return l;
}

struct CompleteArgs {
  fs::path input, ckpt, out, dump, config;
  bool normalize = false;
};

geometry::PointCloud restore_frame(geometry::PointCloud cloud, const geometry::PointCloud& frame) {
  for (auto& p : cloud.points)
    for (int a = 0; a < 3; ++a) p[a] = p[a] * frame.normalization_factor + frame.source_center[a];
  return cloud;
}

int complete_cmd(const CompleteArgs& a) {
  const Loaded model = load_model(a.ckpt, a.config);
  const geometry::PointCloud raw = io::read_cloud(a.input);
  const geometry::PointCloud input = a.normalize ? geometry::normalized(raw) : raw;
  const auto emit = [&](const geometry::PointCloud& c) { return a.normalize ? restore_frame(c, input) : c; };

  ad::Graph<float> g(false);
  if (model.params.config.aggregator == pipeline::Aggregator::kGlobal) {
    io::write_cloud(a.out, emit(pipeline::to_cloud(pipeline::gfv_baseline_forward(g, input, model.params))));
    if (!a.dump.empty()) throw UsageError("--dump-intermediate needs a model with an upsampling stage");
    return kOk;
  }
  const auto r = pipeline::forward(g, input, model.params, model.coarse_only);
  io::write_cloud(a.out, emit(pipeline::to_cloud(model.coarse_only ? r.coarse : r.dense)));
  if (!a.dump.empty()) {
    if (model.coarse_only) throw UsageError("--dump-intermediate needs a model with an upsampling stage");
    ensure_dir(a.dump);
    const auto clouds = ifnet::intermediate_clouds(r.states, r.sparse, model.params.config.ratio, model.params.offset);
    const std::string ext = io::format_for(a.out) == io::CloudFormat::kPly ? ".ply" : ".xyz";
    for (std::size_t t = 0; t < clouds.size(); ++t)
      io::write_cloud(a.dump / ("step_" + std::to_string(t) + ext), emit(pipeline::to_cloud(clouds[t])));
  }
  return kOk;
}

// --------------------------------------------------------------------- score

struct ScoreArgs {
  fs::path ckpt, data;
  std::string split;
};

// Held-out Chamfer values of a checkpoint, computed exactly as the training
// log computes them.
int score_cmd(const ScoreArgs& a) {
  const checkpoint::CheckpointFile file = checkpoint::read_file(a.ckpt);
  const auto params = checkpoint::load<float>(a.ckpt);
  config::TrainConfig tc = file.meta.contains("train") ? config::TrainConfig::from_json(file.meta["train"])
                                                       : config::TrainConfig{};
  if (params.config.aggregator == pipeline::Aggregator::kGlobal) tc.coarse_only = true;
  std::string split = a.split;
  if (split.empty()) {
    const bool logged = file.meta.contains("final") && file.meta["final"].contains("split");
    split = logged ? file.meta["final"]["split"].get<std::string>() : "test";
  }
  const auto samples = train::load_dataset(a.data, split);
  if (samples.empty()) throw io::IoError(a.data.string() + ": no shapes in split '" + split + "'");
  const train::Evaluation ev = train::evaluate(params, samples, tc, worker_count());
  nlohmann::json out = {{"split", split}, {"shapes", samples.size()}, {"coarse_cd", ev.coarse_cd}};
  if (ev.dense_cd) out["dense_cd"] = *ev.dense_cd;
  std::cout << out.dump(2) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------- eval

std::map<std::string, fs::path> cloud_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw io::IoError(dir.string() + ": not a directory");
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = entry.path().extension().string();
    if (ext != ".xyz" && ext != ".ply") continue;
    const std::string id = entry.path().stem().string();
    if (!out.emplace(id, entry.path()).second)
      throw io::IoError(dir.string() + ": shape '" + id + "' has both .xyz and .ply files");
  }
  if (out.empty()) throw io::IoError(dir.string() + ": no .xyz or .ply files");
  return out;
}

void require_ids(const std::map<std::string, fs::path>& want, const std::map<std::string, fs::path>& have,
                 const fs::path& have_dir) {
  std::string missing;
  for (const auto& [id, path] : want)
    if (!have.count(id)) missing += (missing.empty() ? "" : ", ") + id;
  if (!missing.empty()) throw io::IoError(have_dir.string() + ": missing files for shapes: " + missing);
}

std::size_t frame_number(const std::string& id) {
  const std::string key = metrics::sequence_key(id);
  return key.size() == id.size() ? 0 : std::stoul(id.substr(key.size() + 2));
}

struct EvalArgs {
  fs::path pred, gt, refs, partial, out = "report";
  bool no_gt = false;
};

int eval_cmd(const EvalArgs& a) {
  const auto preds = cloud_files(a.pred);
  std::map<std::string, geometry::PointCloud> pred_clouds;
  for (const auto& [id, path] : preds) pred_clouds[id] = io::read_cloud(path);
  std::map<std::string, geometry::PointCloud> partial_clouds;
  if (!a.partial.empty()) {
    const auto partials = cloud_files(a.partial);
    require_ids(preds, partials, a.partial);
    for (const auto& [id, path] : preds) partial_clouds[id] = io::read_cloud(partials.at(id));
  }

  std::vector<metrics::ShapeMetrics> rows;
  if (!a.no_gt) {
    if (a.gt.empty()) throw UsageError("eval needs --gt DIR, or --no-gt with --refs DIR");
    const auto gts = cloud_files(a.gt);
    require_ids(preds, gts, a.gt);
    require_ids(gts, preds, a.pred);
    for (const auto& [id, cloud] : pred_clouds) {
      metrics::ShapeMetrics m =
          metrics::with_ground_truth(id, metrics::category_of(id), cloud, io::read_cloud(gts.at(id)));
      if (!partial_clouds.empty()) m.fidelity = metrics::fidelity(partial_clouds.at(id), cloud);
      rows.push_back(std::move(m));
    }
  } else {
    if (a.refs.empty()) throw UsageError("--no-gt needs --refs DIR");
    std::vector<geometry::PointCloud> refs;
    for (const auto& [id, path] : cloud_files(a.refs)) refs.push_back(io::read_cloud(path));
    std::map<std::string, std::vector<std::pair<std::size_t, std::string>>> sequences;
    for (const auto& [id, cloud] : pred_clouds) sequences[metrics::sequence_key(id)].emplace_back(frame_number(id), id);
    std::map<std::string, double> sequence_consistency;
    for (auto& [key, frames] : sequences) {
      if (frames.size() < 2) continue;
      std::sort(frames.begin(), frames.end());
      std::vector<geometry::PointCloud> ordered;
      for (const auto& f : frames) ordered.push_back(pred_clouds.at(f.second));
      sequence_consistency[key] = metrics::consistency(ordered);
    }
    for (const auto& [id, cloud] : pred_clouds) {
      metrics::ShapeMetrics m;
      m.id = id;
      m.category = metrics::category_of(id);
      if (!partial_clouds.empty()) m.fidelity = metrics::fidelity(partial_clouds.at(id), cloud);
      m.mmd = metrics::mmd(cloud, refs);
      if (auto it = sequence_consistency.find(metrics::sequence_key(id)); it != sequence_consistency.end())
        m.consistency = it->second;
      for (std::size_t u = 0; u < metrics::kUniformityFractions.size(); ++u) {
        try {
          m.uniformity[u] = metrics::uniformity(cloud, metrics::kUniformityFractions[u]);
        } catch (const metrics::MetricError& e) {
          std::cerr << id << ": uniformity skipped: " << e.what() << "\n";
        }
      }
      rows.push_back(std::move(m));
    }
  }
  const metrics::Report report = metrics::build_report(std::move(rows));
  const fs::path csv = a.out.string() + ".csv", json = a.out.string() + ".json";
  if (a.out.has_parent_path()) ensure_dir(a.out.parent_path());
  io::write_file(csv, metrics::to_csv(report));
  const nlohmann::json agg = metrics::aggregate_json(report);
  io::write_file(json, agg.dump(2) + "\n");
  std::cout << agg["overall"].dump() << "\n";
  return kOk;
}

// ----------------------------------------------------------------- gradcheck

struct GradcheckArgs {
  fs::path config;
  std::uint64_t seed = 1;
  std::size_t entries = 6;
  bool negative_control = false;
};

void print_module(const gradcheck::ModuleResult& m, double tol) {
  std::printf("%-20s worst %.3e  checked %zu  skipped %zu  %s\n", m.module.c_str(), m.worst(), m.checked(),
              m.skipped(), m.passed(tol) ? "ok" : "FAIL");
  for (const auto& t : m.tensors)
    std::printf("    %-44s worst %.3e  checked %zu/%zu  skipped %zu\n", t.name.c_str(), t.worst, t.checked, t.size,
                t.skipped);
  std::fflush(stdout);
}

int gradcheck_cmd(const GradcheckArgs& a) {
  gradcheck::Options options;
  options.seed = a.seed;
  options.pipeline_max_entries = a.entries;
  if (a.negative_control) {
    const auto m = gradcheck::negative_control(options);
    print_module(m, options.tolerance);
    return m.passed(options.tolerance) ? kOk : kVerificationFailed;
  }
  const pipeline::ModelConfig model =
      a.config.empty() ? gradcheck::small_pipeline_config() : config::load(a.config).model;
  bool ok = true;
  gradcheck::run_suite(model, options, [&](const gradcheck::ModuleResult& m) {
    print_module(m, options.tolerance);
    ok = ok && m.passed(options.tolerance);
  });
  std::printf("%s (tolerance %.0e)\n", ok ? "all modules passed" : "gradient check FAILED", options.tolerance);
  return ok ? kOk : kVerificationFailed;
}

// ------------------------------------------------------------------- inspect

struct InspectArgs {
  fs::path ckpt, input, out;
  std::size_t channel = 0;
  std::string patch;
};

decoder::Window parse_window(const std::string& text) {
  std::vector<std::size_t> v;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::string field = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    std::size_t used = 0;
    unsigned long x = 0;
    try {
      x = std::stoul(field, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != field.size()) throw UsageError("--patch expects r,c,h,w, got '" + text + "'");
    v.push_back(x);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (v.size() != 4) throw UsageError("--patch expects r,c,h,w, got '" + text + "'");
  return {v[0], v[1], v[2], v[3]};
}

int inspect_cmd(const InspectArgs& a) {
  const Loaded model = load_model(a.ckpt, {});
  if (model.params.config.aggregator != pipeline::Aggregator::kStructured)
    throw UsageError("inspect needs a checkpoint with the sfm aggregator");
  const decoder::Window window = a.patch.empty() ? decoder::Window{} : parse_window(a.patch);
  const geometry::PointCloud input = io::read_cloud(a.input);
  ad::Graph<float> g(false);
  const auto r = pipeline::forward(g, input, model.params, true);
  if (a.channel >= r.attention.dim(0))
    throw std::out_of_range("heatmap channel " + std::to_string(a.channel) + " is out of range (the model has " +
                            std::to_string(r.attention.dim(0)) + " channels)");
  const std::vector<double> heat = fsnet::attention_heatmap(r.attention, a.channel);
  const geometry::PointCloud patch =
      a.patch.empty() ? pipeline::to_cloud(r.coarse) : decoder::extract_patch_region(r.coarse_grid, window);
  ensure_dir(a.out);

  std::string csv = "index,x,y,z,weight\n";
  char line[160];
  for (std::size_t i = 0; i < heat.size(); ++i) {
    const auto& p = input.points[i];
    std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g,%.17g\n", i, p[0], p[1], p[2], heat[i]);
    csv += line;
  }
  io::write_file(a.out / "heatmap.csv", csv);

  const std::size_t side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(heat.size()))));
  std::string pgm = "P5\n" + std::to_string(side) + " " + std::to_string(side) + "\n255\n";
  std::string pixels(side * side, '\0');
  for (std::size_t i = 0; i < heat.size(); ++i)
    pixels[i] = static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * heat[i])));
  io::write_file(a.out / "heatmap.pgm", pgm + pixels);

  io::write_cloud(a.out / "patch.xyz", patch);
  io::write_cloud(a.out / "coarse.xyz", pipeline::to_cloud(r.coarse));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pcfold: coarse-to-fine point cloud completion"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate synthetic partial/complete shape pairs");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--count", gen.count, "Number of training objects")->required();
  gen_cmd->add_option("--seed", gen.seed, "Root seed");
  gen_cmd->add_option("--test-count", gen.test_count, "Number of held-out objects");
  gen_cmd->add_option("--views", gen.views, "Partial views per object")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--complete-points", gen.complete, "Points per complete cloud");
  gen_cmd->add_option("--partial-points", gen.partial, "Points per partial cloud");
  gen_cmd->add_option("--format", gen.format, "xyz or ply");

  TrainArgs tr;
  auto* train_sub = app.add_subcommand("train", "Train a model on a gen-data directory");
  train_sub->add_option("--data", tr.data, "Dataset directory")->required();
  train_sub->add_option("--config", tr.config, "Config file (key = value)");
  train_sub->add_option("--out", tr.out, "Checkpoint path")->required();
  train_sub->add_option("--log", tr.log, "Per-epoch CSV log (default: <out>.log.csv)");
  train_sub->add_option("--seed", tr.seed, "Override the config seed");
  train_sub->add_option("--epochs", tr.epochs, "Override the config epoch count");

  CompleteArgs co;
  auto* complete_sub = app.add_subcommand("complete", "Complete one partial cloud");
  complete_sub->add_option("--input", co.input, "Partial cloud")->required();
  complete_sub->add_option("--checkpoint", co.ckpt, "Checkpoint")->required();
  complete_sub->add_option("--out", co.out, "Output cloud")->required();
  complete_sub->add_option("--dump-intermediate", co.dump, "Directory for per-step clouds");
  complete_sub->add_option("--config", co.config, "Config that the checkpoint must match");
  complete_sub->add_flag("--normalize", co.normalize, "Normalize the input first and map outputs back");

  EvalArgs ev;
  ScoreArgs sc;
  auto* score_sub = app.add_subcommand("score", "Chamfer values of a checkpoint on a dataset split");
  score_sub->add_option("--checkpoint", sc.ckpt, "Checkpoint")->required();
  score_sub->add_option("--data", sc.data, "Dataset directory")->required();
  score_sub->add_option("--split", sc.split, "Split to score (default: the split the training log used)");

  auto* eval_sub = app.add_subcommand("eval", "Evaluate completions");
  eval_sub->add_option("--pred", ev.pred, "Directory of predicted clouds")->required();
  eval_sub->add_option("--gt", ev.gt, "Directory of ground-truth clouds");
  eval_sub->add_flag("--no-gt", ev.no_gt, "Use the metrics that need no ground truth");
  eval_sub->add_option("--refs", ev.refs, "Reference clouds for MMD");
  eval_sub->add_option("--partial", ev.partial, "Partial inputs, enables fidelity");
  eval_sub->add_option("--out", ev.out, "Report path prefix (writes .csv and .json)");

  GradcheckArgs gc;
  auto* gc_sub = app.add_subcommand("gradcheck", "Finite-difference check of every backward rule");
  gc_sub->add_option("--config", gc.config, "Config whose model is checked end to end");
  gc_sub->add_option("--seed", gc.seed, "Seed for inputs and sampled entries");
  gc_sub->add_option("--entries", gc.entries, "Sampled entries per full-model tensor (0 = all)");
  gc_sub->add_flag("--negative-control", gc.negative_control, "Check an op with a deliberately wrong backward");

  InspectArgs in;
  auto* inspect_sub = app.add_subcommand("inspect", "Export attention heatmaps and patch regions");
  inspect_sub->add_option("--checkpoint", in.ckpt, "Checkpoint")->required();
  inspect_sub->add_option("--input", in.input, "Partial cloud")->required();
  inspect_sub->add_option("--heatmap-channel", in.channel, "Attention head");
  inspect_sub->add_option("--patch", in.patch, "Grid window r,c,h,w");
  inspect_sub->add_option("--out", in.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen_cmd) return gen_data(gen);
    if (*train_sub) return train_cmd(tr);
    if (*complete_sub) return complete_cmd(co);
    if (*score_sub) return score_cmd(sc);
    if (*eval_sub) return eval_cmd(ev);
    if (*gc_sub) return gradcheck_cmd(gc);
    if (*inspect_sub) return inspect_cmd(in);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
