#include "pcfold/train.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

#include "pcfold/cloud_io.hpp"
#include "pcfold/parallel.hpp"
#include "pcfold/synthetic.hpp"

namespace pcfold::train {

double learning_rate_at(const config::TrainConfig& config, std::size_t epoch) {
  return config.learning_rate * std::pow(config.lr_decay, static_cast<double>(epoch / config.lr_decay_every));
}

template <typename T>
Adam<T>::Adam(const ParamStore<T>& store, double beta1, double beta2, double epsilon)
    : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
  const std::size_t n = store.scalar_count();
  m_.assign(n, 0.0);
  v_.assign(n, 0.0);
}

template <typename T>
void Adam<T>::step(ParamStore<T>& store, std::span<const double> gradient, double lr) {
  if (gradient.size() != m_.size())
    throw std::invalid_argument("adam: gradient has " + std::to_string(gradient.size()) + " entries, expected " +
                                std::to_string(m_.size()));
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  std::size_t offset = 0;
  for (const auto& entry : store.entries()) {
    ad::Tensor<T> p = entry.second;
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i, ++offset) {
      const double g = gradient[offset];
      m_[offset] = beta1_ * m_[offset] + (1.0 - beta1_) * g;
      v_[offset] = beta2_ * v_[offset] + (1.0 - beta2_) * g * g;
      const double mhat = m_[offset] / c1, vhat = v_[offset] / c2;
      values[i] = static_cast<T>(static_cast<double>(values[i]) - lr * mhat / (std::sqrt(vhat) + epsilon_));
    }
  }
}

template <typename T>
ad::Tensor<T> sample_loss(ad::Graph<T>& g, const Sample& sample, const pipeline::ModelParams<T>& params,
                          const config::TrainConfig& config) {
  const ad::Tensor<T> target = pipeline::to_tensor<T>(sample.complete);
  if (params.config.aggregator == pipeline::Aggregator::kGlobal)
    return geometry::chamfer_loss(g, pipeline::gfv_baseline_forward(g, sample.partial, params), target);
  const pipeline::ForwardResult<T> r = pipeline::forward(g, sample.partial, params, config.coarse_only);
  if (config.coarse_only) return geometry::chamfer_loss(g, r.coarse, target);
  return pipeline::joint_loss(g, r.coarse, r.sparse, r.dense, target, config.coarse_loss);
}

namespace {

struct SampleEval {
  double coarse = 0.0, dense = 0.0, loss = 0.0;
};

template <typename T>
SampleEval evaluate_one(const Sample& s, const pipeline::ModelParams<T>& params, const config::TrainConfig& config) {
  ad::Graph<T> g(false);
  SampleEval e;
  const ad::Tensor<T> target = pipeline::to_tensor<T>(s.complete);
  if (params.config.aggregator == pipeline::Aggregator::kGlobal) {
    const auto coarse = pipeline::gfv_baseline_forward(g, s.partial, params);
    e.coarse = geometry::chamfer(pipeline::to_cloud(coarse), s.complete);
    e.loss = static_cast<double>(geometry::chamfer_loss(g, coarse, target).item());
    return e;
  }
  const auto r = pipeline::forward(g, s.partial, params, config.coarse_only);
  e.coarse = geometry::chamfer(pipeline::to_cloud(r.coarse), s.complete);
  if (config.coarse_only) {
    e.loss = static_cast<double>(geometry::chamfer_loss(g, r.coarse, target).item());
  } else {
    e.dense = geometry::chamfer(pipeline::to_cloud(r.dense), s.complete);
    e.loss = static_cast<double>(pipeline::joint_loss(g, r.coarse, r.sparse, r.dense, target, config.coarse_loss).item());
  }
  return e;
}

template <typename T>
bool has_dense_stage(const pipeline::ModelParams<T>& params, const config::TrainConfig& config) {
  return params.config.aggregator == pipeline::Aggregator::kStructured && !config.coarse_only;
}

}  // namespace

template <typename T>
Evaluation evaluate(const pipeline::ModelParams<T>& params, std::span<const Sample> samples,
                    const config::TrainConfig& config, std::size_t workers) {
  if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
  std::vector<SampleEval> slots(samples.size());
  parallel_for(samples.size(), workers,
               [&](std::size_t i, std::size_t) { slots[i] = evaluate_one(samples[i], params, config); });
  Evaluation out;
  double dense = 0.0;
  for (const SampleEval& s : slots) {
    out.coarse_cd += s.coarse;
    dense += s.dense;
    out.loss += s.loss;
  }
  const double n = static_cast<double>(samples.size());
  out.coarse_cd /= n;
  out.loss /= n;
  if (has_dense_stage(params, config)) out.dense_cd = dense / n;
  return out;
}

namespace {

template <typename T>
void copy_gradient(const ParamStore<T>& store, std::vector<T>& out) {
  out.resize(store.scalar_count());
  std::size_t offset = 0;
  for (const auto& entry : store.entries()) {
    const auto g = entry.second.grad();
    const std::size_t n = entry.second.size();
    if (g.empty())
      std::fill(out.begin() + offset, out.begin() + offset + n, T(0));
    else
      std::copy(g.begin(), g.end(), out.begin() + offset);
    offset += n;
  }
}

}  // namespace

template <typename T>
TrainResult train(pipeline::ModelParams<T>& params, std::span<const Sample> train_set, std::span<const Sample> heldout,
                  const config::TrainConfig& config, std::size_t workers,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  config.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  const std::span<const Sample> eval_set = heldout.empty() ? train_set : heldout;
  workers = std::max<std::size_t>(1, std::min(workers, config.batch_size));

  // Worker 0 uses `params` itself; others get private copies whose values are
  // refreshed before every batch.
  std::vector<pipeline::ModelParams<T>> replicas;
  for (std::size_t w = 1; w < workers; ++w) replicas.push_back(params.clone());
  const auto replica = [&](std::size_t w) -> pipeline::ModelParams<T>& { return w == 0 ? params : replicas[w - 1]; };

  Adam<T> adam(params.store, config.beta1, config.beta2, config.epsilon);
  TrainResult result;
  result.initial = evaluate(params, eval_set, config, workers);

  std::vector<std::size_t> order(train_set.size());
  std::vector<std::vector<T>> grads(config.batch_size);
  std::vector<double> losses(config.batch_size);
  std::vector<double> total(params.store.scalar_count());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = learning_rate_at(config, epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = Rng::stream(config.seed, "epoch", epoch);
    shuffle_rng.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, order.size() - start);
      for (auto& r : replicas) r.copy_values_from(params);
      parallel_for(count, workers, [&](std::size_t b, std::size_t w) {
        pipeline::ModelParams<T>& model = replica(w);
        model.store.zero_grad();
        ad::Graph<T> g;
        ad::Tensor<T> loss = sample_loss(g, train_set[order[start + b]], model, config);
        g.backward(loss);
        losses[b] = static_cast<double>(loss.item());
        copy_gradient(model.store, grads[b]);
      });
      std::fill(total.begin(), total.end(), 0.0);
      for (std::size_t b = 0; b < count; ++b) {
        for (std::size_t i = 0; i < total.size(); ++i) total[i] += static_cast<double>(grads[b][i]);
        loss_sum += losses[b];
      }
      for (double& v : total) v /= static_cast<double>(count);
      adam.step(params.store, total, lr);
    }
    EpochLog row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_loss = loss_sum / static_cast<double>(order.size());
    row.eval = evaluate(params, eval_set, config, workers);
    result.log.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  params.store.zero_grad();
  return result;
}

std::string log_csv(const std::vector<EpochLog>& log) {
  std::string out = "epoch,lr,train_loss,coarse_cd,dense_cd\n";
  char line[256];
  for (const EpochLog& r : log) {
    char dense[40] = "";
    if (r.eval.dense_cd) std::snprintf(dense, sizeof dense, "%.17g", *r.eval.dense_cd);
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%s\n", r.epoch, r.lr, r.train_loss, r.eval.coarse_cd, dense);
    out += line;
  }
  return out;
}

std::vector<Sample> load_dataset(const std::filesystem::path& dir, const std::string& split) {
  const std::filesystem::path manifest = dir / "manifest.json";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(manifest));
  } catch (const nlohmann::json::parse_error& e) {
    throw io::IoError(manifest.string() + ": " + e.what());
  }
  std::vector<Sample> out;
  try {
    for (const auto& e : j.at("shapes")) {
      if (!split.empty() && e.at("split").get<std::string>() != split) continue;
      Sample s;
      s.id = e.at("id").get<std::string>();
      s.category = e.at("category").get<std::string>();
      s.partial = io::read_cloud(dir / e.at("partial").get<std::string>());
      s.complete = io::read_cloud(dir / e.at("complete").get<std::string>());
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw io::IoError(manifest.string() + ": malformed manifest: " + e.what());
  }
  return out;
}

std::vector<Sample> synthetic_dataset(std::size_t count, std::uint64_t seed, std::size_t partial_points,
                                      std::size_t complete_points, std::size_t workers) {
  const auto entries = synthetic::dataset_entries(count, seed, 1, complete_points, partial_points);
  std::vector<Sample> out(entries.size());
  parallel_for(entries.size(), workers, [&](std::size_t i, std::size_t) {
    const synthetic::ShapePair pair = synthetic::gen_synthetic(entries[i].spec, entries[i].seed);
    out[i] = {entries[i].id, std::string(synthetic::to_string(entries[i].spec.kind)), pair.partial, pair.complete};
  });
  return out;
}

#define PCFOLD_INSTANTIATE_TRAIN(T)                                                                                 \
  template class Adam<T>;                                                                                           \
  template ad::Tensor<T> sample_loss(ad::Graph<T>&, const Sample&, const pipeline::ModelParams<T>&,                 \
                                     const config::TrainConfig&);                                                   \
  template Evaluation evaluate(const pipeline::ModelParams<T>&, std::span<const Sample>, const config::TrainConfig&, \
                               std::size_t);                                                                        \
  template TrainResult train(pipeline::ModelParams<T>&, std::span<const Sample>, std::span<const Sample>,            \
                             const config::TrainConfig&, std::size_t, const std::function<void(const EpochLog&)>&);

PCFOLD_INSTANTIATE_TRAIN(float)
PCFOLD_INSTANTIATE_TRAIN(double)

}  // namespace pcfold::train
