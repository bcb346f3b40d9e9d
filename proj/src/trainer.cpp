#include "sbdg/trainer.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>

namespace sbdg {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kCollapseThreshold = 1e-3;

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer
  std::uint64_t z = seed + stream * 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

enum SeedStream : std::uint64_t { kTheta = 1, kPsi = 2, kBatchI = 3, kBatchB = 4 };

MatrixD cell_means(const VectorD& values, const std::vector<int>& domains, const std::vector<int>& labels, int K,
                   int C) {
  MatrixD sum = MatrixD::Zero(K, C);
  MatrixD cnt = MatrixD::Zero(K, C);
  for (std::size_t i = 0; i < domains.size(); ++i) {
    sum(domains[i], labels[i]) += values(static_cast<Eigen::Index>(i));
    cnt(domains[i], labels[i]) += 1.0;
  }
  return (cnt.array() > 0).select(sum.array() / cnt.array(), kNaN).matrix();
}

VectorD hits(const std::vector<int>& predictions, const std::vector<int>& labels) {
  VectorD h(static_cast<Eigen::Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) h(static_cast<Eigen::Index>(i)) = predictions[i] == labels[i];
  return h;
}

struct WeightStats {
  double min = 1.0;
  double max = 0.0;
  void add(const VectorD& w) {
    min = std::min(min, w.minCoeff());
    max = std::max(max, w.maxCoeff());
  }
};

// Warns once per epoch whose mean w-hat falls below the collapse threshold.
class CollapseGuard {
 public:
  CollapseGuard(std::size_t pool_size, std::size_t batch_size)
      : epoch_len_(std::max<long>(1, static_cast<long>((pool_size + batch_size - 1) / batch_size))) {}

  void add(long iteration, const VectorD& w, std::vector<std::string>& warnings) {
    sum_ += w.sum();
    count_ += w.size();
    if (++seen_ % epoch_len_ == 0) {
      const double mean = sum_ / double(count_);
      if (mean < kCollapseThreshold)
        warnings.push_back("iteration " + std::to_string(iteration) + ": mean weight " + std::to_string(mean) +
                           " over the last epoch is below 1e-3; training has effectively stopped");
      sum_ = 0.0;
      count_ = 0;
    }
  }

 private:
  long epoch_len_;
  long seen_ = 0;
  double sum_ = 0.0;
  long count_ = 0;
};

}  // namespace

void TrainConfig::validate() const {
  if (iterations < 0) throw ConfigError("train.iterations must be >= 0");
  if (!(alpha > 0.0)) throw ConfigError("train.alpha must be > 0");
  if (!(beta >= 0.0)) throw ConfigError("train.beta must be >= 0");
  if (n_per_domain < 1) throw ConfigError("train.n_per_domain must be >= 1");
  if (m_per_domain < 1) throw ConfigError("train.m_per_domain must be >= 1");
  if (reweight_hidden < 1) throw ConfigError("train.reweight_hidden must be >= 1");
  if (snapshot_every < 0) throw ConfigError("train.snapshot_every must be >= 0");
  for (int h : task_hidden)
    if (h < 1) throw ConfigError("train.task_hidden widths must be >= 1");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"iterations", c.iterations},
          {"alpha", c.alpha},
          {"beta", c.beta},
          {"n_per_domain", c.n_per_domain},
          {"m_per_domain", c.m_per_domain},
          {"seed", c.seed},
          {"ablate_domain_vector", c.ablate_domain_vector},
          {"task_hidden", c.task_hidden},
          {"reweight_hidden", c.reweight_hidden},
          {"snapshot_every", c.snapshot_every}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  static const std::set<std::string> known = {"iterations",   "alpha",       "beta",
                                              "n_per_domain", "m_per_domain", "seed",
                                              "ablate_domain_vector", "task_hidden", "reweight_hidden",
                                              "snapshot_every"};
  if (!j.is_object()) throw ConfigError("train: expected an object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("train." + key + ": unknown field");
  try {
    c.iterations = j.value("iterations", c.iterations);
    c.alpha = j.value("alpha", c.alpha);
    c.beta = j.value("beta", c.beta);
    c.n_per_domain = j.value("n_per_domain", c.n_per_domain);
    c.m_per_domain = j.value("m_per_domain", c.m_per_domain);
    c.seed = j.value("seed", c.seed);
    c.ablate_domain_vector = j.value("ablate_domain_vector", c.ablate_domain_vector);
    c.task_hidden = j.value("task_hidden", c.task_hidden);
    c.reweight_hidden = j.value("reweight_hidden", c.reweight_hidden);
    c.snapshot_every = j.value("snapshot_every", c.snapshot_every);
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("train: ") + ex.what());
  }
  c.validate();
  return c;
}

Networks make_networks(const TrainConfig& cfg, int input_dim, int num_classes, int num_domains) {
  Networks nets{TaskNetConfig{input_dim, cfg.task_hidden, num_classes},
                ReweightNetConfig{num_domains, cfg.reweight_hidden, !cfg.ablate_domain_vector}};
  nets.task.validate();
  nets.reweight.validate();
  return nets;
}

ParamSetD weighted_step(const ParamSetD& theta, const MatrixD& per_sample_grads, const VectorD& weights,
                        double alpha) {
  if (per_sample_grads.rows() != weights.size() || per_sample_grads.cols() != theta.size())
    throw DimensionError("weighted_step: per-sample gradients do not match weights or parameters");
  const double scale = alpha / double(weights.size());
  const VectorD direction = per_sample_grads.transpose() * weights;
  return theta.unflatten(theta.flatten() - scale * direction);
}

VirtualStep step1_virtual_update(const ParamSetD& theta, const ParamSetD& psi, const Batch& batch_i, double alpha,
                                 const Networks& nets) {
  if (batch_i.size() == 0) throw DimensionError("step1: empty batch");
  ad::TapeD tape;
  const auto vars = tape.track(theta);
  const auto logits = task_forward(vars, tape.constant(batch_i.x), nets.task);
  const auto losses = ad::softmax_xent_per_sample(logits, std::span<const int>(batch_i.labels));

  VirtualStep out;
  out.per_sample_grads = tape.per_sample_jacobian(losses);
  out.losses = losses.value().col(0);
  out.predictions = argmax_rows(logits.value());
  out.weights = reweight_forward(psi, out.losses, batch_i.domain_onehot, nets.reweight);
  out.theta_hat = weighted_step(theta, out.per_sample_grads, out.weights, alpha);
  return out;
}

MetaGradient meta_gradient(const VirtualStep& step1, const ParamSetD& psi, const Batch& batch_i,
                           const Batch& batch_b, double alpha, const Networks& nets) {
  if (batch_b.size() == 0) throw DimensionError("meta_gradient: empty meta batch");
  MetaGradient out;

  ad::TapeD meta_tape;
  const auto theta_vars = meta_tape.track(step1.theta_hat);
  const auto meta_loss =
      ad::mean(task_losses(theta_vars, meta_tape.constant(batch_b.x), std::span<const int>(batch_b.labels), nets.task));
  out.meta_loss = meta_loss.value()(0, 0);
  const VectorD h = meta_tape.backward(meta_loss).flatten();
  if (h.size() != step1.per_sample_grads.cols())
    throw DimensionError("meta_gradient: meta gradient has " + std::to_string(h.size()) +
                         " entries, per-sample gradients have " + std::to_string(step1.per_sample_grads.cols()));
  const VectorD s = step1.per_sample_grads * h;

  ad::TapeD psi_tape;
  const auto psi_vars = psi_tape.track(psi);
  const MatrixD losses = step1.losses;
  const auto w = reweight_forward(psi_vars, psi_tape.constant(losses), batch_i.domain_onehot, nets.reweight);
  const MatrixD coeff = (-alpha / double(s.size())) * s;
  out.grad_psi = psi_tape.backward(ad::weighted_sum(w, coeff));
  return out;
}

ParamSetD step2_meta_update(const ParamSetD& psi, const ParamSetD& grad_psi, double beta) {
  return axpy(-beta, grad_psi, psi);
}

ActualStep step3_actual_update(const ParamSetD& theta, const ParamSetD& psi_next, const Batch& batch_i,
                               const MatrixD& per_sample_grads, const VectorD& losses, double alpha,
                               const Networks& nets) {
  ActualStep out;
  out.weights = reweight_forward(psi_next, losses, batch_i.domain_onehot, nets.reweight);
  out.theta_next = weighted_step(theta, per_sample_grads, out.weights, alpha);
  return out;
}

namespace {

Snapshot take_snapshot(long t, const ParamSetD& theta, const ParamSetD* psi, const Batch& pool, const Networks& nets,
                       int K, int C) {
  ad::TapeD tape;
  const auto vars = tape.track(theta);
  const auto logits = task_forward(vars, tape.constant(pool.x), nets.task);
  const auto losses = ad::softmax_xent_per_sample(logits, std::span<const int>(pool.labels));
  const VectorD l = losses.value().col(0);
  const VectorD w = psi ? reweight_forward(*psi, l, pool.domain_onehot, nets.reweight) : VectorD::Ones(l.size());
  return Snapshot{t, cell_means(hits(argmax_rows(logits.value()), pool.labels), pool.domains, pool.labels, K, C),
                  cell_means(w, pool.domains, pool.labels, K, C)};
}

bool snapshot_due(const TrainConfig& cfg, long t) {
  return cfg.snapshot_every > 0 && (t % cfg.snapshot_every == 0 || t + 1 == cfg.iterations);
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const DatasetSplit& split, const TrainOptions& opts) {
  cfg.validate();
  const auto& pool = split.imbalanced;
  const int K = pool.num_domains();
  const int C = pool.num_classes();
  if (split.balanced.num_domains() != K || split.balanced.num_classes() != C)
    throw DimensionError("train: balanced and imbalanced sets disagree on K or C");
  const Networks nets = make_networks(cfg, pool.input_dim(), C, K);

  TrainResult result;
  result.theta = init_params(nets.task, derive_seed(cfg.seed, kTheta));
  result.psi = init_params(nets.reweight, derive_seed(cfg.seed, kPsi));
  if (opts.initial_psi) {
    result.psi.require_layout(*opts.initial_psi, "train: initial_psi");
    result.psi = *opts.initial_psi;
  }
  auto& hist = result.history;
  hist.num_domains = K;
  hist.num_classes = C;

  std::mt19937_64 rng_i(derive_seed(cfg.seed, kBatchI));
  std::mt19937_64 rng_b(derive_seed(cfg.seed, kBatchB));
  const Batch full_pool = cfg.snapshot_every > 0 ? to_batch(pool) : Batch{};
  CollapseGuard guard(pool.total(), std::size_t(cfg.n_per_domain) * K);
  WeightStats wstats;

  for (long t = 0; t < cfg.iterations; ++t) {
    const Batch batch_i = sample_minibatch(pool, cfg.n_per_domain, rng_i);
    const Batch batch_b = sample_minibatch(split.balanced, cfg.m_per_domain, rng_b);
    try {
      VirtualStep s1 = step1_virtual_update(result.theta, result.psi, batch_i, cfg.alpha, nets);
      const MetaGradient mg = meta_gradient(s1, result.psi, batch_i, batch_b, cfg.alpha, nets);
      ParamSetD psi_next = step2_meta_update(result.psi, mg.grad_psi, cfg.beta);
      ActualStep s3 = step3_actual_update(result.theta, psi_next, batch_i, s1.per_sample_grads, s1.losses,
                                          cfg.alpha, nets);
      if (!s3.theta_next.all_finite() || !psi_next.all_finite())
        throw NumericError("parameters became non-finite");

      hist.records.push_back(HistoryRecord{
          t, s1.losses.mean(), mg.meta_loss, cell_means(s3.weights, batch_i.domains, batch_i.labels, K, C),
          cell_means(hits(s1.predictions, batch_i.labels), batch_i.domains, batch_i.labels, K, C)});
      wstats.add(s3.weights);
      guard.add(t, s3.weights, hist.warnings);
      if (snapshot_due(cfg, t)) hist.snapshots.push_back(take_snapshot(t, result.theta, &psi_next, full_pool, nets, K, C));
      if (opts.on_iteration)
        opts.on_iteration(IterationTrace{t, result.theta, s1.theta_hat, s3.theta_next, psi_next, s3.weights, batch_i});

      result.theta = std::move(s3.theta_next);
      result.psi = std::move(psi_next);
    } catch (const DivergenceError&) {
      throw;
    } catch (const NumericError& e) {
      throw DivergenceError(e.what(), t);
    }
  }
  hist.min_weight = wstats.min;
  hist.max_weight = wstats.max;
  return result;
}

TrainResult train_erm(const TrainConfig& cfg, const MultiDomainDataset& ds, const TrainOptions& opts) {
  cfg.validate();
  if (ds.total() == 0) throw std::invalid_argument("train_erm: empty dataset");
  const int K = ds.num_domains();
  const int C = ds.num_classes();
  const Networks nets = make_networks(cfg, ds.input_dim(), C, K);

  TrainResult result;
  result.theta = init_params(nets.task, derive_seed(cfg.seed, kTheta));
  auto& hist = result.history;
  hist.num_domains = K;
  hist.num_classes = C;

  std::mt19937_64 rng_i(derive_seed(cfg.seed, kBatchI));
  const Batch full_pool = cfg.snapshot_every > 0 ? to_batch(ds) : Batch{};

  for (long t = 0; t < cfg.iterations; ++t) {
    const Batch batch = sample_minibatch(ds, cfg.n_per_domain, rng_i);
    try {
      ad::TapeD tape;
      const auto vars = tape.track(result.theta);
      const auto logits = task_forward(vars, tape.constant(batch.x), nets.task);
      const auto losses = ad::softmax_xent_per_sample(logits, std::span<const int>(batch.labels));
      const MatrixD grads = tape.per_sample_jacobian(losses);
      const VectorD ones = VectorD::Ones(batch.size());
      ParamSetD next = weighted_step(result.theta, grads, ones, cfg.alpha);
      if (!next.all_finite()) throw NumericError("parameters became non-finite");

      hist.records.push_back(HistoryRecord{
          t, losses.value().mean(), kNaN, cell_means(ones, batch.domains, batch.labels, K, C),
          cell_means(hits(argmax_rows(logits.value()), batch.labels), batch.domains, batch.labels, K, C)});
      if (snapshot_due(cfg, t)) hist.snapshots.push_back(take_snapshot(t, result.theta, nullptr, full_pool, nets, K, C));
      if (opts.on_iteration)
        opts.on_iteration(IterationTrace{t, result.theta, next, next, result.psi, ones, batch});
      result.theta = std::move(next);
    } catch (const NumericError& e) {
      throw DivergenceError(e.what(), t);
    }
  }
  return result;
}

namespace {
void put(std::ostream& out, double v) {
  if (std::isnan(v)) {
    out << "nan";
    return;
  }
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out << buf;
}
}  // namespace

void write_history_csv(const TrainHistory& h, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "iteration,task_loss,meta_loss";
  for (int k = 0; k < h.num_domains; ++k)
    for (int c = 0; c < h.num_classes; ++c) out << ",w_d" << k << "_c" << c;
  out << '\n';
  for (const auto& r : h.records) {
    out << r.iteration << ',';
    put(out, r.task_loss);
    out << ',';
    put(out, r.meta_loss);
    for (int k = 0; k < h.num_domains; ++k)
      for (int c = 0; c < h.num_classes; ++c) {
        out << ',';
        put(out, r.mean_weight(k, c));
      }
    out << '\n';
  }
}

void write_snapshots_csv(const TrainHistory& h, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "iteration,domain,class,accuracy,mean_weight\n";
  for (const auto& s : h.snapshots)
    for (int k = 0; k < h.num_domains; ++k)
      for (int c = 0; c < h.num_classes; ++c) {
        out << s.iteration << ',' << k << ',' << c << ',';
        put(out, s.cell_accuracy(k, c));
        out << ',';
        put(out, s.cell_weight(k, c));
        out << '\n';
      }
}

}  // namespace sbdg
