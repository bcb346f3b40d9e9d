#include "sbdg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>

#include "sbdg/parallel.hpp"

namespace sbdg {

namespace {

std::vector<int> predict(const ParamSetD& theta, const TaskNetConfig& cfg, const Batch& b) {
  return argmax_rows(task_forward<double>(theta, b.x, cfg));
}

std::optional<double> ratio(long num, long den) {
  if (den == 0) return std::nullopt;
  return double(num) / double(den);
}

double nan_mean(const std::vector<double>& v) {
  double s = 0.0;
  int n = 0;
  for (double x : v)
    if (std::isfinite(x)) {
      s += x;
      ++n;
    }
  return n ? s / n : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

CountMatrix correct_counts(const ParamSetD& theta, const TaskNetConfig& cfg, const MultiDomainDataset& ds) {
  CountMatrix correct = CountMatrix::Zero(ds.num_domains(), ds.num_classes());
  if (ds.total() == 0) return correct;
  const Batch b = to_batch(ds);
  const auto pred = predict(theta, cfg, b);
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == b.labels[i]) ++correct(b.domains[i], b.labels[i]);
  return correct;
}

std::vector<std::optional<double>> accuracy(const ParamSetD& theta, const TaskNetConfig& cfg,
                                            const MultiDomainDataset& ds, GroupBy group_by) {
  const CountMatrix correct = correct_counts(theta, cfg, ds);
  const CountMatrix total = ds.counts();
  std::vector<std::optional<double>> out;
  switch (group_by) {
    case GroupBy::None:
      out.push_back(ratio(correct.sum(), total.sum()));
      break;
    case GroupBy::Class:
      for (Eigen::Index c = 0; c < total.cols(); ++c) out.push_back(ratio(correct.col(c).sum(), total.col(c).sum()));
      break;
    case GroupBy::DomainClass:
      for (Eigen::Index k = 0; k < total.rows(); ++k)
        for (Eigen::Index c = 0; c < total.cols(); ++c) out.push_back(ratio(correct(k, c), total(k, c)));
      break;
  }
  return out;
}

CountVariance count_variance(const CountMatrix& counts) {
  if (counts.size() == 0 || counts.sum() == 0) throw std::invalid_argument("count_variance: empty dataset");
  auto normalized_variance = [](const Eigen::ArrayXd& v) {
    const double mean = v.mean();
    return (v - mean).square().mean() / (mean * mean);
  };
  const Eigen::ArrayXd per_class = counts.cast<double>().colwise().sum().transpose().array();
  const Eigen::ArrayXd per_domain = counts.cast<double>().rowwise().sum().array();
  return {normalized_variance(per_class), normalized_variance(per_domain)};
}

CountVariance count_variance(const MultiDomainDataset& ds) { return count_variance(ds.counts()); }

std::optional<double> spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  auto ranks = [n](const std::vector<double>& v) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    Eigen::ArrayXd r(n);
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = 0.5 * double(i + j) + 1.0;
      for (std::size_t t = i; t <= j; ++t) r(order[t]) = avg;
      i = j + 1;
    }
    return r;
  };
  const Eigen::ArrayXd rx = ranks(x) - ranks(x).mean();
  const Eigen::ArrayXd ry = ranks(y) - ranks(y).mean();
  const double sxx = rx.square().sum();
  const double syy = ry.square().sum();
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return (rx * ry).sum() / std::sqrt(sxx * syy);
}

WeightAccuracyProfile weight_accuracy_profile(const std::vector<CellFrame>& accuracy_frames,
                                              const std::vector<CellFrame>& weight_frames, double tail_fraction) {
  if (accuracy_frames.size() != weight_frames.size())
    throw std::invalid_argument("weight_accuracy_profile: frame counts differ");
  for (std::size_t i = 0; i < accuracy_frames.size(); ++i) {
    if (accuracy_frames[i].iteration != weight_frames[i].iteration)
      throw std::invalid_argument("weight_accuracy_profile: iteration grids differ at frame " + std::to_string(i));
    if (accuracy_frames[i].values.rows() != weight_frames[i].values.rows() ||
        accuracy_frames[i].values.cols() != weight_frames[i].values.cols())
      throw std::invalid_argument("weight_accuracy_profile: cell grids differ at frame " + std::to_string(i));
  }
  WeightAccuracyProfile out;
  if (accuracy_frames.empty()) return out;
  const auto K = accuracy_frames.front().values.rows();
  const auto C = accuracy_frames.front().values.cols();
  const std::size_t frames = accuracy_frames.size();
  const std::size_t tail = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(tail_fraction * frames)));

  std::vector<double> acc_means;
  std::vector<double> weight_means;
  for (Eigen::Index k = 0; k < K; ++k) {
    for (Eigen::Index c = 0; c < C; ++c) {
      CellSeries s{static_cast<int>(k), static_cast<int>(c), {}, {}, {}};
      for (std::size_t f = 0; f < frames; ++f) {
        s.iterations.push_back(accuracy_frames[f].iteration);
        s.accuracy.push_back(accuracy_frames[f].values(k, c));
        s.weight.push_back(weight_frames[f].values(k, c));
      }
      const double a = nan_mean({s.accuracy.end() - tail, s.accuracy.end()});
      const double w = nan_mean({s.weight.end() - tail, s.weight.end()});
      if (std::isfinite(a) && std::isfinite(w)) {
        acc_means.push_back(a);
        weight_means.push_back(w);
      }
      out.cells.push_back(std::move(s));
    }
  }
  out.rank_correlation = spearman(acc_means, weight_means);
  return out;
}

WeightAccuracyProfile weight_accuracy_profile(const TrainHistory& history, double tail_fraction) {
  std::vector<CellFrame> acc;
  std::vector<CellFrame> w;
  for (const auto& s : history.snapshots) {
    acc.push_back({s.iteration, s.cell_accuracy});
    w.push_back({s.iteration, s.cell_weight});
  }
  return weight_accuracy_profile(acc, w, tail_fraction);
}

std::string arm_name(Arm arm) {
  switch (arm) {
    case Arm::Sbdg: return "sbdg";
    case Arm::Erm: return "erm";
    case Arm::SbdgNoDomainVector: return "sbdg-no-domain-vector";
  }
  return "?";
}

Arm arm_from_name(const std::string& name) {
  for (Arm a : {Arm::Sbdg, Arm::Erm, Arm::SbdgNoDomainVector})
    if (arm_name(a) == name) return a;
  throw ConfigError("unknown arm '" + name + "' (expected sbdg, erm, sbdg-no-domain-vector)");
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }
std::optional<double> optional_from(const nlohmann::json& j) {
  return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}

}  // namespace

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& v : r.per_class_accuracy) per_class.push_back(optional_json(v));
  nlohmann::json per_cell = nlohmann::json::array();
  for (const auto& row : r.per_domain_class_accuracy) {
    nlohmann::json jr = nlohmann::json::array();
    for (const auto& v : row) jr.push_back(optional_json(v));
    per_cell.push_back(jr);
  }
  nlohmann::json weights = nlohmann::json::array();
  for (Eigen::Index k = 0; k < r.weight_summary.rows(); ++k) {
    nlohmann::json jr = nlohmann::json::array();
    for (Eigen::Index c = 0; c < r.weight_summary.cols(); ++c) {
      const double v = r.weight_summary(k, c);
      jr.push_back(std::isfinite(v) ? nlohmann::json(v) : nlohmann::json());
    }
    weights.push_back(jr);
  }
  nlohmann::json minority = nlohmann::json::array();
  for (auto [k, c] : r.minority_cells) minority.push_back({k, c});
  return {{"arm", r.arm},
          {"seed", r.seed},
          {"target_domain", r.target_domain},
          {"overall_accuracy", r.overall_accuracy},
          {"per_class_accuracy", per_class},
          {"per_domain_class_accuracy", per_cell},
          {"cell_accuracy_source", r.cell_accuracy_source},
          {"sigma2_class", r.sigma2_class},
          {"sigma2_domain", r.sigma2_domain},
          {"weight_summary", weights},
          {"minority_cells", minority},
          {"minority_accuracy", optional_json(r.minority_accuracy)},
          {"weight_accuracy_correlation", optional_json(r.weight_accuracy_correlation)},
          {"min_weight", r.min_weight},
          {"max_weight", r.max_weight}};
}

MetricsReport metrics_from_json(const nlohmann::json& j) {
  MetricsReport r;
  try {
    r.arm = j.at("arm").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.target_domain = j.at("target_domain").get<int>();
    r.overall_accuracy = j.at("overall_accuracy").get<double>();
    for (const auto& v : j.at("per_class_accuracy")) r.per_class_accuracy.push_back(optional_from(v));
    for (const auto& row : j.at("per_domain_class_accuracy")) {
      std::vector<std::optional<double>> out;
      for (const auto& v : row) out.push_back(optional_from(v));
      r.per_domain_class_accuracy.push_back(std::move(out));
    }
    r.cell_accuracy_source = j.value("cell_accuracy_source", "");
    r.sigma2_class = j.at("sigma2_class").get<double>();
    r.sigma2_domain = j.at("sigma2_domain").get<double>();
    const auto& ws = j.at("weight_summary");
    if (!ws.empty()) {
      r.weight_summary.resize(ws.size(), ws.at(0).size());
      for (std::size_t k = 0; k < ws.size(); ++k)
        for (std::size_t c = 0; c < ws[k].size(); ++c)
          r.weight_summary(k, c) = ws[k][c].is_null() ? std::nan("") : ws[k][c].get<double>();
    }
    for (const auto& cell : j.at("minority_cells")) r.minority_cells.emplace_back(cell.at(0), cell.at(1));
    r.minority_accuracy = optional_from(j.at("minority_accuracy"));
    r.weight_accuracy_correlation = optional_from(j.at("weight_accuracy_correlation"));
    r.min_weight = j.value("min_weight", 0.0);
    r.max_weight = j.value("max_weight", 1.0);
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError(std::string("metrics report: ") + ex.what());
  }
  return r;
}

std::vector<std::pair<int, int>> minority_cells(const CountMatrix& counts) {
  std::vector<std::pair<int, int>> out;
  const long largest = counts.size() ? counts.maxCoeff() : 0;
  for (Eigen::Index k = 0; k < counts.rows(); ++k)
    for (Eigen::Index c = 0; c < counts.cols(); ++c)
      if (2 * counts(k, c) < largest) out.emplace_back(static_cast<int>(k), static_cast<int>(c));
  return out;
}

namespace {

void check_provenance(const MultiDomainDataset& train_set, const MultiDomainDataset& target) {
  std::vector<int> target_origins;
  for (const Sample* s : target.all())
    if (std::find(target_origins.begin(), target_origins.end(), s->origin_domain) == target_origins.end())
      target_origins.push_back(s->origin_domain);
  for (const Sample* s : train_set.all())
    if (std::find(target_origins.begin(), target_origins.end(), s->origin_domain) != target_origins.end())
      throw std::logic_error("target-domain record " + std::to_string(s->record_id) + " found in training data");
}

MatrixD final_weight_summary(const TrainHistory& h) {
  if (!h.snapshots.empty()) return h.snapshots.back().cell_weight;
  MatrixD out = MatrixD::Constant(h.num_domains, h.num_classes, std::nan(""));
  if (h.records.empty()) return out;
  const std::size_t start = h.records.size() - std::max<std::size_t>(1, h.records.size() / 4);
  for (int k = 0; k < h.num_domains; ++k)
    for (int c = 0; c < h.num_classes; ++c) {
      std::vector<double> v;
      for (std::size_t i = start; i < h.records.size(); ++i) v.push_back(h.records[i].mean_weight(k, c));
      out(k, c) = nan_mean(v);
    }
  return out;
}

}  // namespace

ArmRun run_arm(const ProtocolConfig& cfg, Arm arm, std::uint64_t seed, const MultiDomainDataset& sources,
               const MultiDomainDataset& target, int target_index, const MultiDomainDataset* source_eval) {
  ArmRun run;
  run.config = cfg.train;
  run.config.seed = seed;
  run.config.ablate_domain_vector = arm == Arm::SbdgNoDomainVector;

  check_provenance(sources, target);
  const DatasetSplit split = split_meta(sources, cfg.meta_per_pair, seed, cfg.holdout_fraction);
  check_provenance(split.balanced, target);
  run.result = arm == Arm::Erm ? train_erm(run.config, split.imbalanced) : train(run.config, split);

  const Networks nets = make_networks(run.config, sources.input_dim(), sources.num_classes(), sources.num_domains());
  MetricsReport& m = run.metrics;
  m.arm = arm_name(arm);
  m.seed = seed;
  m.target_domain = target_index;
  m.overall_accuracy = accuracy(run.result.theta, nets.task, target, GroupBy::None).front().value_or(0.0);
  m.per_class_accuracy = accuracy(run.result.theta, nets.task, target, GroupBy::Class);

  const MultiDomainDataset& cell_set = source_eval ? *source_eval : split.imbalanced;
  m.cell_accuracy_source = source_eval ? "eval" : "train";
  const auto cells = accuracy(run.result.theta, nets.task, cell_set, GroupBy::DomainClass);
  const int C = sources.num_classes();
  for (int k = 0; k < sources.num_domains(); ++k)
    m.per_domain_class_accuracy.emplace_back(cells.begin() + k * C, cells.begin() + (k + 1) * C);

  const CountVariance var = count_variance(sources);
  m.sigma2_class = var.sigma2_class;
  m.sigma2_domain = var.sigma2_domain;
  m.weight_summary = final_weight_summary(run.result.history);
  m.minority_cells = minority_cells(sources.counts());
  std::vector<double> minority_acc;
  for (auto [k, c] : m.minority_cells)
    if (auto a = m.per_domain_class_accuracy[k][c]) minority_acc.push_back(*a);
  if (!minority_acc.empty()) m.minority_accuracy = nan_mean(minority_acc);
  if (!run.result.history.snapshots.empty())
    m.weight_accuracy_correlation = weight_accuracy_profile(run.result.history).rank_correlation;
  if (arm == Arm::Erm) {
    m.min_weight = m.max_weight = 1.0;
  } else {
    m.min_weight = run.result.history.min_weight;
    m.max_weight = run.result.history.max_weight;
  }
  return run;
}

ProtocolReport run_protocol(const ProtocolConfig& cfg, const MultiDomainDataset& ds, const std::vector<int>& targets,
                            const MultiDomainDataset* eval_ds,
                            const std::function<void(const TargetReport&, const ArmRun&)>& on_run) {
  if (cfg.arms.empty()) throw ConfigError("arms: at least one arm required");
  if (cfg.seeds.empty()) throw ConfigError("seeds: at least one seed required");
  if (eval_ds && (eval_ds->num_domains() != ds.num_domains() || eval_ds->num_classes() != ds.num_classes()))
    throw DimensionError("evaluation set does not match dataset domains/classes");

  ProtocolReport report;
  struct Held {
    MultiDomainDataset sources, target, eval_sources;
  };
  std::vector<Held> held;
  for (int t : targets) {
    auto [sources, target] = hold_out_domain(ds, t);
    MultiDomainDataset eval_sources;
    if (eval_ds) eval_sources = hold_out_domain(*eval_ds, t).first;
    report.targets.push_back(TargetReport{t, count_variance(sources), {}});
    report.targets.back().runs.resize(cfg.arms.size() * cfg.seeds.size());
    held.push_back({std::move(sources), std::move(target), std::move(eval_sources)});
  }

  const std::size_t per_target = cfg.arms.size() * cfg.seeds.size();
  std::mutex mu;
  parallel_for(per_target * targets.size(), cfg.jobs, [&](std::size_t task) {
    const std::size_t ti = task / per_target;
    const std::size_t ai = (task % per_target) / cfg.seeds.size();
    const std::size_t si = task % cfg.seeds.size();
    const Held& h = held[ti];
    ArmRun run = run_arm(cfg, cfg.arms[ai], cfg.seeds[si], h.sources, h.target, targets[ti],
                         eval_ds ? &h.eval_sources : nullptr);
    std::lock_guard lock(mu);
    auto& slot = report.targets[ti].runs[ai * cfg.seeds.size() + si];
    slot = std::move(run);
    if (on_run) on_run(report.targets[ti], slot);
  });

  for (Arm arm : cfg.arms) {
    double sum = 0.0;
    for (const auto& t : report.targets) {
      double seed_sum = 0.0;
      int n = 0;
      for (const auto& r : t.runs)
        if (r.metrics.arm == arm_name(arm)) {
          seed_sum += r.metrics.overall_accuracy;
          ++n;
        }
      sum += seed_sum / n;
    }
    report.average.emplace_back(arm_name(arm), sum / double(report.targets.size()));
  }
  return report;
}

ProtocolReport leave_one_domain_out(const ProtocolConfig& cfg, const MultiDomainDataset& ds,
                                    const MultiDomainDataset* eval_ds,
                                    const std::function<void(const TargetReport&, const ArmRun&)>& on_run) {
  if (ds.num_domains() < 3) throw std::invalid_argument("leave_one_domain_out: need at least 3 domains");
  std::vector<int> targets(ds.num_domains());
  std::iota(targets.begin(), targets.end(), 0);
  return run_protocol(cfg, ds, targets, eval_ds, on_run);
}

}  // namespace sbdg
