#ifndef SBDG_EVAL_HPP
#define SBDG_EVAL_HPP

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sbdg/trainer.hpp"

namespace sbdg {

enum class GroupBy { None, Class, DomainClass };

/// Argmax accuracy per group. DomainClass is flattened row-major (K x C).
/// Groups with no samples are nullopt, never 0.
std::vector<std::optional<double>> accuracy(const ParamSetD& theta, const TaskNetConfig& cfg,
                                            const MultiDomainDataset& ds, GroupBy group_by);

/// Correct-prediction counts per (domain, class) cell.
CountMatrix correct_counts(const ParamSetD& theta, const TaskNetConfig& cfg, const MultiDomainDataset& ds);

/**
 * Imbalance of a count matrix: population variance of the class totals and
 * of the domain totals, each divided by the squared mean of its list
 * (squared coefficient of variation).
 */
struct CountVariance {
  double sigma2_class = 0.0;
  double sigma2_domain = 0.0;
};
CountVariance count_variance(const CountMatrix& counts);
CountVariance count_variance(const MultiDomainDataset& ds);

/// Spearman rank correlation with average ranks for ties; nullopt when either side is constant.
std::optional<double> spearman(const std::vector<double>& x, const std::vector<double>& y);

/// Per-(domain, class) values at one iteration.
struct CellFrame {
  long iteration = 0;
  MatrixD values;
};

struct CellSeries {
  int domain = 0;
  int cls = 0;
  std::vector<long> iterations;
  std::vector<double> accuracy;
  std::vector<double> weight;
};

struct WeightAccuracyProfile {
  std::vector<CellSeries> cells;
  /// Across cells, of the series means over the final `tail_fraction` of frames.
  std::optional<double> rank_correlation;
};

/// Throws std::invalid_argument when the two frame lists are on different iteration grids.
WeightAccuracyProfile weight_accuracy_profile(const std::vector<CellFrame>& accuracy_frames,
                                              const std::vector<CellFrame>& weight_frames,
                                              double tail_fraction = 0.25);
/// Uses the snapshots recorded in `history`.
WeightAccuracyProfile weight_accuracy_profile(const TrainHistory& history, double tail_fraction = 0.25);

enum class Arm { Sbdg, Erm, SbdgNoDomainVector };
std::string arm_name(Arm arm);
Arm arm_from_name(const std::string& name);

struct MetricsReport {
  std::string arm;
  std::uint64_t seed = 0;
  int target_domain = -1;  // index in the full dataset
  double overall_accuracy = 0.0;
  std::vector<std::optional<double>> per_class_accuracy;                      // on the target domain
  std::vector<std::vector<std::optional<double>>> per_domain_class_accuracy;  // sources x classes
  std::string cell_accuracy_source;  // "eval" (fresh draws) or "train" (S^I pool)
  double sigma2_class = 0.0;         // of the source training counts
  double sigma2_domain = 0.0;
  MatrixD weight_summary;  // final mean w-hat per source (domain, class)
  std::vector<std::pair<int, int>> minority_cells;
  std::optional<double> minority_accuracy;
  std::optional<double> weight_accuracy_correlation;
  double min_weight = 0.0;
  double max_weight = 1.0;
};

nlohmann::json to_json(const MetricsReport& r);
MetricsReport metrics_from_json(const nlohmann::json& j);

struct ProtocolConfig {
  TrainConfig train;
  int meta_per_pair = 12;
  double holdout_fraction = 0.3;
  std::vector<Arm> arms{Arm::Sbdg, Arm::Erm};
  std::vector<std::uint64_t> seeds{1};
  int jobs = 1;
};

/// Cells whose training count is below half the largest cell count.
std::vector<std::pair<int, int>> minority_cells(const CountMatrix& counts);

struct ArmRun {
  MetricsReport metrics;
  TrainConfig config;  // resolved, per-run
  TrainResult result;
};

/**
 * Trains one arm on `sources` and evaluates it on `target`. The meta split
 * uses the run seed. `source_eval`, when given, must share the sources'
 * domain indexing and is used for per-cell accuracy; otherwise S^I is.
 */
ArmRun run_arm(const ProtocolConfig& cfg, Arm arm, std::uint64_t seed, const MultiDomainDataset& sources,
               const MultiDomainDataset& target, int target_index, const MultiDomainDataset* source_eval = nullptr);

struct TargetReport {
  int target_domain = 0;
  CountVariance source_variance;
  std::vector<ArmRun> runs;
};

struct ProtocolReport {
  std::vector<TargetReport> targets;
  /// Per arm: unweighted mean over targets of the seed-mean target accuracy.
  std::vector<std::pair<std::string, double>> average;
};

/**
 * Holds out each listed target in turn and runs every arm x seed on the rest.
 * `eval_ds`, when given, has the same domains as `ds` and supplies the
 * per-cell source accuracy. Runs are distributed over cfg.jobs threads.
 */
ProtocolReport run_protocol(const ProtocolConfig& cfg, const MultiDomainDataset& ds, const std::vector<int>& targets,
                            const MultiDomainDataset* eval_ds = nullptr,
                            const std::function<void(const TargetReport&, const ArmRun&)>& on_run = {});

/// Every domain as a target in turn; needs at least 3 domains.
ProtocolReport leave_one_domain_out(const ProtocolConfig& cfg, const MultiDomainDataset& ds,
                                    const MultiDomainDataset* eval_ds = nullptr,
                                    const std::function<void(const TargetReport&, const ArmRun&)>& on_run = {});

}  // namespace sbdg

#endif  // SBDG_EVAL_HPP
