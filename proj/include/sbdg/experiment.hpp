#ifndef SBDG_EXPERIMENT_HPP
#define SBDG_EXPERIMENT_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sbdg/eval.hpp"

namespace sbdg {

/// Synthetic dataset description, as read by `sbdg generate` and the `data.generate` config section.
struct GenerateSpec {
  int num_domains = 0;
  int num_classes = 0;
  int input_dim = 0;
  ImbalanceProfile profile;
  std::uint64_t seed = 1;
  /// Size of every cell in a separate, balanced draw from the same geometry,
  /// used for per-cell accuracy. 0 disables it.
  long eval_per_cell = 0;
  std::optional<std::uint64_t> eval_seed;  // defaults to seed + 1

  std::uint64_t resolved_eval_seed() const { return eval_seed.value_or(seed + 1); }
};

GenerateSpec generate_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GenerateSpec& s);

struct DataSource {
  std::optional<GenerateSpec> generate;
  std::filesystem::path csv;
  std::filesystem::path eval_csv;  // optional, same domains and classes as csv
};

enum class ProtocolKind { SingleSplit, LeaveOneDomainOut };

/**
 * Everything `sbdg train` needs. JSON sections: data, train, protocol, plus
 * top-level arms, seeds, jobs, output_dir. Relative paths resolve against
 * the config file's directory.
 */
struct ExperimentConfig {
  DataSource data;
  ProtocolConfig protocol;
  ProtocolKind kind = ProtocolKind::SingleSplit;
  int target_domain = -1;  // single-split only; -1 means the last domain
  std::filesystem::path output_dir = "runs";

  void validate() const;
};

ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct LoadedData {
  MultiDomainDataset dataset;
  std::optional<MultiDomainDataset> eval;
};

LoadedData load_data(const DataSource& source);

/// The balanced draw backing GenerateSpec::eval_per_cell.
MultiDomainDataset generate_eval_set(const GenerateSpec& spec);

/// Writes the CSV and `<stem>.manifest.json` next to it; returns the manifest path.
std::filesystem::path write_generated(const GenerateSpec& spec, const std::filesystem::path& csv_path);

std::filesystem::path run_directory(const std::filesystem::path& root, int target, Arm arm, std::uint64_t seed);

struct RunRecord {
  int target_domain = 0;
  Arm arm = Arm::Sbdg;
  std::uint64_t seed = 0;
  std::filesystem::path dir;
  std::optional<std::string> error;  // set when the run diverged
  std::optional<long> diverged_at;
};

struct ExperimentSummary {
  std::vector<RunRecord> runs;
  bool ok() const;
};

/**
 * Runs every target x arm x seed and writes one directory per run:
 * config.json (frozen, single run), history.csv, snapshots.csv, theta.json,
 * psi.json (reweighting arms) and metrics.json. Diverged runs are recorded
 * and do not stop the others.
 */
ExperimentSummary run_experiment(const ExperimentConfig& cfg,
                                 const std::function<void(const RunRecord&)>& on_done = {});

struct AggregateCell {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 for a single run
  int runs = 0;
};

AggregateCell aggregate(const std::vector<double>& values);

struct ExperimentReport {
  std::vector<int> targets;
  std::vector<std::string> arms;
  /// arm -> target -> metrics of every seed
  std::map<std::string, std::map<int, std::vector<MetricsReport>>> metrics;

  AggregateCell accuracy(const std::string& arm, int target) const;
  std::optional<AggregateCell> minority_accuracy(const std::string& arm, int target) const;
  /// Unweighted mean over targets of the seed-mean accuracy.
  double average(const std::string& arm) const;
};

/// Reads every metrics.json below `runs_dir`. Throws std::runtime_error when there are none.
ExperimentReport collect_runs(const std::filesystem::path& runs_dir);
std::string format_report(const ExperimentReport& r);
nlohmann::json to_json(const ExperimentReport& r);

}  // namespace sbdg

#endif  // SBDG_EXPERIMENT_HPP
