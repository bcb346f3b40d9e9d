#ifndef SBDG_TRAINER_HPP
#define SBDG_TRAINER_HPP

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sbdg/data.hpp"
#include "sbdg/models.hpp"

namespace sbdg {

struct TrainConfig {
  long iterations = 1000;  // T
  double alpha = 5e-4;     // task step size
  double beta = 5e-5;      // reweighting-network step size
  int n_per_domain = 128;  // imbalanced batch, per source domain
  int m_per_domain = 9;    // meta batch, per source domain
  std::uint64_t seed = 1;
  bool ablate_domain_vector = false;
  std::vector<int> task_hidden{64, 32};
  int reweight_hidden = 100;
  long snapshot_every = 0;  // full-pool accuracy/weight snapshots; 0 disables

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// Task and reweighting architectures for a given dataset shape.
struct Networks {
  TaskNetConfig task;
  ReweightNetConfig reweight;
};

Networks make_networks(const TrainConfig& cfg, int input_dim, int num_classes, int num_domains);

/// Intermediates of step 1, reused by steps 2 and 3.
struct VirtualStep {
  ParamSetD theta_hat;
  VectorD losses;             // L_F,i at theta
  MatrixD per_sample_grads;   // row i: flattened grad of L_F,i at theta
  VectorD weights;            // w_i from psi
  std::vector<int> predictions;
};

/// theta_hat = theta - (alpha/n) * sum_i w_i g_i, with w_i = G([d_i, L_i] | psi).
VirtualStep step1_virtual_update(const ParamSetD& theta, const ParamSetD& psi, const Batch& batch_i, double alpha,
                                 const Networks& nets);

struct MetaGradient {
  ParamSetD grad_psi;
  double meta_loss = 0.0;  // mean cross-entropy on the meta batch at theta_hat
};

/**
 * Gradient of the meta loss at theta_hat(psi) w.r.t. psi.
 *
 * theta_hat is linear in each w_i with coefficient -(alpha/n) g_i, so with
 * h = grad of the mean meta loss at theta_hat and s_i = <h, g_i>:
 *   grad_psi = -(alpha/n) * sum_i s_i * grad_psi w_i.
 */
MetaGradient meta_gradient(const VirtualStep& step1, const ParamSetD& psi, const Batch& batch_i,
                           const Batch& batch_b, double alpha, const Networks& nets);

ParamSetD step2_meta_update(const ParamSetD& psi, const ParamSetD& grad_psi, double beta);

struct ActualStep {
  ParamSetD theta_next;
  VectorD weights;  // w-hat_i from the updated psi
};

/// Re-weights the step-1 losses with psi_next and steps from theta (not theta_hat).
ActualStep step3_actual_update(const ParamSetD& theta, const ParamSetD& psi_next, const Batch& batch_i,
                               const MatrixD& per_sample_grads, const VectorD& losses, double alpha,
                               const Networks& nets);

/// theta - (alpha/n) * G^T w
ParamSetD weighted_step(const ParamSetD& theta, const MatrixD& per_sample_grads, const VectorD& weights, double alpha);

/// Per-iteration log. Cells absent from the batch hold NaN.
struct HistoryRecord {
  long iteration = 0;
  double task_loss = 0.0;
  double meta_loss = 0.0;
  MatrixD mean_weight;     // K x C, step-3 weights
  MatrixD batch_accuracy;  // K x C, theta before step 1
};

/// Whole-pool view of S^I: accuracy under theta before step 1, mean weight under psi after step 2.
struct Snapshot {
  long iteration = 0;
  MatrixD cell_accuracy;
  MatrixD cell_weight;
};

struct TrainHistory {
  int num_domains = 0;
  int num_classes = 0;
  std::vector<HistoryRecord> records;
  std::vector<Snapshot> snapshots;
  std::vector<std::string> warnings;
  double min_weight = 1.0;  // extremes over every logged w-hat_i
  double max_weight = 0.0;
};

struct TrainResult {
  ParamSetD theta;
  ParamSetD psi;
  TrainHistory history;
};

struct IterationTrace {
  long iteration;
  const ParamSetD& theta;
  const ParamSetD& theta_hat;
  const ParamSetD& theta_next;
  const ParamSetD& psi_next;
  const VectorD& weights;
  const Batch& batch;
};

struct TrainOptions {
  std::optional<ParamSetD> initial_psi;
  std::function<void(const IterationTrace&)> on_iteration;
};

/// Three-step self-balanced training for config.iterations steps.
TrainResult train(const TrainConfig& cfg, const DatasetSplit& split, const TrainOptions& opts = {});

/// Equal-weight SGD on mean cross-entropy with the same init and batch stream as train().
TrainResult train_erm(const TrainConfig& cfg, const MultiDomainDataset& ds, const TrainOptions& opts = {});

void write_history_csv(const TrainHistory& h, const std::filesystem::path& path);
/// Columns: iteration,domain,class,accuracy,mean_weight
void write_snapshots_csv(const TrainHistory& h, const std::filesystem::path& path);

}  // namespace sbdg

#endif  // SBDG_TRAINER_HPP
