#ifndef SBDG_MODELS_HPP
#define SBDG_MODELS_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sbdg/autodiff.hpp"
#include "sbdg/batch.hpp"

namespace sbdg {

/// Architecture of the task classifier: input -> hidden... -> num_classes logits.
struct TaskNetConfig {
  int input_dim = 1;
  std::vector<int> hidden_dims{64, 32};
  int num_classes = 2;

  void validate() const;
  int num_layers() const noexcept { return static_cast<int>(hidden_dims.size()) + 1; }
};

/**
 * Architecture of the loss-reweighting network: two fully connected layers
 * with a ReLU between and a sigmoid on the scalar output. The input row is
 * [domain one-hot | loss], or just [loss] when the domain vector is ablated.
 */
struct ReweightNetConfig {
  int num_domains = 1;
  int hidden_dim = 100;
  bool use_domain_vector = true;

  void validate() const;
  int input_width() const noexcept { return use_domain_vector ? num_domains + 1 : 1; }
};

inline std::string weight_name(int layer) { return "fc" + std::to_string(layer) + ".weight"; }
inline std::string bias_name(int layer) { return "fc" + std::to_string(layer) + ".bias"; }

/// Logits of the task network on a tape. Parameters must be tracked under fc{l}.weight / fc{l}.bias.
template <typename Scalar>
ad::Var<Scalar> task_forward(const ad::ParamVars<Scalar>& params, ad::Var<Scalar> x, const TaskNetConfig& cfg) {
  if (x.cols() != cfg.input_dim)
    throw DimensionError("task_forward: input width " + std::to_string(x.cols()) + ", expected " +
                         std::to_string(cfg.input_dim));
  ad::Var<Scalar> h = x;
  const int layers = cfg.num_layers();
  for (int l = 0; l < layers; ++l) {
    h = ad::add_bias(ad::matmul(h, params[weight_name(l)]), params[bias_name(l)]);
    if (l + 1 < layers) h = ad::relu(h);
  }
  return h;
}

template <typename Scalar>
Matrix<Scalar> task_forward(const ParamSet<Scalar>& params, const Matrix<Scalar>& x, const TaskNetConfig& cfg) {
  ad::Tape<Scalar> tape;
  auto vars = tape.track(params);
  return task_forward(vars, tape.constant(x), cfg).value();
}

/// Per-sample cross-entropy as an n x 1 node.
template <typename Scalar>
ad::Var<Scalar> task_losses(const ad::ParamVars<Scalar>& params, ad::Var<Scalar> x, std::span<const int> labels,
                            const TaskNetConfig& cfg) {
  return ad::softmax_xent_per_sample(task_forward(params, x, cfg), labels);
}

template <typename Scalar>
Vector<Scalar> task_per_sample_losses(const ParamSet<Scalar>& params, const Matrix<Scalar>& x,
                                      std::span<const int> labels, const TaskNetConfig& cfg) {
  if (x.rows() == 0) throw DimensionError("task_per_sample_losses: empty batch");
  ad::Tape<Scalar> tape;
  auto vars = tape.track(params);
  return task_losses(vars, tape.constant(x), labels, cfg).value().col(0);
}

inline VectorD task_per_sample_losses(const ParamSetD& params, const Batch& batch, const TaskNetConfig& cfg) {
  return task_per_sample_losses<double>(params, batch.x, batch.labels, cfg);
}

namespace detail {
template <typename Scalar>
void check_domain_rows(const Matrix<Scalar>& d, Eigen::Index n, const ReweightNetConfig& cfg) {
  if (d.rows() != n || d.cols() != cfg.num_domains)
    throw DimensionError("reweight_forward: domain vectors " + std::to_string(d.rows()) + "x" +
                         std::to_string(d.cols()) + ", expected " + std::to_string(n) + "x" +
                         std::to_string(cfg.num_domains));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = d.row(i).array();
    const bool binary = ((row == Scalar(0)) || (row == Scalar(1))).all();
    if (!binary || row.sum() != Scalar(1))
      throw std::invalid_argument("reweight_forward: row " + std::to_string(i) + " is not one-hot");
  }
}
}  // namespace detail

/// Weights in [0,1] as an n x 1 node. `losses` is n x 1.
template <typename Scalar>
ad::Var<Scalar> reweight_forward(const ad::ParamVars<Scalar>& params, ad::Var<Scalar> losses,
                                 const Matrix<Scalar>& domain_vecs, const ReweightNetConfig& cfg) {
  if (losses.cols() != 1) throw DimensionError("reweight_forward: losses must be a column");
  ad::Var<Scalar> input = losses;
  if (cfg.use_domain_vector) {
    detail::check_domain_rows(domain_vecs, losses.rows(), cfg);
    input = ad::concat(losses.tape->constant(domain_vecs), losses);
  }
  auto hidden = ad::relu(ad::add_bias(ad::matmul(input, params[weight_name(0)]), params[bias_name(0)]));
  return ad::sigmoid(ad::add_bias(ad::matmul(hidden, params[weight_name(1)]), params[bias_name(1)]));
}

template <typename Scalar>
Vector<Scalar> reweight_forward(const ParamSet<Scalar>& params, const Vector<Scalar>& losses,
                                const Matrix<Scalar>& domain_vecs, const ReweightNetConfig& cfg) {
  ad::Tape<Scalar> tape;
  auto vars = tape.track(params);
  Matrix<Scalar> l = losses;
  return reweight_forward(vars, tape.constant(l), domain_vecs, cfg).value().col(0);
}

/// Glorot-uniform weights, zero biases.
ParamSetD init_params(const TaskNetConfig& cfg, std::uint64_t seed);
ParamSetD init_params(const ReweightNetConfig& cfg, std::uint64_t seed);

/// Row-wise argmax (predicted class).
std::vector<int> argmax_rows(const MatrixD& logits);

// Checkpoint format: {"format":"sbdg-params","version":1,"entries":[{"name","shape":[r,c],"values":[...]}]}
nlohmann::json params_to_json(const ParamSetD& params);
ParamSetD params_from_json(const nlohmann::json& j);
void save_params(const ParamSetD& params, const std::filesystem::path& path);
ParamSetD load_params(const std::filesystem::path& path);

}  // namespace sbdg

#endif  // SBDG_MODELS_HPP
