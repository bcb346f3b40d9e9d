#include "sbdg/models.hpp"

#include <cmath>
#include <fstream>
#include <random>

namespace sbdg {

void TaskNetConfig::validate() const {
  if (input_dim < 1) throw ConfigError("task net: input_dim must be >= 1");
  if (num_classes < 2) throw ConfigError("task net: num_classes must be >= 2");
  for (int h : hidden_dims)
    if (h < 1) throw ConfigError("task net: hidden widths must be >= 1");
}

void ReweightNetConfig::validate() const {
  if (num_domains < 1) throw ConfigError("reweight net: num_domains must be >= 1");
  if (hidden_dim < 1) throw ConfigError("reweight net: hidden_dim must be >= 1");
}

namespace {

void add_dense(ParamSetD& params, int layer, int fan_in, int fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  MatrixD w(fan_in, fan_out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
  params.add(weight_name(layer), std::move(w));
  params.add(bias_name(layer), MatrixD::Zero(1, fan_out));
}

}  // namespace

ParamSetD init_params(const TaskNetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamSetD params;
  int fan_in = cfg.input_dim;
  for (int l = 0; l < cfg.num_layers(); ++l) {
    const int fan_out = l + 1 < cfg.num_layers() ? cfg.hidden_dims[l] : cfg.num_classes;
    add_dense(params, l, fan_in, fan_out, rng);
    fan_in = fan_out;
  }
  return params;
}

ParamSetD init_params(const ReweightNetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamSetD params;
  add_dense(params, 0, cfg.input_width(), cfg.hidden_dim, rng);
  add_dense(params, 1, cfg.hidden_dim, 1, rng);
  return params;
}

std::vector<int> argmax_rows(const MatrixD& logits) {
  std::vector<int> out(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    out[i] = static_cast<int>(best);
  }
  return out;
}

nlohmann::json params_to_json(const ParamSetD& params) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : params) {
    std::vector<double> values(e.value.data(), e.value.data() + e.value.size());
    entries.push_back({{"name", e.name}, {"shape", {e.value.rows(), e.value.cols()}}, {"values", values}});
  }
  return {{"format", "sbdg-params"}, {"version", 1}, {"entries", entries}};
}

ParamSetD params_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "sbdg-params") throw ParseError("not an sbdg-params checkpoint");
    ParamSetD params;
    for (const auto& e : j.at("entries")) {
      const auto shape = e.at("shape").get<std::vector<Eigen::Index>>();
      const auto values = e.at("values").get<std::vector<double>>();
      if (shape.size() != 2 || shape[0] * shape[1] != static_cast<Eigen::Index>(values.size()))
        throw ParseError("entry '" + e.at("name").get<std::string>() + "': shape does not match value count");
      MatrixD m = Eigen::Map<const MatrixD>(values.data(), shape[0], shape[1]);
      params.add(e.at("name").get<std::string>(), std::move(m));
    }
    return params;
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError(std::string("checkpoint: ") + ex.what());
  }
}

void save_params(const ParamSetD& params, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << params_to_json(params).dump() << '\n';
}

ParamSetD load_params(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError(path.string() + ": " + ex.what());
  }
  return params_from_json(j);
}

}  // namespace sbdg
