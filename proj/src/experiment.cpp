#include "sbdg/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include "sbdg/parallel.hpp"

namespace sbdg {

namespace {

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void reject_unknown(const nlohmann::json& j, const std::string& section, const std::set<std::string>& known) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError((section.empty() ? "" : section + ".") + key + ": unknown field");
}

std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

template <class T>
T get(const nlohmann::json& j, const char* key, const std::string& section, T fallback) {
  try {
    return j.value(key, fallback);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}

std::string protocol_name(ProtocolKind k) {
  return k == ProtocolKind::SingleSplit ? "single-split" : "leave-one-domain-out";
}

}  // namespace

GenerateSpec generate_spec_from_json(const nlohmann::json& j) {
  reject_unknown(j, "spec",
                 {"num_domains", "num_classes", "input_dim", "profile", "seed", "eval_per_cell", "eval_seed"});
  GenerateSpec s;
  for (const char* key : {"num_domains", "num_classes", "input_dim"})
    if (!j.contains(key)) throw ConfigError(std::string("spec.") + key + ": required field missing");
  s.num_domains = get(j, "num_domains", "spec", 0);
  s.num_classes = get(j, "num_classes", "spec", 0);
  s.input_dim = get(j, "input_dim", "spec", 0);
  if (!j.contains("profile")) throw ConfigError("profile.counts: required field missing");
  s.profile = profile_from_json(j.at("profile"));
  s.seed = get<std::uint64_t>(j, "seed", "spec", 1);
  s.eval_per_cell = get<long>(j, "eval_per_cell", "spec", 0);
  if (j.contains("eval_seed")) s.eval_seed = get<std::uint64_t>(j, "eval_seed", "spec", 0);
  if (s.num_domains < 2) throw ConfigError("spec.num_domains must be >= 2");
  if (s.num_classes < 2) throw ConfigError("spec.num_classes must be >= 2");
  if (s.input_dim < 1) throw ConfigError("spec.input_dim must be >= 1");
  if (s.eval_per_cell < 0) throw ConfigError("spec.eval_per_cell must be >= 0");
  s.profile.resolve(s.num_domains, s.num_classes);
  return s;
}

nlohmann::json to_json(const GenerateSpec& s) {
  nlohmann::json j = {{"num_domains", s.num_domains}, {"num_classes", s.num_classes}, {"input_dim", s.input_dim},
                      {"profile", profile_to_json(s.profile)}, {"seed", s.seed},
                      {"eval_per_cell", s.eval_per_cell}};
  if (s.eval_seed) j["eval_seed"] = *s.eval_seed;
  return j;
}

void ExperimentConfig::validate() const {
  if (!data.generate && data.csv.empty()) throw ConfigError("data: give either generate or csv");
  if (data.generate && !data.csv.empty()) throw ConfigError("data: generate and csv are mutually exclusive");
  if (!data.csv.empty() && !std::filesystem::exists(data.csv))
    throw ConfigError("data.csv: " + data.csv.string() + " does not exist");
  if (!data.eval_csv.empty() && !std::filesystem::exists(data.eval_csv))
    throw ConfigError("data.eval_csv: " + data.eval_csv.string() + " does not exist");
  if (protocol.arms.empty()) throw ConfigError("arms: at least one arm required");
  if (protocol.seeds.empty()) throw ConfigError("seeds: at least one seed required");
  if (protocol.jobs < 1) throw ConfigError("jobs must be >= 1");
  if (protocol.meta_per_pair < 1) throw ConfigError("protocol.meta_per_pair must be >= 1");
  if (!(protocol.holdout_fraction >= 0.0 && protocol.holdout_fraction < 1.0))
    throw ConfigError("protocol.holdout_fraction must be in [0, 1)");
  if (protocol.train.iterations < 1) throw ConfigError("train.iterations must be >= 1");
  protocol.train.validate();
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  reject_unknown(j, "", {"data", "train", "protocol", "arms", "seeds", "jobs", "output_dir"});
  ExperimentConfig c;

  if (!j.contains("data")) throw ConfigError("data: required section missing");
  const auto& d = j.at("data");
  reject_unknown(d, "data", {"generate", "csv", "eval_csv"});
  if (d.contains("generate")) c.data.generate = generate_spec_from_json(d.at("generate"));
  c.data.csv = resolve(get<std::string>(d, "csv", "data", ""), base_dir);
  c.data.eval_csv = resolve(get<std::string>(d, "eval_csv", "data", ""), base_dir);

  if (j.contains("train")) c.protocol.train = train_config_from_json(j.at("train"));
  if (j.contains("protocol")) {
    const auto& p = j.at("protocol");
    reject_unknown(p, "protocol", {"kind", "target_domain", "meta_per_pair", "holdout_fraction"});
    const auto kind = get<std::string>(p, "kind", "protocol", "single-split");
    if (kind == "single-split")
      c.kind = ProtocolKind::SingleSplit;
    else if (kind == "leave-one-domain-out")
      c.kind = ProtocolKind::LeaveOneDomainOut;
    else
      throw ConfigError("protocol.kind: expected single-split or leave-one-domain-out, got '" + kind + "'");
    c.target_domain = get(p, "target_domain", "protocol", c.target_domain);
    c.protocol.meta_per_pair = get(p, "meta_per_pair", "protocol", c.protocol.meta_per_pair);
    c.protocol.holdout_fraction = get(p, "holdout_fraction", "protocol", c.protocol.holdout_fraction);
  }
  if (j.contains("arms")) {
    c.protocol.arms.clear();
    for (const auto& a : get<std::vector<std::string>>(j, "arms", "", {})) c.protocol.arms.push_back(arm_from_name(a));
  }
  if (j.contains("seeds")) c.protocol.seeds = get<std::vector<std::uint64_t>>(j, "seeds", "", {});
  c.protocol.jobs = get(j, "jobs", "", c.protocol.jobs);
  if (j.contains("output_dir")) c.output_dir = resolve(get<std::string>(j, "output_dir", "", "runs"), base_dir);
  c.validate();
  return c;
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json data = nlohmann::json::object();
  if (c.data.generate) data["generate"] = to_json(*c.data.generate);
  if (!c.data.csv.empty()) data["csv"] = c.data.csv.string();
  if (!c.data.eval_csv.empty()) data["eval_csv"] = c.data.eval_csv.string();
  nlohmann::json arms = nlohmann::json::array();
  for (Arm a : c.protocol.arms) arms.push_back(arm_name(a));
  return {{"data", data},
          {"train", to_json(c.protocol.train)},
          {"protocol",
           {{"kind", protocol_name(c.kind)},
            {"target_domain", c.target_domain},
            {"meta_per_pair", c.protocol.meta_per_pair},
            {"holdout_fraction", c.protocol.holdout_fraction}}},
          {"arms", arms},
          {"seeds", c.protocol.seeds},
          {"jobs", c.protocol.jobs},
          {"output_dir", c.output_dir.string()}};
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return experiment_config_from_json(read_json(path), path.parent_path());
}

MultiDomainDataset generate_eval_set(const GenerateSpec& spec) {
  ImbalanceProfile p = spec.profile;
  p.counts = CountMatrix::Constant(spec.num_domains, spec.num_classes, spec.eval_per_cell);
  return generate_synthetic(spec.num_domains, spec.num_classes, spec.input_dim, p, spec.resolved_eval_seed());
}

LoadedData load_data(const DataSource& source) {
  if (source.generate) {
    const GenerateSpec& g = *source.generate;
    LoadedData out{generate_synthetic(g.num_domains, g.num_classes, g.input_dim, g.profile, g.seed), std::nullopt};
    if (g.eval_per_cell > 0) out.eval = generate_eval_set(g);
    return out;
  }
  LoadedData out{load_csv(source.csv), std::nullopt};
  if (!source.eval_csv.empty())
    out.eval = load_csv(source.eval_csv, out.dataset.num_domains(), out.dataset.num_classes());
  return out;
}

std::filesystem::path write_generated(const GenerateSpec& spec, const std::filesystem::path& csv_path) {
  const auto ds = generate_synthetic(spec.num_domains, spec.num_classes, spec.input_dim, spec.profile, spec.seed);
  if (csv_path.has_parent_path()) std::filesystem::create_directories(csv_path.parent_path());
  write_csv(ds, csv_path);
  const CountVariance v = count_variance(ds);
  nlohmann::json manifest = {{"seed", spec.seed},
                             {"num_domains", spec.num_domains},
                             {"num_classes", spec.num_classes},
                             {"input_dim", spec.input_dim},
                             {"profile", profile_to_json(spec.profile)},
                             {"counts", counts_to_json(ds.counts())},
                             {"sigma2_class", v.sigma2_class},
                             {"sigma2_domain", v.sigma2_domain},
                             {"csv", csv_path.filename().string()},
                             {"meta_set",
                              "drawn per run from a slice of each source cell held out of training "
                              "(protocol.holdout_fraction); never from the target domain"}};
  auto manifest_path = csv_path;
  manifest_path.replace_extension(".manifest.json");
  write_json(manifest, manifest_path);
  return manifest_path;
}

std::filesystem::path run_directory(const std::filesystem::path& root, int target, Arm arm, std::uint64_t seed) {
  return root / ("target_" + std::to_string(target)) / arm_name(arm) / ("seed_" + std::to_string(seed));
}

bool ExperimentSummary::ok() const {
  for (const auto& r : runs)
    if (r.error) return false;
  return true;
}

ExperimentSummary run_experiment(const ExperimentConfig& cfg, const std::function<void(const RunRecord&)>& on_done) {
  cfg.validate();
  const LoadedData data = load_data(cfg.data);
  const int domains = data.dataset.num_domains();

  std::vector<int> targets;
  if (cfg.kind == ProtocolKind::LeaveOneDomainOut) {
    if (domains < 3) throw ConfigError("leave-one-domain-out needs at least 3 domains, dataset has " +
                                       std::to_string(domains));
    for (int t = 0; t < domains; ++t) targets.push_back(t);
  } else {
    const int t = cfg.target_domain < 0 ? domains - 1 : cfg.target_domain;
    if (t >= domains)
      throw ConfigError("protocol.target_domain " + std::to_string(t) + " out of range for " +
                        std::to_string(domains) + " domains");
    targets.push_back(t);
  }

  struct Held {
    MultiDomainDataset sources, target, eval_sources;
  };
  std::vector<Held> held;
  for (int t : targets) {
    auto [sources, target] = hold_out_domain(data.dataset, t);
    MultiDomainDataset eval_sources;
    if (data.eval) eval_sources = hold_out_domain(*data.eval, t).first;
    held.push_back({std::move(sources), std::move(target), std::move(eval_sources)});
  }

  const auto& arms = cfg.protocol.arms;
  const auto& seeds = cfg.protocol.seeds;
  const std::size_t per_target = arms.size() * seeds.size();
  ExperimentSummary summary;
  summary.runs.resize(per_target * targets.size());
  std::mutex mu;

  parallel_for(summary.runs.size(), cfg.protocol.jobs, [&](std::size_t task) {
    const std::size_t ti = task / per_target;
    const Arm arm = arms[(task % per_target) / seeds.size()];
    const std::uint64_t seed = seeds[task % seeds.size()];
    RunRecord rec{targets[ti], arm, seed, run_directory(cfg.output_dir, targets[ti], arm, seed), {}, {}};
    std::filesystem::create_directories(rec.dir);

    ExperimentConfig frozen = cfg;
    frozen.kind = ProtocolKind::SingleSplit;
    frozen.target_domain = targets[ti];
    frozen.protocol.arms = {arm};
    frozen.protocol.seeds = {seed};
    frozen.protocol.jobs = 1;
    if (!frozen.data.csv.empty()) frozen.data.csv = std::filesystem::absolute(frozen.data.csv);
    if (!frozen.data.eval_csv.empty()) frozen.data.eval_csv = std::filesystem::absolute(frozen.data.eval_csv);
    frozen.output_dir = "runs";
    write_json(to_json(frozen), rec.dir / "config.json");

    const Held& h = held[ti];
    try {
      const ArmRun run = run_arm(cfg.protocol, arm, seed, h.sources, h.target, targets[ti],
                                 data.eval ? &h.eval_sources : nullptr);
      write_history_csv(run.result.history, rec.dir / "history.csv");
      write_snapshots_csv(run.result.history, rec.dir / "snapshots.csv");
      save_params(run.result.theta, rec.dir / "theta.json");
      if (arm != Arm::Erm) save_params(run.result.psi, rec.dir / "psi.json");
      nlohmann::json metrics = to_json(run.metrics);
      metrics["warnings"] = run.result.history.warnings;
      write_json(metrics, rec.dir / "metrics.json");
    } catch (const DivergenceError& e) {
      rec.error = e.what();
      rec.diverged_at = e.iteration();
    } catch (const NumericError& e) {
      rec.error = e.what();
    }
    std::lock_guard lock(mu);
    summary.runs[task] = rec;
    if (on_done) on_done(rec);
  });

  nlohmann::json index = nlohmann::json::array();
  for (const auto& r : summary.runs) {
    nlohmann::json e = {{"target_domain", r.target_domain},
                        {"arm", arm_name(r.arm)},
                        {"seed", r.seed},
                        {"dir", std::filesystem::relative(r.dir, cfg.output_dir).string()},
                        {"status", r.error ? "diverged" : "ok"}};
    if (r.error) e["error"] = *r.error;
    if (r.diverged_at) e["iteration"] = *r.diverged_at;
    index.push_back(e);
  }
  write_json(index, cfg.output_dir / "runs.json");
  return summary;
}

AggregateCell aggregate(const std::vector<double>& values) {
  AggregateCell a;
  a.runs = static_cast<int>(values.size());
  if (values.empty()) return a;
  for (double v : values) a.mean += v;
  a.mean /= double(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.stddev = std::sqrt(ss / double(values.size() - 1));
  }
  return a;
}

AggregateCell ExperimentReport::accuracy(const std::string& arm, int target) const {
  std::vector<double> v;
  if (auto a = metrics.find(arm); a != metrics.end())
    if (auto t = a->second.find(target); t != a->second.end())
      for (const auto& m : t->second) v.push_back(m.overall_accuracy);
  return aggregate(v);
}

std::optional<AggregateCell> ExperimentReport::minority_accuracy(const std::string& arm, int target) const {
  std::vector<double> v;
  if (auto a = metrics.find(arm); a != metrics.end())
    if (auto t = a->second.find(target); t != a->second.end())
      for (const auto& m : t->second)
        if (m.minority_accuracy) v.push_back(*m.minority_accuracy);
  if (v.empty()) return std::nullopt;
  return aggregate(v);
}

double ExperimentReport::average(const std::string& arm) const {
  double sum = 0.0;
  int n = 0;
  for (int t : targets) {
    const AggregateCell c = accuracy(arm, t);
    if (c.runs == 0) continue;
    sum += c.mean;
    ++n;
  }
  return n ? sum / n : std::nan("");
}

ExperimentReport collect_runs(const std::filesystem::path& runs_dir) {
  if (!std::filesystem::is_directory(runs_dir)) throw std::runtime_error(runs_dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(runs_dir))
    if (e.is_regular_file() && e.path().filename() == "metrics.json") files.push_back(e.path());
  if (files.empty()) throw std::runtime_error("no completed runs (metrics.json) under " + runs_dir.string());
  std::sort(files.begin(), files.end());

  ExperimentReport r;
  std::set<int> targets;
  for (const auto& f : files) {
    std::ifstream in(f);
    MetricsReport m;
    try {
      m = metrics_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(f.string() + ": " + e.what());
    }
    targets.insert(m.target_domain);
    if (!r.metrics.count(m.arm)) r.arms.push_back(m.arm);
    r.metrics[m.arm][m.target_domain].push_back(std::move(m));
  }
  r.targets.assign(targets.begin(), targets.end());
  // Canonical arm order first, anything else after.
  std::vector<std::string> ordered;
  for (Arm a : {Arm::Sbdg, Arm::SbdgNoDomainVector, Arm::Erm})
    if (r.metrics.count(arm_name(a))) ordered.push_back(arm_name(a));
  for (const auto& a : r.arms)
    if (std::find(ordered.begin(), ordered.end(), a) == ordered.end()) ordered.push_back(a);
  r.arms = ordered;
  return r;
}

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string cell_text(const AggregateCell& c) {
  if (c.runs == 0) return "-";
  return fmt("%.2f", 100.0 * c.mean) + " ± " + fmt("%.2f", 100.0 * c.stddev);
}

std::string pad(const std::string& s, std::size_t width) {
  // "±" is two bytes but one column.
  std::size_t cols = 0;
  for (unsigned char ch : s) cols += (ch & 0xC0) != 0x80;
  return s + std::string(width > cols ? width - cols : 0, ' ');
}

void table(std::ostringstream& out, const std::string& title, const std::vector<std::string>& header,
           const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size(), 0);
  auto cols = [](const std::string& s) {
    std::size_t n = 0;
    for (unsigned char ch : s) n += (ch & 0xC0) != 0x80;
    return n;
  };
  for (std::size_t i = 0; i < header.size(); ++i) width[i] = cols(header[i]);
  for (const auto& row : rows)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], cols(row[i]));
  out << title << '\n';
  for (std::size_t i = 0; i < header.size(); ++i) out << pad(header[i], width[i] + 2);
  out << '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << pad(row[i], width[i] + 2);
    out << '\n';
  }
}

}  // namespace

std::string format_report(const ExperimentReport& r) {
  std::ostringstream out;
  std::vector<std::string> header{"arm"};
  for (int t : r.targets) header.push_back("target " + std::to_string(t));
  header.push_back("avg");

  std::vector<std::vector<std::string>> acc_rows, minority_rows;
  for (const auto& arm : r.arms) {
    std::vector<std::string> row{arm}, mrow{arm};
    for (int t : r.targets) {
      row.push_back(cell_text(r.accuracy(arm, t)));
      const auto m = r.minority_accuracy(arm, t);
      mrow.push_back(m ? cell_text(*m) : "-");
    }
    row.push_back(fmt("%.2f", 100.0 * r.average(arm)));
    std::vector<double> mins;
    for (int t : r.targets)
      if (auto m = r.minority_accuracy(arm, t)) mins.push_back(m->mean);
    mrow.push_back(mins.empty() ? "-" : fmt("%.2f", 100.0 * aggregate(mins).mean));
    acc_rows.push_back(row);
    minority_rows.push_back(mrow);
  }
  table(out, "Target accuracy (%, mean ± std over seeds)", header, acc_rows);
  out << '\n';
  table(out, "Minority source-cell accuracy (%)", header, minority_rows);

  const std::string with = arm_name(Arm::Sbdg), without = arm_name(Arm::SbdgNoDomainVector);
  if (r.metrics.count(with) && r.metrics.count(without)) {
    out << '\n';
    std::vector<std::vector<std::string>> rows;
    for (const auto& [label, arm] : {std::pair{"yes", with}, std::pair{"no", without}}) {
      std::vector<std::string> row{label};
      for (int t : r.targets) row.push_back(cell_text(r.accuracy(arm, t)));
      row.push_back(fmt("%.2f", 100.0 * r.average(arm)));
      rows.push_back(row);
    }
    std::vector<std::string> h = header;
    h[0] = "domain vector";
    table(out, "Domain-vector ablation (target accuracy, %)", h, rows);
  }
  return out.str();
}

nlohmann::json to_json(const ExperimentReport& r) {
  auto cell = [](const AggregateCell& c) { return nlohmann::json{{"mean", c.mean}, {"std", c.stddev}, {"runs", c.runs}}; };
  nlohmann::json arms = nlohmann::json::object();
  for (const auto& arm : r.arms) {
    nlohmann::json per_target = nlohmann::json::object();
    for (int t : r.targets) {
      nlohmann::json e = {{"accuracy", cell(r.accuracy(arm, t))}};
      if (auto m = r.minority_accuracy(arm, t)) e["minority_accuracy"] = cell(*m);
      per_target[std::to_string(t)] = e;
    }
    arms[arm] = {{"targets", per_target}, {"average", r.average(arm)}};
  }
  nlohmann::json j = {{"targets", r.targets}, {"arms", arms}};
  const std::string with = arm_name(Arm::Sbdg), without = arm_name(Arm::SbdgNoDomainVector);
  if (r.metrics.count(with) && r.metrics.count(without))
    j["ablation"] = {{"with_domain_vector", r.average(with)}, {"without_domain_vector", r.average(without)}};
  return j;
}

}  // namespace sbdg
