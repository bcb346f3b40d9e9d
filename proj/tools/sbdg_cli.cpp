// sbdg: generate data, train, report and check gradients.

#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "sbdg/experiment.hpp"
#include "sbdg/gradcheck.hpp"

namespace {

using namespace sbdg;

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kNumeric = 2;

struct GenerateArgs {
  std::string spec;
  std::string out;
  std::optional<std::uint64_t> seed;
};

struct TrainArgs {
  std::string config;
  std::optional<std::string> out;
  std::vector<std::string> arms;
  std::vector<std::uint64_t> seeds;
  std::optional<int> jobs;
  std::optional<long> iterations;
  std::optional<double> alpha;
  std::optional<double> beta;
  std::optional<int> target;
  bool quiet = false;
};

struct ReportArgs {
  std::string runs;
  std::string out;
};

struct GradcheckArgs {
  std::uint64_t seed = 1;
  std::string corrupt;
  double corrupt_factor = 1.01;
};

int cmd_generate(const GenerateArgs& a) {
  std::ifstream in(a.spec);
  if (!in) throw ConfigError("cannot open spec " + a.spec);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(a.spec + ": " + e.what());
  }
  GenerateSpec spec = generate_spec_from_json(j);
  if (a.seed) spec.seed = *a.seed;
  const auto manifest = write_generated(spec, a.out);
  std::cout << "wrote " << a.out << " and " << manifest.string() << '\n';
  return kOk;
}

int cmd_train(const TrainArgs& a) {
  ExperimentConfig cfg = load_experiment_config(a.config);
  if (a.out) cfg.output_dir = *a.out;
  if (!a.arms.empty()) {
    cfg.protocol.arms.clear();
    for (const auto& name : a.arms) cfg.protocol.arms.push_back(arm_from_name(name));
  }
  if (!a.seeds.empty()) cfg.protocol.seeds = a.seeds;
  if (a.jobs) cfg.protocol.jobs = *a.jobs;
  if (a.iterations) cfg.protocol.train.iterations = *a.iterations;
  if (a.alpha) cfg.protocol.train.alpha = *a.alpha;
  if (a.beta) cfg.protocol.train.beta = *a.beta;
  if (a.target) {
    cfg.kind = ProtocolKind::SingleSplit;
    cfg.target_domain = *a.target;
  }
  cfg.validate();

  const auto summary = run_experiment(cfg, [&](const RunRecord& r) {
    if (a.quiet && !r.error) return;
    std::cout << (r.error ? "FAILED " : "done   ") << r.dir.string();
    if (r.error) std::cout << ": " << *r.error;
    std::cout << '\n';
  });
  if (summary.ok()) return kOk;
  std::cerr << "diverged runs:\n";
  for (const auto& r : summary.runs)
    if (r.error)
      std::cerr << "  target " << r.target_domain << " " << arm_name(r.arm) << " seed " << r.seed
                << (r.diverged_at ? " at iteration " + std::to_string(*r.diverged_at) : std::string()) << '\n';
  return kNumeric;
}

int cmd_report(const ReportArgs& a) {
  const ExperimentReport report = collect_runs(a.runs);
  const std::string text = format_report(report);
  std::filesystem::path out(a.out);
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  std::ofstream(out) << text;
  std::filesystem::path json_path = out;
  json_path += ".json";
  std::ofstream(json_path) << to_json(report).dump(2) << '\n';
  std::cout << text;
  return kOk;
}

int cmd_gradcheck(const GradcheckArgs& a) {
  GradcheckOptions opts;
  if (!a.corrupt.empty()) {
    bool found = false;
    for (int i = 0; i <= static_cast<int>(ad::Op::Scale); ++i)
      if (ad::op_name(static_cast<ad::Op>(i)) == a.corrupt) {
        opts.corrupt_op = static_cast<ad::Op>(i);
        found = true;
      }
    if (!found) throw ConfigError("unknown op '" + a.corrupt + "'");
    opts.corrupt_factor = a.corrupt_factor;
  }
  const GradcheckReport report = run_gradcheck(a.seed, opts);
  for (const auto& e : report.entries)
    std::printf("%-26s max_rel_err %.3e  threshold %.0e  %s\n", e.name.c_str(), e.max_relative_error, e.threshold,
                e.passed() ? "ok" : "FAIL");
  std::printf("%s\n", report.passed() ? "gradcheck passed" : "gradcheck FAILED");
  return report.passed() ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-balanced domain generalization: data generation, training, reports and gradient checks"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Generate a synthetic multi-domain dataset (CSV + manifest)");
  g->add_option("--spec", gen.spec, "Dataset spec (JSON)")->required()->check(CLI::ExistingFile);
  g->add_option("--out", gen.out, "Output CSV path")->required();
  g->add_option("--seed", gen.seed, "Sample seed (overrides the spec)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the configured arms and seeds; one directory per run");
  t->add_option("--config", tr.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  t->add_option("--out", tr.out, "Output directory (overrides output_dir)");
  t->add_option("--arms", tr.arms, "Arms: sbdg, erm, sbdg-no-domain-vector")->delimiter(',');
  t->add_option("--seeds", tr.seeds, "Seeds")->delimiter(',');
  t->add_option("--jobs", tr.jobs, "Parallel runs");
  t->add_option("--iterations", tr.iterations, "Iterations per run");
  t->add_option("--alpha", tr.alpha, "Task step size");
  t->add_option("--beta", tr.beta, "Reweighting step size");
  t->add_option("--target", tr.target, "Single-split target domain");
  t->add_flag("--quiet", tr.quiet, "Only report failed runs");

  ReportArgs rep;
  auto* r = app.add_subcommand("report", "Aggregate run directories into accuracy tables");
  r->add_option("--runs", rep.runs, "Directory holding run outputs")->required();
  r->add_option("--out", rep.out, "Text table path; JSON goes to <out>.json")->required();

  GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Check autodiff and meta-gradients against finite differences");
  c->add_option("--seed", gc.seed, "Seed for the random check points");
  c->add_option("--corrupt-op", gc.corrupt, "Scale one op's backward rule (self-test)")->group("");
  c->add_option("--corrupt-factor", gc.corrupt_factor, "Scale for --corrupt-op")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return cmd_generate(gen);
    if (*t) return cmd_train(tr);
    if (*r) return cmd_report(rep);
    if (*c) return cmd_gradcheck(gc);
  } catch (const DivergenceError& e) {
    std::cerr << "error: diverged at iteration " << e.iteration() << ": " << e.what() << '\n';
    return kNumeric;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
