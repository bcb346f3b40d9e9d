#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sbdg/experiment.hpp"

namespace fs = std::filesystem;
using namespace sbdg;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Sandbox {
 public:
  Sandbox() {
    static int counter = 0;
    root_ = fs::temp_directory_path() / ("sbdg_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  ~Sandbox() { fs::remove_all(root_); }
  const fs::path& root() const { return root_; }
  fs::path operator/(const std::string& s) const { return root_ / s; }

  Result run(const std::string& args) const {
    const auto out = root_ / ".stdout", err = root_ / ".stderr";
    const std::string cmd = std::string(SBDG_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    Result r{WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
    fs::remove(out);
    fs::remove(err);
    return r;
  }

  void write(const std::string& name, const nlohmann::json& j) const { std::ofstream(root_ / name) << j.dump(2); }

 private:
  fs::path root_;
};

nlohmann::json spec_json() {
  return {{"num_domains", 4},
          {"num_classes", 3},
          {"input_dim", 4},
          {"seed", 5},
          {"eval_per_cell", 10},
          {"profile", {{"majority", 30}, {"minority", 5}, {"minority_cells", {{0, 1}}}, {"geometry_seed", 2}}}};
}

nlohmann::json config_json() {
  return {{"data", {{"generate", spec_json()}}},
          {"train",
           {{"iterations", 20},
            {"alpha", 0.1},
            {"beta", 1.0},
            {"n_per_domain", 6},
            {"m_per_domain", 3},
            {"task_hidden", {6}},
            {"reweight_hidden", 5},
            {"snapshot_every", 5}}},
          {"protocol", {{"kind", "single-split"}, {"target_domain", 3}, {"meta_per_pair", 4}}},
          {"arms", {"sbdg", "erm"}},
          {"seeds", {1, 2}},
          {"output_dir", "runs"}};
}

std::vector<fs::path> run_dirs(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() == "metrics.json") out.push_back(e.path().parent_path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("generate writes a csv and a manifest, reproducibly") {
  Sandbox box;
  box.write("spec.json", spec_json());
  auto r = box.run("generate --spec " + (box / "spec.json").string() + " --out " + (box / "a.csv").string());
  REQUIRE(r.code == 0);
  CHECK(fs::exists(box / "a.csv"));
  REQUIRE(fs::exists(box / "a.manifest.json"));
  const auto manifest = nlohmann::json::parse(slurp(box / "a.manifest.json"));
  CHECK(manifest.at("seed") == 5);
  CHECK(manifest.at("num_domains") == 4);
  CHECK(manifest.at("input_dim") == 4);
  CHECK(manifest.at("counts")[0][1] == 5);
  CHECK(manifest.contains("profile"));

  REQUIRE(box.run("generate --spec " + (box / "spec.json").string() + " --out " + (box / "b.csv").string()).code == 0);
  CHECK(slurp(box / "a.csv") == slurp(box / "b.csv"));
  REQUIRE(box.run("generate --spec " + (box / "spec.json").string() + " --out " + (box / "c.csv").string() +
                  " --seed 6")
              .code == 0);
  CHECK(slurp(box / "a.csv") != slurp(box / "c.csv"));
}

TEST_CASE("generate without counts names the missing field") {
  Sandbox box;
  auto spec = spec_json();
  spec["profile"].erase("majority");
  spec["profile"].erase("minority");
  box.write("spec.json", spec);
  const auto r = box.run("generate --spec " + (box / "spec.json").string() + " --out " + (box / "a.csv").string());
  CHECK(r.code == 1);
  CHECK(r.err.find("profile.counts") != std::string::npos);
  CHECK_FALSE(fs::exists(box / "a.csv"));

  spec.erase("profile");
  box.write("spec.json", spec);
  CHECK(box.run("generate --spec " + (box / "spec.json").string() + " --out " + (box / "a.csv").string())
            .err.find("profile.counts") != std::string::npos);
}

TEST_CASE("train writes one directory per arm and seed") {
  Sandbox box;
  box.write("config.json", config_json());
  const auto r = box.run("train --config " + (box / "config.json").string());
  REQUIRE(r.code == 0);
  const auto dirs = run_dirs(box / "runs");
  REQUIRE(dirs.size() == 4);
  for (const auto& d : dirs) {
    for (const char* f : {"config.json", "history.csv", "snapshots.csv", "theta.json", "metrics.json"})
      CHECK(fs::exists(d / f));
    const auto m = nlohmann::json::parse(slurp(d / "metrics.json"));
    CHECK(m.at("target_domain") == 3);
    CHECK(fs::exists(d / "psi.json") == (m.at("arm") == "sbdg"));
  }
  CHECK(fs::exists(box / "runs" / "runs.json"));
  // history: header plus one row per iteration
  std::ifstream h(dirs.front() / "history.csv");
  int lines = 0;
  for (std::string line; std::getline(h, line);) ++lines;
  CHECK(lines == 21);
}

TEST_CASE("flags override file values") {
  Sandbox box;
  box.write("config.json", config_json());
  const auto r = box.run("train --config " + (box / "config.json").string() + " --out " + (box / "o").string() +
                         " --arms sbdg-no-domain-vector --seeds 3 --iterations 7 --quiet");
  REQUIRE(r.code == 0);
  const auto dir = run_directory(box / "o", 3, Arm::SbdgNoDomainVector, 3);
  REQUIRE(fs::exists(dir / "config.json"));
  const auto frozen = nlohmann::json::parse(slurp(dir / "config.json"));
  CHECK(frozen.at("train").at("iterations") == 7);
  CHECK(frozen.at("arms") == nlohmann::json::array({"sbdg-no-domain-vector"}));
  const auto psi = nlohmann::json::parse(slurp(dir / "psi.json"));
  CHECK(psi.at("entries")[0].at("shape")[0] == 1);  // loss-only input
  CHECK_FALSE(fs::exists(box / "runs"));
}

TEST_CASE("a run re-executed from its frozen config is bit-identical") {
  Sandbox box;
  box.write("config.json", config_json());
  REQUIRE(box.run("train --config " + (box / "config.json").string() + " --quiet").code == 0);
  const auto dir = run_directory(box / "runs", 3, Arm::Sbdg, 2);
  REQUIRE(box.run("train --config " + (dir / "config.json").string() + " --out " + (box / "again").string()).code ==
          0);
  const auto again = run_directory(box / "again", 3, Arm::Sbdg, 2);
  for (const char* f : {"config.json", "history.csv", "snapshots.csv", "theta.json", "psi.json", "metrics.json"})
    CHECK_MESSAGE(slurp(dir / f) == slurp(again / f), f);
}

TEST_CASE("training from a csv dataset") {
  Sandbox box;
  box.write("spec.json", spec_json());
  REQUIRE(box.run("generate --spec " + (box / "spec.json").string() + " --out " + (box / "d.csv").string()).code == 0);
  auto cfg = config_json();
  cfg["data"] = {{"csv", "d.csv"}};
  cfg["protocol"]["kind"] = "leave-one-domain-out";
  cfg["arms"] = {"erm"};
  cfg["seeds"] = {1};
  box.write("config.json", cfg);
  REQUIRE(box.run("train --config " + (box / "config.json").string() + " --quiet").code == 0);
  CHECK(run_dirs(box / "runs").size() == 4);

  cfg["data"] = {{"csv", "missing.csv"}};
  box.write("config.json", cfg);
  CHECK(box.run("train --config " + (box / "config.json").string()).code == 1);
}

TEST_CASE("config errors exit with 1, divergence with 2") {
  Sandbox box;
  auto cfg = config_json();
  cfg["train"]["alpah"] = 0.1;
  box.write("bad.json", cfg);
  auto r = box.run("train --config " + (box / "bad.json").string());
  CHECK(r.code == 1);
  CHECK(r.err.find("alpah") != std::string::npos);

  cfg = config_json();
  cfg["arms"] = nlohmann::json::array();
  box.write("bad.json", cfg);
  CHECK(box.run("train --config " + (box / "bad.json").string()).code == 1);

  box.write("config.json", config_json());
  r = box.run("train --config " + (box / "config.json").string() + " --alpha 1e300 --seeds 1 --arms erm");
  CHECK(r.code == 2);
  CHECK(r.err.find("erm seed 1") != std::string::npos);
  CHECK(box.run("frobnicate").code == 1);
}

TEST_CASE("report aggregates runs into tables") {
  Sandbox box;
  auto cfg = config_json();
  cfg["arms"] = {"sbdg", "erm", "sbdg-no-domain-vector"};
  box.write("config.json", cfg);
  REQUIRE(box.run("train --config " + (box / "config.json").string() + " --quiet").code == 0);
  const auto r = box.run("report --runs " + (box / "runs").string() + " --out " + (box / "report.txt").string());
  REQUIRE(r.code == 0);
  const std::string text = slurp(box / "report.txt");
  CHECK(text == r.out);
  CHECK(text.find("target 3") != std::string::npos);
  CHECK(text.find("Domain-vector ablation") != std::string::npos);
  const auto j = nlohmann::json::parse(slurp(box / "report.txt.json"));

  const auto report = collect_runs(box / "runs");
  for (const char* arm : {"sbdg", "erm"}) {
    std::vector<double> acc;
    for (const auto& m : report.metrics.at(arm).at(3)) acc.push_back(m.overall_accuracy);
    REQUIRE(acc.size() == 2);
    CHECK(j["arms"][arm]["targets"]["3"]["accuracy"]["mean"].get<double>() ==
          doctest::Approx((acc[0] + acc[1]) / 2.0));
    CHECK(j["arms"][arm]["average"].get<double>() == doctest::Approx((acc[0] + acc[1]) / 2.0));
  }
  CHECK(j.contains("ablation"));

  fs::create_directories(box / "empty");
  CHECK(box.run("report --runs " + (box / "empty").string() + " --out " + (box / "r.txt").string()).code == 1);
}

TEST_CASE("aggregate arithmetic") {
  const auto a = aggregate({0.7, 0.8});
  CHECK(a.mean == doctest::Approx(0.75));
  CHECK(a.stddev == doctest::Approx(std::sqrt(0.005)));
  CHECK(a.runs == 2);
  CHECK(aggregate({0.4}).stddev == 0.0);
}

TEST_CASE("gradcheck lists every op and fails on a corrupted rule") {
  Sandbox box;
  auto r = box.run("gradcheck --seed 2");
  CHECK(r.code == 0);
  for (const char* op : {"matmul", "add_bias", "relu", "sigmoid", "softmax_xent_per_sample", "concat", "sum", "mean",
                         "weighted_sum", "mlp_cross_entropy", "reweight_net", "meta_gradient"})
    CHECK_MESSAGE(r.out.find(op) != std::string::npos, op);
  r = box.run("gradcheck --corrupt-op sigmoid");
  CHECK(r.code != 0);
  CHECK(r.out.find("FAIL") != std::string::npos);
  CHECK(box.run("gradcheck --help").out.find("corrupt") == std::string::npos);
}
