#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "sbdg/autodiff.hpp"
#include "sbdg/gradcheck.hpp"

using namespace sbdg;
using ad::TapeD;

namespace {

MatrixD mat(std::initializer_list<std::initializer_list<double>> rows) {
  MatrixD m(rows.size(), rows.begin()->size());
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

MatrixD random(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> d;
  MatrixD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(gen);
  return m;
}

}  // namespace

TEST_CASE("matmul forward") {
  TapeD t;
  CHECK(ad::matmul(t.constant(mat({{1, 0}, {0, 1}})), t.constant(mat({{2, 3}, {4, 5}}))).value() ==
        mat({{2, 3}, {4, 5}}));
  CHECK(ad::matmul(t.constant(mat({{1, 2}})), t.constant(mat({{3}, {4}}))).value()(0, 0) == 11.0);
  CHECK_THROWS_AS(ad::matmul(t.constant(MatrixD::Ones(2, 3)), t.constant(MatrixD::Ones(2, 3))), DimensionError);
}

TEST_CASE("matmul gradient of sum is ones * b^T, and matches finite differences") {
  const MatrixD a = random(3, 4, 1);
  const MatrixD b = random(4, 2, 2);
  TapeD t;
  auto av = t.parameter("a", a);
  auto bv = t.parameter("b", b);
  const ParamSetD g = t.backward(ad::sum(ad::matmul(av, bv)));
  const MatrixD expected = MatrixD::Ones(3, 2) * b.transpose();
  CHECK((g["a"] - expected).cwiseAbs().maxCoeff() < 1e-14);

  ParamSetD p;
  p.add("a", a);
  p.add("b", b);
  const auto f = [](const ParamSetD& q) {
    TapeD tt;
    auto v = tt.track(q);
    return ad::sum(ad::matmul(v["a"], v["b"])).value()(0, 0);
  };
  CHECK(ad::max_relative_error(g, ad::finite_diff_grad(f, p, 1e-6)) < 1e-6);
}

TEST_CASE("add_bias broadcasts and sums bias gradient over rows") {
  TapeD t;
  auto out = ad::add_bias(t.constant(MatrixD::Zero(2, 3)), t.constant(mat({{1, 2, 3}})));
  CHECK(out.value() == mat({{1, 2, 3}, {1, 2, 3}}));

  TapeD t2;
  auto x = t2.constant(random(4, 3, 3));
  auto b = t2.parameter("b", MatrixD::Zero(1, 3));
  CHECK(t2.backward(ad::sum(ad::add_bias(x, b)))["b"] == mat({{4, 4, 4}}));
  CHECK_THROWS_AS(ad::add_bias(x, t2.constant(MatrixD::Zero(1, 2))), DimensionError);
}

TEST_CASE("relu values and mask") {
  TapeD t;
  auto x = t.parameter("x", mat({{-1, 0, 2}}));
  auto y = ad::relu(x);
  CHECK(y.value() == mat({{0, 0, 2}}));
  CHECK(t.backward(ad::sum(y))["x"] == mat({{0, 0, 1}}));
}

TEST_CASE("sigmoid is stable and bounded") {
  TapeD t;
  CHECK(ad::sigmoid(t.constant(mat({{0}}))).value()(0, 0) == 0.5);
  const double s50 = ad::sigmoid(t.constant(mat({{50}}))).value()(0, 0);
  CHECK(s50 > 1.0 - 1e-9);
  CHECK(s50 <= 1.0);
  const MatrixD extreme = ad::sigmoid(t.constant(mat({{-1e6, -700, -30, 30, 700, 1e6}}))).value();
  CHECK(extreme.allFinite());
  CHECK((extreme.array() >= 0.0).all());
  CHECK((extreme.array() <= 1.0).all());
  const MatrixD moderate = ad::sigmoid(t.constant(mat({{-30, -5, 5, 30}}))).value();
  CHECK((moderate.array() > 0.0).all());
  CHECK((moderate.array() < 1.0).all());
}

TEST_CASE("softmax cross-entropy per sample") {
  TapeD t;
  const std::vector<int> y{3};
  CHECK(ad::softmax_xent_per_sample(t.constant(MatrixD::Zero(1, 5)), std::span<const int>(y)).value()(0, 0) ==
        doctest::Approx(std::log(5.0)).epsilon(1e-15));
  const std::vector<int> y0{0};
  const double confident = ad::softmax_xent_per_sample(t.constant(mat({{10, -10}})), std::span<const int>(y0)).value()(0, 0);
  CHECK(confident == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-12));
  CHECK(confident < 2.1e-9);
  const std::vector<int> bad{2};
  CHECK_THROWS_AS(ad::softmax_xent_per_sample(t.constant(mat({{1, 2}})), std::span<const int>(bad)), RangeError);
}

TEST_CASE("softmax cross-entropy is shift invariant") {
  const MatrixD z = random(6, 4, 9);
  const std::vector<int> y{0, 1, 2, 3, 0, 1};
  for (double c : {-100.0, -3.5, 0.25, 7.0, 250.0}) {
    TapeD t;
    const MatrixD a = ad::softmax_xent_per_sample(t.constant(z), std::span<const int>(y)).value();
    const MatrixD b =
        ad::softmax_xent_per_sample(t.constant((z.array() + c).matrix()), std::span<const int>(y)).value();
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("concat joins columns and splits the adjoint") {
  TapeD t;
  auto a = t.parameter("a", mat({{1}}));
  auto b = t.parameter("b", mat({{2, 3}}));
  auto c = ad::concat(a, b);
  CHECK(c.value() == mat({{1, 2, 3}}));
  const ParamSetD g = t.backward(ad::sum(c));
  CHECK(g["a"] == mat({{1}}));
  CHECK(g["b"] == mat({{1, 1}}));
  const auto [l, r] = ad::split_cols(c.value(), 1);
  CHECK(l == a.value());
  CHECK(r == b.value());
  CHECK_THROWS_AS(ad::concat(a, t.constant(MatrixD::Zero(2, 1))), DimensionError);
}

TEST_CASE("backward basics") {
  TapeD t;
  auto x = t.parameter("x", mat({{3}}));
  CHECK(t.backward(ad::mul(x, x))["x"](0, 0) == 6.0);

  TapeD t2;
  auto y = t2.parameter("y", mat({{3}}));
  auto c = t2.constant(mat({{4}}));
  CHECK(t2.backward(c)["y"](0, 0) == 0.0);
  CHECK_THROWS_AS(t2.backward(t2.constant(MatrixD::Zero(2, 1))), DimensionError);
  (void)y;
}

TEST_CASE("non-finite values are an error") {
  TapeD t;
  MatrixD bad = mat({{1, 2}});
  bad(0, 1) = std::nan("");
  CHECK_THROWS_AS(t.constant(bad), NumericError);
  auto big = t.constant(mat({{1e308}}));
  CHECK_THROWS_AS(ad::mul(big, big), NumericError);
}

TEST_CASE("finite_diff_grad on linear and quadratic functions") {
  ParamSetD p;
  p.add("v", mat({{0.5, -1.25, 2.0}}));
  const MatrixD a = mat({{3, -2, 0.5}});
  const auto linear = [&](const ParamSetD& q) { return q["v"].cwiseProduct(a).sum(); };
  CHECK((ad::finite_diff_grad(linear, p, 1e-5)["v"] - a).cwiseAbs().maxCoeff() < 1e-10);
  const auto quad = [](const ParamSetD& q) { return q["v"].squaredNorm(); };
  CHECK((ad::finite_diff_grad(quad, p, 1e-5)["v"] - 2.0 * p["v"]).cwiseAbs().maxCoeff() < 1e-9);
  CHECK_THROWS(ad::finite_diff_grad(quad, p, 0.0));
}

TEST_CASE("every op matches finite differences for several seeds") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto report = check_autodiff(seed);
    for (const auto& e : report.entries) {
      INFO(e.name << " seed " << seed << " err " << e.max_relative_error);
      CHECK(e.passed());
    }
  }
}

TEST_CASE("finite differences agree across two step sizes") {
  GradcheckOptions coarse;
  coarse.step = 1e-5;
  const auto a = check_autodiff(11, coarse);
  const auto b = check_autodiff(11);
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    INFO(a.entries[i].name);
    CHECK(a.entries[i].passed());
    CHECK(b.entries[i].passed());
  }
}

TEST_CASE("a corrupted backward rule is caught") {
  GradcheckOptions opts;
  opts.corrupt_op = ad::Op::Sigmoid;
  const auto report = check_autodiff(3, opts);
  bool sigmoid_failed = false;
  for (const auto& e : report.entries)
    if (e.name == "sigmoid") sigmoid_failed = !e.passed();
  CHECK(sigmoid_failed);
  CHECK_FALSE(report.passed());
}

TEST_CASE("backward is deterministic and independent of branch insertion order") {
  const MatrixD x0 = random(4, 3, 5);
  const MatrixD w0 = random(3, 2, 6);
  auto run = [&](bool swap) {
    TapeD t;
    auto x = t.parameter("x", x0);
    auto w = t.parameter("w", w0);
    ad::VarD left, right;
    if (swap) {
      right = ad::sigmoid(ad::matmul(x, w));
      left = ad::relu(ad::matmul(x, w));
    } else {
      left = ad::relu(ad::matmul(x, w));
      right = ad::sigmoid(ad::matmul(x, w));
    }
    return t.backward(ad::sum(left + right));
  };
  const ParamSetD a = run(false);
  CHECK(a == run(false));
  CHECK(a == run(true));
}

TEST_CASE("per-sample Jacobian rows are the individual gradients") {
  const MatrixD x = random(5, 3, 21);
  const std::vector<int> y{0, 1, 1, 0, 1};
  ParamSetD p;
  p.add("w0", random(3, 4, 22));
  p.add("b0", random(1, 4, 23));
  p.add("w1", random(4, 2, 24));
  p.add("b1", random(1, 2, 25));
  auto losses_of = [&](TapeD& t, const ad::ParamVars<double>& v) {
    auto h = ad::relu(ad::add_bias(ad::matmul(t.constant(x), v["w0"]), v["b0"]));
    return ad::softmax_xent_per_sample(ad::add_bias(ad::matmul(h, v["w1"]), v["b1"]), std::span<const int>(y));
  };
  TapeD t;
  const MatrixD jac = t.per_sample_jacobian(losses_of(t, t.track(p)));
  REQUIRE(jac.rows() == 5);
  REQUIRE(jac.cols() == p.size());
  for (int i = 0; i < 5; ++i) {
    TapeD ti;
    auto l = losses_of(ti, ti.track(p));
    MatrixD seed = MatrixD::Zero(5, 1);
    seed(i, 0) = 1.0;
    const VectorD gi = ti.backward(l, seed).flatten();
    CHECK((jac.row(i).transpose() - gi).cwiseAbs().maxCoeff() < 1e-13);
  }
}

TEST_CASE("param set flatten round trip and axpy") {
  ParamSetD p;
  p.add("a", random(2, 3, 31));
  p.add("b", random(1, 4, 32));
  CHECK(p.unflatten(p.flatten()) == p);
  CHECK(p.size() == 10);
  CHECK(p.offset("b") == 6);
  ParamSetD q = p.zeros_like();
  q.axpy(2.0, p);
  CHECK((q.flatten() - 2.0 * p.flatten()).cwiseAbs().maxCoeff() == 0.0);
  ParamSetD other;
  other.add("a", random(2, 3, 1));
  CHECK_THROWS_AS(q.axpy(1.0, other), DimensionError);
  CHECK_THROWS_AS(p.unflatten(VectorD::Zero(3)), DimensionError);
}
