#include "sbdg/gradcheck.hpp"

#include <functional>
#include <random>

#include "sbdg/models.hpp"
#include "sbdg/trainer.hpp"

namespace sbdg {

namespace {

using Builder = std::function<ad::VarD(ad::TapeD&, const ad::ParamVars<double>&)>;

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  MatrixD normal(Eigen::Index r, Eigen::Index c, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, scale);
    MatrixD m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(gen_);
    return m;
  }
  MatrixD uniform(Eigen::Index r, Eigen::Index c, double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    MatrixD m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(gen_);
    return m;
  }
  /// Entries with |x| in [0.1, 2], random sign; keeps finite differences off ReLU kinks.
  MatrixD away_from_zero(Eigen::Index r, Eigen::Index c) {
    MatrixD m = uniform(r, c, 0.1, 2.0);
    std::bernoulli_distribution flip(0.5);
    for (Eigen::Index i = 0; i < m.size(); ++i)
      if (flip(gen_)) m.data()[i] = -m.data()[i];
    return m;
  }
  std::vector<int> labels(std::size_t n, int classes) {
    std::uniform_int_distribution<int> d(0, classes - 1);
    std::vector<int> out(n);
    for (auto& y : out) y = d(gen_);
    return out;
  }
  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

GradcheckEntry check(const std::string& name, const ParamSetD& point, const Builder& build,
                     const GradcheckOptions& opts) {
  ad::TapeD tape;
  if (opts.corrupt_op) tape.inject_fault(*opts.corrupt_op, opts.corrupt_factor);
  const auto vars = tape.track(point);
  const ParamSetD analytic = tape.backward(build(tape, vars));

  const auto f = [&](const ParamSetD& p) {
    ad::TapeD t;
    const auto v = t.track(p);
    return build(t, v).value()(0, 0);
  };
  const ParamSetD numeric = ad::finite_diff_grad(f, point, opts.step);
  return {name, ad::max_relative_error(analytic, numeric), opts.autodiff_threshold};
}

ParamSetD params(std::initializer_list<std::pair<const char*, MatrixD>> entries) {
  ParamSetD p;
  for (const auto& [name, value] : entries) p.add(name, value);
  return p;
}

}  // namespace

bool GradcheckReport::passed() const noexcept {
  for (const auto& e : entries)
    if (!e.passed()) return false;
  return true;
}

GradcheckReport check_autodiff(std::uint64_t seed, const GradcheckOptions& opts) {
  Rng rng(seed);
  GradcheckReport report;
  auto& out = report.entries;

  {
    const MatrixD r = rng.normal(3, 2);
    out.push_back(check("matmul", params({{"a", rng.normal(3, 4)}, {"b", rng.normal(4, 2)}}),
                        [r](ad::TapeD&, const auto& v) { return ad::weighted_sum(ad::matmul(v["a"], v["b"]), r); },
                        opts));
  }
  {
    const MatrixD r = rng.normal(4, 3);
    out.push_back(check("add_bias", params({{"x", rng.normal(4, 3)}, {"b", rng.normal(1, 3)}}),
                        [r](ad::TapeD&, const auto& v) { return ad::weighted_sum(ad::add_bias(v["x"], v["b"]), r); },
                        opts));
  }
  {
    const MatrixD r = rng.normal(3, 4);
    out.push_back(check("relu", params({{"x", rng.away_from_zero(3, 4)}}),
                        [r](ad::TapeD&, const auto& v) { return ad::weighted_sum(ad::relu(v["x"]), r); }, opts));
  }
  {
    const MatrixD r = rng.normal(3, 4);
    out.push_back(check("sigmoid", params({{"x", rng.normal(3, 4, 3.0)}}),
                        [r](ad::TapeD&, const auto& v) { return ad::weighted_sum(ad::sigmoid(v["x"]), r); }, opts));
  }
  {
    const auto labels = rng.labels(6, 5);
    const MatrixD w = rng.uniform(6, 1, 0.0, 1.0);
    out.push_back(check("softmax_xent_per_sample", params({{"logits", rng.normal(6, 5, 2.0)}}),
                        [labels, w](ad::TapeD&, const auto& v) {
                          return ad::weighted_sum(ad::softmax_xent_per_sample(v["logits"], std::span<const int>(labels)), w);
                        },
                        opts));
  }
  {
    const MatrixD r = rng.normal(3, 3);
    out.push_back(check("concat", params({{"a", rng.normal(3, 1)}, {"b", rng.normal(3, 2)}}),
                        [r](ad::TapeD&, const auto& v) { return ad::weighted_sum(ad::concat(v["a"], v["b"]), r); },
                        opts));
  }
  {
    const MatrixD r = rng.normal(2, 3);
    out.push_back(check("sum", params({{"x", rng.normal(2, 3)}}),
                        [r](ad::TapeD& t, const auto& v) {
                          return ad::sum(ad::mul(v["x"], t.constant(r)));
                        },
                        opts));
    out.push_back(check("mean", params({{"x", rng.normal(2, 3)}}),
                        [r](ad::TapeD& t, const auto& v) {
                          return ad::mean(ad::mul(v["x"], t.constant(r)));
                        },
                        opts));
  }
  {
    const MatrixD r = rng.normal(2, 3);
    out.push_back(check("weighted_sum", params({{"x", rng.normal(2, 3)}}),
                        [r](ad::TapeD&, const auto& v) { return ad::weighted_sum(v["x"], r); }, opts));
    out.push_back(check("add", params({{"a", rng.normal(2, 3)}, {"b", rng.normal(2, 3)}}),
                        [r](ad::TapeD&, const auto& v) { return ad::weighted_sum(v["a"] + v["b"], r); }, opts));
    out.push_back(check("mul", params({{"a", rng.normal(2, 3)}, {"b", rng.normal(2, 3)}}),
                        [r](ad::TapeD&, const auto& v) { return ad::weighted_sum(ad::mul(v["a"], v["b"]), r); },
                        opts));
    out.push_back(check("scale", params({{"x", rng.normal(2, 3)}}),
                        [r](ad::TapeD&, const auto& v) { return ad::weighted_sum(-1.7 * v["x"], r); }, opts));
  }
  {
    const TaskNetConfig net{5, {6, 4}, 3};
    ParamSetD theta = init_params(net, rng.engine()());
    for (const auto& e : theta)
      if (e.name.ends_with(".bias")) theta[e.name] = rng.normal(1, e.value.cols(), 0.1);
    const MatrixD x = rng.normal(7, 5);
    const auto labels = rng.labels(7, 3);
    out.push_back(check("mlp_cross_entropy", theta,
                        [&net, x, labels](ad::TapeD& t, const auto& v) {
                          return ad::mean(task_losses(v, t.constant(x), std::span<const int>(labels), net));
                        },
                        opts));
  }
  {
    const ReweightNetConfig net{3, 5, true};
    ParamSetD psi;
    psi.add(weight_name(0), rng.normal(4, 5));
    psi.add(bias_name(0), rng.normal(1, 5, 0.5));
    psi.add(weight_name(1), rng.normal(5, 1));
    psi.add(bias_name(1), rng.normal(1, 1, 0.5));
    const MatrixD losses = rng.uniform(6, 1, 0.05, 3.0);
    MatrixD domains = MatrixD::Zero(6, 3);
    for (int i = 0; i < 6; ++i) domains(i, i % 3) = 1.0;
    const MatrixD r = rng.normal(6, 1);
    out.push_back(check("reweight_net", psi,
                        [&net, losses, domains, r](ad::TapeD& t, const auto& v) {
                          return ad::weighted_sum(reweight_forward(v, t.constant(losses), domains, net), r);
                        },
                        opts));
  }
  return report;
}

GradcheckEntry check_meta_gradient(std::uint64_t seed, const GradcheckOptions& opts) {
  Rng rng(seed);
  constexpr int K = 2, C = 2, dim = 3, n = 8, m = 4;
  constexpr double alpha = 0.5;

  TrainConfig tc;
  tc.task_hidden = {4};
  tc.reweight_hidden = 6;
  const Networks nets = make_networks(tc, dim, C, K);

  auto make_batch = [&](int size) {
    Batch b;
    b.x = rng.normal(size, dim);
    b.labels = rng.labels(size, C);
    b.domain_onehot = MatrixD::Zero(size, K);
    for (int i = 0; i < size; ++i) {
      b.domains.push_back(i * K / size);
      b.domain_onehot(i, b.domains.back()) = 1.0;
    }
    return b;
  };
  const Batch batch_i = make_batch(n);
  const Batch batch_b = make_batch(m);

  ParamSetD theta = init_params(nets.task, rng.engine()());
  for (const auto& e : theta)
    if (e.name.ends_with(".bias")) theta[e.name] = rng.normal(1, e.value.cols(), 0.1);
  ParamSetD psi = init_params(nets.reweight, rng.engine()());
  for (const auto& e : psi)
    if (e.name.ends_with(".bias")) psi[e.name] = rng.normal(1, e.value.cols(), 0.5);

  const VirtualStep s1 = step1_virtual_update(theta, psi, batch_i, alpha, nets);
  const ParamSetD analytic = meta_gradient(s1, psi, batch_i, batch_b, alpha, nets).grad_psi;

  const VectorD losses = task_per_sample_losses(theta, batch_i, nets.task);
  const auto meta_loss = [&](const ParamSetD& p) {
    const VectorD w = reweight_forward(p, losses, batch_i.domain_onehot, nets.reweight);
    ad::TapeD tape;
    const auto vars = tape.track(theta);
    const auto l = task_losses(vars, tape.constant(batch_i.x), std::span<const int>(batch_i.labels), nets.task);
    const ParamSetD g = tape.backward(ad::weighted_sum(l, MatrixD(w)));
    const ParamSetD theta_hat = axpy(-alpha / n, g, theta);
    return task_per_sample_losses(theta_hat, batch_b, nets.task).mean();
  };
  const ParamSetD numeric = ad::finite_diff_grad(meta_loss, psi, opts.step);
  const double scale = std::max(analytic.flatten().cwiseAbs().maxCoeff(), 1e-12);
  return {"meta_gradient", ad::max_relative_error(analytic, numeric, 1e-3 * scale), opts.meta_threshold};
}

GradcheckReport run_gradcheck(std::uint64_t seed, const GradcheckOptions& opts) {
  GradcheckReport report = check_autodiff(seed, opts);
  report.entries.push_back(check_meta_gradient(seed, opts));
  return report;
}

}  // namespace sbdg
