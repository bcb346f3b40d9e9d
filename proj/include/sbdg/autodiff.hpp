#ifndef SBDG_AUTODIFF_HPP
#define SBDG_AUTODIFF_HPP

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sbdg/errors.hpp"
#include "sbdg/param_set.hpp"

namespace sbdg::ad {

enum class Op {
  Leaf,
  MatMul,
  AddBias,
  Relu,
  Sigmoid,
  SoftmaxXent,
  Concat,
  Sum,
  Mean,
  WeightedSum,
  Add,
  Mul,
  Scale,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::AddBias: return "add_bias";
    case Op::Relu: return "relu";
    case Op::Sigmoid: return "sigmoid";
    case Op::SoftmaxXent: return "softmax_xent_per_sample";
    case Op::Concat: return "concat";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::WeightedSum: return "weighted_sum";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
  }
  return "?";
}

template <typename Scalar>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while its tape lives.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const Matrix<Scalar>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

/// Parameter leaves registered from a ParamSet, looked up by name.
template <typename Scalar>
class ParamVars {
 public:
  void add(std::string name, Var<Scalar> v) { vars_.emplace_back(std::move(name), v); }
  Var<Scalar> operator[](std::string_view name) const {
    for (const auto& [n, v] : vars_)
      if (n == name) return v;
    throw std::out_of_range("no tracked parameter named '" + std::string(name) + "'");
  }

 private:
  std::vector<std::pair<std::string, Var<Scalar>>> vars_;
};

/**
 * Reverse-mode record of dense matrix operations.
 *
 * Nodes are appended in evaluation order, so the node vector is already a
 * topological order and backward() is a single reverse sweep. Only
 * first-order gradients are supported.
 */
template <typename Scalar>
class Tape {
 public:
  using MatrixType = Matrix<Scalar>;

  Var<Scalar> constant(MatrixType value) { return push(Op::Leaf, {-1, -1}, std::move(value)); }

  /// Tracked leaf; its gradient is reported by backward() under `name`.
  Var<Scalar> parameter(std::string name, MatrixType value) {
    for (int p : params_)
      if (nodes_[p].param == name) throw std::invalid_argument("parameter '" + name + "' already on tape");
    Var<Scalar> v = push(Op::Leaf, {-1, -1}, std::move(value));
    nodes_[v.id].param = std::move(name);
    params_.push_back(v.id);
    return v;
  }

  ParamVars<Scalar> track(const ParamSet<Scalar>& params) {
    ParamVars<Scalar> vars;
    for (const auto& e : params) vars.add(e.name, parameter(e.name, e.value));
    return vars;
  }

  const MatrixType& value(Var<Scalar> v) const { return node(v).value; }

  /// Adjoint from the most recent backward sweep (empty if unreached).
  const MatrixType& adjoint(Var<Scalar> v) const { return node(v).adjoint; }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient of a scalar output w.r.t. every tracked parameter.
  ParamSet<Scalar> backward(Var<Scalar> output) {
    if (value(output).size() != 1)
      throw DimensionError("backward: output must be scalar, got " + shape_str(value(output)));
    return backward(output, MatrixType::Ones(1, 1));
  }

  /// Vector-Jacobian product: gradient of <seed, output>.
  ParamSet<Scalar> backward(Var<Scalar> output, const MatrixType& seed) {
    sweep(output, seed);
    ParamSet<Scalar> grads;
    for (int p : params_) {
      const Node& n = nodes_[p];
      grads.add(n.param, n.adjoint.size() ? n.adjoint : MatrixType::Zero(n.value.rows(), n.value.cols()));
    }
    return grads;
  }

  /**
   * Row i holds the flattened gradient of losses(i) w.r.t. every tracked
   * parameter, in registration order.
   *
   * Requires a batch-separable graph: rows never mix before `losses`, and
   * parameters enter only as the right operand of matmul or as a bias.
   */
  MatrixType per_sample_jacobian(Var<Scalar> losses) {
    const MatrixType& lv = value(losses);
    if (lv.cols() != 1) throw DimensionError("per_sample_jacobian: losses must be n x 1, got " + shape_str(lv));
    const Eigen::Index n = lv.rows();
    sweep(losses, MatrixType::Ones(n, 1));

    Eigen::Index total = 0;
    for (int p : params_) total += nodes_[p].value.size();
    MatrixType jac = MatrixType::Zero(n, total);

    Eigen::Index off = 0;
    for (int p : params_) {
      const MatrixType& pv = nodes_[p].value;
      for (int c : consumers_[p]) {
        const Node& cn = nodes_[c];
        if (cn.adjoint.size() == 0) continue;
        if (cn.op == Op::MatMul && cn.inputs[1] == p && cn.inputs[0] != p) {
          const MatrixType& a = nodes_[cn.inputs[0]].value;
          if (a.rows() != n) throw DimensionError("per_sample_jacobian: batch size mismatch at matmul");
          for (Eigen::Index i = 0; i < n; ++i) {
            Eigen::Map<MatrixType> block(jac.row(i).data() + off, pv.rows(), pv.cols());
            block.noalias() += a.row(i).transpose() * cn.adjoint.row(i);
          }
        } else if (cn.op == Op::AddBias && cn.inputs[1] == p) {
          if (cn.adjoint.rows() != n) throw DimensionError("per_sample_jacobian: batch size mismatch at add_bias");
          jac.middleCols(off, pv.size()) += cn.adjoint;
        } else {
          throw std::logic_error(std::string("per_sample_jacobian: parameter '") + nodes_[p].param +
                                 "' consumed by " + op_name(cn.op) + ", graph is not batch-separable");
        }
      }
      off += pv.size();
    }
    return jac;
  }

  /// Scales the local backward rule of `op` by `factor`. Mutation testing only.
  void inject_fault(Op op, Scalar factor) {
    fault_op_ = op;
    fault_factor_ = factor;
  }

  Var<Scalar> push(Op op, std::array<int, 2> inputs, MatrixType value, MatrixType saved = {},
                   std::vector<int> labels = {}) {
    if (!value.allFinite())
      throw NumericError(std::string(op_name(op)) + ": non-finite value in " + shape_str(value) + " result");
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{op, inputs, std::move(value), std::move(saved), std::move(labels), {}, {}});
    consumers_.emplace_back();
    for (int in : inputs)
      if (in >= 0) consumers_[in].push_back(id);
    return Var<Scalar>{this, id};
  }

  static std::string shape_str(const MatrixType& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
  }

 private:
  struct Node {
    Op op;
    std::array<int, 2> inputs;
    MatrixType value;
    MatrixType saved;
    std::vector<int> labels;
    std::string param;
    MatrixType adjoint;
  };

  const Node& node(Var<Scalar> v) const {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw std::invalid_argument("variable does not belong to this tape");
    return nodes_[v.id];
  }

  void accumulate(int id, const MatrixType& contrib) {
    Node& n = nodes_[id];
    if (n.adjoint.size() == 0)
      n.adjoint = contrib;
    else
      n.adjoint += contrib;
  }

  void sweep(Var<Scalar> output, const MatrixType& seed) {
    const Node& out = node(output);
    if (seed.rows() != out.value.rows() || seed.cols() != out.value.cols())
      throw DimensionError("backward: seed " + shape_str(seed) + " does not match output " + shape_str(out.value));
    for (auto& n : nodes_) n.adjoint.resize(0, 0);
    nodes_[output.id].adjoint = seed;

    for (int id = output.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.adjoint.size() == 0 || n.op == Op::Leaf) continue;
      const MatrixType& g = n.adjoint;
      const Scalar k = (n.op == fault_op_) ? fault_factor_ : Scalar(1);
      const int a = n.inputs[0];
      const int b = n.inputs[1];
      switch (n.op) {
        case Op::MatMul:
          accumulate(a, k * (g * nodes_[b].value.transpose()));
          accumulate(b, k * (nodes_[a].value.transpose() * g));
          break;
        case Op::AddBias:
          accumulate(a, k * g);
          accumulate(b, k * g.colwise().sum());
          break;
        case Op::Relu:
          accumulate(a, k * (nodes_[a].value.array() > Scalar(0)).select(g.array(), Scalar(0)).matrix());
          break;
        case Op::Sigmoid:
          accumulate(a, k * (g.array() * n.value.array() * (Scalar(1) - n.value.array())).matrix());
          break;
        case Op::SoftmaxXent: {
          MatrixType d = n.saved;  // softmax probabilities
          for (Eigen::Index i = 0; i < d.rows(); ++i) d(i, n.labels[i]) -= Scalar(1);
          accumulate(a, k * (d.array().colwise() * g.col(0).array()).matrix());
          break;
        }
        case Op::Concat: {
          const Eigen::Index p = nodes_[a].value.cols();
          accumulate(a, k * g.leftCols(p));
          accumulate(b, k * g.rightCols(g.cols() - p));
          break;
        }
        case Op::Sum:
          accumulate(a, MatrixType::Constant(nodes_[a].value.rows(), nodes_[a].value.cols(), k * g(0, 0)));
          break;
        case Op::Mean: {
          const auto& av = nodes_[a].value;
          accumulate(a, MatrixType::Constant(av.rows(), av.cols(), k * g(0, 0) / Scalar(av.size())));
          break;
        }
        case Op::WeightedSum:
          accumulate(a, k * g(0, 0) * n.saved);
          break;
        case Op::Add:
          accumulate(a, k * g);
          accumulate(b, k * g);
          break;
        case Op::Mul:
          accumulate(a, k * g.cwiseProduct(nodes_[b].value));
          accumulate(b, k * g.cwiseProduct(nodes_[a].value));
          break;
        case Op::Scale:
          accumulate(a, k * n.saved(0, 0) * g);
          break;
        case Op::Leaf: break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<int>> consumers_;
  std::vector<int> params_;
  Op fault_op_ = Op::Leaf;
  Scalar fault_factor_ = Scalar(1);
};

using TapeD = Tape<double>;
using VarD = Var<double>;

namespace detail {
template <typename Scalar>
Tape<Scalar>& same_tape(Var<Scalar> a, Var<Scalar> b) {
  if (a.tape == nullptr || a.tape != b.tape) throw std::invalid_argument("operands live on different tapes");
  return *a.tape;
}
}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  auto& t = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows())
    throw DimensionError("matmul: " + t.shape_str(av) + " by " + t.shape_str(bv));
  return t.push(Op::MatMul, {a.id, b.id}, av * bv);
}

/// Row-wise broadcast of a 1 x h bias.
template <typename Scalar>
Var<Scalar> add_bias(Var<Scalar> x, Var<Scalar> b) {
  auto& t = detail::same_tape(x, b);
  const auto& xv = x.value();
  const auto& bv = b.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols())
    throw DimensionError("add_bias: bias " + t.shape_str(bv) + " for input " + t.shape_str(xv));
  Matrix<Scalar> out = xv.rowwise() + bv.row(0);
  return t.push(Op::AddBias, {x.id, b.id}, std::move(out));
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> x) {
  return x.tape->push(Op::Relu, {x.id, -1}, x.value().cwiseMax(Scalar(0)));
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar v) {
  if (v >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-v));
  const Scalar e = std::exp(v);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> x) {
  Matrix<Scalar> out = x.value().unaryExpr([](Scalar v) { return stable_sigmoid(v); });
  return x.tape->push(Op::Sigmoid, {x.id, -1}, std::move(out));
}

/// Per-row -log softmax(logits)[label]; returns n x 1.
template <typename Scalar>
Var<Scalar> softmax_xent_per_sample(Var<Scalar> logits, std::span<const int> labels) {
  const auto& z = logits.value();
  if (static_cast<Eigen::Index>(labels.size()) != z.rows())
    throw DimensionError("softmax_xent_per_sample: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(z.rows()) + " rows");
  Matrix<Scalar> probs(z.rows(), z.cols());
  Matrix<Scalar> loss(z.rows(), 1);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= z.cols())
      throw RangeError("softmax_xent_per_sample: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(z.cols()) + ")");
    const Scalar mx = z.row(i).maxCoeff();
    const auto shifted = (z.row(i).array() - mx).eval();
    const Scalar lse = std::log(shifted.exp().sum());
    probs.row(i) = (shifted - lse).exp().matrix();
    loss(i, 0) = lse - shifted(y);
  }
  return logits.tape->push(Op::SoftmaxXent, {logits.id, -1}, std::move(loss), std::move(probs),
                           std::vector<int>(labels.begin(), labels.end()));
}

/// Column-wise concatenation [a | b].
template <typename Scalar>
Var<Scalar> concat(Var<Scalar> a, Var<Scalar> b) {
  auto& t = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rows() != bv.rows()) throw DimensionError("concat: " + t.shape_str(av) + " with " + t.shape_str(bv));
  Matrix<Scalar> out(av.rows(), av.cols() + bv.cols());
  out << av, bv;
  return t.push(Op::Concat, {a.id, b.id}, std::move(out));
}

/// Inverse of concat on plain matrices.
template <typename Scalar>
std::pair<Matrix<Scalar>, Matrix<Scalar>> split_cols(const Matrix<Scalar>& m, Eigen::Index left) {
  if (left < 0 || left > m.cols()) throw DimensionError("split_cols: split point out of range");
  return {m.leftCols(left), m.rightCols(m.cols() - left)};
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> x) {
  return x.tape->push(Op::Sum, {x.id, -1}, Matrix<Scalar>::Constant(1, 1, x.value().sum()));
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> x) {
  if (x.value().size() == 0) throw DimensionError("mean: empty input");
  return x.tape->push(Op::Mean, {x.id, -1}, Matrix<Scalar>::Constant(1, 1, x.value().mean()));
}

/// sum_ij w_ij x_ij with constant weights.
template <typename Scalar>
Var<Scalar> weighted_sum(Var<Scalar> x, const Matrix<Scalar>& w) {
  const auto& xv = x.value();
  if (w.rows() != xv.rows() || w.cols() != xv.cols())
    throw DimensionError("weighted_sum: weights " + x.tape->shape_str(w) + " for " + x.tape->shape_str(xv));
  return x.tape->push(Op::WeightedSum, {x.id, -1}, Matrix<Scalar>::Constant(1, 1, xv.cwiseProduct(w).sum()), w);
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
  auto& t = detail::same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("add: " + t.shape_str(a.value()) + " with " + t.shape_str(b.value()));
  return t.push(Op::Add, {a.id, b.id}, a.value() + b.value());
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  auto& t = detail::same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("mul: " + t.shape_str(a.value()) + " with " + t.shape_str(b.value()));
  return t.push(Op::Mul, {a.id, b.id}, a.value().cwiseProduct(b.value()));
}

template <typename Scalar>
Var<Scalar> operator*(Scalar s, Var<Scalar> x) {
  return x.tape->push(Op::Scale, {x.id, -1}, s * x.value(), Matrix<Scalar>::Constant(1, 1, s));
}

/**
 * Central-difference gradient of `f` at `p`, one coordinate at a time.
 * `f` maps a ParamSet with the layout of `p` to a scalar.
 */
template <typename Scalar, typename F>
ParamSet<Scalar> finite_diff_grad(F&& f, const ParamSet<Scalar>& p, Scalar step) {
  if (!(step > Scalar(0))) throw std::invalid_argument("finite_diff_grad: step must be positive");
  Vector<Scalar> x = p.flatten();
  Vector<Scalar> g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const Scalar orig = x(i);
    x(i) = orig + step;
    const Scalar fp = f(p.unflatten(x));
    x(i) = orig - step;
    const Scalar fm = f(p.unflatten(x));
    x(i) = orig;
    g(i) = (fp - fm) / (Scalar(2) * step);
  }
  return p.unflatten(g);
}

/// Largest |a-b| / max(|a|, |b|, floor) over all coordinates.
template <typename Scalar>
Scalar max_relative_error(const Eigen::Ref<const Vector<Scalar>>& a, const Eigen::Ref<const Vector<Scalar>>& b,
                          Scalar floor = Scalar(1e-3)) {
  if (a.size() != b.size()) throw DimensionError("max_relative_error: size mismatch");
  Scalar worst{0};
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const Scalar denom = std::max({std::abs(a(i)), std::abs(b(i)), floor});
    worst = std::max(worst, std::abs(a(i) - b(i)) / denom);
  }
  return worst;
}

template <typename Scalar>
Scalar max_relative_error(const ParamSet<Scalar>& a, const ParamSet<Scalar>& b, Scalar floor = Scalar(1e-3)) {
  a.require_layout(b, "max_relative_error");
  return max_relative_error<Scalar>(a.flatten(), b.flatten(), floor);
}

}  // namespace sbdg::ad

#endif  // SBDG_AUTODIFF_HPP
