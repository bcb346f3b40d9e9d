#ifndef SBDG_PARAM_SET_HPP
#define SBDG_PARAM_SET_HPP

#include <Eigen/Core>

#include <algorithm>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sbdg/errors.hpp"

namespace sbdg {

/// Dense row-major matrix; the only tensor rank the library needs.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixD = Matrix<double>;
using VectorD = Vector<double>;

/**
 * Ordered collection of named tensors.
 *
 * Iteration order is insertion order, and flatten() concatenates the
 * row-major storage of each entry in that order. Two sets built with the same
 * names and shapes are interchangeable for every arithmetic helper below.
 */
template <typename Scalar>
class ParamSet {
 public:
  using MatrixType = Matrix<Scalar>;
  using VectorType = Vector<Scalar>;

  struct Entry {
    std::string name;
    MatrixType value;
  };

  void add(std::string name, MatrixType value) {
    if (contains(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    entries_.push_back({std::move(name), std::move(value)});
  }

  bool contains(std::string_view name) const { return find(name) != nullptr; }

  MatrixType& operator[](std::string_view name) {
    auto* e = find(name);
    if (!e) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
    return e->value;
  }
  const MatrixType& operator[](std::string_view name) const {
    return const_cast<ParamSet&>(*this)[name];
  }

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }
  std::size_t count() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  /// Total number of scalar coefficients.
  Eigen::Index size() const noexcept {
    Eigen::Index n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  /// Offset of `name` inside the flattened vector.
  Eigen::Index offset(std::string_view name) const {
    Eigen::Index off = 0;
    for (const auto& e : entries_) {
      if (e.name == name) return off;
      off += e.value.size();
    }
    throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  }

  VectorType flatten() const {
    VectorType flat(size());
    Eigen::Index off = 0;
    for (const auto& e : entries_) {
      flat.segment(off, e.value.size()) = Eigen::Map<const VectorType>(e.value.data(), e.value.size());
      off += e.value.size();
    }
    return flat;
  }

  /// Copy of this layout filled from `flat`.
  ParamSet unflatten(const Eigen::Ref<const VectorType>& flat) const {
    if (flat.size() != size())
      throw DimensionError("unflatten: expected " + std::to_string(size()) + " values, got " +
                           std::to_string(flat.size()));
    ParamSet out = *this;
    Eigen::Index off = 0;
    for (auto& e : out.entries_) {
      Eigen::Map<VectorType>(e.value.data(), e.value.size()) = flat.segment(off, e.value.size());
      off += e.value.size();
    }
    return out;
  }

  ParamSet zeros_like() const {
    ParamSet out = *this;
    for (auto& e : out.entries_) e.value.setZero();
    return out;
  }

  bool same_layout(const ParamSet& other) const noexcept {
    if (other.entries_.size() != entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& a = entries_[i];
      const auto& b = other.entries_[i];
      if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols())
        return false;
    }
    return true;
  }

  /// this += alpha * x
  ParamSet& axpy(Scalar alpha, const ParamSet& x) {
    require_layout(x, "axpy");
    for (std::size_t i = 0; i < entries_.size(); ++i) entries_[i].value += alpha * x.entries_[i].value;
    return *this;
  }

  bool all_finite() const noexcept {
    return std::all_of(entries_.begin(), entries_.end(),
                       [](const Entry& e) { return e.value.allFinite(); });
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (!a.same_layout(b)) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i)
      if (a.entries_[i].value != b.entries_[i].value) return false;
    return true;
  }

  void require_layout(const ParamSet& other, const char* what) const {
    if (!same_layout(other)) throw DimensionError(std::string(what) + ": parameter layouts differ");
  }

 private:
  Entry* find(std::string_view name) {
    for (auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }
  const Entry* find(std::string_view name) const { return const_cast<ParamSet*>(this)->find(name); }

  std::vector<Entry> entries_;
};

using ParamSetD = ParamSet<double>;

/// alpha * x + y
template <typename Scalar>
ParamSet<Scalar> axpy(Scalar alpha, const ParamSet<Scalar>& x, ParamSet<Scalar> y) {
  y.axpy(alpha, x);
  return y;
}

template <typename Scalar>
Scalar dot(const ParamSet<Scalar>& a, const ParamSet<Scalar>& b) {
  a.require_layout(b, "dot");
  Scalar s{0};
  for (std::size_t i = 0; i < a.entries().size(); ++i)
    s += a.entries()[i].value.cwiseProduct(b.entries()[i].value).sum();
  return s;
}

}  // namespace sbdg

#endif  // SBDG_PARAM_SET_HPP
