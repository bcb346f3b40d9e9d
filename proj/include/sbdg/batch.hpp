#ifndef SBDG_BATCH_HPP
#define SBDG_BATCH_HPP

#include <vector>

#include "sbdg/param_set.hpp"

namespace sbdg {

/// A minibatch in network-ready form: one row per sample.
struct Batch {
  MatrixD x;               // n x input_dim
  std::vector<int> labels;
  std::vector<int> domains;
  MatrixD domain_onehot;   // n x K

  Eigen::Index size() const noexcept { return x.rows(); }
};

}  // namespace sbdg

#endif  // SBDG_BATCH_HPP
