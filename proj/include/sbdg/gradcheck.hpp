#ifndef SBDG_GRADCHECK_HPP
#define SBDG_GRADCHECK_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sbdg/autodiff.hpp"

namespace sbdg {

struct GradcheckOptions {
  double step = 1e-6;
  double autodiff_threshold = 1e-5;
  double meta_threshold = 1e-4;
  /// Mutation fixture: scale the backward rule of this op.
  std::optional<ad::Op> corrupt_op;
  double corrupt_factor = 1.01;
};

struct GradcheckEntry {
  std::string name;
  double max_relative_error = 0.0;
  double threshold = 0.0;
  bool passed() const noexcept { return max_relative_error < threshold; }
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  bool passed() const noexcept;
};

/// Autodiff op checks against central differences at points drawn from `seed`.
GradcheckReport check_autodiff(std::uint64_t seed, const GradcheckOptions& opts = {});

/**
 * Closed-form meta-gradient against finite differences of the meta loss
 * through the virtual update, on a K=2, C=2, 8-sample instance. The oracle
 * forms theta_hat from a plain backward pass of sum_i w_i L_i, not from
 * per-sample gradients.
 */
GradcheckEntry check_meta_gradient(std::uint64_t seed, const GradcheckOptions& opts = {});

/// Both of the above.
GradcheckReport run_gradcheck(std::uint64_t seed, const GradcheckOptions& opts = {});

}  // namespace sbdg

#endif  // SBDG_GRADCHECK_HPP
