#ifndef SBDG_DATA_HPP
#define SBDG_DATA_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sbdg/batch.hpp"

namespace sbdg {

using CountMatrix = Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// One labelled record. `origin_domain` and `record_id` identify the source
/// record in the dataset it was generated or loaded into, and survive
/// re-indexing of `domain` and over-sampling.
struct Sample {
  VectorD features;
  int label = 0;
  int domain = 0;
  int origin_domain = 0;
  long record_id = 0;
};

/// Source domains D^1..D^K, each a list of samples over C classes.
class MultiDomainDataset {
 public:
  MultiDomainDataset() = default;
  MultiDomainDataset(int num_domains, int num_classes, int input_dim);

  int num_domains() const noexcept { return static_cast<int>(domains_.size()); }
  int num_classes() const noexcept { return num_classes_; }
  int input_dim() const noexcept { return input_dim_; }

  /// Appends to domain `s.domain`; validates indices and feature width.
  void add(Sample s);

  const std::vector<Sample>& domain(int k) const { return domains_.at(k); }
  const std::vector<std::vector<Sample>>& domains() const noexcept { return domains_; }

  /// N^k_c, K x C.
  CountMatrix counts() const;
  std::size_t total() const noexcept;

  /// All samples in domain-major order.
  std::vector<const Sample*> all() const;

  friend bool operator==(const MultiDomainDataset&, const MultiDomainDataset&);

 private:
  int num_classes_ = 0;
  int input_dim_ = 0;
  std::vector<std::vector<Sample>> domains_;
};

bool operator==(const Sample& a, const Sample& b);

/**
 * How many samples each (domain, class) cell receives, plus the geometry of
 * the synthetic generator. Either `counts` is given explicitly (K x C) or the
 * majority/minority law fills it: every cell gets `majority` except the
 * listed `minority_cells`, which get `minority`.
 */
struct ImbalanceProfile {
  std::optional<CountMatrix> counts;
  long majority = 0;
  long minority = 0;
  std::vector<std::pair<int, int>> minority_cells;  // (domain, class)

  double noise_scale = 1.0;       // std of the per-class Gaussian blob
  double class_separation = 3.0;  // std of the class-center draw
  double domain_shift = 0.5;      // magnitude of per-domain affine distortion
  std::uint64_t geometry_seed = 0;

  CountMatrix resolve(int num_domains, int num_classes) const;
};

nlohmann::json profile_to_json(const ImbalanceProfile& p);
/// Throws ConfigError naming the offending field.
ImbalanceProfile profile_from_json(const nlohmann::json& j);

/**
 * Gaussian blob per class around a center shared by all domains; domain k maps
 * every sample through its own fixed affine map x -> A_k x + t_k. Centers and
 * maps depend only on `profile.geometry_seed`; the noise draws on `seed`.
 */
MultiDomainDataset generate_synthetic(int num_domains, int num_classes, int input_dim, const ImbalanceProfile& profile,
                                      std::uint64_t seed);

/// Balanced meta set S^B and imbalanced training set S^I.
struct DatasetSplit {
  MultiDomainDataset balanced;
  MultiDomainDataset imbalanced;
};

/**
 * Builds S^B with exactly `per_pair` samples per (domain, class), drawn with
 * replacement whenever a cell has fewer records than `per_pair`.
 *
 * With `holdout_fraction` == 0, S^B is drawn from the whole dataset and S^I
 * is the whole dataset. With a positive fraction, each cell is shuffled and
 * round(fraction * n) records (at least one, and at least one left over when
 * n >= 2) are set aside as the meta pool; S^I keeps the rest and S^B is drawn
 * from the pool only.
 */
DatasetSplit split_meta(const MultiDomainDataset& ds, int per_pair, std::uint64_t seed,
                        double holdout_fraction = 0.0);

VectorD one_hot_domain(int k, int num_domains);

/// n_per_domain uniform draws with replacement from each domain, domain-major.
Batch sample_minibatch(const MultiDomainDataset& ds, int n_per_domain, std::mt19937_64& rng);

/// Every sample of `ds` as one batch.
Batch to_batch(const MultiDomainDataset& ds);

/// Drops `target` and renumbers remaining domains 0..K-2. Returns (sources, target).
std::pair<MultiDomainDataset, MultiDomainDataset> hold_out_domain(const MultiDomainDataset& ds, int target);

/// Header `domain,label,f0,f1,...`; values with 17 significant digits.
void write_csv(const MultiDomainDataset& ds, const std::filesystem::path& path);

/// Domain/class counts default to max index + 1 when not given.
MultiDomainDataset load_csv(const std::filesystem::path& path, std::optional<int> num_domains = std::nullopt,
                            std::optional<int> num_classes = std::nullopt);

nlohmann::json counts_to_json(const CountMatrix& counts);

}  // namespace sbdg

#endif  // SBDG_DATA_HPP
