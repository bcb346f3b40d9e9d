#include "sbdg/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

namespace sbdg {

MultiDomainDataset::MultiDomainDataset(int num_domains, int num_classes, int input_dim)
    : num_classes_(num_classes), input_dim_(input_dim), domains_(num_domains) {
  if (num_domains < 1) throw std::invalid_argument("dataset needs at least one domain");
  if (num_classes < 1) throw std::invalid_argument("dataset needs at least one class");
  if (input_dim < 1) throw std::invalid_argument("dataset needs input_dim >= 1");
}

void MultiDomainDataset::add(Sample s) {
  if (s.domain < 0 || s.domain >= num_domains())
    throw RangeError("domain " + std::to_string(s.domain) + " outside [0, " + std::to_string(num_domains()) + ")");
  if (s.label < 0 || s.label >= num_classes_)
    throw RangeError("label " + std::to_string(s.label) + " outside [0, " + std::to_string(num_classes_) + ")");
  if (s.features.size() != input_dim_)
    throw DimensionError("sample has " + std::to_string(s.features.size()) + " features, expected " +
                         std::to_string(input_dim_));
  domains_[s.domain].push_back(std::move(s));
}

CountMatrix MultiDomainDataset::counts() const {
  CountMatrix n = CountMatrix::Zero(num_domains(), num_classes_);
  for (const auto& d : domains_)
    for (const auto& s : d) ++n(s.domain, s.label);
  return n;
}

std::size_t MultiDomainDataset::total() const noexcept {
  std::size_t n = 0;
  for (const auto& d : domains_) n += d.size();
  return n;
}

std::vector<const Sample*> MultiDomainDataset::all() const {
  std::vector<const Sample*> out;
  out.reserve(total());
  for (const auto& d : domains_)
    for (const auto& s : d) out.push_back(&s);
  return out;
}

bool operator==(const Sample& a, const Sample& b) {
  return a.label == b.label && a.domain == b.domain && a.origin_domain == b.origin_domain &&
         a.record_id == b.record_id && a.features == b.features;
}

bool operator==(const MultiDomainDataset& a, const MultiDomainDataset& b) {
  return a.num_classes_ == b.num_classes_ && a.input_dim_ == b.input_dim_ && a.domains_ == b.domains_;
}

CountMatrix ImbalanceProfile::resolve(int num_domains, int num_classes) const {
  CountMatrix out;
  if (counts) {
    if (counts->rows() != num_domains || counts->cols() != num_classes)
      throw ConfigError("profile.counts: expected " + std::to_string(num_domains) + "x" +
                        std::to_string(num_classes) + " matrix");
    out = *counts;
  } else {
    out = CountMatrix::Constant(num_domains, num_classes, majority);
    for (auto [k, c] : minority_cells) {
      if (k < 0 || k >= num_domains || c < 0 || c >= num_classes)
        throw ConfigError("profile.minority_cells: cell (" + std::to_string(k) + "," + std::to_string(c) +
                          ") out of range");
      out(k, c) = minority;
    }
  }
  if ((out.array() < 1).any()) throw ConfigError("profile: every (domain, class) count must be >= 1");
  return out;
}

nlohmann::json counts_to_json(const CountMatrix& counts) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index k = 0; k < counts.rows(); ++k) {
    std::vector<long> row(counts.row(k).data(), counts.row(k).data() + counts.cols());
    rows.push_back(row);
  }
  return rows;
}

nlohmann::json profile_to_json(const ImbalanceProfile& p) {
  nlohmann::json j = {{"noise_scale", p.noise_scale},
                      {"class_separation", p.class_separation},
                      {"domain_shift", p.domain_shift},
                      {"geometry_seed", p.geometry_seed}};
  if (p.counts) {
    j["counts"] = counts_to_json(*p.counts);
  } else {
    j["majority"] = p.majority;
    j["minority"] = p.minority;
    nlohmann::json cells = nlohmann::json::array();
    for (auto [k, c] : p.minority_cells) cells.push_back({k, c});
    j["minority_cells"] = cells;
  }
  return j;
}

ImbalanceProfile profile_from_json(const nlohmann::json& j) {
  ImbalanceProfile p;
  auto field = [&](const char* name) -> const nlohmann::json& {
    if (!j.contains(name)) throw ConfigError(std::string("profile.") + name + ": required field missing");
    return j.at(name);
  };
  try {
    if (!j.is_object()) throw ConfigError("profile: expected an object");
    if (j.contains("counts")) {
      const auto rows = j.at("counts").get<std::vector<std::vector<long>>>();
      if (rows.empty() || rows.front().empty()) throw ConfigError("profile.counts: empty matrix");
      CountMatrix m(rows.size(), rows.front().size());
      for (std::size_t k = 0; k < rows.size(); ++k) {
        if (rows[k].size() != rows.front().size()) throw ConfigError("profile.counts: ragged matrix");
        for (std::size_t c = 0; c < rows[k].size(); ++c) m(k, c) = rows[k][c];
      }
      p.counts = std::move(m);
    } else if (j.contains("majority") || j.contains("minority")) {
      p.majority = field("majority").get<long>();
      p.minority = field("minority").get<long>();
      if (j.contains("minority_cells"))
        for (const auto& cell : j.at("minority_cells")) p.minority_cells.emplace_back(cell.at(0), cell.at(1));
    } else {
      throw ConfigError("profile.counts: required field missing (give counts, or majority/minority)");
    }
    p.noise_scale = j.value("noise_scale", p.noise_scale);
    p.class_separation = j.value("class_separation", p.class_separation);
    p.domain_shift = j.value("domain_shift", p.domain_shift);
    p.geometry_seed = j.value("geometry_seed", p.geometry_seed);
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("profile: ") + ex.what());
  }
  return p;
}

MultiDomainDataset generate_synthetic(int num_domains, int num_classes, int input_dim, const ImbalanceProfile& profile,
                                      std::uint64_t seed) {
  if (num_domains < 2) throw ConfigError("generate: need at least 2 domains");
  if (num_classes < 2) throw ConfigError("generate: need at least 2 classes");
  if (input_dim < 1) throw ConfigError("generate: input_dim must be >= 1");
  const CountMatrix counts = profile.resolve(num_domains, num_classes);

  std::mt19937_64 geo(profile.geometry_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
    MatrixD m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
  };

  const MatrixD centers = profile.class_separation * gaussian(geo, num_classes, input_dim);
  std::vector<MatrixD> maps;
  std::vector<VectorD> shifts;
  for (int k = 0; k < num_domains; ++k) {
    MatrixD a = MatrixD::Identity(input_dim, input_dim) +
                (profile.domain_shift / std::sqrt(double(input_dim))) * gaussian(geo, input_dim, input_dim);
    maps.push_back(std::move(a));
    shifts.push_back(profile.domain_shift * profile.class_separation * gaussian(geo, input_dim, 1).col(0));
  }

  std::mt19937_64 rng(seed);
  MultiDomainDataset ds(num_domains, num_classes, input_dim);
  long id = 0;
  for (int k = 0; k < num_domains; ++k) {
    for (int c = 0; c < num_classes; ++c) {
      for (long i = 0; i < counts(k, c); ++i) {
        VectorD z = gaussian(rng, input_dim, 1).col(0);
        VectorD x = maps[k] * (centers.row(c).transpose() + profile.noise_scale * z) + shifts[k];
        ds.add(Sample{std::move(x), c, k, k, id++});
      }
    }
  }
  return ds;
}

DatasetSplit split_meta(const MultiDomainDataset& ds, int per_pair, std::uint64_t seed, double holdout_fraction) {
  if (per_pair < 1) throw std::invalid_argument("split_meta: per_pair must be >= 1");
  if (holdout_fraction < 0.0 || holdout_fraction >= 1.0)
    throw std::invalid_argument("split_meta: holdout_fraction must be in [0, 1)");
  const int K = ds.num_domains();
  const int C = ds.num_classes();
  std::mt19937_64 rng(seed);
  DatasetSplit split{MultiDomainDataset(K, C, ds.input_dim()), MultiDomainDataset(K, C, ds.input_dim())};

  for (int k = 0; k < K; ++k) {
    std::vector<std::vector<std::size_t>> cells(C);
    const auto& dom = ds.domain(k);
    for (std::size_t i = 0; i < dom.size(); ++i) cells[dom[i].label].push_back(i);

    std::vector<bool> in_pool(dom.size(), holdout_fraction == 0.0);
    for (int c = 0; c < C; ++c) {
      auto& idx = cells[c];
      if (idx.empty())
        throw std::invalid_argument("split_meta: empty cell (domain " + std::to_string(k) + ", class " +
                                    std::to_string(c) + ")");
      std::vector<std::size_t> pool = idx;
      if (holdout_fraction > 0.0) {
        std::shuffle(pool.begin(), pool.end(), rng);
        std::size_t h = static_cast<std::size_t>(std::lround(holdout_fraction * double(pool.size())));
        h = std::clamp<std::size_t>(h, 1, pool.size() > 1 ? pool.size() - 1 : 1);
        pool.resize(h);
        for (std::size_t i : pool) in_pool[i] = true;
      }
      // Over-sample: every pool record once, remainder uniformly with replacement.
      std::vector<std::size_t> chosen;
      if (pool.size() >= static_cast<std::size_t>(per_pair)) {
        std::shuffle(pool.begin(), pool.end(), rng);
        chosen.assign(pool.begin(), pool.begin() + per_pair);
      } else {
        chosen = pool;
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        while (chosen.size() < static_cast<std::size_t>(per_pair)) chosen.push_back(pool[pick(rng)]);
      }
      for (std::size_t i : chosen) split.balanced.add(dom[i]);
    }
    for (std::size_t i = 0; i < dom.size(); ++i) {
      // A singleton cell's lone record stays in S^I as well.
      const bool singleton = cells[dom[i].label].size() == 1;
      if (holdout_fraction == 0.0 || !in_pool[i] || singleton) split.imbalanced.add(dom[i]);
    }
  }
  return split;
}

VectorD one_hot_domain(int k, int num_domains) {
  if (k < 0 || k >= num_domains)
    throw RangeError("one_hot_domain: " + std::to_string(k) + " outside [0, " + std::to_string(num_domains) + ")");
  VectorD v = VectorD::Zero(num_domains);
  v(k) = 1.0;
  return v;
}

namespace {

Batch make_batch(const std::vector<const Sample*>& rows, int num_domains, int input_dim) {
  Batch b;
  const auto n = static_cast<Eigen::Index>(rows.size());
  b.x.resize(n, input_dim);
  b.domain_onehot = MatrixD::Zero(n, num_domains);
  b.labels.reserve(n);
  b.domains.reserve(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Sample& s = *rows[i];
    b.x.row(i) = s.features.transpose();
    b.labels.push_back(s.label);
    b.domains.push_back(s.domain);
    b.domain_onehot(i, s.domain) = 1.0;
  }
  return b;
}

}  // namespace

Batch sample_minibatch(const MultiDomainDataset& ds, int n_per_domain, std::mt19937_64& rng) {
  if (n_per_domain < 1) throw std::invalid_argument("sample_minibatch: n_per_domain must be >= 1");
  std::vector<const Sample*> rows;
  rows.reserve(std::size_t(n_per_domain) * ds.num_domains());
  for (int k = 0; k < ds.num_domains(); ++k) {
    const auto& dom = ds.domain(k);
    if (dom.empty()) throw std::invalid_argument("sample_minibatch: domain " + std::to_string(k) + " is empty");
    std::uniform_int_distribution<std::size_t> pick(0, dom.size() - 1);
    for (int i = 0; i < n_per_domain; ++i) rows.push_back(&dom[pick(rng)]);
  }
  return make_batch(rows, ds.num_domains(), ds.input_dim());
}

Batch to_batch(const MultiDomainDataset& ds) { return make_batch(ds.all(), ds.num_domains(), ds.input_dim()); }

std::pair<MultiDomainDataset, MultiDomainDataset> hold_out_domain(const MultiDomainDataset& ds, int target) {
  const int K = ds.num_domains();
  if (target < 0 || target >= K) throw RangeError("hold_out_domain: target " + std::to_string(target) + " out of range");
  if (K < 2) throw std::invalid_argument("hold_out_domain: need at least two domains");
  MultiDomainDataset sources(K - 1, ds.num_classes(), ds.input_dim());
  MultiDomainDataset held(1, ds.num_classes(), ds.input_dim());
  for (int k = 0; k < K; ++k) {
    for (Sample s : ds.domain(k)) {
      if (k == target) {
        s.domain = 0;
        held.add(std::move(s));
      } else {
        s.domain = k < target ? k : k - 1;
        sources.add(std::move(s));
      }
    }
  }
  return {std::move(sources), std::move(held)};
}

void write_csv(const MultiDomainDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "domain,label";
  for (int f = 0; f < ds.input_dim(); ++f) out << ",f" << f;
  out << '\n';
  char buf[40];
  for (const Sample* s : ds.all()) {
    out << s->domain << ',' << s->label;
    for (Eigen::Index f = 0; f < s->features.size(); ++f) {
      std::snprintf(buf, sizeof buf, "%.17g", s->features(f));
      out << ',' << buf;
    }
    out << '\n';
  }
}

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view field, std::size_t line_no, const char* what) {
  while (!field.empty() && field.front() == ' ') field.remove_prefix(1);
  while (!field.empty() && field.back() == ' ') field.remove_suffix(1);
  T value{};
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size() || field.empty())
    throw ParseError(std::string("non-numeric ") + what + " '" + std::string(field) + "'", line_no);
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(value)) throw ParseError(std::string("non-finite ") + what, line_no);
  }
  return value;
}

}  // namespace

MultiDomainDataset load_csv(const std::filesystem::path& path, std::optional<int> num_domains,
                            std::optional<int> num_classes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());

  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_fields(line);
  if (header.size() < 3 || header[0] != "domain" || header[1] != "label")
    throw ParseError("header must be 'domain,label,f0,f1,...'", 1);
  for (std::size_t f = 2; f < header.size(); ++f)
    if (header[f] != "f" + std::to_string(f - 2))
      throw ParseError("header column " + std::to_string(f + 1) + " should be f" + std::to_string(f - 2), 1);
  const int dim = static_cast<int>(header.size() - 2);

  struct Row {
    int domain;
    int label;
    VectorD x;
  };
  std::vector<Row> rows;
  int max_domain = -1;
  int max_label = -1;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != header.size())
      throw ParseError("ragged row: " + std::to_string(fields.size()) + " fields, header has " +
                       std::to_string(header.size()),
                       line_no);
    Row r{parse_number<int>(fields[0], line_no, "domain"), parse_number<int>(fields[1], line_no, "label"),
          VectorD(dim)};
    if (r.domain < 0 || (num_domains && r.domain >= *num_domains))
      throw ParseError("domain " + std::to_string(r.domain) + " out of range", line_no);
    if (r.label < 0 || (num_classes && r.label >= *num_classes))
      throw ParseError("label " + std::to_string(r.label) + " out of range", line_no);
    for (int f = 0; f < dim; ++f) r.x(f) = parse_number<double>(fields[f + 2], line_no, "feature");
    max_domain = std::max(max_domain, r.domain);
    max_label = std::max(max_label, r.label);
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw ParseError(path.string() + ": no data rows");

  const int K = num_domains.value_or(max_domain + 1);
  const int C = num_classes.value_or(std::max(max_label + 1, 2));
  MultiDomainDataset ds(K, C, dim);
  long id = 0;
  for (auto& r : rows) ds.add(Sample{std::move(r.x), r.label, r.domain, r.domain, id++});
  return ds;
}

}  // namespace sbdg
