#pragma once

#include "felicia/core.hpp"
#include "felicia/data/dataset.hpp"

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <tuple>
#include <vector>

namespace felicia::data {

// Half-up rounding for non-negative counts.
inline std::size_t round_half_up(double x) {
  FELICIA_REQUIRE(x >= 0.0 && std::isfinite(x), "round_half_up: negative or non-finite value");
  return static_cast<std::size_t>(std::floor(x + 0.5));
}

// ---- PCA + 2-means ----------------------------------------------------------

struct PcaBasis {
  Vector mean;        // length = features
  Matrix components;  // features x 2, orthonormal columns, largest |loading| of each column positive

  [[nodiscard]] Matrix project(const Matrix& images) const {
    FELICIA_REQUIRE(images.cols() == mean.size(), "pca: feature count does not match basis");
    return (images.rowwise() - mean.transpose()) * components;
  }
};

inline PcaBasis fit_pca(const Matrix& images, int dims = 2) {
  FELICIA_REQUIRE(images.rows() >= 2, "pca: need at least two images");
  FELICIA_REQUIRE(dims >= 1 && dims <= images.cols(), "pca: bad component count");
  PcaBasis b;
  b.mean = images.colwise().mean().transpose();
  const Matrix centered = images.rowwise() - b.mean.transpose();
  const Matrix cov = (centered.transpose() * centered) / static_cast<double>(images.rows());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericalError("pca: eigendecomposition failed");
  const Vector values = eig.eigenvalues();
  const Eigen::Index n = values.size();
  if (!(values(n - 1) > 1e-12 * std::max(1.0, cov.trace())))
    throw InvalidArgument("pca: degenerate data (zero variance)");
  b.components.resize(images.cols(), dims);
  for (int k = 0; k < dims; ++k) {
    Vector v = eig.eigenvectors().col(n - 1 - k);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    b.components.col(k) = v;
  }
  return b;
}

struct ClusterSplit {
  PcaBasis basis;
  Matrix embedding;          // n x 2
  std::vector<int> assignments;  // 1 or 2 per image
  Matrix centroids;          // 2 x 2; row 0 is cluster 1
  int iterations = 0;

  // Nearest centroid in the embedding; ties go to cluster 1.
  [[nodiscard]] static int nearest(const Matrix& centroids, const Eigen::RowVectorXd& p) {
    const double d1 = (p - centroids.row(0)).squaredNorm();
    const double d2 = (p - centroids.row(1)).squaredNorm();
    return d2 < d1 ? 2 : 1;
  }

  [[nodiscard]] std::vector<int> assign(const Matrix& points) const {
    FELICIA_REQUIRE(points.cols() == centroids.cols(), "cluster split: point dimension != centroid dimension");
    std::vector<int> out(static_cast<std::size_t>(points.rows()));
    for (Eigen::Index i = 0; i < points.rows(); ++i) out[static_cast<std::size_t>(i)] = nearest(centroids, points.row(i));
    return out;
  }

  [[nodiscard]] std::vector<std::size_t> members(int cluster) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignments.size(); ++i)
      if (assignments[i] == cluster) out.push_back(i);
    return out;
  }
};

namespace detail {

inline double within_ss(const Matrix& x, const std::vector<int>& a, const Matrix& c) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) s += (x.row(i) - c.row(a[static_cast<std::size_t>(i)] - 1)).squaredNorm();
  return s;
}

inline Matrix cluster_means(const Matrix& x, const std::vector<int>& a, const Matrix& fallback) {
  Matrix c = Matrix::Zero(2, x.cols());
  std::array<double, 2> n{0.0, 0.0};
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const int k = a[static_cast<std::size_t>(i)] - 1;
    c.row(k) += x.row(i);
    n[static_cast<std::size_t>(k)] += 1.0;
  }
  for (int k = 0; k < 2; ++k) {
    if (n[static_cast<std::size_t>(k)] > 0) c.row(k) /= n[static_cast<std::size_t>(k)];
    else c.row(k) = fallback.row(k);
  }
  return c;
}

}  // namespace detail

// 2-means on the first two principal components. Lloyd iterations start from
// the extreme points along PC1, then single-point (Hartigan) moves are applied
// until none lowers the within-cluster sum of squares.
inline ClusterSplit pca_kmeans_split(const Matrix& images, std::uint64_t seed = 0, int max_iterations = 300,
                                     double tolerance = 1e-6) {
  (void)seed;  // the procedure is deterministic; the seed is kept for the partition record
  ClusterSplit out;
  out.basis = fit_pca(images, 2);
  out.embedding = out.basis.project(images);
  const Matrix& x = out.embedding;
  const auto n = static_cast<std::size_t>(x.rows());

  // Canonical processing order: lexicographic in the embedding, so results do not depend on input order.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::tie(x(static_cast<Eigen::Index>(a), 0), x(static_cast<Eigen::Index>(a), 1)) <
           std::tie(x(static_cast<Eigen::Index>(b), 0), x(static_cast<Eigen::Index>(b), 1));
  });
  Matrix c(2, 2);
  c.row(0) = x.row(static_cast<Eigen::Index>(order.front()));
  c.row(1) = x.row(static_cast<Eigen::Index>(order.back()));
  if ((c.row(0) - c.row(1)).squaredNorm() == 0.0) throw InvalidArgument("kmeans: all embedded points coincide");

  std::vector<int> a(n, 1);
  int it = 0;
  for (; it < max_iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) a[i] = ClusterSplit::nearest(c, x.row(static_cast<Eigen::Index>(i)));
    const Matrix next = detail::cluster_means(x, a, c);
    const double shift = (next - c).rowwise().norm().maxCoeff();
    c = next;
    if (shift < tolerance) break;
  }
  for (std::size_t i = 0; i < n; ++i) a[i] = ClusterSplit::nearest(c, x.row(static_cast<Eigen::Index>(i)));
  c = detail::cluster_means(x, a, c);

  // Hartigan refinement: move a point when n_b/(n_b+1)|x-c_b|^2 < n_a/(n_a-1)|x-c_a|^2.
  std::array<double, 2> count{0.0, 0.0};
  for (int k : a) count[static_cast<std::size_t>(k - 1)] += 1.0;
  for (bool moved = true; moved && it < 10 * max_iterations; ++it) {
    moved = false;
    for (std::size_t i : order) {
      const auto row = x.row(static_cast<Eigen::Index>(i));
      const int from = a[i] - 1;
      const int to = 1 - from;
      const double na = count[static_cast<std::size_t>(from)];
      const double nb = count[static_cast<std::size_t>(to)];
      if (na <= 1.0) continue;
      const double gain = na / (na - 1.0) * (row - c.row(from)).squaredNorm();
      const double cost = nb / (nb + 1.0) * (row - c.row(to)).squaredNorm();
      if (cost < gain * (1.0 - 1e-12)) {
        c.row(from) = (c.row(from) * na - row) / (na - 1.0);
        c.row(to) = (c.row(to) * nb + row) / (nb + 1.0);
        count[static_cast<std::size_t>(from)] -= 1.0;
        count[static_cast<std::size_t>(to)] += 1.0;
        a[i] = to + 1;
        moved = true;
      }
    }
  }
  c = detail::cluster_means(x, a, c);

  // Cluster 1 has the smaller PC1 centroid (then smaller PC2).
  if (std::tie(c(1, 0), c(1, 1)) < std::tie(c(0, 0), c(0, 1))) {
    c.row(0).swap(c.row(1));
    for (int& k : a) k = 3 - k;
  }
  out.assignments = std::move(a);
  out.centroids = c;
  out.iterations = it;
  return out;
}

inline double within_cluster_ss(const ClusterSplit& s) {
  return detail::within_ss(s.embedding, s.assignments, s.centroids);
}

// ---- bias specifications and partitions ------------------------------------

enum class BiasKind { alpha_mix, beta_subgroup, fixed_counts };

inline std::string to_string(BiasKind k) {
  switch (k) {
    case BiasKind::alpha_mix: return "alpha_mix";
    case BiasKind::beta_subgroup: return "beta_subgroup";
    case BiasKind::fixed_counts: return "fixed_counts";
  }
  return "?";
}

inline BiasKind bias_kind_from_string(const std::string& s) {
  if (s == "alpha_mix") return BiasKind::alpha_mix;
  if (s == "beta_subgroup") return BiasKind::beta_subgroup;
  if (s == "fixed_counts") return BiasKind::fixed_counts;
  throw ConfigError("unknown bias kind '" + s + "'");
}

struct CountEntry {
  int class_label = 0;
  std::string subgroup;
  std::size_t count = 0;
  bool operator==(const CountEntry&) const = default;
};

struct BiasSpec {
  BiasKind kind = BiasKind::alpha_mix;
  double alpha = 0.0;                  // alpha_mix: percent of subset 1 drawn from cluster 1
  double beta = 0.5;                   // beta_subgroup: fraction of the biased class that is the focus subgroup
  std::vector<CountEntry> count_table;  // fixed_counts: exact site-1 composition
  std::uint64_t seed = 0;

  bool operator==(const BiasSpec&) const = default;

  void validate() const {
    switch (kind) {
      case BiasKind::alpha_mix:
        FELICIA_REQUIRE(alpha >= 0.0 && alpha <= 100.0, "bias: alpha must lie in [0, 100]");
        break;
      case BiasKind::beta_subgroup:
        FELICIA_REQUIRE(beta >= 0.0 && beta <= 1.0, "bias: beta must lie in [0, 1]");
        break;
      case BiasKind::fixed_counts:
        break;
    }
  }

  static BiasSpec alpha_spec(double alpha, std::uint64_t seed) { return {BiasKind::alpha_mix, alpha, 0.5, {}, seed}; }
  static BiasSpec beta_spec(double beta, std::uint64_t seed) { return {BiasKind::beta_subgroup, 0.0, beta, {}, seed}; }
  static BiasSpec counts_spec(std::vector<CountEntry> table, std::uint64_t seed) {
    return {BiasKind::fixed_counts, 0.0, 0.5, std::move(table), seed};
  }
};

// Site-1 composition for the lesion experiment: nevi and keratosis are class 0,
// melanoma and basal cell carcinoma class 1.
inline std::vector<CountEntry> default_lesion_counts() {
  return {{0, "melanocytic_nevi", 10}, {0, "benign_keratosis", 290}, {1, "melanoma", 150}, {1, "basal_cell_carcinoma", 150}};
}

inline void to_json(nlohmann::json& j, const BiasSpec& b) {
  j = {{"kind", to_string(b.kind)}, {"seed", b.seed}};
  if (b.kind == BiasKind::alpha_mix) j["alpha"] = b.alpha;
  if (b.kind == BiasKind::beta_subgroup) j["beta"] = b.beta;
  if (b.kind == BiasKind::fixed_counts) {
    j["count_table"] = nlohmann::json::array();
    for (const auto& e : b.count_table)
      j["count_table"].push_back({{"class", e.class_label}, {"subgroup", e.subgroup}, {"count", e.count}});
  }
}

inline void from_json(const nlohmann::json& j, BiasSpec& b) {
  b = BiasSpec{};
  b.kind = bias_kind_from_string(j.at("kind").get<std::string>());
  const std::map<BiasKind, std::string> field{
      {BiasKind::alpha_mix, "alpha"}, {BiasKind::beta_subgroup, "beta"}, {BiasKind::fixed_counts, "count_table"}};
  for (const auto& [key, _] : j.items())
    if (key != "kind" && key != "seed" && key != field.at(b.kind))
      throw ConfigError("bias: key '" + key + "' is not valid for kind " + to_string(b.kind));
  b.seed = j.value("seed", std::uint64_t{0});
  if (b.kind == BiasKind::alpha_mix) b.alpha = j.at("alpha").get<double>();
  if (b.kind == BiasKind::beta_subgroup) b.beta = j.at("beta").get<double>();
  if (b.kind == BiasKind::fixed_counts) {
    for (const auto& e : j.at("count_table")) {
      for (const auto& [key, _] : e.items())
        if (key != "class" && key != "subgroup" && key != "count")
          throw ConfigError("bias: unknown count_table key '" + key + "'");
      b.count_table.push_back({e.at("class").get<int>(), e.at("subgroup").get<std::string>(),
                               e.at("count").get<std::size_t>()});
    }
  }
  b.validate();
}

struct SitePartition {
  std::vector<std::vector<std::size_t>> sites;  // sorted index sets
  BiasSpec bias;
  std::uint64_t seed = 0;

  bool operator==(const SitePartition&) const = default;

  [[nodiscard]] std::size_t total() const {
    std::size_t t = 0;
    for (const auto& s : sites) t += s.size();
    return t;
  }

  // Pairwise disjoint, sorted, all below dataset_size.
  void validate(std::size_t dataset_size) const {
    std::vector<bool> used(dataset_size, false);
    for (const auto& s : sites) {
      FELICIA_REQUIRE(std::is_sorted(s.begin(), s.end()), "partition: site indices must be sorted");
      for (std::size_t i : s) {
        FELICIA_REQUIRE(i < dataset_size, "partition: index " + std::to_string(i) + " out of range");
        FELICIA_REQUIRE(!used[i], "partition: index " + std::to_string(i) + " assigned twice");
        used[i] = true;
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const SitePartition& p) {
  j = {{"sites", p.sites}, {"bias", p.bias}, {"seed", p.seed}};
}

inline void from_json(const nlohmann::json& j, SitePartition& p) {
  for (const auto& [key, _] : j.items())
    if (key != "sites" && key != "bias" && key != "seed") throw ConfigError("partition: unknown key '" + key + "'");
  p.sites = j.at("sites").get<std::vector<std::vector<std::size_t>>>();
  p.bias = j.at("bias").get<BiasSpec>();
  p.seed = j.at("seed").get<std::uint64_t>();
}

namespace detail {

inline std::vector<std::size_t> shuffled(std::vector<std::size_t> v, Rng& rng) {
  std::sort(v.begin(), v.end());  // independent of how the caller enumerated the pool
  rng.shuffle(v);
  return v;
}

inline std::vector<std::size_t> take(const std::vector<std::size_t>& pool, std::size_t& cursor, std::size_t n,
                                     const std::string& what) {
  if (cursor + n > pool.size())
    throw InvalidArgument("insufficient population for " + what + ": need " + std::to_string(cursor + n) +
                          ", have " + std::to_string(pool.size()));
  std::vector<std::size_t> out(pool.begin() + static_cast<std::ptrdiff_t>(cursor),
                               pool.begin() + static_cast<std::ptrdiff_t>(cursor + n));
  cursor += n;
  return out;
}

inline void append(std::vector<std::size_t>& dst, const std::vector<std::size_t>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

inline SitePartition finish(std::vector<std::vector<std::size_t>> sites, BiasSpec bias) {
  for (auto& s : sites) std::sort(s.begin(), s.end());
  SitePartition p{std::move(sites), bias, bias.seed};
  return p;
}

}  // namespace detail

// Cluster-1 count of a subset whose cluster-1 share is `percent`.
inline std::size_t alpha_cluster1_count(double percent, std::size_t n) {
  return round_half_up(percent * static_cast<double>(n) / 100.0);
}

// Subset 1 draws alpha% of n from cluster 1 and the rest from cluster 2;
// subset 2 draws (100 - alpha)% from cluster 1 and the rest from cluster 2.
// Indices refer to the rows given to pca_kmeans_split.
inline SitePartition alpha_mix(const ClusterSplit& split, double alpha, std::size_t n_per_subset, std::uint64_t seed) {
  const BiasSpec bias = BiasSpec::alpha_spec(alpha, seed);
  bias.validate();
  Rng rng(derive_seed(seed, 0xa1fa));
  const auto c1 = detail::shuffled(split.members(1), rng);
  const auto c2 = detail::shuffled(split.members(2), rng);
  const std::size_t s1_c1 = alpha_cluster1_count(alpha, n_per_subset);
  const std::size_t s2_c1 = alpha_cluster1_count(100.0 - alpha, n_per_subset);
  std::size_t k1 = 0;
  std::size_t k2 = 0;
  std::vector<std::vector<std::size_t>> sites(2);
  detail::append(sites[0], detail::take(c1, k1, s1_c1, "cluster 1"));
  detail::append(sites[0], detail::take(c2, k2, n_per_subset - s1_c1, "cluster 2"));
  detail::append(sites[1], detail::take(c1, k1, s2_c1, "cluster 1"));
  detail::append(sites[1], detail::take(c2, k2, n_per_subset - s2_c1, "cluster 2"));
  return detail::finish(std::move(sites), bias);
}

struct SubgroupBiasLayout {
  int balanced_class = 0;        // class whose subgroups are balanced on both sites
  int biased_class = 1;          // class whose subgroup mix is controlled by beta on site 1
  std::string focus = "deer";    // beta is the fraction of the biased class drawn from this subgroup
  std::string other = "horse";
};

// Site 1 (helpee): balanced class balanced across its subgroups; biased class has
// round(beta * n) focus images and the rest from the other subgroup. Site 2
// (helper) is balanced everywhere. Both sites hold 2 n images.
inline SitePartition beta_subgroup_split(const ImageDataset& data, double beta, std::size_t n_per_class_per_site,
                                         std::uint64_t seed, const SubgroupBiasLayout& layout = {}) {
  const BiasSpec bias = BiasSpec::beta_spec(beta, seed);
  bias.validate();
  FELICIA_REQUIRE(data.has_subgroups(), "beta split: dataset has no subgroup tags");
  const auto owners = data.subgroup_classes();
  FELICIA_REQUIRE(owners.count(layout.focus) && owners.at(layout.focus) == layout.biased_class &&
                      owners.count(layout.other) && owners.at(layout.other) == layout.biased_class,
                  "beta split: focus/other subgroups must both belong to the biased class");
  Rng rng(derive_seed(seed, 0xbe7a));
  const std::size_t n = n_per_class_per_site;

  std::vector<std::string> balanced_groups;
  for (const auto& [g, y] : owners)
    if (y == layout.balanced_class) balanced_groups.push_back(g);
  FELICIA_REQUIRE(!balanced_groups.empty(), "beta split: balanced class has no subgroups");

  // Balanced draw of n from `groups`: equal shares, remainder to the first groups in name order.
  auto shares = [](std::size_t total, std::size_t k) {
    std::vector<std::size_t> s(k, total / k);
    for (std::size_t i = 0; i < total % k; ++i) ++s[i];
    return s;
  };

  std::map<std::string, std::vector<std::size_t>> pools;
  std::map<std::string, std::size_t> cursor;
  for (const auto& [g, _] : owners) pools[g] = detail::shuffled(data.indices_of_subgroup(g), rng);

  std::vector<std::vector<std::size_t>> sites(2);
  for (int site = 0; site < 2; ++site) {
    const auto bal = shares(n, balanced_groups.size());
    for (std::size_t k = 0; k < balanced_groups.size(); ++k)
      detail::append(sites[static_cast<std::size_t>(site)],
                     detail::take(pools[balanced_groups[k]], cursor[balanced_groups[k]], bal[k], balanced_groups[k]));
    const std::size_t focus = site == 0 ? round_half_up(beta * static_cast<double>(n)) : shares(n, 2)[0];
    detail::append(sites[static_cast<std::size_t>(site)],
                   detail::take(pools[layout.focus], cursor[layout.focus], focus, layout.focus));
    detail::append(sites[static_cast<std::size_t>(site)],
                   detail::take(pools[layout.other], cursor[layout.other], n - focus, layout.other));
  }
  return detail::finish(std::move(sites), bias);
}

// Site 1 receives exactly the table counts from `available`; site 2 receives the rest of `available`.
inline SitePartition lesion_fixed_split(const ImageDataset& data, std::span<const std::size_t> available,
                                        const std::vector<CountEntry>& table, std::uint64_t seed) {
  const BiasSpec bias = BiasSpec::counts_spec(table, seed);
  FELICIA_REQUIRE(data.has_subgroups() || table.empty(), "fixed split: dataset has no subgroup tags");
  Rng rng(derive_seed(seed, 0x1e51));
  std::vector<bool> in_pool(data.size(), false);
  for (std::size_t i : available) {
    FELICIA_REQUIRE(i < data.size(), "fixed split: available index out of range");
    in_pool[i] = true;
  }
  std::vector<bool> taken(data.size(), false);
  std::vector<std::vector<std::size_t>> sites(2);
  for (const auto& e : table) {
    const auto pool = detail::shuffled(data.indices_where([&](std::size_t i) {
      return in_pool[i] && !taken[i] && data.class_labels[i] == e.class_label && data.subgroups[i] == e.subgroup;
    }), rng);
    std::size_t c = 0;
    const auto picked = detail::take(pool, c, e.count, "class " + std::to_string(e.class_label) + "/" + e.subgroup);
    for (std::size_t i : picked) taken[i] = true;
    detail::append(sites[0], picked);
  }
  for (std::size_t i : available)
    if (!taken[i]) sites[1].push_back(i);
  return detail::finish(std::move(sites), bias);
}

struct Holdout {
  std::vector<std::size_t> test;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> remainder;
};

// Removes n_per_class images of every class; per class, round(split_ratio * n)
// go to the test set and the rest to validation.
inline Holdout carve_holdout(const ImageDataset& data, std::size_t n_per_class, double split_ratio,
                             std::uint64_t seed) {
  FELICIA_REQUIRE(split_ratio >= 0.0 && split_ratio <= 1.0, "holdout: split ratio must lie in [0, 1]");
  Rng rng(derive_seed(seed, 0x401d));
  Holdout h;
  std::vector<bool> carved(data.size(), false);
  const std::size_t n_test = round_half_up(split_ratio * static_cast<double>(n_per_class));
  for (int y = 0; y < data.num_classes(); ++y) {
    const auto pool = detail::shuffled(data.indices_of_class(y), rng);
    std::size_t c = 0;
    const auto test = detail::take(pool, c, n_test, "holdout of class " + std::to_string(y));
    const auto val = detail::take(pool, c, n_per_class - n_test, "holdout of class " + std::to_string(y));
    for (std::size_t i : test) carved[i] = true;
    for (std::size_t i : val) carved[i] = true;
    detail::append(h.test, test);
    detail::append(h.validation, val);
  }
  for (std::size_t i = 0; i < data.size(); ++i)
    if (!carved[i]) h.remainder.push_back(i);
  std::sort(h.test.begin(), h.test.end());
  std::sort(h.validation.begin(), h.validation.end());
  return h;
}

// Class-balanced subsample of `pool` with `total` images (equal per class, remainder to lower labels).
inline std::vector<std::size_t> balanced_subsample(const ImageDataset& data, std::span<const std::size_t> pool,
                                                   std::size_t total, std::uint64_t seed) {
  const int k = data.num_classes();
  FELICIA_REQUIRE(k > 0, "subsample: dataset has no classes");
  Rng rng(derive_seed(seed, 0x5b5a));
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(k));
  for (std::size_t i : pool) by_class[static_cast<std::size_t>(data.class_labels[i])].push_back(i);
  std::vector<std::size_t> out;
  for (int y = 0; y < k; ++y) {
    const std::size_t want = total / static_cast<std::size_t>(k) + (static_cast<std::size_t>(y) < total % k ? 1 : 0);
    const auto shuffled = detail::shuffled(by_class[static_cast<std::size_t>(y)], rng);
    std::size_t c = 0;
    detail::append(out, detail::take(shuffled, c, want, "subsample of class " + std::to_string(y)));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace felicia::data
