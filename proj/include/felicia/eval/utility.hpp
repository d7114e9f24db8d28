#pragma once

#include "felicia/core.hpp"
#include "felicia/data/dataset.hpp"
#include "felicia/data/partition.hpp"
#include "felicia/eval/classifier.hpp"
#include "felicia/eval/metrics.hpp"
#include "felicia/gan/batch.hpp"
#include "felicia/mechanism/checkpoint.hpp"
#include "felicia/nn/network.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <charconv>
#include <iostream>
#include <optional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace felicia::eval {

struct Provenance {
  int site_id = 0;
  std::vector<long> epochs;
  std::uint64_t seed = 0;
  std::vector<double> lambdas;
};

struct SyntheticSet {
  data::ImageDataset data;
  Provenance provenance;
};

// A generator snapshot and the epoch it was taken at.
struct GeneratorSnapshot {
  const nn::Network* generator = nullptr;
  long epoch = 0;
};

// Exactly n_per_class images per class. With several snapshots each contributes
// n_per_class / k per class; the remainder comes from the earliest epoch.
inline SyntheticSet generate_per_class(std::span<const GeneratorSnapshot> snapshots, int classes,
                                       std::size_t n_per_class, gan::LatentPrior prior, std::uint64_t seed) {
  FELICIA_REQUIRE(!snapshots.empty(), "generate_per_class: no checkpoints");
  FELICIA_REQUIRE(classes >= 1, "generate_per_class: need at least one class");
  std::vector<GeneratorSnapshot> snaps(snapshots.begin(), snapshots.end());
  std::stable_sort(snaps.begin(), snaps.end(), [](const auto& a, const auto& b) { return a.epoch < b.epoch; });
  for (const auto& s : snaps) {
    FELICIA_REQUIRE(s.generator != nullptr, "generate_per_class: null generator");
    FELICIA_REQUIRE(s.generator->conditional() && s.generator->classes() >= classes,
                    "generate_per_class: generator does not cover every class (needs a conditional generator)");
  }
  SyntheticSet out;
  out.data.shape = snaps.front().generator->output_shape();
  out.data.images.resize(static_cast<Eigen::Index>(n_per_class) * classes, out.data.shape.features());
  for (const auto& s : snaps) out.provenance.epochs.push_back(s.epoch);
  out.provenance.seed = seed;

  Rng rng(derive_seed(seed, 0x9e4));
  const std::size_t k = snaps.size();
  Eigen::Index row = 0;
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t share = n_per_class / k + (j == 0 ? n_per_class % k : 0);
    if (share == 0) continue;
    for (int y = 0; y < classes; ++y) {
      gan::LatentBatch latent{prior.sample(share, rng), Labels(share, y)};
      const Matrix x = snaps[j].generator->forward(latent.z, &*latent.labels);
      out.data.images.middleRows(row, x.rows()) = x;
      row += x.rows();
      out.data.class_labels.insert(out.data.class_labels.end(), share, y);
    }
  }
  return out;
}

// One unconditional generator per class (index = class label).
inline SyntheticSet generate_per_class_unconditional(std::span<const nn::Network> per_class, std::size_t n_per_class,
                                                     gan::LatentPrior prior, std::uint64_t seed) {
  FELICIA_REQUIRE(per_class.size() >= 2, "generate_per_class: need one generator per class");
  SyntheticSet out;
  out.data.shape = per_class.front().output_shape();
  Rng rng(derive_seed(seed, 0x9e5));
  std::vector<Matrix> parts;
  for (std::size_t y = 0; y < per_class.size(); ++y) {
    if (n_per_class == 0) break;
    parts.push_back(per_class[y].forward(prior.sample(n_per_class, rng)));
    out.data.class_labels.insert(out.data.class_labels.end(), n_per_class, static_cast<int>(y));
  }
  out.data.images.resize(static_cast<Eigen::Index>(out.data.class_labels.size()), out.data.shape.features());
  Eigen::Index row = 0;
  for (const auto& p : parts) {
    out.data.images.middleRows(row, p.rows()) = p;
    row += p.rows();
  }
  return out;
}

// ---- reports ----------------------------------------------------------------

enum class EvalSplit { validation, test };

inline std::string to_string(EvalSplit s) { return s == EvalSplit::validation ? "validation" : "test"; }

struct UtilityReport {
  std::string config_id;
  std::vector<double> lambdas;
  long epoch = -1;  // -1 for ensembles and real-only recipes
  std::uint64_t seed = 0;
  std::string recipe;
  EvalSplit split = EvalSplit::validation;
  double auc = 0.0;
  double acc_overall = 0.0;
  std::map<std::string, double> acc_subgroup;
};

inline void to_json(nlohmann::json& j, const UtilityReport& r) {
  j = {{"config_id", r.config_id}, {"lambdas", r.lambdas},   {"epoch", r.epoch},
       {"seed", r.seed},           {"recipe", r.recipe},      {"split", to_string(r.split)},
       {"auc", r.auc},             {"acc_overall", r.acc_overall}, {"acc_subgroup", r.acc_subgroup}};
}

inline void from_json(const nlohmann::json& j, UtilityReport& r) {
  r.config_id = j.at("config_id").get<std::string>();
  r.lambdas = j.at("lambdas").get<std::vector<double>>();
  r.epoch = j.at("epoch").get<long>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.recipe = j.at("recipe").get<std::string>();
  const auto split = j.at("split").get<std::string>();
  FELICIA_REQUIRE(split == "validation" || split == "test", "report: unknown split '" + split + "'");
  r.split = split == "validation" ? EvalSplit::validation : EvalSplit::test;
  r.auc = j.at("auc").get<double>();
  r.acc_overall = j.at("acc_overall").get<double>();
  r.acc_subgroup = j.at("acc_subgroup").get<std::map<std::string, double>>();
}

// Scores a trained classifier on a labelled evaluation set (binary AUC for class 1).
inline void score_report(const UtilityClassifier& clf, const data::ImageDataset& eval_set, UtilityReport& r) {
  FELICIA_REQUIRE(eval_set.size() > 0, "evaluation set is empty");
  const Labels predicted = clf.predict(eval_set.images);
  r.acc_overall = accuracy(predicted, eval_set.class_labels);
  if (clf.classes() == 2) r.auc = auc_roc(clf.scores(eval_set.images, 1), eval_set.class_labels);
  r.acc_subgroup.clear();
  if (eval_set.has_subgroups()) {
    std::set<std::string> groups(eval_set.subgroups.begin(), eval_set.subgroups.end());
    for (const auto& g : groups)
      r.acc_subgroup[g] = subgroup_accuracy(predicted, eval_set.class_labels, eval_set.subgroups, g);
  }
}

inline UtilityReport evaluate_training_set(const data::ImageDataset& train, const data::ImageDataset& eval_set,
                                           const UtilityClassifierSpec& spec, UtilityReport keys) {
  const auto clf = train_utility_classifier(train, spec);
  score_report(clf, eval_set, keys);
  return keys;
}

namespace detail {

inline void require_validation(std::span<const UtilityReport> reports, const char* op) {
  for (const auto& r : reports)
    if (r.split != EvalSplit::validation)
      throw InvalidArgument(std::string(op) + ": test-set report rejected; selection uses validation reports only");
}

}  // namespace detail

struct SweepRequest {
  int site = 0;
  std::uint64_t seed = 0;
  long cadence = 50;
  long epochs = 0;  // last trained epoch; checkpoints expected at every cadence multiple up to it
  int classes = 2;
  std::size_t n_per_class = 200;
  gan::LatentPrior prior;
  std::vector<double> lambdas;
  std::string config_id;
  std::string recipe = "felicia";
};

// One validation report per cadence checkpoint of one site/seed.
inline std::vector<UtilityReport> epoch_utility_sweep(const mechanism::CheckpointStore& store,
                                                      const SweepRequest& req,
                                                      const data::ImageDataset& validation,
                                                      const UtilityClassifierSpec& spec) {
  FELICIA_REQUIRE(req.cadence > 0, "sweep: cadence must be positive");
  std::vector<UtilityReport> out;
  if (store.list().empty()) {
    std::cerr << "warning: epoch sweep over an empty checkpoint store\n";
    return out;
  }
  for (long e = req.cadence; e <= req.epochs; e += req.cadence) {
    const auto info = store.find(req.site, e, req.seed);
    if (!info)
      throw IoError("sweep: missing checkpoint " + mechanism::CheckpointStore::make_id(req.site, e, req.seed));
    const nn::Network gen = store.load(info->id);
    const GeneratorSnapshot snap{&gen, e};
    const auto synth = generate_per_class(std::span(&snap, 1), req.classes, req.n_per_class, req.prior,
                                          derive_seed(req.seed, static_cast<std::uint64_t>(e)));
    UtilityReport keys{req.config_id, req.lambdas, e, req.seed, req.recipe, EvalSplit::validation, 0, 0, {}};
    out.push_back(evaluate_training_set(synth.data, validation, spec, keys));
  }
  return out;
}

// The k epochs with the highest validation AUC; ties go to the later epoch. Result sorted by epoch.
inline std::vector<long> select_top_epochs(std::span<const UtilityReport> reports, std::size_t k) {
  detail::require_validation(reports, "select_top_epochs");
  FELICIA_REQUIRE(k >= 1, "select_top_epochs: k must be at least 1");
  FELICIA_REQUIRE(reports.size() >= k, "select_top_epochs: fewer reports (" + std::to_string(reports.size()) +
                                           ") than k (" + std::to_string(k) + ")");
  std::vector<const UtilityReport*> sorted;
  for (const auto& r : reports) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(), [](const auto* a, const auto* b) {
    if (a->auc != b->auc) return a->auc > b->auc;
    return a->epoch > b->epoch;
  });
  std::vector<long> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(sorted[i]->epoch);
  std::sort(out.begin(), out.end());
  return out;
}

using LambdaPair = std::pair<double, double>;

// The pair whose reports have the highest median validation AUC; ties go to the
// lexicographically smallest pair, so the result does not depend on enumeration order.
inline LambdaPair select_lambda(const std::map<LambdaPair, std::vector<UtilityReport>>& grid) {
  FELICIA_REQUIRE(!grid.empty(), "select_lambda: empty grid");
  std::optional<LambdaPair> best;
  double best_score = -1.0;
  for (const auto& [pair, reports] : grid) {
    detail::require_validation(reports, "select_lambda");
    FELICIA_REQUIRE(!reports.empty(), "select_lambda: grid point without reports");
    std::vector<double> aucs;
    for (const auto& r : reports) aucs.push_back(r.auc);
    const double score = median(aucs);
    if (!best || score > best_score) {
      best = pair;
      best_score = score;
    }
  }
  return *best;
}

inline LambdaPair select_lambda(std::span<const std::pair<LambdaPair, std::vector<UtilityReport>>> grid) {
  std::map<LambdaPair, std::vector<UtilityReport>> m;
  for (const auto& [k, v] : grid) {
    auto& slot = m[k];
    slot.insert(slot.end(), v.begin(), v.end());
  }
  return select_lambda(m);
}

// ---- coverage ---------------------------------------------------------------

struct CoverageStats {
  double minority_fraction = 0.0;
  std::array<std::size_t, 2> cluster_counts{0, 0};  // nearest-centroid counts for clusters 1 and 2
  Matrix coordinates;                                 // n x 2 projection
  std::vector<int> assignments;
};

// Projects generated images into the stored PCA space and assigns them to the
// nearest centroid; `minority_cluster` (1 or 2) is the cluster under-represented
// in the generator's training shard.
inline CoverageStats coverage_stats(const Matrix& generated, const data::PcaBasis& basis, const Matrix& centroids,
                                    int minority_cluster) {
  FELICIA_REQUIRE(minority_cluster == 1 || minority_cluster == 2, "coverage: minority cluster must be 1 or 2");
  FELICIA_REQUIRE(centroids.rows() == 2 && centroids.cols() == basis.components.cols(),
                  "coverage: centroids do not match the basis dimension");
  FELICIA_REQUIRE(generated.cols() == basis.mean.size(), "coverage: image width does not match the basis");
  FELICIA_REQUIRE(generated.rows() > 0, "coverage: no generated samples");
  CoverageStats s;
  s.coordinates = basis.project(generated);
  s.assignments.resize(static_cast<std::size_t>(generated.rows()));
  for (Eigen::Index i = 0; i < generated.rows(); ++i) {
    const int c = data::ClusterSplit::nearest(centroids, s.coordinates.row(i));
    s.assignments[static_cast<std::size_t>(i)] = c;
    ++s.cluster_counts[static_cast<std::size_t>(c - 1)];
  }
  s.minority_fraction = static_cast<double>(s.cluster_counts[static_cast<std::size_t>(minority_cluster - 1)]) /
                        static_cast<double>(generated.rows());
  return s;
}

// The cluster with fewer members in `shard` (ties -> cluster 1).
inline int minority_cluster_of(const data::ClusterSplit& split, std::span<const std::size_t> shard) {
  std::size_t c1 = 0;
  for (std::size_t i : shard) c1 += split.assignments[i] == 1 ? 1 : 0;
  return c1 <= shard.size() - c1 ? 1 : 2;
}

// ---- CSV --------------------------------------------------------------------

// Shortest text that parses back to the same double: 0.9 prints as "0.9".
inline std::string format_double(double v) {
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

// config_id,lambda1,lambda2,epoch,seed,recipe,auc,acc_overall,acc_<subgroup>...
inline std::string reports_csv(std::span<const UtilityReport> reports) {
  std::set<std::string> groups;
  for (const auto& r : reports)
    for (const auto& [g, _] : r.acc_subgroup) groups.insert(g);
  std::ostringstream os;
  os << "config_id,lambda1,lambda2,epoch,seed,recipe,auc,acc_overall";
  for (const auto& g : groups) os << ",acc_" << g;
  os << '\n';
  for (const auto& r : reports) {
    const double l1 = r.lambdas.size() > 0 ? r.lambdas[0] : 0.0;
    const double l2 = r.lambdas.size() > 1 ? r.lambdas[1] : 0.0;
    os << r.config_id << ',' << format_double(l1) << ',' << format_double(l2) << ',' << r.epoch << ',' << r.seed
       << ',' << r.recipe << ',' << format_double(r.auc) << ',' << format_double(r.acc_overall);
    for (const auto& g : groups) {
      os << ',';
      if (auto it = r.acc_subgroup.find(g); it != r.acc_subgroup.end()) os << format_double(it->second);
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace felicia::eval
