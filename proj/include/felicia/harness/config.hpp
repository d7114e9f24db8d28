#pragma once

#include "felicia/core.hpp"
#include "felicia/data/corpora.hpp"
#include "felicia/data/image_io.hpp"
#include "felicia/data/partition.hpp"
#include "felicia/eval/classifier.hpp"
#include "felicia/gan/batch.hpp"
#include "felicia/gan/measure.hpp"
#include "felicia/nn/architecture.hpp"
#include "felicia/nn/optimizer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace felicia::harness {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";

enum class Pipeline { coverage, subgroup, lesion };

inline std::string to_string(Pipeline p) {
  switch (p) {
    case Pipeline::coverage: return "coverage";
    case Pipeline::subgroup: return "subgroup";
    case Pipeline::lesion: return "lesion";
  }
  return "?";
}

inline Pipeline pipeline_from_string(const std::string& s) {
  if (s == "coverage") return Pipeline::coverage;
  if (s == "subgroup") return Pipeline::subgroup;
  if (s == "lesion") return Pipeline::lesion;
  throw ConfigError("pipeline: expected coverage, subgroup or lesion, got '" + s + "'");
}

// Where images come from: an image folder with a CSV manifest, or a procedural corpus.
struct DatasetSpec {
  std::string source = "folder";  // folder | glyphs | animals | lesions
  fs::path root;
  fs::path manifest;
  ImageShape shape{1, 12, 12};
  std::size_t size = 0;  // glyphs: images; animals: images per subgroup
  data::LesionCounts counts;
  std::uint64_t seed = 0;
};

struct HoldoutSpec {
  std::size_t per_class = 200;
  double test_ratio = 0.5;
};

struct ExperimentConfig {
  std::string name = "experiment";
  Pipeline pipeline = Pipeline::coverage;
  DatasetSpec dataset;
  data::BiasSpec bias;
  std::vector<double> bias_values;  // alpha or beta sweep; empty for fixed counts
  data::SubgroupBiasLayout layout;
  std::size_t shard_size = 0;       // coverage: images per subset; subgroup: images per class per site
  HoldoutSpec holdout;
  nn::ArchitectureSpec generator;
  nn::ArchitectureSpec discriminator;
  eval::UtilityClassifierSpec classifier;
  gan::LatentPrior latent{32, gan::LatentDistribution::standard_normal};
  std::string measure = "log";
  nn::OptimizerConfig optimizer;
  std::vector<std::pair<double, double>> lambda_grid;
  long epochs = 200;
  long cadence = 50;
  std::size_t batch_size = 64;
  std::size_t ensemble_k = 5;
  std::size_t samples_per_class = 200;
  std::size_t coverage_samples = 2000;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  bool deterministic = false;
  bool privgan = false;  // default on for the lesion pipeline
  unsigned workers = 0;  // 0: hardware concurrency
  fs::path output_dir;

  [[nodiscard]] bool conditional() const { return pipeline != Pipeline::coverage; }
  [[nodiscard]] int classes() const { return conditional() ? 2 : 0; }
};

inline std::vector<std::pair<double, double>> default_lambda_grid() {
  std::vector<std::pair<double, double>> g;
  for (double a : {0.0, 0.25, 0.5, 1.0, 2.0, 4.0})
    for (double b : {0.0, 0.25, 0.5, 1.0, 2.0, 4.0}) g.emplace_back(a, b);
  return g;
}

#define FELICIA_CONFIG_REQUIRE(cond, msg)          \
  do {                                             \
    if (!(cond)) throw ::felicia::ConfigError(msg); \
  } while (0)

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) throw ConfigError("unknown key '" + (where.empty() ? key : where + "." + key) + "'");
}

template <typename T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError((where.empty() ? std::string(key) : where + "." + key) + ": " + e.what());
  }
}

inline std::string latent_name(gan::LatentDistribution d) {
  return d == gan::LatentDistribution::standard_normal ? "normal" : "uniform";
}

inline gan::LatentDistribution latent_from_name(const std::string& s) {
  if (s == "normal") return gan::LatentDistribution::standard_normal;
  if (s == "uniform") return gan::LatentDistribution::uniform_minus1_1;
  throw ConfigError("latent.distribution: expected normal or uniform, got '" + s + "'");
}

inline json lesion_counts_json(const data::LesionCounts& c) {
  return {{"melanocytic_nevi", c.melanocytic_nevi},
          {"melanoma", c.melanoma},
          {"benign_keratosis", c.benign_keratosis},
          {"basal_cell_carcinoma", c.basal_cell_carcinoma}};
}

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  json grid = json::array();
  for (const auto& [a, b] : c.lambda_grid) grid.push_back({a, b});
  json ds = {{"source", c.dataset.source}, {"shape", c.dataset.shape}, {"seed", c.dataset.seed}};
  if (c.dataset.source == "folder") {
    ds["root"] = c.dataset.root.string();
    ds["manifest"] = c.dataset.manifest.string();
  } else if (c.dataset.source == "lesions") {
    ds["counts"] = detail::lesion_counts_json(c.dataset.counts);
  } else {
    ds["size"] = c.dataset.size;
  }
  json j = {{"name", c.name},
            {"pipeline", to_string(c.pipeline)},
            {"dataset", ds},
            {"bias", c.bias},
            {"shard_size", c.shard_size},
            {"holdout", {{"per_class", c.holdout.per_class}, {"test_ratio", c.holdout.test_ratio}}},
            {"architectures", {{"generator", c.generator}, {"discriminator", c.discriminator}}},
            {"classifier", c.classifier},
            {"latent", {{"dimension", c.latent.dimension}, {"distribution", detail::latent_name(c.latent.distribution)}}},
            {"measure", c.measure},
            {"optimizer",
             {{"learning_rate", c.optimizer.learning_rate}, {"beta1", c.optimizer.beta1}, {"beta2", c.optimizer.beta2}}},
            {"lambda_grid", grid},
            {"epochs", c.epochs},
            {"cadence", c.cadence},
            {"batch_size", c.batch_size},
            {"ensemble_k", c.ensemble_k},
            {"samples_per_class", c.samples_per_class},
            {"coverage_samples", c.coverage_samples},
            {"seeds", c.seeds},
            {"deterministic", c.deterministic},
            {"privgan", c.privgan},
            {"workers", c.workers},
            {"output_dir", c.output_dir.string()}};
  if (!c.bias_values.empty()) j["bias_values"] = c.bias_values;
  if (c.pipeline == Pipeline::subgroup)
    j["layout"] = {{"balanced_class", c.layout.balanced_class},
                   {"biased_class", c.layout.biased_class},
                   {"focus", c.layout.focus},
                   {"other", c.layout.other}};
  return j;
}

// FNV-1a over the canonical (key-sorted) dump of the resolved config.
inline std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a(to_json(c).dump())); }

// Parses and resolves a config object: unknown keys fail closed, defaults are
// filled, and every cross-field constraint is checked. `base` resolves relative paths.
inline ExperimentConfig parse_config(const json& j, const fs::path& base = {}) {
  detail::reject_unknown(j,
                         {"name", "pipeline", "dataset", "bias", "bias_values", "layout", "shard_size", "holdout",
                          "architectures", "classifier", "latent", "measure", "optimizer", "lambda_grid", "epochs",
                          "cadence", "batch_size", "ensemble_k", "samples_per_class", "coverage_samples", "seeds",
                          "deterministic", "privgan", "workers", "output_dir"},
                         "");
  ExperimentConfig c;
  if (!j.contains("pipeline")) throw ConfigError("missing required key 'pipeline'");
  c.pipeline = pipeline_from_string(detail::get_or<std::string>(j, "pipeline", "", ""));
  c.name = detail::get_or<std::string>(j, "name", c.name, "");
  FELICIA_CONFIG_REQUIRE(!c.name.empty() && c.name.find_first_of("/\\") == std::string::npos,
                         "name: must be non-empty and contain no path separators");

  auto resolve = [&](const fs::path& p) {
    return fs::absolute(p.is_absolute() || base.empty() ? p : base / p).lexically_normal();
  };

  // dataset
  if (!j.contains("dataset")) throw ConfigError("missing required key 'dataset'");
  const json& d = j.at("dataset");
  detail::reject_unknown(d, {"source", "root", "manifest", "shape", "size", "counts", "seed"}, "dataset");
  c.dataset.source = detail::get_or<std::string>(d, "source", "folder", "dataset");
  c.dataset.seed = detail::get_or<std::uint64_t>(d, "seed", 0, "dataset");
  const bool rgb_default = c.pipeline != Pipeline::coverage;
  const int size_default = c.pipeline == Pipeline::coverage ? 12 : 8;
  c.dataset.shape = ImageShape{rgb_default ? 3 : 1, size_default, size_default};
  if (d.contains("shape")) c.dataset.shape = d.at("shape").get<ImageShape>();
  FELICIA_CONFIG_REQUIRE(c.dataset.shape.features() > 0, "dataset.shape: must be positive");
  if (c.dataset.source == "folder") {
    FELICIA_CONFIG_REQUIRE(d.contains("root") && d.contains("manifest"), "dataset: folder source needs root and manifest");
    c.dataset.root = resolve(d.at("root").get<std::string>());
    c.dataset.manifest = resolve(d.at("manifest").get<std::string>());
    FELICIA_CONFIG_REQUIRE(fs::is_directory(c.dataset.root), "dataset.root: no such directory " + c.dataset.root.string());
    FELICIA_CONFIG_REQUIRE(fs::is_regular_file(c.dataset.manifest),
                           "dataset.manifest: no such file " + c.dataset.manifest.string());
  } else if (c.dataset.source == "glyphs" || c.dataset.source == "animals") {
    FELICIA_CONFIG_REQUIRE(c.dataset.shape.height == c.dataset.shape.width, "dataset.shape: procedural corpora are square");
    FELICIA_CONFIG_REQUIRE(c.dataset.shape.channels == (c.dataset.source == "glyphs" ? 1 : 3),
                           "dataset.shape: glyphs are grey, animals are RGB");
    c.dataset.size = detail::get_or<std::size_t>(d, "size", c.dataset.source == "glyphs" ? 5000 : 3000, "dataset");
  } else if (c.dataset.source == "lesions") {
    FELICIA_CONFIG_REQUIRE(c.dataset.shape.channels == 3 && c.dataset.shape.height == c.dataset.shape.width,
                           "dataset.shape: lesion corpus is square RGB");
    if (d.contains("counts")) {
      const json& k = d.at("counts");
      detail::reject_unknown(k, {"melanocytic_nevi", "melanoma", "benign_keratosis", "basal_cell_carcinoma"},
                             "dataset.counts");
      auto& n = c.dataset.counts;
      n.melanocytic_nevi = detail::get_or<std::size_t>(k, "melanocytic_nevi", n.melanocytic_nevi, "dataset.counts");
      n.melanoma = detail::get_or<std::size_t>(k, "melanoma", n.melanoma, "dataset.counts");
      n.benign_keratosis = detail::get_or<std::size_t>(k, "benign_keratosis", n.benign_keratosis, "dataset.counts");
      n.basal_cell_carcinoma =
          detail::get_or<std::size_t>(k, "basal_cell_carcinoma", n.basal_cell_carcinoma, "dataset.counts");
    }
  } else {
    throw ConfigError("dataset.source: expected folder, glyphs, animals or lesions, got '" + c.dataset.source + "'");
  }

  // bias
  const data::BiasKind expected = c.pipeline == Pipeline::coverage   ? data::BiasKind::alpha_mix
                                  : c.pipeline == Pipeline::subgroup ? data::BiasKind::beta_subgroup
                                                                     : data::BiasKind::fixed_counts;
  if (j.contains("bias")) {
    c.bias = j.at("bias").get<data::BiasSpec>();
  } else {
    c.bias = expected == data::BiasKind::alpha_mix       ? data::BiasSpec::alpha_spec(0.0, 0)
             : expected == data::BiasKind::beta_subgroup ? data::BiasSpec::beta_spec(0.9, 0)
                                                         : data::BiasSpec::counts_spec(data::default_lesion_counts(), 0);
  }
  FELICIA_CONFIG_REQUIRE(c.bias.kind == expected,
                         "bias.kind: pipeline " + to_string(c.pipeline) + " requires " + data::to_string(expected));
  try {
    c.bias.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("bias: ") + e.what());
  }
  if (expected != data::BiasKind::fixed_counts) {
    const double own = expected == data::BiasKind::alpha_mix ? c.bias.alpha : c.bias.beta;
    c.bias_values = detail::get_or<std::vector<double>>(j, "bias_values", {own}, "");
    FELICIA_CONFIG_REQUIRE(!c.bias_values.empty(), "bias_values: must not be empty");
    for (double v : c.bias_values) {
      auto probe = expected == data::BiasKind::alpha_mix ? data::BiasSpec::alpha_spec(v, 0) : data::BiasSpec::beta_spec(v, 0);
      try {
        probe.validate();
      } catch (const InvalidArgument& e) {
        throw ConfigError(std::string("bias_values: ") + e.what());
      }
    }
  } else {
    FELICIA_CONFIG_REQUIRE(!j.contains("bias_values"), "bias_values: not used by fixed-count bias");
  }

  if (j.contains("layout")) {
    FELICIA_CONFIG_REQUIRE(c.pipeline == Pipeline::subgroup, "layout: only used by the subgroup pipeline");
    const json& l = j.at("layout");
    detail::reject_unknown(l, {"balanced_class", "biased_class", "focus", "other"}, "layout");
    c.layout.balanced_class = detail::get_or<int>(l, "balanced_class", c.layout.balanced_class, "layout");
    c.layout.biased_class = detail::get_or<int>(l, "biased_class", c.layout.biased_class, "layout");
    c.layout.focus = detail::get_or<std::string>(l, "focus", c.layout.focus, "layout");
    c.layout.other = detail::get_or<std::string>(l, "other", c.layout.other, "layout");
  }

  const std::size_t shard_default = c.pipeline == Pipeline::coverage ? 2000 : c.pipeline == Pipeline::subgroup ? 1000 : 0;
  c.shard_size = detail::get_or<std::size_t>(j, "shard_size", shard_default, "");
  FELICIA_CONFIG_REQUIRE(c.pipeline == Pipeline::lesion || c.shard_size > 0, "shard_size: must be positive");

  if (j.contains("holdout")) {
    const json& h = j.at("holdout");
    detail::reject_unknown(h, {"per_class", "test_ratio"}, "holdout");
    c.holdout.per_class = detail::get_or<std::size_t>(h, "per_class", c.holdout.per_class, "holdout");
    c.holdout.test_ratio = detail::get_or<double>(h, "test_ratio", c.holdout.test_ratio, "holdout");
  }
  FELICIA_CONFIG_REQUIRE(c.holdout.test_ratio > 0.0 && c.holdout.test_ratio < 1.0,
                         "holdout.test_ratio: must lie strictly between 0 and 1");
  FELICIA_CONFIG_REQUIRE(c.pipeline == Pipeline::coverage || c.holdout.per_class >= 2, "holdout.per_class: must be >= 2");

  // networks
  if (j.contains("latent")) {
    const json& l = j.at("latent");
    detail::reject_unknown(l, {"dimension", "distribution"}, "latent");
    c.latent.dimension = detail::get_or<int>(l, "dimension", c.latent.dimension, "latent");
    c.latent.distribution = detail::latent_from_name(detail::get_or<std::string>(l, "distribution", "normal", "latent"));
  }
  FELICIA_CONFIG_REQUIRE(c.latent.dimension > 0, "latent.dimension: must be positive");
  c.generator = nn::mlp_generator(c.latent.dimension, c.dataset.shape, {128, 128}, c.classes());
  c.discriminator = nn::mlp_discriminator(c.dataset.shape, {128, 128}, c.classes());
  if (j.contains("architectures")) {
    const json& a = j.at("architectures");
    detail::reject_unknown(a, {"generator", "discriminator"}, "architectures");
    try {
      if (a.contains("generator")) c.generator = a.at("generator").get<nn::ArchitectureSpec>();
      if (a.contains("discriminator")) c.discriminator = a.at("discriminator").get<nn::ArchitectureSpec>();
      FELICIA_CONFIG_REQUIRE(nn::output_shape(c.generator) == c.dataset.shape,
                             "architectures.generator: output shape must equal dataset.shape");
      FELICIA_CONFIG_REQUIRE(c.generator.input.features() == c.latent.dimension,
                             "architectures.generator: input width must equal latent.dimension");
      FELICIA_CONFIG_REQUIRE(c.discriminator.input == c.dataset.shape,
                             "architectures.discriminator: input shape must equal dataset.shape");
      (void)nn::adversary_from_discriminator(c.discriminator, 2);
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("architectures: ") + e.what());
    }
  }
  FELICIA_CONFIG_REQUIRE(c.generator.conditioning.has_value() == c.conditional() &&
                             c.discriminator.conditioning.has_value() == c.conditional(),
                         "architectures: " + to_string(c.pipeline) +
                             (c.conditional() ? " needs class-conditional networks" : " needs unconditional networks"));
  try {
    if (j.contains("classifier")) c.classifier = j.at("classifier").get<eval::UtilityClassifierSpec>();
    if (c.pipeline != Pipeline::coverage) (void)c.classifier.resolve(c.dataset.shape, 2);
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("classifier: ") + e.what());
  }

  c.measure = detail::get_or<std::string>(j, "measure", c.measure, "");
  try {
    (void)gan::MeasureFunction::by_name(c.measure);
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("measure: ") + e.what());
  }
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    detail::reject_unknown(o, {"learning_rate", "beta1", "beta2"}, "optimizer");
    c.optimizer.learning_rate = detail::get_or<double>(o, "learning_rate", c.optimizer.learning_rate, "optimizer");
    c.optimizer.beta1 = detail::get_or<double>(o, "beta1", c.optimizer.beta1, "optimizer");
    c.optimizer.beta2 = detail::get_or<double>(o, "beta2", c.optimizer.beta2, "optimizer");
  }
  FELICIA_CONFIG_REQUIRE(c.optimizer.learning_rate > 0.0 && c.optimizer.beta1 >= 0.0 && c.optimizer.beta1 < 1.0 &&
                             c.optimizer.beta2 >= 0.0 && c.optimizer.beta2 < 1.0,
                         "optimizer: learning_rate > 0 and betas in [0, 1) required");

  // schedule
  if (j.contains("lambda_grid")) {
    for (const auto& p : j.at("lambda_grid")) {
      FELICIA_CONFIG_REQUIRE(p.is_array() && p.size() == 2, "lambda_grid: entries must be [lambda1, lambda2] pairs");
      c.lambda_grid.emplace_back(p[0].get<double>(), p[1].get<double>());
    }
  } else {
    c.lambda_grid = default_lambda_grid();
  }
  FELICIA_CONFIG_REQUIRE(!c.lambda_grid.empty(), "lambda_grid: must not be empty");
  for (const auto& [a, b] : c.lambda_grid)
    FELICIA_CONFIG_REQUIRE(std::isfinite(a) && std::isfinite(b) && a >= 0.0 && b >= 0.0,
                           "lambda_grid: weights must be finite and non-negative");
  FELICIA_CONFIG_REQUIRE(std::set(c.lambda_grid.begin(), c.lambda_grid.end()).size() == c.lambda_grid.size(),
                         "lambda_grid: duplicate pair");

  c.epochs = detail::get_or<long>(j, "epochs", c.epochs, "");
  c.cadence = detail::get_or<long>(j, "cadence", c.cadence, "");
  FELICIA_CONFIG_REQUIRE(c.epochs > 0 && c.cadence > 0, "epochs and cadence must be positive");
  FELICIA_CONFIG_REQUIRE(c.cadence <= c.epochs, "cadence " + std::to_string(c.cadence) +
                                                    " does not divide any evaluated epoch up to " +
                                                    std::to_string(c.epochs));
  const auto checkpoints = static_cast<std::size_t>(c.epochs / c.cadence);
  if (j.contains("ensemble_k")) {
    c.ensemble_k = detail::get_or<std::size_t>(j, "ensemble_k", c.ensemble_k, "");
    FELICIA_CONFIG_REQUIRE(c.ensemble_k >= 1, "ensemble_k: must be at least 1");
    FELICIA_CONFIG_REQUIRE(c.ensemble_k <= checkpoints,
                           "ensemble_k " + std::to_string(c.ensemble_k) + " exceeds the " + std::to_string(checkpoints) +
                               " checkpoints available (epochs / cadence)");
  } else {
    c.ensemble_k = std::min<std::size_t>(5, checkpoints);
  }
  c.batch_size = detail::get_or<std::size_t>(j, "batch_size", c.batch_size, "");
  FELICIA_CONFIG_REQUIRE(c.batch_size > 0, "batch_size: must be positive");
  c.samples_per_class = detail::get_or<std::size_t>(j, "samples_per_class", c.samples_per_class, "");
  c.coverage_samples = detail::get_or<std::size_t>(j, "coverage_samples", c.coverage_samples, "");
  FELICIA_CONFIG_REQUIRE(c.coverage_samples > 0, "coverage_samples: must be positive");
  c.seeds = detail::get_or<std::vector<std::uint64_t>>(j, "seeds", c.seeds, "");
  FELICIA_CONFIG_REQUIRE(!c.seeds.empty(), "seeds: must not be empty");
  FELICIA_CONFIG_REQUIRE(std::set(c.seeds.begin(), c.seeds.end()).size() == c.seeds.size(), "seeds: duplicate seed");
  c.deterministic = detail::get_or<bool>(j, "deterministic", c.deterministic, "");
  c.privgan = detail::get_or<bool>(j, "privgan", c.pipeline == Pipeline::lesion, "");
  c.workers = detail::get_or<unsigned>(j, "workers", c.workers, "");
  c.output_dir = resolve(detail::get_or<std::string>(j, "output_dir", "runs/" + c.name, ""));
  return c;
}

// Reads a JSON config file; relative paths inside it resolve against its directory.
inline ExperimentConfig validate_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  try {
    return parse_config(j, path.parent_path());
  } catch (const ConfigError&) {
    throw;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

// Loads the dataset a config describes.
inline data::ImageDataset load_dataset(const DatasetSpec& d) {
  if (d.source == "folder") return data::load_image_folder(d.root, d.manifest, d.shape);
  if (d.source == "glyphs") return data::four_glyphs(d.size, d.seed, d.shape.height);
  if (d.source == "animals") return data::animals(d.size, d.seed, d.shape.height);
  if (d.source == "lesions") return data::lesions(d.counts, d.seed, d.shape.height);
  throw ConfigError("dataset.source: unknown source '" + d.source + "'");
}

}  // namespace felicia::harness
