#pragma once

#include "felicia/eval/utility.hpp"
#include "felicia/harness/config.hpp"
#include "felicia/harness/csv.hpp"
#include "felicia/mechanism/checkpoint.hpp"
#include "felicia/mechanism/felicia.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

namespace felicia::harness {

// Stage markers, in execution order.
inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"partition", "jobs", "selection", "final", "aggregate"};
  return names;
}

struct RunManifest {
  fs::path directory;
  std::string config_hash;
  std::string pipeline;
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::string> artifacts;  // name -> path relative to `directory`
  double wall_clock_seconds = 0.0;
  std::string version = kVersion;
  std::string status = "running";  // running | failed | complete
  std::vector<std::string> stages;  // completed stages
  std::set<std::string> jobs;       // completed job ids
  std::vector<std::string> errors;

  [[nodiscard]] fs::path path() const { return directory / "manifest.json"; }
  [[nodiscard]] bool complete() const { return status == "complete"; }
  [[nodiscard]] bool done(const std::string& stage) const {
    return std::find(stages.begin(), stages.end(), stage) != stages.end();
  }

  [[nodiscard]] json to_json() const {
    return {{"config_hash", config_hash},
            {"config", "config.json"},
            {"pipeline", pipeline},
            {"seeds", seeds},
            {"artifacts", artifacts},
            {"wall_clock_seconds", wall_clock_seconds},
            {"version", version},
            {"status", status},
            {"stages", stages},
            {"jobs", jobs},
            {"errors", errors}};
  }

  void save() const { mechanism::detail::atomic_write(path(), to_json().dump(2) + "\n"); }

  // Accepts the manifest file or the run directory holding it.
  static RunManifest load(const fs::path& where) {
    const fs::path file = fs::is_directory(where) ? where / "manifest.json" : where;
    json j;
    try {
      j = json::parse(mechanism::detail::read_file(file));
    } catch (const json::exception& e) {
      throw IoError("manifest " + file.string() + " is not valid JSON: " + e.what());
    }
    RunManifest m;
    m.directory = file.parent_path();
    try {
      m.config_hash = j.at("config_hash").get<std::string>();
      m.pipeline = j.at("pipeline").get<std::string>();
      m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
      m.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
      m.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
      m.version = j.at("version").get<std::string>();
      m.status = j.at("status").get<std::string>();
      m.stages = j.at("stages").get<std::vector<std::string>>();
      m.jobs = j.at("jobs").get<std::set<std::string>>();
      m.errors = j.at("errors").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      throw IoError("manifest " + file.string() + ": " + e.what());
    }
    return m;
  }
};

struct RunOptions {
  std::string stop_after;  // stage name; the run returns after marking it
};

// One (bias value, seed, recipe, lambda) training unit.
struct Job {
  std::string id;
  std::size_t bias_index = 0;
  std::uint64_t seed = 0;
  std::string recipe;  // gan | felicia
  eval::LambdaPair lambdas{0.0, 0.0};
};

struct SiteCoverage {
  int site = 0;
  int minority_cluster = 1;
  double minority_fraction = 0.0;
  std::array<std::size_t, 2> counts{0, 0};
  Matrix coordinates;
};

struct JobResult {
  std::vector<eval::UtilityReport> sweep;
  std::vector<long> top_epochs;
  long best_epoch = -1;
  std::optional<eval::UtilityReport> ensemble;
  std::vector<SiteCoverage> coverage;
};

inline json to_json(const JobResult& r) {
  json cov = json::array();
  for (const auto& c : r.coverage) {
    std::vector<double> xy(c.coordinates.data(), c.coordinates.data() + c.coordinates.size());
    cov.push_back({{"site", c.site},
                   {"minority_cluster", c.minority_cluster},
                   {"minority_fraction", c.minority_fraction},
                   {"counts", c.counts},
                   {"rows", c.coordinates.rows()},
                   {"coordinates", xy}});
  }
  json j = {{"sweep", r.sweep}, {"top_epochs", r.top_epochs}, {"best_epoch", r.best_epoch}, {"coverage", cov}};
  if (r.ensemble) j["ensemble"] = *r.ensemble;
  return j;
}

inline JobResult job_result_from_json(const json& j) {
  JobResult r;
  r.sweep = j.at("sweep").get<std::vector<eval::UtilityReport>>();
  r.top_epochs = j.at("top_epochs").get<std::vector<long>>();
  r.best_epoch = j.at("best_epoch").get<long>();
  if (j.contains("ensemble")) r.ensemble = j.at("ensemble").get<eval::UtilityReport>();
  for (const auto& c : j.at("coverage")) {
    SiteCoverage s;
    s.site = c.at("site").get<int>();
    s.minority_cluster = c.at("minority_cluster").get<int>();
    s.minority_fraction = c.at("minority_fraction").get<double>();
    s.counts = c.at("counts").get<std::array<std::size_t, 2>>();
    const auto rows = c.at("rows").get<Eigen::Index>();
    const auto xy = c.at("coordinates").get<std::vector<double>>();
    FELICIA_REQUIRE(static_cast<Eigen::Index>(xy.size()) == 2 * rows, "job result: coordinate count mismatch");
    s.coordinates = Eigen::Map<const Matrix>(xy.data(), rows, 2);
    r.coverage.push_back(std::move(s));
  }
  return r;
}

// Site shards plus the held-out validation and test indices for one (bias value, seed).
struct SplitArtifact {
  data::SitePartition partition;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

inline json to_json(const SplitArtifact& s) {
  return {{"partition", s.partition}, {"validation", s.validation}, {"test", s.test}};
}

inline SplitArtifact split_from_json(const json& j) {
  return {j.at("partition").get<data::SitePartition>(), j.at("validation").get<std::vector<std::size_t>>(),
          j.at("test").get<std::vector<std::size_t>>()};
}

class Runner {
 public:
  Runner(ExperimentConfig cfg, RunManifest manifest) : cfg_(std::move(cfg)), m_(std::move(manifest)) {}

  RunManifest run(const RunOptions& opts) {
    const auto t0 = std::chrono::steady_clock::now();
    const double wall_before = m_.wall_clock_seconds;
    auto tick = [&] {
      m_.wall_clock_seconds =
          wall_before + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    m_.status = "running";
    save_manifest();
    try {
      prepare_data();
      const std::vector<std::pair<std::string, void (Runner::*)()>> stages{
          {"partition", &Runner::stage_partition}, {"jobs", &Runner::stage_jobs},
          {"selection", &Runner::stage_selection}, {"final", &Runner::stage_final},
          {"aggregate", &Runner::stage_aggregate}};
      for (const auto& [name, fn] : stages) {
        if (!m_.done(name)) {
          (this->*fn)();
          std::lock_guard lock(mu_);
          m_.stages.push_back(name);
          tick();
          m_.save();
        }
        if (name == opts.stop_after) {
          tick();
          save_manifest();
          return m_;
        }
      }
      m_.status = "complete";
      tick();
      save_manifest();
      return m_;
    } catch (const std::exception& e) {
      std::lock_guard lock(mu_);
      m_.status = "failed";
      m_.errors.push_back(e.what());
      tick();
      m_.save();
      throw;
    }
  }

 private:
  // ---- shared state ---------------------------------------------------------

  void save_manifest() {
    std::lock_guard lock(mu_);
    m_.save();
  }

  void add_artifact(const std::string& name, const fs::path& relative) {
    std::lock_guard lock(mu_);
    m_.artifacts[name] = relative.generic_string();
  }

  void write_artifact(const std::string& name, const fs::path& relative, const std::string& text) {
    fs::create_directories((m_.directory / relative).parent_path());
    mechanism::detail::atomic_write(m_.directory / relative, text);
    add_artifact(name, relative);
  }

  [[nodiscard]] bool utility() const { return cfg_.pipeline != Pipeline::coverage; }

  void prepare_data() {
    data_ = load_dataset(cfg_.dataset);
    data_.validate();
    FELICIA_REQUIRE(data_.shape == cfg_.dataset.shape, "dataset shape differs from dataset.shape");
    if (utility()) {
      FELICIA_REQUIRE(data_.num_classes() == 2, "utility pipelines need exactly two classes (0 and 1)");
      FELICIA_REQUIRE(data_.has_subgroups(), "utility pipelines need subgroup tags");
    } else {
      cluster_ = data::pca_kmeans_split(data_.images, cfg_.dataset.seed);
    }
    jobs_ = enumerate_jobs();
  }

  [[nodiscard]] std::size_t bias_count() const { return std::max<std::size_t>(1, cfg_.bias_values.size()); }

  [[nodiscard]] std::string bias_tag(std::size_t b) const {
    switch (cfg_.bias.kind) {
      case data::BiasKind::alpha_mix: return "alpha" + eval::format_double(cfg_.bias_values[b]);
      case data::BiasKind::beta_subgroup: return "beta" + eval::format_double(cfg_.bias_values[b]);
      case data::BiasKind::fixed_counts: return "counts";
    }
    return "?";
  }

  [[nodiscard]] std::string config_id(std::size_t b) const { return cfg_.name + "/" + bias_tag(b); }

  [[nodiscard]] static std::string split_key(std::size_t b, std::uint64_t seed) {
    return std::to_string(b) + ":" + std::to_string(seed);
  }

  [[nodiscard]] fs::path split_path(std::size_t b, std::uint64_t seed) const {
    return fs::path("partitions") / (bias_tag(b) + "_seed" + std::to_string(seed) + ".json");
  }

  [[nodiscard]] std::vector<Job> enumerate_jobs() const {
    std::vector<Job> out;
    for (std::size_t b = 0; b < bias_count(); ++b)
      for (std::uint64_t seed : cfg_.seeds) {
        const std::string stem = bias_tag(b) + "_seed" + std::to_string(seed);
        out.push_back({stem + "_gan", b, seed, "gan", {0.0, 0.0}});
        for (const auto& l : cfg_.lambda_grid)
          out.push_back({stem + "_felicia_" + eval::format_double(l.first) + "_" + eval::format_double(l.second), b,
                         seed, "felicia", l});
      }
    return out;
  }

  [[nodiscard]] const Job& find_job(std::size_t b, std::uint64_t seed, const std::string& recipe,
                                    eval::LambdaPair l = {0.0, 0.0}) const {
    for (const auto& j : jobs_)
      if (j.bias_index == b && j.seed == seed && j.recipe == recipe && (recipe == "gan" || j.lambdas == l)) return j;
    throw InvalidArgument("no job for recipe " + recipe);
  }

  [[nodiscard]] const SplitArtifact& split_of(std::size_t b, std::uint64_t seed) const {
    return splits_.at(split_key(b, seed));
  }

  // ---- partition ------------------------------------------------------------

  [[nodiscard]] SplitArtifact make_split(std::size_t b, std::uint64_t seed) const {
    SplitArtifact s;
    const std::uint64_t pseed = derive_seed(seed, 0x9a27, cfg_.bias.seed);
    if (!utility()) {
      s.partition = data::alpha_mix(cluster_, cfg_.bias_values[b], cfg_.shard_size, pseed);
      return s;
    }
    const auto hold = data::carve_holdout(data_, cfg_.holdout.per_class, cfg_.holdout.test_ratio, pseed);
    s.validation = hold.validation;
    s.test = hold.test;
    if (cfg_.pipeline == Pipeline::lesion) {
      s.partition = data::lesion_fixed_split(data_, hold.remainder, cfg_.bias.count_table, pseed);
    } else {
      const auto pool = data_.subset(hold.remainder);
      auto local = data::beta_subgroup_split(pool, cfg_.bias_values[b], cfg_.shard_size, pseed, cfg_.layout);
      for (auto& site : local.sites) {
        for (auto& i : site) i = hold.remainder[i];
        std::sort(site.begin(), site.end());
      }
      s.partition = std::move(local);
    }
    return s;
  }

  void stage_partition() {
    for (std::size_t b = 0; b < bias_count(); ++b)
      for (std::uint64_t seed : cfg_.seeds) {
        auto s = make_split(b, seed);
        s.partition.validate(data_.size());
        write_artifact("partition:" + bias_tag(b) + ":seed" + std::to_string(seed), split_path(b, seed),
                       to_json(s).dump() + "\n");
        splits_[split_key(b, seed)] = std::move(s);
      }
  }

  void load_splits() {
    if (!splits_.empty()) return;
    for (std::size_t b = 0; b < bias_count(); ++b)
      for (std::uint64_t seed : cfg_.seeds) {
        const fs::path p = m_.directory / split_path(b, seed);
        SplitArtifact s;
        try {
          s = split_from_json(json::parse(mechanism::detail::read_file(p)));
        } catch (const json::exception& e) {
          throw IoError("partition artifact " + p.string() + ": " + e.what());
        }
        s.partition.validate(data_.size());
        splits_[split_key(b, seed)] = std::move(s);
      }
  }

  // ---- jobs -----------------------------------------------------------------

  [[nodiscard]] fs::path checkpoint_dir(const Job& job) const { return m_.directory / "checkpoints" / job.id; }
  [[nodiscard]] static fs::path result_path(const Job& job) { return fs::path("jobs") / (job.id + ".json"); }

  [[nodiscard]] eval::UtilityClassifierSpec classifier_spec(std::uint64_t seed, std::uint64_t stream) const {
    auto spec = cfg_.classifier;
    spec.seed = derive_seed(seed, stream);
    return spec;
  }

  // Trains the job from scratch, replacing any earlier checkpoints.
  void train_job(const Job& job) {
    const fs::path dir = checkpoint_dir(job);
    fs::remove_all(dir);
    mechanism::CheckpointStore store(dir);
    add_artifact("checkpoints:" + job.id, fs::relative(dir, m_.directory));
    const auto& split = split_of(job.bias_index, job.seed);
    const std::uint64_t train_seed = derive_seed(job.seed, 0x7ea1);
    nn::OptimizerConfig opt = cfg_.optimizer;
    const mechanism::SiteSetup setup{cfg_.generator, cfg_.discriminator, cfg_.latent, opt};
    const auto phi = gan::MeasureFunction::by_name(cfg_.measure);
    const mechanism::StepSizes steps{opt.learning_rate, opt.learning_rate, opt.learning_rate};
    const int saved_sites = utility() ? 1 : 2;  // utility pipelines only read the helpee generator
    auto due = [&](long e) { return e % cfg_.cadence == 0 || e == cfg_.epochs; };

    if (job.recipe == "felicia") {
      mechanism::FeliciaSetup fs_setup{setup,
                                       split.partition.sites,
                                       mechanism::LambdaVector({job.lambdas.first, job.lambdas.second}),
                                       phi,
                                       steps,
                                       train_seed,
                                       cfg_.deterministic};
      auto state = mechanism::make_felicia(fs_setup);
      for (long e = 1; e <= cfg_.epochs; ++e) {
        const auto report = mechanism::train_round(state, data_, cfg_.batch_size);
        if (report.aborted)
          throw NumericalError("job " + job.id + ", round " + std::to_string(e) + ": " + report.error);
        if (due(e))
          for (int i = 0; i < saved_sites; ++i)
            store.save(state.sites[static_cast<std::size_t>(i)].pair.generator, i, e, job.seed);
      }
      return;
    }
    // Baseline: independent local GANs with the same per-site seeds as the FELICIA sites.
    std::vector<mechanism::SiteState> sites;
    for (int i = 0; i < saved_sites; ++i)
      sites.push_back(mechanism::make_site(i, setup, split.partition.sites[static_cast<std::size_t>(i)], train_seed));
    for (long e = 1; e <= cfg_.epochs; ++e) {
      for (auto& s : sites) mechanism::local_gan_round(s, data_, cfg_.batch_size, phi, steps);
      if (due(e))
        for (auto& s : sites) store.save(s.pair.generator, s.site_id, e, job.seed);
    }
  }

  [[nodiscard]] JobResult evaluate_job(const Job& job) const {
    const mechanism::CheckpointStore store(checkpoint_dir(job));
    const auto& split = split_of(job.bias_index, job.seed);
    JobResult r;
    if (!utility()) {
      for (int i = 0; i < 2; ++i) {
        const auto info = store.find(i, cfg_.epochs, job.seed);
        if (!info) throw IoError("job " + job.id + ": missing final checkpoint of site " + std::to_string(i));
        const nn::Network gen = store.load(info->id);
        Rng rng(derive_seed(job.seed, 0xc07e, static_cast<std::uint64_t>(i)));
        const Matrix x = gen.forward(cfg_.latent.sample(cfg_.coverage_samples, rng));
        const int minority = eval::minority_cluster_of(cluster_, split.partition.sites[static_cast<std::size_t>(i)]);
        auto stats = eval::coverage_stats(x, cluster_.basis, cluster_.centroids, minority);
        r.coverage.push_back({i, minority, stats.minority_fraction, stats.cluster_counts, std::move(stats.coordinates)});
      }
      return r;
    }
    const auto validation = data_.subset(split.validation);
    const auto spec = classifier_spec(job.seed, 0x5eed);
    eval::SweepRequest req;
    req.site = 0;
    req.seed = job.seed;
    req.cadence = cfg_.cadence;
    req.epochs = cfg_.epochs;
    req.classes = 2;
    req.n_per_class = cfg_.samples_per_class;
    req.prior = cfg_.latent;
    if (job.recipe == "felicia") req.lambdas = {job.lambdas.first, job.lambdas.second};
    req.config_id = config_id(job.bias_index);
    req.recipe = job.recipe;
    r.sweep = eval::epoch_utility_sweep(store, req, validation, spec);
    r.top_epochs = eval::select_top_epochs(r.sweep, cfg_.ensemble_k);
    r.best_epoch = eval::select_top_epochs(r.sweep, 1).front();

    const auto synth = synthesize(store, job, r.top_epochs, {cfg_.samples_per_class, cfg_.samples_per_class});
    eval::UtilityReport keys{req.config_id, req.lambdas, -1, job.seed, job.recipe, eval::EvalSplit::validation,
                             0.0, 0.0, {}};
    r.ensemble = eval::evaluate_training_set(synth, validation, spec, keys);
    return r;
  }

  // Images from the helpee generator at `epochs`, `per_class[y]` of class y.
  [[nodiscard]] data::ImageDataset synthesize(const mechanism::CheckpointStore& store, const Job& job,
                                              const std::vector<long>& epochs,
                                              const std::vector<std::size_t>& per_class) const {
    std::vector<nn::Network> nets;
    for (long e : epochs) {
      const auto info = store.find(0, e, job.seed);
      if (!info) throw IoError("job " + job.id + ": missing checkpoint at epoch " + std::to_string(e));
      nets.push_back(store.load(info->id));
    }
    std::vector<eval::GeneratorSnapshot> snaps;
    for (std::size_t i = 0; i < nets.size(); ++i) snaps.push_back({&nets[i], epochs[i]});
    data::ImageDataset out;
    out.shape = cfg_.dataset.shape;
    out.images.resize(0, out.shape.features());
    for (std::size_t y = 0; y < per_class.size(); ++y) {
      if (per_class[y] == 0) continue;
      const auto part = eval::generate_per_class(snaps, static_cast<int>(per_class.size()), per_class[y], cfg_.latent,
                                                 derive_seed(job.seed, 0x5a11, y));
      const auto rows = part.data.indices_of_class(static_cast<int>(y));
      out = data::concatenate(out, part.data.subset(rows));
    }
    return out;
  }

  void run_job(const Job& job) {
    train_job(job);
    const JobResult r = evaluate_job(job);
    write_artifact("job:" + job.id, result_path(job), to_json(r).dump() + "\n");
    std::lock_guard lock(mu_);
    results_[job.id] = r;
    m_.jobs.insert(job.id);
    m_.save();
  }

  void stage_jobs() {
    load_splits();
    std::vector<const Job*> pending;
    for (const auto& j : jobs_) {
      if (m_.jobs.count(j.id) && load_result(j)) continue;
      pending.push_back(&j);
    }
    unsigned workers = cfg_.deterministic ? 1U : cfg_.workers;
    if (workers == 0) workers = std::max(1U, std::thread::hardware_concurrency());
    workers = std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(1, pending.size())));

    std::atomic<std::size_t> next{0};
    std::vector<std::string> failures;
    auto worker = [&] {
      for (std::size_t i = next++; i < pending.size(); i = next++) {
        try {
          run_job(*pending[i]);
        } catch (const std::exception& e) {
          std::lock_guard lock(mu_);
          failures.push_back("job " + pending[i]->id + ": " + e.what());
        }
      }
    };
    if (workers == 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
      for (auto& t : pool) t.join();
    }
    if (!failures.empty()) {
      std::sort(failures.begin(), failures.end());
      std::ostringstream msg;
      msg << failures.size() << " job(s) failed; first: " << failures.front();
      {
        std::lock_guard lock(mu_);
        for (std::size_t i = 1; i < failures.size(); ++i) m_.errors.push_back(failures[i]);
      }
      throw Error(msg.str());
    }
  }

  // Reads a completed job's result; false (and the marker dropped) when the file is unusable.
  bool load_result(const Job& job) {
    if (results_.count(job.id)) return true;
    const fs::path p = m_.directory / result_path(job);
    try {
      results_[job.id] = job_result_from_json(json::parse(mechanism::detail::read_file(p)));
      return true;
    } catch (const std::exception& e) {
      std::lock_guard lock(mu_);
      m_.errors.push_back("job " + job.id + ": unreadable result (" + e.what() + "); job restarted");
      m_.jobs.erase(job.id);
      return false;
    }
  }

  void load_results() {
    load_splits();
    for (const auto& j : jobs_)
      if (!load_result(j)) throw IoError("job " + j.id + " has no usable result; resume to rerun it");
  }

  // ---- selection ------------------------------------------------------------

  struct Choice {
    eval::LambdaPair felicia{0.0, 0.0};
    std::optional<eval::LambdaPair> privgan;
  };

  void stage_selection() {
    if (!utility()) return;
    load_results();
    std::vector<eval::UtilityReport> all;
    for (const auto& j : jobs_) {
      const auto& r = results_.at(j.id);
      all.insert(all.end(), r.sweep.begin(), r.sweep.end());
      if (r.ensemble) all.push_back(*r.ensemble);
    }
    write_artifact("validation_reports", "validation_reports.csv", eval::reports_csv(all));

    json out = json::array();
    for (std::size_t b = 0; b < bias_count(); ++b) {
      std::map<eval::LambdaPair, std::vector<eval::UtilityReport>> grid;
      std::map<eval::LambdaPair, std::vector<eval::UtilityReport>> equal;
      for (const auto& l : cfg_.lambda_grid)
        for (std::uint64_t seed : cfg_.seeds) {
          const auto& r = results_.at(find_job(b, seed, "felicia", l).id);
          grid[l].push_back(*r.ensemble);
          if (l.first == l.second)
            for (const auto& s : r.sweep)
              if (s.epoch == r.best_epoch) equal[l].push_back(s);
        }
      json entry = {{"config_id", config_id(b)}, {"felicia", eval::select_lambda(grid)}, {"privgan", nullptr}};
      if (cfg_.privgan && !equal.empty()) entry["privgan"] = eval::select_lambda(equal);
      out.push_back(entry);
    }
    write_artifact("selection", "selection.json", out.dump(2) + "\n");
  }

  [[nodiscard]] std::vector<Choice> load_selection() const {
    const json j = json::parse(mechanism::detail::read_file(m_.directory / "selection.json"));
    std::vector<Choice> out;
    for (const auto& e : j) {
      Choice c;
      c.felicia = e.at("felicia").get<eval::LambdaPair>();
      if (!e.at("privgan").is_null()) c.privgan = e.at("privgan").get<eval::LambdaPair>();
      out.push_back(c);
    }
    FELICIA_REQUIRE(out.size() == bias_count(), "selection.json does not cover every bias value");
    return out;
  }

  // ---- final evaluation -----------------------------------------------------

  // Checkpoint access that retrains the job once when its checkpoints are unreadable.
  template <typename F>
  auto with_checkpoints(const Job& job, F&& f) {
    try {
      return f(mechanism::CheckpointStore(checkpoint_dir(job)));
    } catch (const IoError& e) {
      {
        std::lock_guard lock(mu_);
        m_.errors.push_back("job " + job.id + ": checkpoint unreadable (" + e.what() + "); training restarted");
        m_.save();
      }
      train_job(job);
      return f(mechanism::CheckpointStore(checkpoint_dir(job)));
    }
  }

  void stage_final() {
    load_results();
    if (!utility()) return final_coverage();
    const auto choices = load_selection();
    std::vector<eval::UtilityReport> reports;
    const bool augment = cfg_.pipeline == Pipeline::subgroup;
    for (std::size_t b = 0; b < bias_count(); ++b)
      for (std::uint64_t seed : cfg_.seeds) {
        const auto& split = split_of(b, seed);
        const auto test = data_.subset(split.test);
        auto real = data_.subset(split.partition.sites[0]);
        real.subgroups.clear();
        std::vector<std::size_t> per_class(2, cfg_.samples_per_class);
        if (augment) {
          per_class.assign(2, 0);
          for (int y : real.class_labels) ++per_class[static_cast<std::size_t>(y)];
        }
        const auto spec = classifier_spec(seed, 0xf17a1);
        auto score = [&](const std::string& recipe, std::vector<double> lambdas, const data::ImageDataset& train) {
          eval::UtilityReport keys{config_id(b), std::move(lambdas), -1, seed, recipe, eval::EvalSplit::test,
                                   0.0, 0.0, {}};
          reports.push_back(eval::evaluate_training_set(train, test, spec, keys));
        };
        auto synthetic = [&](const Job& job, const std::vector<long>& epochs) {
          auto synth = with_checkpoints(job, [&](const mechanism::CheckpointStore& s) {
            return synthesize(s, job, epochs, per_class);
          });
          return augment ? data::concatenate(real, synth) : synth;
        };
        const std::string prefix = augment ? "real+" : "";

        score("real", {}, real);
        const Job& gan = find_job(b, seed, "gan");
        score(prefix + "gan", {}, synthetic(gan, results_.at(gan.id).top_epochs));
        if (choices[b].privgan) {
          const auto l = *choices[b].privgan;
          const Job& j = find_job(b, seed, "felicia", l);
          score(prefix + "privgan", {l.first, l.second}, synthetic(j, {results_.at(j.id).best_epoch}));
        }
        const auto l = choices[b].felicia;
        const Job& j = find_job(b, seed, "felicia", l);
        score(prefix + "felicia", {l.first, l.second}, synthetic(j, results_.at(j.id).top_epochs));
      }
    write_artifact("final_test_metrics", "final_test_metrics.csv", eval::reports_csv(reports));
  }

  void final_coverage() {
    std::ostringstream metrics;
    std::ostringstream points;
    metrics << "config_id,seed,recipe,lambda1,lambda2,site,minority_cluster,minority_fraction,cluster1,cluster2\n";
    points << "config_id,seed,recipe,lambda1,lambda2,site,x,y,source\n";
    const auto f = eval::format_double;
    for (std::size_t b = 0; b < bias_count(); ++b)
      for (std::uint64_t seed : cfg_.seeds) {
        const auto& split = split_of(b, seed);
        for (std::size_t site = 0; site < 2; ++site)
          for (std::size_t i : split.partition.sites[site])
            points << config_id(b) << ',' << seed << ",real,0,0," << site << ',' << f(cluster_.embedding(i, 0)) << ','
                   << f(cluster_.embedding(i, 1)) << ",subset" << site + 1 << '\n';
        for (const auto& job : jobs_) {
          if (job.bias_index != b || job.seed != seed) continue;
          for (const auto& c : results_.at(job.id).coverage) {
            const std::string lam = f(job.lambdas.first) + ',' + f(job.lambdas.second);
            metrics << config_id(b) << ',' << seed << ',' << job.recipe << ',' << lam << ',' << c.site << ','
                    << c.minority_cluster << ',' << f(c.minority_fraction) << ',' << c.counts[0] << ',' << c.counts[1]
                    << '\n';
            for (Eigen::Index r = 0; r < c.coordinates.rows(); ++r)
              points << config_id(b) << ',' << seed << ',' << job.recipe << ',' << lam << ',' << c.site << ','
                     << f(c.coordinates(r, 0)) << ',' << f(c.coordinates(r, 1)) << ",generated\n";
          }
        }
      }
    write_artifact("coverage_metrics", "coverage_metrics.csv", metrics.str());
    write_artifact("coverage_points", "coverage_points.csv", points.str());
  }

  // ---- aggregation ----------------------------------------------------------

  void stage_aggregate() {
    const std::string source = utility() ? "final_test_metrics.csv" : "coverage_metrics.csv";
    write_artifact("aggregates", "aggregates.csv", aggregate_csv(CsvTable::read(m_.directory / source), !utility()));
  }

 public:
  // Box statistics per (config_id, recipe, lambda) and metric column.
  static std::string aggregate_csv(const CsvTable& t, bool coverage) {
    std::vector<std::string> metrics;
    if (coverage) {
      metrics = {"minority_fraction"};
    } else {
      for (std::size_t c = t.column("auc"); c < t.header.size(); ++c) metrics.push_back(t.header[c]);
    }
    using Key = std::tuple<std::string, std::string, std::string, std::string, std::string>;
    std::map<Key, std::vector<double>> groups;
    std::vector<Key> order;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      std::string recipe = t.at(r, "recipe");
      if (coverage) recipe += "_site" + t.at(r, "site");
      for (const auto& m : metrics) {
        const std::string& cell = t.at(r, m);
        if (cell.empty()) continue;
        const Key k{t.at(r, "config_id"), recipe, t.at(r, "lambda1"), t.at(r, "lambda2"), m};
        if (!groups.count(k)) order.push_back(k);
        groups[k].push_back(parse_double(cell));
      }
    }
    std::ostringstream os;
    os << "config_id,recipe,lambda1,lambda2,metric,count,median,lower_quartile,upper_quartile,whisker_low,whisker_high\n";
    for (const auto& k : order) {
      const auto a = eval::aggregate_runs(groups.at(k));
      const auto f = eval::format_double;
      os << std::get<0>(k) << ',' << std::get<1>(k) << ',' << std::get<2>(k) << ',' << std::get<3>(k) << ','
         << std::get<4>(k) << ',' << a.count << ',' << f(a.median) << ',' << f(a.lower_quartile) << ','
         << f(a.upper_quartile) << ',' << f(a.whisker_low) << ',' << f(a.whisker_high) << '\n';
    }
    return os.str();
  }

 private:
  ExperimentConfig cfg_;
  RunManifest m_;
  std::mutex mu_;
  data::ImageDataset data_;
  data::ClusterSplit cluster_;
  std::vector<Job> jobs_;
  std::map<std::string, SplitArtifact> splits_;
  std::map<std::string, JobResult> results_;
};

// Starts a fresh run in cfg.output_dir; refuses a directory that already holds a run.
inline RunManifest run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  const fs::path dir = cfg.output_dir;
  if (fs::exists(dir / "manifest.json"))
    throw ConfigError("output directory " + dir.string() + " already holds a run; resume it or choose another --out");
  fs::create_directories(dir);
  RunManifest m;
  m.directory = dir;
  m.config_hash = config_hash(cfg);
  m.pipeline = to_string(cfg.pipeline);
  m.seeds = cfg.seeds;
  m.artifacts["config"] = "config.json";
  mechanism::detail::atomic_write(dir / "config.json", to_json(cfg).dump(2) + "\n");
  return Runner(cfg, std::move(m)).run(opts);
}

// Continues a run from its last completed stage; a completed run is left untouched.
inline RunManifest resume(const fs::path& manifest_path, const RunOptions& opts = {}) {
  RunManifest m = RunManifest::load(manifest_path);
  if (m.complete()) return m;
  ExperimentConfig cfg = [&] {
    try {
      return parse_config(json::parse(mechanism::detail::read_file(m.directory / "config.json")));
    } catch (const json::exception& e) {
      throw ConfigError("config.json of run " + m.directory.string() + ": " + e.what());
    }
  }();
  if (config_hash(cfg) != m.config_hash)
    throw ConfigError("config.json of run " + m.directory.string() + " no longer matches the manifest hash");
  return Runner(std::move(cfg), std::move(m)).run(opts);
}

}  // namespace felicia::harness
