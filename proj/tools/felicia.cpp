// felicia: run, resume, validate and plot federated GAN experiments.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime failure (the run
// directory keeps a resumable manifest).

#include "felicia/harness/allocator.hpp"
#include "felicia/harness/config.hpp"
#include "felicia/harness/plot.hpp"
#include "felicia/harness/runner.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

namespace h = felicia::harness;

constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

struct GlobalFlags {
  bool deterministic = false;
  std::string out;
  std::optional<std::uint64_t> seed;
};

h::ExperimentConfig load_with_overrides(const std::string& path, const GlobalFlags& flags) {
  h::ExperimentConfig cfg = h::validate_config(path);
  if (flags.deterministic) cfg.deterministic = true;
  if (!flags.out.empty()) cfg.output_dir = std::filesystem::absolute(flags.out).lexically_normal();
  if (flags.seed) cfg.seeds = {*flags.seed};
  return cfg;
}

void print_summary(const h::RunManifest& m) {
  std::cout << "run " << m.status << ": " << m.directory.string() << "\n"
            << "  config hash " << m.config_hash << ", stages";
  for (const auto& s : m.stages) std::cout << ' ' << s;
  std::cout << "\n  wall clock " << m.wall_clock_seconds << " s\n";
  if (m.artifacts.count("final_test_metrics")) std::cout << "  test metrics: " << m.artifacts.at("final_test_metrics") << "\n";
  if (m.artifacts.count("coverage_metrics")) std::cout << "  coverage: " << m.artifacts.at("coverage_metrics") << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  h::retain_heap_memory();
  CLI::App app{"Federated GAN training across simulated sites coupled by a central adversary"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalFlags flags;
  std::uint64_t seed = 0;
  app.add_flag("--deterministic", flags.deterministic, "single-threaded, bit-reproducible execution");
  app.add_option("--out", flags.out, "output directory (overrides output_dir)");
  auto* seed_opt = app.add_option("--seed", seed, "run only this repeat seed");

  std::string config_path;
  std::string manifest_path;
  std::string stop_after;
  std::string figure = "box";

  auto* run = app.add_subcommand("run", "run an experiment from a JSON config");
  run->add_option("config", config_path, "config file")->required();
  run->add_option("--stop-after", stop_after, "stop after this stage (partition, jobs, selection, final)")
      ->check(CLI::IsMember(h::stage_names()));

  auto* res = app.add_subcommand("resume", "continue a run from its last completed stage");
  res->add_option("manifest", manifest_path, "manifest.json or run directory")->required();

  auto* plot = app.add_subcommand("plot", "write plot-ready CSVs for a run");
  plot->add_option("manifest", manifest_path, "manifest.json or run directory")->required();
  plot->add_option("--figure", figure, "coverage, beta, lambda or box")
      ->check(CLI::IsMember({"coverage", "beta", "lambda", "box"}));

  auto* val = app.add_subcommand("validate", "check a config and print it with defaults applied");
  val->add_option("config", config_path, "config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }
  if (seed_opt->count() > 0) flags.seed = seed;

  try {
    if (*val) {
      const auto cfg = load_with_overrides(config_path, flags);
      std::cout << h::to_json(cfg).dump(2) << "\nconfig hash " << h::config_hash(cfg) << "\n";
    } else if (*run) {
      const auto cfg = load_with_overrides(config_path, flags);
      print_summary(h::run_experiment(cfg, {stop_after}));
    } else if (*res) {
      if (flags.deterministic || !flags.out.empty() || flags.seed)
        std::cerr << "note: --deterministic, --out and --seed are fixed by the run's config on resume\n";
      print_summary(h::resume(manifest_path));
    } else if (*plot) {
      for (const auto& p : h::emit_plot_data(manifest_path, h::figure_from_string(figure)))
        std::cout << p.string() << "\n";
    }
  } catch (const felicia::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (*run || *res) std::cerr << "the run directory holds a resumable manifest; continue with `felicia resume`\n";
    return kRuntimeError;
  }
  return 0;
}
