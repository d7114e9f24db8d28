#pragma once

#include "felicia/harness/runner.hpp"

#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace felicia::harness {

enum class Figure { coverage, beta, lambda, box };

inline Figure figure_from_string(const std::string& s) {
  if (s == "coverage") return Figure::coverage;
  if (s == "beta") return Figure::beta;
  if (s == "lambda") return Figure::lambda;
  if (s == "box") return Figure::box;
  throw ConfigError("figure: expected coverage, beta, lambda or box, got '" + s + "'");
}

namespace detail {

inline CsvTable run_table(const RunManifest& m, const std::string& artifact, const std::string& figure) {
  const auto it = m.artifacts.find(artifact);
  if (it == m.artifacts.end())
    throw InvalidArgument("plot " + figure + ": run has no " + artifact + " artifact (pipeline " + m.pipeline + ")");
  return CsvTable::read(m.directory / it->second);
}

inline void require_columns(const CsvTable& t, const std::vector<std::string>& cols, const std::string& figure) {
  for (const auto& c : cols)
    if (!t.has(c)) throw InvalidArgument("plot " + figure + ": missing metric column '" + c + "'");
}

inline std::string file_safe(std::string s) {
  for (char& c : s)
    if (c == '/' || c == '\\' || c == ',' || c == ' ') c = '_';
  return s;
}

inline fs::path write_plot(const RunManifest& m, const std::string& name, const std::string& text) {
  const fs::path p = m.directory / "plots" / name;
  fs::create_directories(p.parent_path());
  mechanism::detail::atomic_write(p, text);
  return p;
}

// The value after `key` in a config id such as "name/beta0.9".
inline double bias_value_of(const std::string& config_id, const std::string& key) {
  const auto slash = config_id.rfind('/');
  const std::string tag = config_id.substr(slash == std::string::npos ? 0 : slash + 1);
  if (tag.rfind(key, 0) != 0) throw InvalidArgument("plot: config id '" + config_id + "' carries no " + key + " value");
  return parse_double(tag.substr(key.size()));
}

}  // namespace detail

// Writes plot-ready CSVs under <run>/plots and returns their paths.
//   coverage: one x,y,source file per (generator, alpha), first seed of the run.
//   beta:     one row per (beta, recipe) with median overall and focus-subgroup accuracy.
//   lambda:   median validation AUC of the epoch ensemble per (lambda2, lambda1).
//   box:      aggregate_runs statistics per (config, recipe, lambda, metric).
inline std::vector<fs::path> emit_plot_data(const fs::path& manifest_path, Figure figure) {
  const RunManifest m = RunManifest::load(manifest_path);
  std::vector<fs::path> out;
  switch (figure) {
    case Figure::coverage: {
      const auto t = detail::run_table(m, "coverage_points", "coverage");
      detail::require_columns(t, {"config_id", "seed", "recipe", "lambda1", "lambda2", "site", "x", "y", "source"},
                              "coverage");
      if (t.rows.empty()) throw InvalidArgument("plot coverage: no points");
      const std::string seed = t.at(0, "seed");
      // Real points of each config, then one file per generator holding real + its samples.
      std::map<std::string, std::string> real;
      std::map<std::string, std::ostringstream> files;
      std::vector<std::string> order;
      for (std::size_t r = 0; r < t.rows.size(); ++r) {
        if (t.at(r, "seed") != seed) continue;
        const std::string& cfg = t.at(r, "config_id");
        const std::string line = t.at(r, "x") + "," + t.at(r, "y") + ",";
        if (t.at(r, "recipe") == "real") {
          real[cfg] += line + t.at(r, "source") + "\n";
          continue;
        }
        const std::string name = "coverage_" + detail::file_safe(cfg) + "_" + t.at(r, "recipe") + "_" +
                                 t.at(r, "lambda1") + "_" + t.at(r, "lambda2") + "_site" + t.at(r, "site") + ".csv";
        if (!files.count(name)) {
          order.push_back(name);
          files[name] << "x,y,source\n" << real[cfg];
        }
        files[name] << line << "generated\n";
      }
      for (const auto& name : order) out.push_back(detail::write_plot(m, name, files[name].str()));
      break;
    }
    case Figure::beta: {
      const auto t = detail::run_table(m, "final_test_metrics", "beta");
      const json cfg = json::parse(mechanism::detail::read_file(m.directory / "config.json"));
      if (!cfg.contains("layout")) throw InvalidArgument("plot beta: run is not a subgroup (beta) experiment");
      const std::string focus = "acc_" + cfg.at("layout").at("focus").get<std::string>();
      detail::require_columns(t, {"config_id", "recipe", "acc_overall", focus}, "beta");
      using Key = std::pair<double, std::string>;
      std::map<Key, std::pair<std::vector<double>, std::vector<double>>> groups;
      for (std::size_t r = 0; r < t.rows.size(); ++r) {
        auto& g = groups[{detail::bias_value_of(t.at(r, "config_id"), "beta"), t.at(r, "recipe")}];
        g.first.push_back(parse_double(t.at(r, "acc_overall")));
        g.second.push_back(parse_double(t.at(r, focus)));
      }
      std::ostringstream os;
      os << "beta,recipe,count,acc_overall_median," << focus << "_median," << focus << "_lower_quartile," << focus
         << "_upper_quartile\n";
      for (const auto& [k, v] : groups) {
        const auto all = eval::aggregate_runs(v.first);
        const auto sub = eval::aggregate_runs(v.second);
        os << eval::format_double(k.first) << ',' << k.second << ',' << all.count << ','
           << eval::format_double(all.median) << ',' << eval::format_double(sub.median) << ','
           << eval::format_double(sub.lower_quartile) << ',' << eval::format_double(sub.upper_quartile) << '\n';
      }
      out.push_back(detail::write_plot(m, "beta_accuracy.csv", os.str()));
      break;
    }
    case Figure::lambda: {
      const auto t = detail::run_table(m, "validation_reports", "lambda");
      detail::require_columns(t, {"config_id", "lambda1", "lambda2", "epoch", "recipe", "auc"}, "lambda");
      using Key = std::tuple<std::string, double, double>;
      std::map<Key, std::vector<double>> groups;
      for (std::size_t r = 0; r < t.rows.size(); ++r) {
        if (t.at(r, "recipe") != "felicia" || t.at(r, "epoch") != "-1") continue;
        groups[{t.at(r, "config_id"), parse_double(t.at(r, "lambda2")), parse_double(t.at(r, "lambda1"))}].push_back(
            parse_double(t.at(r, "auc")));
      }
      if (groups.empty()) throw InvalidArgument("plot lambda: no ensemble validation reports");
      std::ostringstream os;
      os << "config_id,lambda2,lambda1,count,median_auc,lower_quartile,upper_quartile\n";
      for (const auto& [k, v] : groups) {
        const auto a = eval::aggregate_runs(v);
        os << std::get<0>(k) << ',' << eval::format_double(std::get<1>(k)) << ','
           << eval::format_double(std::get<2>(k)) << ',' << a.count << ',' << eval::format_double(a.median) << ','
           << eval::format_double(a.lower_quartile) << ',' << eval::format_double(a.upper_quartile) << '\n';
      }
      out.push_back(detail::write_plot(m, "lambda_auc.csv", os.str()));
      break;
    }
    case Figure::box: {
      const bool coverage = m.pipeline == "coverage";
      const auto t = detail::run_table(m, coverage ? "coverage_metrics" : "final_test_metrics", "box");
      detail::require_columns(t, {"config_id", "recipe", "lambda1", "lambda2", coverage ? "minority_fraction" : "auc"},
                              "box");
      out.push_back(detail::write_plot(m, "box_stats.csv", Runner::aggregate_csv(t, coverage)));
      break;
    }
  }
  return out;
}

}  // namespace felicia::harness
