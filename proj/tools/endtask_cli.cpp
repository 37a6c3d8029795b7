// Command-line entry point: train, compare, plot, oracle, stats.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "endtask/harness.hpp"

namespace fs = std::filesystem;
using namespace endtask;

namespace {

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    const unsigned long long v = std::stoull(item, &used);
    if (used != item.size()) throw std::invalid_argument("bad seed '" + item + "'");
    seeds.push_back(v);
  }
  return seeds;
}

// A run directory (test accuracy in percent per seed) or a text file of
// numbers separated by commas or whitespace.
SampleSet read_samples(const std::string& source) {
  SampleSet s;
  s.label = fs::path(source).filename().string();
  if (fs::is_directory(source)) {
    for (const auto& r : load_records(source)) s.values.push_back(100.0 * r.test_metric);
    return s;
  }
  std::ifstream in(source);
  if (!in) throw std::runtime_error("cannot open " + source);
  std::string token;
  while (in >> token) {
    std::stringstream parts(token);
    std::string cell;
    while (std::getline(parts, cell, ',')) {
      if (cell.empty()) continue;
      std::size_t used = 0;
      const double v = std::stod(cell, &used);
      if (used != cell.size()) throw std::invalid_argument("bad number '" + cell + "' in " + source);
      s.values.push_back(v);
    }
  }
  return s;
}

int cmd_train(const std::string& config_path, const std::string& seeds, const std::string& out) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  if (!seeds.empty()) cfg.seeds = parse_seed_list(seeds);
  if (!out.empty()) cfg.output_dir = out;
  cfg.validate();
  const ExperimentResult result = run_experiment(cfg);
  for (const auto& o : result.outcomes) {
    if (o.completed) {
      std::printf("seed %llu: test accuracy %.4f (best val %.4f, %zu steps, %s)\n",
                  static_cast<unsigned long long>(o.seed), o.record->test_metric, o.record->best_val_metric,
                  o.record->steps_run, to_string(o.record->stop_reason).c_str());
    } else {
      std::printf("seed %llu: aborted: %s\n", static_cast<unsigned long long>(o.seed), o.error.c_str());
    }
  }
  std::printf("records written to %s\n", cfg.output_dir.c_str());
  return result.all_completed() ? 0 : 1;
}

int cmd_compare(const std::string& baseline, const std::vector<std::string>& candidates, std::size_t permutations,
                const std::string& csv_out) {
  std::vector<fs::path> cands(candidates.begin(), candidates.end());
  const ComparisonReport report = compare_run_dirs(baseline, cands, permutations);
  std::cout << report.table();
  if (!csv_out.empty()) write_file_atomic(csv_out, report.csv());
  return 0;
}

int cmd_plot(const std::string& dir, const std::string& out, std::size_t window, const std::string& title) {
  PlotOptions opts;
  opts.window = window;
  if (!title.empty()) opts.title = title;
  render_trajectories(load_records(dir), out, opts);
  fs::path csv = out;
  csv.replace_extension(".csv");
  std::printf("wrote %s and %s\n", out.c_str(), csv.string().c_str());
  return 0;
}

int cmd_oracle(const std::string& config_path) {
  OracleSuiteConfig cfg;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw std::runtime_error("cannot open " + config_path);
    cfg = nlohmann::json::parse(in).get<OracleSuiteConfig>();
  }
  const OracleSuiteReport report = run_oracle_suite(cfg, std::cout);
  return report.passed() ? 0 : 1;
}

int cmd_stats(const std::string& a_src, const std::string& b_src, std::size_t permutations) {
  SampleSet a = read_samples(a_src);
  SampleSet b = read_samples(b_src);
  a.validate();
  b.validate();
  const Aggregate ag = aggregate_values(a.values);
  const Aggregate bg = aggregate_values(b.values);
  const double p = permutation_test(a, b, permutations, 0);
  std::printf("%s: %s (n=%zu)\n", a.label.c_str(), ag.formatted().c_str(), a.values.size());
  std::printf("%s: %s (n=%zu)\n", b.label.c_str(), bg.formatted().c_str(), b.values.size());
  std::printf("p = %s (two-sided permutation test, %s)%s\n", format_p_value(p).c_str(),
              permutations == 0 ? "exhaustive" : (std::to_string(permutations) + " permutations").c_str(),
              p < 0.05 ? " *" : "");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"End-task-aware auxiliary training laboratory"};
  app.require_subcommand(1);

  std::string config, seeds, out;
  auto* train = app.add_subcommand("train", "run an experiment config over its seeds");
  train->add_option("--config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--seeds", seeds, "comma-separated seeds overriding the config");
  train->add_option("--out", out, "output directory overriding the config");

  std::string baseline, csv_out;
  std::vector<std::string> candidates;
  std::size_t permutations = 10000;
  auto* compare = app.add_subcommand("compare", "mean_{std} table with permutation-test p-values");
  compare->add_option("--baseline", baseline, "baseline run directory")->required()->check(CLI::ExistingDirectory);
  compare->add_option("--candidate", candidates, "candidate run directories")->required()->check(CLI::ExistingDirectory);
  compare->add_option("--permutations", permutations, "Monte Carlo permutations (0: exhaustive)");
  compare->add_option("--csv", csv_out, "also write the table as CSV");

  std::string records, plot_out, title;
  std::size_t window = 0;
  auto* plot = app.add_subcommand("plot", "task-weight trajectories as SVG plus CSV");
  plot->add_option("--records", records, "run directory")->required()->check(CLI::ExistingDirectory);
  plot->add_option("--out", plot_out, "output SVG path")->required();
  plot->add_option("--window", window, "trailing moving-average window (0: none)");
  plot->add_option("--title", title, "plot title");

  std::string oracle_config;
  auto* oracle = app.add_subcommand("oracle", "bilevel hypergradient oracle suite");
  oracle->add_option("--config", oracle_config, "oracle config (JSON); defaults when omitted")
      ->check(CLI::ExistingFile);

  std::string a_src, b_src;
  std::size_t stat_perms = 10000;
  auto* stats = app.add_subcommand("stats", "permutation test between two samples");
  stats->add_option("--a", a_src, "run directory or file of numbers")->required();
  stats->add_option("--b", b_src, "run directory or file of numbers")->required();
  stats->add_option("--permutations", stat_perms, "Monte Carlo permutations (0: exhaustive)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(config, seeds, out);
    if (*compare) return cmd_compare(baseline, candidates, permutations, csv_out);
    if (*plot) return cmd_plot(records, plot_out, window, title);
    if (*oracle) return cmd_oracle(oracle_config);
    if (*stats) return cmd_stats(a_src, b_src, stat_perms);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
