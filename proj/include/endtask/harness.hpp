#pragma once

// Experiment orchestration: configuration, built-in benchmarks, multi-seed
// runs with CSV/JSON export, method comparison, trajectory plots and the
// bilevel oracle suite.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "endtask/model.hpp"
#include "endtask/prng.hpp"
#include "endtask/stats.hpp"
#include "endtask/strategies.hpp"
#include "endtask/tasks.hpp"

namespace endtask {

inline constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------- benchmarks

struct BenchmarkInstance {
  BodySpec body;
  Task end_task;
  std::vector<Task> aux_tasks;
};

// synth-helpful-harmful: end task, a same-teacher auxiliary task with 20%
//   label noise ("helpful") and a random-label auxiliary task ("harmful").
//   The harmful task is small and has many classes, so a narrow body spends
//   capacity memorizing it.
// synth-tapt-dapt: end task labelled from a low-dimensional latent signal
//   observed through additive noise; masked reconstruction over the end
//   task's train inputs ("tapt") and over n x |train| rows from the same
//   input distribution ("dapt").
//
// Options override the defaults listed by benchmark_defaults(id). Data are
// generated from `data_seed`.
std::vector<std::string> benchmark_ids();
nlohmann::json benchmark_defaults(const std::string& id);
BenchmarkInstance make_benchmark(const std::string& id, const nlohmann::json& options, std::uint64_t data_seed);

// ---------------------------------------------------------------- config

enum class Strategy { finetune_only, pretrain_finetune, tartan_mt, tartan_meta };

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& name);

struct AuxSpec {
  std::string id = "tapt";
  double mask_prob = 0.15;
};

// A CSV dataset as the end task plus masked-reconstruction auxiliary tasks
// over its train split.
struct DatasetSource {
  DatasetManifest manifest;
  std::vector<AuxSpec> aux;
  std::vector<std::size_t> hidden_dims{32};
  Activation activation = Activation::tanh;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::string prng{kPrngAlgorithm};
  std::optional<std::string> benchmark;
  nlohmann::json benchmark_options = nlohmann::json::object();
  std::optional<DatasetSource> dataset;
  Strategy strategy = Strategy::tartan_meta;
  std::map<std::string, double> weights;  // raw weights for tartan_mt; empty means uniform
  TrainerConfig trainer;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "runs";
  std::size_t threads = 0;  // 0: one per seed, capped by hardware concurrency
  // Benchmark data follow the run seed unless pinned here.
  std::optional<std::uint64_t> data_seed;

  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// ---------------------------------------------------------------- runs

// Builds data, model and heads for one seed and trains with the configured
// strategy. trainer.seed is replaced by `seed`.
RunRecord run_single(const ExperimentConfig& config, std::uint64_t seed);

struct SeedOutcome {
  std::uint64_t seed = 0;
  bool completed = false;
  std::string error;
  std::optional<RunRecord> record;
};

struct ExperimentResult {
  std::vector<SeedOutcome> outcomes;  // in config seed order
  bool all_completed() const;
  std::vector<RunRecord> records() const;
};

// Writes seed_<s>.csv and seed_<s>.json per seed and an atomically replaced
// summary.json into config.output_dir.
ExperimentResult run_experiment(const ExperimentConfig& config);

// Columns: step, alpha_<task>..., loss_<task>..., val_metric. Reals use %.17g;
// an untrained task's loss is an empty cell.
void write_record_csv(const RunRecord& record, const std::filesystem::path& path);
std::string record_csv(const RunRecord& record);

struct TrajectoryTable {
  std::vector<std::string> task_ids;
  std::vector<std::size_t> steps;
  std::vector<std::vector<double>> alpha;  // [step][task]
};
TrajectoryTable read_trajectory_csv(const std::filesystem::path& path);

// Completed records (seed_*.json) in a run directory, ordered by seed.
std::vector<RunRecord> load_records(const std::filesystem::path& dir);

// ---------------------------------------------------------------- reports

struct MethodSummary {
  std::string label;
  std::string strategy;
  Aggregate accuracy;  // test accuracy in percent
  std::optional<double> p_value;  // vs baseline
  bool significant = false;
};

struct ComparisonReport {
  std::vector<std::string> task_ids;
  std::size_t permutations = 0;
  std::vector<MethodSummary> methods;  // baseline first

  std::string table() const;
  std::string csv() const;
};

// Test accuracies are compared in percent. p-values are two-sided
// permutation tests against the baseline; p < 0.05 is marked with '*'.
ComparisonReport compare_methods(const std::vector<std::pair<std::string, std::vector<RunRecord>>>& methods,
                                 std::size_t n_permutations, std::uint64_t seed = 0);
ComparisonReport compare_run_dirs(const std::filesystem::path& baseline,
                                  const std::vector<std::filesystem::path>& candidates, std::size_t n_permutations,
                                  std::uint64_t seed = 0);

struct PlotOptions {
  std::size_t window = 0;  // trailing moving average; 0 draws the raw log
  std::string title = "task weights";
};

// SVG line chart of alpha per task vs step (one line per task and record)
// plus a sibling CSV (same stem, .csv) holding exactly the plotted values.
void render_trajectories(const std::vector<RunRecord>& records, const std::filesystem::path& svg_path,
                         const PlotOptions& options = {});

struct OracleSuiteConfig {
  std::size_t instances = 100;
  std::size_t min_dim = 2, max_dim = 10;
  std::size_t max_aux = 3;
  double eig_lo = 0.5, eig_hi = 2.0;
  double fd_step = 1e-5;
  double fd_tolerance = 1e-6;
  std::size_t sign_trials = 1000;
  double sign_threshold = 0.9;
  std::vector<std::size_t> neumann_ks{0, 1, 5, 20};
  std::uint64_t seed = 0;
  std::string output_dir = "oracle";
};

void to_json(nlohmann::json& j, const OracleSuiteConfig& c);
void from_json(const nlohmann::json& j, OracleSuiteConfig& c);

struct InvariantResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct OracleSuiteReport {
  std::vector<InvariantResult> invariants;
  bool passed() const;
};

// Writes oracle_rows.csv and oracle_summary.json and prints one PASS/FAIL line
// per invariant to `out`.
OracleSuiteReport run_oracle_suite(const OracleSuiteConfig& config, std::ostream& out);

// Writes `content` to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

}  // namespace endtask
