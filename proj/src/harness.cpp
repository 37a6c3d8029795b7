#include "endtask/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace endtask {

namespace fs = std::filesystem;

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::finetune_only: return "finetune_only";
    case Strategy::pretrain_finetune: return "pretrain_finetune";
    case Strategy::tartan_mt: return "tartan_mt";
    case Strategy::tartan_meta: return "tartan_meta";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  for (Strategy s : {Strategy::finetune_only, Strategy::pretrain_finetune, Strategy::tartan_mt, Strategy::tartan_meta})
    if (to_string(s) == name) return s;
  throw std::invalid_argument("unknown strategy '" + name + "'");
}

// ---------------------------------------------------------------- config

void ExperimentConfig::validate() const {
  if (schema_version != kSchemaVersion) {
    throw std::invalid_argument("unsupported schema_version " + std::to_string(schema_version));
  }
  if (prng != kPrngAlgorithm) throw std::invalid_argument("config pins PRNG '" + prng + "', this build provides '" + std::string(kPrngAlgorithm) + "'");
  if (benchmark.has_value() == dataset.has_value()) {
    throw std::invalid_argument("config needs exactly one of 'benchmark' or 'dataset'");
  }
  if (benchmark) benchmark_defaults(*benchmark);  // throws on unknown ids
  if (seeds.empty()) throw std::invalid_argument("seeds must be nonempty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw std::invalid_argument("seeds must be distinct");
  }
  if (!weights.empty() && strategy != Strategy::tartan_mt) {
    throw std::invalid_argument("fixed weights are only meaningful for tartan_mt");
  }
  if (strategy == Strategy::pretrain_finetune && trainer.pretrain_steps == 0) {
    throw std::invalid_argument("pretrain_finetune needs trainer.pretrain_steps >= 1");
  }
  if (dataset && dataset->aux.empty() && strategy != Strategy::finetune_only) {
    throw std::invalid_argument("strategy " + to_string(strategy) + " needs at least one auxiliary task");
  }
  trainer.validate();
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json::object();
  j["schema_version"] = c.schema_version;
  j["prng"] = c.prng;
  if (c.benchmark) {
    j["benchmark"] = *c.benchmark;
    j["benchmark_options"] = c.benchmark_options;
  }
  if (c.dataset) {
    nlohmann::json d;
    d["manifest"] = c.dataset->manifest;
    d["aux"] = nlohmann::json::array();
    for (const auto& a : c.dataset->aux) d["aux"].push_back({{"id", a.id}, {"mask_prob", a.mask_prob}});
    d["hidden_dims"] = c.dataset->hidden_dims;
    d["activation"] = to_string(c.dataset->activation);
    j["dataset"] = d;
  }
  j["strategy"] = to_string(c.strategy);
  if (!c.weights.empty()) j["weights"] = c.weights;
  j["trainer"] = c.trainer;
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir;
  j["threads"] = c.threads;
  if (c.data_seed) j["data_seed"] = *c.data_seed;
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  static const std::set<std::string> known{"schema_version", "prng", "benchmark", "benchmark_options", "dataset",
                                           "strategy", "weights", "trainer", "seeds", "output_dir", "threads",
                                           "data_seed"};
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw std::invalid_argument("unknown config field '" + key + "'");
  c = ExperimentConfig{};
  c.schema_version = j.value("schema_version", kSchemaVersion);
  c.prng = j.value("prng", std::string(kPrngAlgorithm));
  if (j.contains("benchmark")) c.benchmark = j.at("benchmark").get<std::string>();
  if (j.contains("benchmark_options")) c.benchmark_options = j.at("benchmark_options");
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    DatasetSource src;
    src.manifest = d.at("manifest").get<DatasetManifest>();
    for (const auto& a : d.value("aux", nlohmann::json::array()))
      src.aux.push_back({a.at("id").get<std::string>(), a.value("mask_prob", 0.15)});
    if (d.contains("hidden_dims")) src.hidden_dims = d.at("hidden_dims").get<std::vector<std::size_t>>();
    if (d.contains("activation")) src.activation = parse_activation(d.at("activation").get<std::string>());
    c.dataset = std::move(src);
  }
  c.strategy = parse_strategy(j.at("strategy").get<std::string>());
  if (j.contains("weights")) c.weights = j.at("weights").get<std::map<std::string, double>>();
  if (j.contains("trainer")) c.trainer = j.at("trainer").get<TrainerConfig>();
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  c.output_dir = j.value("output_dir", c.output_dir);
  c.threads = j.value("threads", std::size_t{0});
  if (j.contains("data_seed")) c.data_seed = j.at("data_seed").get<std::uint64_t>();
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + " is not valid JSON: " + e.what());
  }
  ExperimentConfig c = j.get<ExperimentConfig>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------- runs

namespace {

BenchmarkInstance dataset_instance(const DatasetSource& src, std::uint64_t data_seed) {
  Task end;
  end.id = "end";
  end.objective = Objective::classification;
  end.data = load_from_manifest(src.manifest);
  end.head = HeadSpec{end.data.num_classes, std::nullopt, HeadKind::classification};
  end.validate(true);
  BenchmarkInstance b;
  b.end_task = end;
  for (std::size_t k = 0; k < src.aux.size(); ++k) {
    b.aux_tasks.push_back(
        derive_masked_reconstruction_task(end.data, src.aux[k].mask_prob, derive_seed(data_seed, k), src.aux[k].id));
  }
  const std::size_t d = end.data.feature_dim();
  b.body.input_dim = src.aux.empty() ? d : 2 * d;
  b.body.hidden_dims = src.hidden_dims;
  b.body.activation = src.activation;
  b.body.validate();
  return b;
}

std::string format_real(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

RunRecord run_single(const ExperimentConfig& config, std::uint64_t seed) {
  config.validate();
  TrainerConfig tc = config.trainer;
  tc.seed = seed;
  const std::uint64_t data_seed = config.data_seed.value_or(seed);
  BenchmarkInstance inst = config.benchmark ? make_benchmark(*config.benchmark, config.benchmark_options, data_seed)
                                            : dataset_instance(*config.dataset, data_seed);

  MultiTaskModel model = MultiTaskModel::build(inst.body, seed);
  RunRecord record;
  switch (config.strategy) {
    case Strategy::finetune_only:
      register_task_heads(model, inst.end_task, {}, seed);
      record = finetune(model, inst.end_task, tc);
      break;
    case Strategy::pretrain_finetune:
      register_task_heads(model, inst.end_task, inst.aux_tasks, seed);
      record = pretrain_then_finetune(model, inst.aux_tasks, inst.end_task, tc);
      break;
    case Strategy::tartan_mt: {
      register_task_heads(model, inst.end_task, inst.aux_tasks, seed);
      std::vector<std::string> ids{inst.end_task.id};
      for (const auto& t : inst.aux_tasks) ids.push_back(t.id);
      TaskWeights weights = TaskWeights::uniform(ids);
      if (!config.weights.empty()) {
        std::vector<double> raw;
        for (const auto& id : ids) {
          auto it = config.weights.find(id);
          if (it == config.weights.end()) throw std::invalid_argument("weights missing task '" + id + "'");
          raw.push_back(it->second);
        }
        if (config.weights.size() != ids.size()) throw std::invalid_argument("weights name unknown tasks");
        weights = TaskWeights::from_raw(ids, raw);
      }
      record = train_multitask(model, inst.end_task, inst.aux_tasks, weights, tc);
      break;
    }
    case Strategy::tartan_meta:
      register_task_heads(model, inst.end_task, inst.aux_tasks, seed);
      record = train_tartan_meta(model, inst.end_task, inst.aux_tasks, tc);
      break;
  }
  record.config = config;
  record.config["seeds"] = {seed};
  return record;
}

bool ExperimentResult::all_completed() const {
  return std::all_of(outcomes.begin(), outcomes.end(), [](const SeedOutcome& o) { return o.completed; });
}

std::vector<RunRecord> ExperimentResult::records() const {
  std::vector<RunRecord> out;
  for (const auto& o : outcomes)
    if (o.record) out.push_back(*o.record);
  return out;
}

std::string record_csv(const RunRecord& record) {
  std::string out = "step";
  for (const auto& id : record.task_ids) out += ",alpha_" + id;
  for (const auto& id : record.task_ids) out += ",loss_" + id;
  out += ",val_metric\n";
  for (const auto& s : record.steps) {
    out += std::to_string(s.step);
    for (double a : s.alpha) out += "," + format_real(a);
    for (double l : s.loss) out += "," + format_real(l);
    out += "," + format_real(s.val_metric) + "\n";
  }
  return out;
}

void write_file_atomic(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_record_csv(const RunRecord& record, const fs::path& path) { write_file_atomic(path, record_csv(record)); }

TrajectoryTable read_trajectory_csv(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument(path.string() + " is empty");
  const auto header = split_csv_line(line);
  if (header.empty() || header[0] != "step") throw std::invalid_argument(path.string() + " lacks a step column");
  TrajectoryTable t;
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c].rfind("alpha_", 0) == 0) {
      t.task_ids.push_back(header[c].substr(6));
      cols.push_back(c);
    }
  }
  if (cols.empty()) throw std::invalid_argument(path.string() + " has no alpha columns");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) throw std::invalid_argument("ragged row in " + path.string());
    t.steps.push_back(std::stoull(cells[0]));
    std::vector<double> row;
    for (std::size_t c : cols) row.push_back(std::strtod(cells[c].c_str(), nullptr));
    t.alpha.push_back(std::move(row));
  }
  return t;
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  config.validate();
  const fs::path dir = config.output_dir;
  fs::create_directories(dir);

  ExperimentResult result;
  result.outcomes.resize(config.seeds.size());
  std::size_t workers = config.threads;
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, config.seeds.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < config.seeds.size(); i = next++) {
      SeedOutcome& o = result.outcomes[i];
      o.seed = config.seeds[i];
      const std::string stem = "seed_" + std::to_string(o.seed);
      try {
        RunRecord r = run_single(config, o.seed);
        write_record_csv(r, dir / (stem + ".csv"));
        write_file_atomic(dir / (stem + ".json"), nlohmann::json(r).dump(2) + "\n");
        o.record = std::move(r);
        o.completed = true;
      } catch (const std::exception& e) {
        o.error = e.what();
        nlohmann::json abort{{"seed", o.seed}, {"status", "aborted"}, {"reason", o.error}};
        write_file_atomic(dir / (stem + ".json"), abort.dump(2) + "\n");
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  nlohmann::json summary;
  summary["schema_version"] = kSchemaVersion;
  summary["prng"] = kPrngAlgorithm;
  summary["strategy"] = to_string(config.strategy);
  summary["val_period"] = config.trainer.val_period;
  summary["log_period"] = config.trainer.log_period;
  summary["config"] = config;
  summary["seeds"] = nlohmann::json::array();
  std::vector<double> accuracies;
  for (const auto& o : result.outcomes) {
    nlohmann::json s{{"seed", o.seed}, {"status", o.completed ? "completed" : "aborted"}};
    if (o.completed) {
      s["test_accuracy"] = o.record->test_metric;
      s["test_macro_f1"] = o.record->test_macro_f1;
      s["best_val_metric"] = o.record->best_val_metric;
      s["stop_reason"] = to_string(o.record->stop_reason);
      s["steps_run"] = o.record->steps_run;
      accuracies.push_back(100.0 * o.record->test_metric);
    } else {
      s["reason"] = o.error;
    }
    summary["seeds"].push_back(s);
  }
  if (!accuracies.empty()) {
    const Aggregate agg = aggregate_values(accuracies);
    summary["test_accuracy_pct"] = {{"mean", agg.mean}, {"std", agg.std}, {"formatted", agg.formatted()}};
    if (!agg.note.empty()) summary["test_accuracy_pct"]["note"] = agg.note;
  }
  write_file_atomic(dir / "summary.json", summary.dump(2) + "\n");
  return result;
}

std::vector<RunRecord> load_records(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::invalid_argument(dir.string() + " is not a directory");
  std::vector<RunRecord> records;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("seed_", 0) != 0 || entry.path().extension() != ".json") continue;
    const auto j = nlohmann::json::parse(read_text(entry.path()));
    if (j.contains("status") && j.at("status") == "aborted") continue;
    records.push_back(j.get<RunRecord>());
  }
  std::sort(records.begin(), records.end(), [](const RunRecord& a, const RunRecord& b) { return a.seed < b.seed; });
  return records;
}

}  // namespace endtask
