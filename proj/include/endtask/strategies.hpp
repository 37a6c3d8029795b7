#pragma once

// Training regimes over a MultiTaskModel:
//   finetune               end task only
//   pretrain_then_finetune auxiliary-only phase, then finetune
//   train_multitask        fixed softmax mixture over end + auxiliary losses
//   train_tartan_meta      mixture weights learned online from the alignment
//                          between each task's body gradient and a validation
//                          meta-gradient
//
// Every run samples one batch per task per step. Task k (end task = 0,
// auxiliary tasks 1..n in the given order) draws its batches from
// Rng::substream(seed, data, k), shuffling its train split once per epoch.
// Meta-head estimation at step s initializes the head from
// derive_seed(seed, 4s) and draws its train and val batches from
// Rng::substream(seed, meta_head, 4s + 1) and (..., 4s + 2), so it never
// perturbs the training streams.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "endtask/autodiff.hpp"
#include "endtask/model.hpp"
#include "endtask/tasks.hpp"

namespace endtask {

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OptimizerKind { sgd, adam };
enum class AlignmentMeasure { cosine, dot };
enum class MetaHeadMode { separate_head, same_head };
enum class StopReason { plateau, max_steps };

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainerConfig {
  double body_lr = 1e-3;    // step size for the shared body
  double head_lr = 1e-3;    // step size for task heads
  double weight_lr = 0.1;   // step size for raw task weights
  OptimizerKind optimizer = OptimizerKind::adam;
  AdamParams adam;
  std::size_t end_batch = 32;
  std::size_t aux_batch = 32;
  std::map<std::string, std::size_t> batch_overrides;  // per task id

  std::size_t meta_head_steps = 10;
  double meta_head_lr = 1e-3;
  double meta_head_weight_decay = 0.1;
  std::size_t meta_head_batch = 16;
  std::size_t meta_val_batch = 32;
  std::size_t meta_update_period = 1;
  AlignmentMeasure alignment = AlignmentMeasure::cosine;
  MetaHeadMode meta_head_mode = MetaHeadMode::separate_head;

  std::size_t patience = 10;  // in validation evaluations
  double min_delta = 0.0;
  std::size_t max_steps = 1000;
  std::size_t pretrain_steps = 0;
  std::size_t val_period = 50;
  std::size_t log_period = 1;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t batch_size(const std::string& task_id, bool is_end_task) const;
};

void to_json(nlohmann::json& j, const TrainerConfig& c);
void from_json(const nlohmann::json& j, TrainerConfig& c);

std::string to_string(StopReason r);

class TaskWeights {
 public:
  // Equal raw weights 1/(n+1), as in the initialization of the meta loop.
  static TaskWeights uniform(std::vector<std::string> task_ids);
  static TaskWeights from_raw(std::vector<std::string> task_ids, std::vector<double> raw);

  const std::vector<std::string>& task_ids() const { return ids_; }
  const std::vector<double>& raw() const { return raw_; }
  const std::vector<double>& normalized() const { return alpha_; }
  double raw(const std::string& id) const;
  double normalized(const std::string& id) const;

 private:
  void renormalize();
  std::vector<std::string> ids_;
  std::vector<double> raw_;
  std::vector<double> alpha_;
};

std::vector<double> softmax(const std::vector<double>& raw);

// raw_i += eta * alignment_i for every task, then softmax.
TaskWeights update_task_weights(const TaskWeights& weights, const std::map<std::string, double>& alignments,
                                double eta);

// Both maps flattened in their (shared) iteration order. Cosine returns 0 when
// either norm is below 1e-12.
double compute_alignment(const GradientMap& g_meta, const GradientMap& g_task, AlignmentMeasure measure);

enum class EarlyStop { continue_training, stop };
// Stop iff no metric among the last `patience` improves on the best earlier
// metric by more than min_delta.
EarlyStop early_stop_check(const std::vector<double>& history, std::size_t patience, double min_delta);

struct StepLog {
  std::size_t step = 0;
  std::vector<double> alpha;  // per task, run task order
  std::vector<double> loss;   // per task, this step's batch loss
  double val_metric = 0.0;    // most recent end-task validation accuracy
};

struct RunRecord {
  std::string strategy;
  std::vector<std::string> task_ids;  // end task first
  std::vector<StepLog> steps;
  std::vector<std::pair<std::size_t, double>> val_history;  // (step, accuracy)
  double initial_val_metric = 0.0;
  double best_val_metric = 0.0;
  double test_metric = 0.0;    // accuracy of the restored best model
  double test_macro_f1 = 0.0;
  StopReason stop_reason = StopReason::max_steps;
  std::size_t steps_run = 0;
  std::uint64_t seed = 0;
  nlohmann::json config;
};

void to_json(nlohmann::json& j, const RunRecord& r);
void from_json(const nlohmann::json& j, RunRecord& r);

struct ClassificationMetrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

ClassificationMetrics evaluate_classification(const MultiTaskModel& model, const Task& task,
                                              std::span<const std::size_t> rows);

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, AdamParams adam = {});
  void step(ParamSet& params, const GradientMap& grads);
  std::size_t steps_taken() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  OptimizerKind kind_;
  double lr_;
  AdamParams adam_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

struct MetaHeadEstimate {
  ParamSet params;
  double initial_loss = 0.0;  // on the meta batch, before any step
  double final_loss = 0.0;    // after the last step
};

// Re-initializes the meta head (same HeadSpec as the end task, seed derived
// from cfg.seed and meta_index), freezes the body and trains the meta head for
// cfg.meta_head_steps on one end-task train batch with L2 decay applied to the
// meta-head gradient.
MetaHeadEstimate estimate_meta_head(MultiTaskModel& model, const Task& end_task, const TrainerConfig& cfg,
                                    std::uint64_t meta_index);

RunRecord finetune(MultiTaskModel& model, const Task& end_task, const TrainerConfig& cfg);
RunRecord pretrain_then_finetune(MultiTaskModel& model, const std::vector<Task>& aux_tasks, const Task& end_task,
                                 const TrainerConfig& cfg);
RunRecord train_multitask(MultiTaskModel& model, const Task& end_task, const std::vector<Task>& aux_tasks,
                          const TaskWeights& weights, const TrainerConfig& cfg);
RunRecord train_tartan_meta(MultiTaskModel& model, const Task& end_task, const std::vector<Task>& aux_tasks,
                            const TrainerConfig& cfg);

// Convenience for tests and callers: register heads for the end task and all
// auxiliary tasks (head seed for task k = derive_seed(seed, k)) and mark the end
// task.
void register_task_heads(MultiTaskModel& model, const Task& end_task, const std::vector<Task>& aux_tasks,
                         std::uint64_t seed);

}  // namespace endtask
