#include "endtask/strategies.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "endtask/prng.hpp"

namespace endtask {

NLOHMANN_JSON_SERIALIZE_ENUM(OptimizerKind, {{OptimizerKind::sgd, "sgd"}, {OptimizerKind::adam, "adam"}})
NLOHMANN_JSON_SERIALIZE_ENUM(AlignmentMeasure, {{AlignmentMeasure::cosine, "cosine"}, {AlignmentMeasure::dot, "dot"}})
NLOHMANN_JSON_SERIALIZE_ENUM(MetaHeadMode,
                             {{MetaHeadMode::separate_head, "separate_head"}, {MetaHeadMode::same_head, "same_head"}})
NLOHMANN_JSON_SERIALIZE_ENUM(StopReason, {{StopReason::plateau, "plateau"}, {StopReason::max_steps, "max_steps"}})

// ---------------------------------------------------------------- config

void TrainerConfig::validate() const {
  if (!(body_lr > 0.0) || !(head_lr > 0.0) || !(meta_head_lr > 0.0)) {
    throw std::invalid_argument("step sizes must be positive");
  }
  if (!(weight_lr >= 0.0)) throw std::invalid_argument("weight step size must be non-negative");
  if (patience < 1) throw std::invalid_argument("patience must be >= 1");
  if (meta_update_period < 1 || val_period < 1 || log_period < 1) throw std::invalid_argument("periods must be >= 1");
  if (end_batch == 0 || aux_batch == 0 || meta_head_batch == 0 || meta_val_batch == 0) {
    throw std::invalid_argument("batch sizes must be >= 1");
  }
  if (meta_head_weight_decay < 0.0 || min_delta < 0.0) throw std::invalid_argument("negative decay or min_delta");
}

std::size_t TrainerConfig::batch_size(const std::string& task_id, bool is_end_task) const {
  if (auto it = batch_overrides.find(task_id); it != batch_overrides.end()) return it->second;
  return is_end_task ? end_batch : aux_batch;
}

void to_json(nlohmann::json& j, const TrainerConfig& c) {
  j = nlohmann::json{
      {"body_lr", c.body_lr},
      {"head_lr", c.head_lr},
      {"weight_lr", c.weight_lr},
      {"optimizer", c.optimizer},
      {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
      {"end_batch", c.end_batch},
      {"aux_batch", c.aux_batch},
      {"batch_overrides", c.batch_overrides},
      {"meta_head_steps", c.meta_head_steps},
      {"meta_head_lr", c.meta_head_lr},
      {"meta_head_weight_decay", c.meta_head_weight_decay},
      {"meta_head_batch", c.meta_head_batch},
      {"meta_val_batch", c.meta_val_batch},
      {"meta_update_period", c.meta_update_period},
      {"alignment", c.alignment},
      {"meta_head_mode", c.meta_head_mode},
      {"patience", c.patience},
      {"min_delta", c.min_delta},
      {"max_steps", c.max_steps},
      {"pretrain_steps", c.pretrain_steps},
      {"val_period", c.val_period},
      {"log_period", c.log_period},
      {"seed", c.seed},
  };
}

void from_json(const nlohmann::json& j, TrainerConfig& c) {
  const TrainerConfig d;
  c.body_lr = j.value("body_lr", d.body_lr);
  c.head_lr = j.value("head_lr", d.head_lr);
  c.weight_lr = j.value("weight_lr", d.weight_lr);
  c.optimizer = j.value("optimizer", d.optimizer);
  if (j.contains("adam")) {
    const auto& a = j.at("adam");
    c.adam.beta1 = a.value("beta1", d.adam.beta1);
    c.adam.beta2 = a.value("beta2", d.adam.beta2);
    c.adam.eps = a.value("eps", d.adam.eps);
  }
  c.end_batch = j.value("end_batch", d.end_batch);
  c.aux_batch = j.value("aux_batch", d.aux_batch);
  c.batch_overrides = j.value("batch_overrides", d.batch_overrides);
  c.meta_head_steps = j.value("meta_head_steps", d.meta_head_steps);
  c.meta_head_lr = j.value("meta_head_lr", d.meta_head_lr);
  c.meta_head_weight_decay = j.value("meta_head_weight_decay", d.meta_head_weight_decay);
  c.meta_head_batch = j.value("meta_head_batch", d.meta_head_batch);
  c.meta_val_batch = j.value("meta_val_batch", d.meta_val_batch);
  c.meta_update_period = j.value("meta_update_period", d.meta_update_period);
  c.alignment = j.value("alignment", d.alignment);
  c.meta_head_mode = j.value("meta_head_mode", d.meta_head_mode);
  c.patience = j.value("patience", d.patience);
  c.min_delta = j.value("min_delta", d.min_delta);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.pretrain_steps = j.value("pretrain_steps", d.pretrain_steps);
  c.val_period = j.value("val_period", d.val_period);
  c.log_period = j.value("log_period", d.log_period);
  c.seed = j.value("seed", d.seed);
}

std::string to_string(StopReason r) { return r == StopReason::plateau ? "plateau" : "max_steps"; }

// ---------------------------------------------------------------- weights

std::vector<double> softmax(const std::vector<double>& raw) {
  if (raw.empty()) throw std::invalid_argument("softmax of an empty vector");
  const double mx = *std::max_element(raw.begin(), raw.end());
  std::vector<double> out(raw.size());
  double total = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) total += out[i] = std::exp(raw[i] - mx);
  for (double& v : out) v /= total;
  return out;
}

TaskWeights TaskWeights::uniform(std::vector<std::string> task_ids) {
  const double w = 1.0 / static_cast<double>(task_ids.size());
  std::vector<double> raw(task_ids.size(), w);
  return from_raw(std::move(task_ids), std::move(raw));
}

TaskWeights TaskWeights::from_raw(std::vector<std::string> task_ids, std::vector<double> raw) {
  if (task_ids.empty() || task_ids.size() != raw.size()) throw std::invalid_argument("weights need one raw per task");
  std::set<std::string> unique(task_ids.begin(), task_ids.end());
  if (unique.size() != task_ids.size()) throw std::invalid_argument("duplicate task id in weights");
  for (double r : raw)
    if (!std::isfinite(r)) throw std::invalid_argument("non-finite raw weight");
  TaskWeights w;
  w.ids_ = std::move(task_ids);
  w.raw_ = std::move(raw);
  w.renormalize();
  return w;
}

void TaskWeights::renormalize() { alpha_ = softmax(raw_); }

double TaskWeights::raw(const std::string& id) const {
  auto it = std::find(ids_.begin(), ids_.end(), id);
  if (it == ids_.end()) throw std::out_of_range("no weight for task " + id);
  return raw_[static_cast<std::size_t>(it - ids_.begin())];
}

double TaskWeights::normalized(const std::string& id) const {
  auto it = std::find(ids_.begin(), ids_.end(), id);
  if (it == ids_.end()) throw std::out_of_range("no weight for task " + id);
  return alpha_[static_cast<std::size_t>(it - ids_.begin())];
}

TaskWeights update_task_weights(const TaskWeights& weights, const std::map<std::string, double>& alignments,
                                double eta) {
  std::vector<double> raw = weights.raw();
  for (std::size_t i = 0; i < raw.size(); ++i) {
    auto it = alignments.find(weights.task_ids()[i]);
    if (it == alignments.end()) throw std::invalid_argument("missing alignment for task " + weights.task_ids()[i]);
    if (!std::isfinite(it->second)) throw std::invalid_argument("non-finite alignment for task " + it->first);
    raw[i] += eta * it->second;
  }
  return TaskWeights::from_raw(weights.task_ids(), std::move(raw));
}

double compute_alignment(const GradientMap& g_meta, const GradientMap& g_task, AlignmentMeasure measure) {
  if (g_meta.names() != g_task.names()) throw std::invalid_argument("alignment: gradient maps cover different keys");
  double dot = 0.0, nm = 0.0, nt = 0.0;
  for (const auto& [name, a] : g_meta) {
    const Tensor& b = g_task.get(name);
    if (!a.same_shape(b)) throw std::invalid_argument("alignment: shape mismatch for " + name);
    for (std::size_t i = 0; i < a.size(); ++i) {
      dot += a[i] * b[i];
      nm += a[i] * a[i];
      nt += b[i] * b[i];
    }
  }
  if (measure == AlignmentMeasure::dot) return dot;
  nm = std::sqrt(nm);
  nt = std::sqrt(nt);
  if (nm < 1e-12 || nt < 1e-12) return 0.0;
  return dot / (nm * nt);
}

EarlyStop early_stop_check(const std::vector<double>& history, std::size_t patience, double min_delta) {
  if (patience < 1) throw std::invalid_argument("patience must be >= 1");
  if (history.size() <= patience) return EarlyStop::continue_training;
  const auto split = history.end() - static_cast<std::ptrdiff_t>(patience);
  const double best_before = *std::max_element(history.begin(), split);
  const double best_recent = *std::max_element(split, history.end());
  return best_recent > best_before + min_delta ? EarlyStop::continue_training : EarlyStop::stop;
}

// ---------------------------------------------------------------- records

void to_json(nlohmann::json& j, const RunRecord& r) {
  nlohmann::json steps = nlohmann::json::array();
  auto nullable = [](const std::vector<double>& xs) {
    nlohmann::json a = nlohmann::json::array();
    for (double x : xs) a.push_back(std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr));
    return a;
  };
  for (const auto& s : r.steps) {
    steps.push_back({{"step", s.step}, {"alpha", s.alpha}, {"loss", nullable(s.loss)}, {"val_metric", s.val_metric}});
  }
  nlohmann::json vh = nlohmann::json::array();
  for (const auto& [step, v] : r.val_history) vh.push_back({step, v});
  j = nlohmann::json{{"strategy", r.strategy},
                     {"task_ids", r.task_ids},
                     {"steps", std::move(steps)},
                     {"val_history", std::move(vh)},
                     {"initial_val_metric", r.initial_val_metric},
                     {"best_val_metric", r.best_val_metric},
                     {"test_metric", r.test_metric},
                     {"test_macro_f1", r.test_macro_f1},
                     {"stop_reason", r.stop_reason},
                     {"steps_run", r.steps_run},
                     {"seed", r.seed},
                     {"config", r.config}};
}

void from_json(const nlohmann::json& j, RunRecord& r) {
  j.at("strategy").get_to(r.strategy);
  j.at("task_ids").get_to(r.task_ids);
  r.steps.clear();
  for (const auto& s : j.at("steps")) {
    StepLog log;
    log.step = s.at("step").get<std::size_t>();
    log.alpha = s.at("alpha").get<std::vector<double>>();
    for (const auto& l : s.at("loss"))
      log.loss.push_back(l.is_null() ? std::numeric_limits<double>::quiet_NaN() : l.get<double>());
    log.val_metric = s.at("val_metric").get<double>();
    r.steps.push_back(std::move(log));
  }
  r.val_history.clear();
  for (const auto& v : j.at("val_history")) r.val_history.emplace_back(v.at(0).get<std::size_t>(), v.at(1).get<double>());
  r.initial_val_metric = j.at("initial_val_metric").get<double>();
  r.best_val_metric = j.at("best_val_metric").get<double>();
  r.test_metric = j.at("test_metric").get<double>();
  r.test_macro_f1 = j.at("test_macro_f1").get<double>();
  r.stop_reason = j.at("stop_reason").get<StopReason>();
  r.steps_run = j.at("steps_run").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config = j.value("config", nlohmann::json::object());
}

// ---------------------------------------------------------------- metrics

ClassificationMetrics evaluate_classification(const MultiTaskModel& model, const Task& task,
                                              std::span<const std::size_t> rows) {
  if (task.objective != Objective::classification) throw std::invalid_argument("task is not a classification task");
  if (rows.empty()) throw std::invalid_argument("cannot evaluate on an empty split");
  const Batch batch = task.make_batch(rows, 0, model.body_spec().input_dim);
  const Tensor logits = model.predict(task.id, batch.inputs);
  const auto& labels = std::get<std::vector<int>>(batch.targets);
  const std::size_t k = logits.cols();
  std::vector<double> tp(k, 0.0), fp(k, 0.0), fn(k, 0.0);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    std::size_t pred = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (logits.at(r, c) > logits.at(r, pred)) pred = c;
    const auto truth = static_cast<std::size_t>(labels[r]);
    if (pred == truth) {
      ++correct;
      tp[pred] += 1.0;
    } else {
      fp[pred] += 1.0;
      fn[truth] += 1.0;
    }
  }
  double f1_sum = 0.0;
  std::size_t classes = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (tp[c] + fp[c] + fn[c] == 0.0) continue;
    f1_sum += 2.0 * tp[c] / (2.0 * tp[c] + fp[c] + fn[c]);
    ++classes;
  }
  return {static_cast<double>(correct) / static_cast<double>(logits.rows()),
          classes ? f1_sum / static_cast<double>(classes) : 0.0};
}

// ---------------------------------------------------------------- optimizer

Optimizer::Optimizer(OptimizerKind kind, double lr, AdamParams adam) : kind_(kind), lr_(lr), adam_(adam) {
  if (!(lr > 0.0)) throw std::invalid_argument("optimizer step size must be positive");
}

void Optimizer::step(ParamSet& params, const GradientMap& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(adam_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(adam_.beta2, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    if (!grads.contains(name)) continue;
    const Tensor& g = grads.get(name);
    if (!g.same_shape(p)) throw std::invalid_argument("gradient shape mismatch for " + name);
    if (kind_ == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr_ * g[i];
      continue;
    }
    Moments& st = state_[name];
    if (st.m.empty()) {
      st.m.assign(p.size(), 0.0);
      st.v.assign(p.size(), 0.0);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      st.m[i] = adam_.beta1 * st.m[i] + (1.0 - adam_.beta1) * g[i];
      st.v[i] = adam_.beta2 * st.v[i] + (1.0 - adam_.beta2) * g[i] * g[i];
      const double mhat = st.m[i] / bc1;
      const double vhat = st.v[i] / bc2;
      p[i] -= lr_ * mhat / (std::sqrt(vhat) + adam_.eps);
    }
    if (!p.all_finite()) throw NonFiniteError("optimizer produced non-finite parameter " + name);
  }
}

// ---------------------------------------------------------------- internals

namespace {

// Epoch-shuffled draws over a fixed row set; reshuffles whenever the
// remainder of an epoch cannot fill a batch.
class BatchSampler {
 public:
  BatchSampler(std::vector<std::size_t> rows, std::size_t batch, Rng rng)
      : rows_(std::move(rows)), batch_(std::min(batch, rows_.size())), rng_(rng), cursor_(rows_.size()) {
    if (rows_.empty()) throw std::invalid_argument("cannot sample from an empty split");
  }

  std::vector<std::size_t> next() {
    if (cursor_ + batch_ > rows_.size()) {
      rng_.shuffle(std::span<std::size_t>(rows_));
      cursor_ = 0;
    }
    std::vector<std::size_t> out(rows_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 rows_.begin() + static_cast<std::ptrdiff_t>(cursor_ + batch_));
    cursor_ += batch_;
    ++count_;
    return out;
  }

  std::uint64_t batches_drawn() const { return count_; }

 private:
  std::vector<std::size_t> rows_;
  std::size_t batch_;
  Rng rng_;
  std::size_t cursor_;
  std::uint64_t count_ = 0;
};

std::vector<std::size_t> sample_subset(const std::vector<std::size_t>& rows, std::size_t count, Rng rng) {
  std::vector<std::size_t> copy = rows;
  rng.shuffle(std::span<std::size_t>(copy));
  copy.resize(std::min(count, copy.size()));
  return copy;
}

struct TaskGradients {
  double loss = 0.0;
  GradientMap body;
  GradientMap head;
};

TaskGradients task_gradients(const MultiTaskModel& model, const Task& task, const Batch& batch) {
  Tape tape;
  Var rep = model.body_forward(tape, tape.constant(batch.inputs));
  Var out = model.head_forward(tape, task.id, rep);
  Var l = task.loss(out, batch);
  const ParamSet& head_params = model.head(task.id).params;
  GradientMap all = tape.backward(l, {std::cref(model.body_params()), std::cref(head_params)});
  TaskGradients g;
  g.loss = l.scalar();
  for (const auto& [name, t] : model.body_params()) g.body.add(name, all.get(name));
  for (const auto& [name, t] : head_params) g.head.add(name, all.get(name));
  return g;
}

struct Snapshot {
  ParamSet body;
  std::vector<ParamSet> heads;
};

Snapshot take_snapshot(const MultiTaskModel& model) {
  Snapshot s{model.body_params(), {}};
  for (const auto& id : model.task_ids()) s.heads.push_back(model.head(id).params);
  return s;
}

void restore_snapshot(MultiTaskModel& model, const Snapshot& s) {
  model.body_params() = s.body;
  for (std::size_t i = 0; i < model.task_ids().size(); ++i) model.head(model.task_ids()[i]).params = s.heads[i];
}

void check_setup(const MultiTaskModel& model, const Task& end_task, const std::vector<const Task*>& tasks) {
  if (end_task.objective != Objective::classification) {
    throw std::invalid_argument("end task must be a classification task");
  }
  end_task.validate(true);
  if (!model.end_task_id() || *model.end_task_id() != end_task.id) {
    throw std::invalid_argument("model end task is not " + end_task.id);
  }
  std::set<std::string> seen;
  for (const Task* t : tasks) {
    if (!model.has_head(t->id)) throw std::invalid_argument("no head registered for task " + t->id);
    if (!(model.head(t->id).spec == t->head)) throw std::invalid_argument("head spec mismatch for task " + t->id);
    if (!seen.insert(t->id).second) throw std::invalid_argument("duplicate task id " + t->id);
  }
}

std::vector<const Task*> run_order(const Task& end_task, const std::vector<Task>& aux_tasks) {
  std::vector<const Task*> out{&end_task};
  for (const Task& t : aux_tasks) out.push_back(&t);
  return out;
}

GradientMap meta_gradient(MultiTaskModel& model, const Task& end_task, const TrainerConfig& cfg, std::size_t step) {
  if (cfg.meta_head_mode == MetaHeadMode::separate_head) estimate_meta_head(model, end_task, cfg, step);
  const auto rows = sample_subset(end_task.data.val, cfg.meta_val_batch,
                                  Rng::substream(cfg.seed, Stream::meta_head, 4 * step + 2));
  const Batch batch = end_task.make_batch(rows, 0, model.body_spec().input_dim);
  Tape tape;
  Var rep = model.body_forward(tape, tape.constant(batch.inputs));
  Var out = cfg.meta_head_mode == MetaHeadMode::separate_head ? model.meta_head_forward(tape, rep)
                                                              : model.head_forward(tape, end_task.id, rep);
  return tape.backward(end_task.loss(out, batch), model.body_params());
}

struct JointOptions {
  std::string strategy;
  bool learn_weights = false;
  std::size_t step_offset = 0;
};

// The shared loop behind finetune, multitask and meta training. Task weights
// enter only through the body update; every head descends on its own loss.
RunRecord run_joint(MultiTaskModel& model, const Task& end_task, const std::vector<const Task*>& tasks,
                    TaskWeights weights, const TrainerConfig& cfg, const JointOptions& opts) {
  cfg.validate();
  check_setup(model, end_task, tasks);
  std::vector<std::string> ids;
  for (const Task* t : tasks) ids.push_back(t->id);
  {
    std::vector<double> raw;
    for (const auto& id : ids) raw.push_back(weights.raw(id));
    weights = TaskWeights::from_raw(ids, std::move(raw));
  }
  if (weights.task_ids().size() != tasks.size()) throw std::invalid_argument("weights must cover exactly the run tasks");

  const std::size_t body_in = model.body_spec().input_dim;
  std::vector<BatchSampler> samplers;
  std::vector<Optimizer> head_opts;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    samplers.emplace_back(tasks[k]->data.train, cfg.batch_size(tasks[k]->id, k == 0),
                          Rng::substream(cfg.seed, Stream::data, k));
    head_opts.emplace_back(cfg.optimizer, cfg.head_lr, cfg.adam);
  }
  Optimizer body_opt(cfg.optimizer, cfg.body_lr, cfg.adam);

  RunRecord rec;
  rec.strategy = opts.strategy;
  rec.task_ids = ids;
  rec.seed = cfg.seed;
  rec.config = cfg;

  std::vector<double> history;
  double current_val = evaluate_classification(model, end_task, end_task.data.val).accuracy;
  history.push_back(current_val);
  rec.val_history.emplace_back(opts.step_offset, current_val);
  rec.initial_val_metric = current_val;
  double best = current_val;
  Snapshot best_state = take_snapshot(model);

  std::size_t step = 0;
  while (step < cfg.max_steps) {
    ++step;
    const std::size_t global_step = opts.step_offset + step;
    std::vector<TaskGradients> grads;
    grads.reserve(tasks.size());
    for (std::size_t k = 0; k < tasks.size(); ++k) {
      const auto rows = samplers[k].next();
      try {
        const Batch batch = tasks[k]->make_batch(rows, samplers[k].batches_drawn() - 1, body_in);
        grads.push_back(task_gradients(model, *tasks[k], batch));
      } catch (const NonFiniteError& e) {
        throw DivergenceError("divergence at step " + std::to_string(global_step) + " on task " + tasks[k]->id +
                              ": " + e.what());
      }
    }

    if (opts.learn_weights && step % cfg.meta_update_period == 0) {
      const GradientMap g_meta = meta_gradient(model, end_task, cfg, step);
      std::map<std::string, double> alignments;
      for (std::size_t k = 0; k < tasks.size(); ++k) alignments[ids[k]] = compute_alignment(g_meta, grads[k].body, cfg.alignment);
      weights = update_task_weights(weights, alignments, cfg.weight_lr);
    }

    const auto& alpha = weights.normalized();
    GradientMap body_grad;
    for (const auto& [name, p] : model.body_params()) {
      Tensor acc = Tensor::zeros(p.shape());
      for (std::size_t k = 0; k < tasks.size(); ++k) {
        const Tensor& g = grads[k].body.get(name);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += alpha[k] * g[i];
      }
      body_grad.add(name, std::move(acc));
    }
    try {
      body_opt.step(model.body_params(), body_grad);
      for (std::size_t k = 0; k < tasks.size(); ++k) head_opts[k].step(model.head(ids[k]).params, grads[k].head);
    } catch (const NonFiniteError& e) {
      throw DivergenceError("divergence in update at step " + std::to_string(global_step) + ": " + e.what());
    }

    bool stop = false;
    if (step % cfg.val_period == 0 || step == cfg.max_steps) {
      current_val = evaluate_classification(model, end_task, end_task.data.val).accuracy;
      history.push_back(current_val);
      rec.val_history.emplace_back(global_step, current_val);
      if (current_val > best) {
        best = current_val;
        best_state = take_snapshot(model);
      }
      if (early_stop_check(history, cfg.patience, cfg.min_delta) == EarlyStop::stop) {
        stop = true;
        rec.stop_reason = StopReason::plateau;
      }
    }

    if (step % cfg.log_period == 0 || stop || step == cfg.max_steps) {
      StepLog log{global_step, alpha, {}, current_val};
      for (const auto& g : grads) log.loss.push_back(g.loss);
      rec.steps.push_back(std::move(log));
    }
    if (stop) break;
  }

  rec.steps_run = step;
  restore_snapshot(model, best_state);
  rec.best_val_metric = best;
  const auto test = evaluate_classification(model, end_task, end_task.data.test);
  rec.test_metric = test.accuracy;
  rec.test_macro_f1 = test.macro_f1;
  return rec;
}

}  // namespace

// ---------------------------------------------------------------- public

MetaHeadEstimate estimate_meta_head(MultiTaskModel& model, const Task& end_task, const TrainerConfig& cfg,
                                    std::uint64_t meta_index) {
  if (end_task.data.train.empty()) throw std::invalid_argument("estimate_meta_head: empty train split");
  if (!model.end_task_id()) throw std::logic_error("estimate_meta_head: no end task registered");
  const HeadSpec spec = model.head(*model.end_task_id()).spec;
  model.reinit_meta_head(spec, derive_seed(cfg.seed, 4 * meta_index));

  const auto rows = sample_subset(end_task.data.train, cfg.meta_head_batch,
                                  Rng::substream(cfg.seed, Stream::meta_head, 4 * meta_index + 1));
  const Batch batch = end_task.make_batch(rows, 0, model.body_spec().input_dim);
  const Tensor rep = model.body_representation(batch.inputs);

  auto meta_loss = [&](const MultiTaskModel& m, Tape& tape) {
    Var out = m.meta_head_forward(tape, tape.constant(rep));
    return end_task.loss(out, batch);
  };

  MetaHeadEstimate est;
  Optimizer opt(cfg.optimizer, cfg.meta_head_lr, cfg.adam);
  ParamSet params = model.meta_head()->params;
  for (std::size_t s = 0; s < cfg.meta_head_steps; ++s) {
    Tape tape;
    Var l = meta_loss(model, tape);
    if (s == 0) est.initial_loss = l.scalar();
    GradientMap g = tape.backward(l, model.meta_head()->params);
    for (auto& [name, t] : g) {
      const Tensor& p = params.get(name);
      for (std::size_t i = 0; i < t.size(); ++i) t[i] += cfg.meta_head_weight_decay * p[i];
    }
    opt.step(params, g);
    model.set_meta_head_params(params);
  }
  {
    Tape tape;
    est.final_loss = meta_loss(model, tape).scalar();
    if (cfg.meta_head_steps == 0) est.initial_loss = est.final_loss;
  }
  est.params = model.meta_head()->params;
  return est;
}

RunRecord finetune(MultiTaskModel& model, const Task& end_task, const TrainerConfig& cfg) {
  return run_joint(model, end_task, {&end_task}, TaskWeights::from_raw({end_task.id}, {0.0}), cfg,
                   {"finetune_only", false, 0});
}

RunRecord train_multitask(MultiTaskModel& model, const Task& end_task, const std::vector<Task>& aux_tasks,
                          const TaskWeights& weights, const TrainerConfig& cfg) {
  const auto tasks = run_order(end_task, aux_tasks);
  if (weights.task_ids().size() != tasks.size()) throw std::invalid_argument("weights must cover all tasks");
  return run_joint(model, end_task, tasks, weights, cfg, {"tartan_mt", false, 0});
}

RunRecord train_tartan_meta(MultiTaskModel& model, const Task& end_task, const std::vector<Task>& aux_tasks,
                            const TrainerConfig& cfg) {
  const auto tasks = run_order(end_task, aux_tasks);
  std::vector<std::string> ids;
  for (const Task* t : tasks) ids.push_back(t->id);
  return run_joint(model, end_task, tasks, TaskWeights::uniform(ids), cfg, {"tartan_meta", true, 0});
}

RunRecord pretrain_then_finetune(MultiTaskModel& model, const std::vector<Task>& aux_tasks, const Task& end_task,
                                 const TrainerConfig& cfg) {
  cfg.validate();
  if (aux_tasks.empty()) throw std::invalid_argument("pretraining needs at least one auxiliary task");
  const auto tasks = run_order(end_task, aux_tasks);
  check_setup(model, end_task, tasks);

  const std::size_t body_in = model.body_spec().input_dim;
  const std::size_t n_aux = aux_tasks.size();
  std::vector<BatchSampler> samplers;
  std::vector<Optimizer> head_opts;
  for (std::size_t k = 0; k < n_aux; ++k) {
    samplers.emplace_back(aux_tasks[k].data.train, cfg.batch_size(aux_tasks[k].id, false),
                          Rng::substream(cfg.seed, Stream::data, k + 1));
    head_opts.emplace_back(cfg.optimizer, cfg.head_lr, cfg.adam);
  }
  Optimizer body_opt(cfg.optimizer, cfg.body_lr, cfg.adam);

  const double initial_val = evaluate_classification(model, end_task, end_task.data.val).accuracy;
  std::vector<double> alpha(tasks.size(), 1.0 / static_cast<double>(n_aux));
  alpha[0] = 0.0;
  std::vector<StepLog> phase1;
  for (std::size_t step = 1; step <= cfg.pretrain_steps; ++step) {
    GradientMap body_grad;
    for (const auto& [name, p] : model.body_params()) body_grad.add(name, Tensor::zeros(p.shape()));
    StepLog log{step, alpha, {std::numeric_limits<double>::quiet_NaN()}, initial_val};
    std::vector<GradientMap> head_grads;
    for (std::size_t k = 0; k < n_aux; ++k) {
      const auto rows = samplers[k].next();
      TaskGradients g;
      try {
        g = task_gradients(model, aux_tasks[k], aux_tasks[k].make_batch(rows, samplers[k].batches_drawn() - 1, body_in));
      } catch (const NonFiniteError& e) {
        throw DivergenceError("divergence in pretraining at step " + std::to_string(step) + " on task " +
                              aux_tasks[k].id + ": " + e.what());
      }
      for (auto& [name, acc] : body_grad) {
        const Tensor& src = g.body.get(name);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += src[i];
      }
      log.loss.push_back(g.loss);
      head_grads.push_back(std::move(g.head));
    }
    try {
      body_opt.step(model.body_params(), body_grad);
      for (std::size_t k = 0; k < n_aux; ++k) head_opts[k].step(model.head(aux_tasks[k].id).params, head_grads[k]);
    } catch (const NonFiniteError& e) {
      throw DivergenceError("divergence in pretraining update at step " + std::to_string(step) + ": " + e.what());
    }
    if (step % cfg.log_period == 0 || step == cfg.pretrain_steps) phase1.push_back(std::move(log));
  }

  RunRecord rec = run_joint(model, end_task, {&end_task}, TaskWeights::from_raw({end_task.id}, {0.0}), cfg,
                            {"pretrain_finetune", false, cfg.pretrain_steps});
  // Phase-two rows cover only the end task; widen them to the full task list.
  for (auto& log : rec.steps) {
    std::vector<double> a(tasks.size(), 0.0), l(tasks.size(), std::numeric_limits<double>::quiet_NaN());
    a[0] = 1.0;
    l[0] = log.loss[0];
    log.alpha = std::move(a);
    log.loss = std::move(l);
  }
  rec.task_ids.clear();
  for (const Task* t : tasks) rec.task_ids.push_back(t->id);
  rec.steps.insert(rec.steps.begin(), phase1.begin(), phase1.end());
  rec.steps_run += cfg.pretrain_steps;
  return rec;
}

void register_task_heads(MultiTaskModel& model, const Task& end_task, const std::vector<Task>& aux_tasks,
                         std::uint64_t seed) {
  model.register_task_head(end_task.id, end_task.head, derive_seed(seed, 0));
  for (std::size_t k = 0; k < aux_tasks.size(); ++k) {
    model.register_task_head(aux_tasks[k].id, aux_tasks[k].head, derive_seed(seed, k + 1));
  }
  model.set_end_task(end_task.id);
}

}  // namespace endtask
