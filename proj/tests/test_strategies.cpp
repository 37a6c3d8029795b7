#include <catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "endtask/harness.hpp"
#include "endtask/strategies.hpp"

using namespace endtask;
using Catch::Matchers::WithinAbs;

namespace {

struct Setup {
  Task end;
  std::vector<Task> aux;
  BodySpec body;
};

Setup small_setup(std::uint64_t seed = 0) {
  SyntheticSpec e;
  e.input_dim = 6;
  e.num_classes = 3;
  e.train_size = 64;
  e.val_size = 64;
  e.test_size = 64;
  e.teacher_seed = seed;
  e.data_seed = derive_seed(seed, 1);
  Setup s;
  s.end = generate_synthetic_classification(e);
  SyntheticSpec h = e;
  h.id = "helpful";
  h.data_seed = derive_seed(seed, 2);
  h.train_size = 200;
  h.val_size = h.test_size = 1;
  h.label_noise = 0.2;
  s.aux.push_back(generate_synthetic_classification(h));
  SyntheticSpec r = h;
  r.id = "noise";
  r.mode = Relatedness::random_labels;
  r.data_seed = derive_seed(seed, 3);
  s.aux.push_back(generate_synthetic_classification(r));
  s.body = BodySpec{6, {12}, Activation::tanh};
  return s;
}

MultiTaskModel model_for(const Setup& s, const std::vector<Task>& aux, std::uint64_t seed) {
  auto m = MultiTaskModel::build(s.body, seed);
  register_task_heads(m, s.end, aux, seed);
  return m;
}

TrainerConfig sgd_config(std::size_t steps) {
  TrainerConfig c;
  c.optimizer = OptimizerKind::sgd;
  c.body_lr = c.head_lr = 0.05;
  c.max_steps = steps;
  c.val_period = 10;
  c.patience = 1000;
  c.end_batch = c.aux_batch = 16;
  c.meta_head_steps = 3;
  return c;
}

std::vector<double> end_losses(const RunRecord& r) {
  std::vector<double> out;
  for (const auto& s : r.steps) out.push_back(s.loss[0]);
  return out;
}

}  // namespace

TEST_CASE("softmax and TaskWeights") {
  const auto w = TaskWeights::uniform({"end", "a", "b"});
  for (double r : w.raw()) CHECK(r == Catch::Approx(1.0 / 3));
  for (double a : w.normalized()) CHECK_THAT(a, WithinAbs(1.0 / 3, 1e-15));
  const auto v = TaskWeights::from_raw({"x", "y"}, {1000.0, -1000.0});
  CHECK(v.normalized("x") == 1.0);
  CHECK(v.normalized("y") >= 0.0);  // exp(-2000) underflows
  CHECK_THROWS(TaskWeights::from_raw({"x", "x"}, {0, 0}));
  CHECK_THROWS(TaskWeights::from_raw({"x"}, {std::nan("")}));
}

TEST_CASE("update_task_weights examples") {
  auto w = TaskWeights::from_raw({"end", "aux"}, {0.25, 0.25});
  auto u = update_task_weights(w, {{"end", 1.0}, {"aux", 0.0}}, 0.1);
  CHECK_THAT(u.raw("end"), WithinAbs(0.35, 1e-15));

  auto w3 = TaskWeights::from_raw({"end", "a", "b"}, {0.1, 0.7, -0.3});
  auto same = update_task_weights(w3, {{"end", 0.4}, {"a", 0.4}, {"b", 0.4}}, 0.5);
  for (std::size_t i = 0; i < 3; ++i) CHECK_THAT(same.normalized()[i], WithinAbs(w3.normalized()[i], 1e-15));

  double prev = w.normalized("end");
  for (int i = 0; i < 20; ++i) {
    w = update_task_weights(w, {{"end", 0.2}, {"aux", -0.2}}, 0.1);
    CHECK(w.normalized("end") > prev);
    prev = w.normalized("end");
  }
  CHECK_THROWS(update_task_weights(w, {{"end", 0.2}}, 0.1));
  CHECK_THROWS(update_task_weights(w, {{"end", 0.2}, {"aux", std::nan("")}}, 0.1));
}

TEST_CASE("normalized weights stay a distribution under random updates") {
  Rng rng(4);
  auto w = TaskWeights::uniform({"a", "b", "c", "d"});
  for (int i = 0; i < 500; ++i) {
    w = update_task_weights(w, {{"a", rng.uniform(-1, 1)}, {"b", rng.uniform(-1, 1)}, {"c", rng.uniform(-1, 1)},
                                {"d", rng.uniform(-1, 1)}}, 0.3);
    const auto& a = w.normalized();
    CHECK_THAT(std::accumulate(a.begin(), a.end(), 0.0), WithinAbs(1.0, 1e-12));
    for (double x : a) CHECK(x > 0.0);
  }
}

TEST_CASE("compute_alignment examples") {
  GradientMap g, neg, zero, other;
  g.add("w", Tensor::vector({1, -2, 3}));
  g.add("b", Tensor::vector({0.5}));
  neg.add("w", Tensor::vector({-1, 2, -3}));
  neg.add("b", Tensor::vector({-0.5}));
  zero.add("w", Tensor::zeros({3}));
  zero.add("b", Tensor::zeros({1}));
  other.add("b", Tensor::vector({0.5}));
  other.add("w", Tensor::vector({1, -2, 3}));
  CHECK_THAT(compute_alignment(g, g, AlignmentMeasure::cosine), WithinAbs(1.0, 1e-15));
  CHECK_THAT(compute_alignment(g, neg, AlignmentMeasure::cosine), WithinAbs(-1.0, 1e-15));
  CHECK(compute_alignment(g, zero, AlignmentMeasure::cosine) == 0.0);
  CHECK(compute_alignment(g, g, AlignmentMeasure::dot) == 1 + 4 + 9 + 0.25);
  CHECK_THROWS(compute_alignment(g, other, AlignmentMeasure::cosine));
}

TEST_CASE("dot alignment gives identical updates to identical gradients") {
  GradientMap g;
  g.add("w", Tensor::vector({0.3, -1.1}));
  GradientMap meta;
  meta.add("w", Tensor::vector({2.0, 0.4}));
  const double a = compute_alignment(meta, g, AlignmentMeasure::dot);
  auto w = TaskWeights::uniform({"end", "aux"});
  w = update_task_weights(w, {{"end", a}, {"aux", compute_alignment(meta, g, AlignmentMeasure::dot)}}, 0.7);
  CHECK(w.raw("end") == w.raw("aux"));
}

TEST_CASE("early_stop_check examples") {
  CHECK(early_stop_check({0.5, 0.6, 0.7}, 2, 0.0) == EarlyStop::continue_training);
  CHECK(early_stop_check({0.7, 0.69, 0.69, 0.69}, 3, 0.001) == EarlyStop::stop);
  CHECK(early_stop_check({}, 3, 0.0) == EarlyStop::continue_training);
  std::vector<double> h;
  for (int i = 0; i < 200; ++i) {
    h.push_back(i * 0.01);
    CHECK(early_stop_check(h, 1, 0.0) == EarlyStop::continue_training);
  }
  CHECK_THROWS(early_stop_check({0.1}, 0, 0.0));
}

TEST_CASE("estimate_meta_head") {
  const Setup s = small_setup();
  auto m = model_for(s, s.aux, 0);
  TrainerConfig c = sgd_config(0);
  c.meta_head_steps = 10;
  c.meta_head_lr = 0.1;
  const ParamSet body = m.body_params();
  const ParamSet end_head = m.head("end").params;
  const MetaHeadEstimate est = estimate_meta_head(m, s.end, c, 3);
  CHECK(m.body_params() == body);
  CHECK(m.head("end").params == end_head);
  CHECK(est.final_loss < est.initial_loss);

  c.meta_head_steps = 0;
  const MetaHeadEstimate none = estimate_meta_head(m, s.end, c, 3);
  auto fresh = model_for(s, s.aux, 0);
  fresh.reinit_meta_head(s.end.head, derive_seed(c.seed, 12));
  CHECK(none.params == fresh.meta_head()->params);
}

TEST_CASE("meta head never moves during joint updates") {
  const Setup s = small_setup();
  auto m = model_for(s, s.aux, 0);
  m.reinit_meta_head(s.end.head, 99);
  const ParamSet before = m.meta_head()->params;
  train_multitask(m, s.end, s.aux, TaskWeights::uniform({"end", "helpful", "noise"}), sgd_config(20));
  CHECK(m.meta_head()->params == before);
}

TEST_CASE("meta training with zero weight step reproduces uniform multitask") {
  const Setup s = small_setup(1);
  for (OptimizerKind opt : {OptimizerKind::sgd, OptimizerKind::adam}) {
    TrainerConfig c = sgd_config(40);
    c.optimizer = opt;
    if (opt == OptimizerKind::adam) c.body_lr = c.head_lr = 0.01;
    c.weight_lr = 0.0;
    c.seed = 5;
    auto a = model_for(s, s.aux, 5);
    auto b = model_for(s, s.aux, 5);
    const RunRecord meta = train_tartan_meta(a, s.end, s.aux, c);
    const RunRecord mt = train_multitask(b, s.end, s.aux, TaskWeights::uniform({"end", "helpful", "noise"}), c);
    REQUIRE(meta.steps.size() == mt.steps.size());
    for (std::size_t i = 0; i < meta.steps.size(); ++i)
      for (std::size_t k = 0; k < 3; ++k) {
        CHECK_THAT(meta.steps[i].loss[k], WithinAbs(mt.steps[i].loss[k], 1e-10));
        CHECK(meta.steps[i].alpha[k] == mt.steps[i].alpha[k]);
      }
    CHECK(meta.test_metric == mt.test_metric);
  }
}

TEST_CASE("collapsed mixture reproduces end-task-only training") {
  const Setup s = small_setup(2);
  TrainerConfig c = sgd_config(40);
  c.seed = 3;
  auto a = model_for(s, s.aux, 3);
  auto b = model_for(s, s.aux, 3);
  const RunRecord mt = train_multitask(a, s.end, s.aux, TaskWeights::from_raw({"end", "helpful", "noise"}, {50, -50, -50}), c);
  const RunRecord ft = finetune(b, s.end, c);
  const auto x = end_losses(mt), y = end_losses(ft);
  REQUIRE(x.size() == y.size());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK_THAT(x[i], WithinAbs(y[i], 1e-10));
  CHECK(mt.test_metric == ft.test_metric);
}

TEST_CASE("shifting every raw weight leaves the trajectory unchanged") {
  const Setup s = small_setup(3);
  TrainerConfig c = sgd_config(30);
  auto a = model_for(s, s.aux, 0);
  auto b = model_for(s, s.aux, 0);
  const RunRecord r1 = train_multitask(a, s.end, s.aux, TaskWeights::from_raw({"end", "helpful", "noise"}, {0.5, 0.1, -0.2}), c);
  const RunRecord r2 = train_multitask(b, s.end, s.aux, TaskWeights::from_raw({"end", "helpful", "noise"}, {3.5, 3.1, 2.8}), c);
  for (std::size_t i = 0; i < r1.steps.size(); ++i)
    for (std::size_t k = 0; k < 3; ++k) CHECK_THAT(r1.steps[i].loss[k], WithinAbs(r2.steps[i].loss[k], 1e-10));
}

TEST_CASE("uniform weights match the meta loop initialization") {
  const auto w = TaskWeights::uniform({"end", "a", "b", "c"});
  for (double r : w.raw()) CHECK(r == 0.25);
  for (double a : w.normalized()) CHECK(a == Catch::Approx(0.25));
}

TEST_CASE("pretrain-then-finetune") {
  const Setup s = small_setup(4);
  TrainerConfig c = sgd_config(30);
  c.pretrain_steps = 0;
  auto a = model_for(s, s.aux, 1);
  auto b = model_for(s, s.aux, 1);
  const RunRecord p = pretrain_then_finetune(a, s.aux, s.end, c);
  const RunRecord f = finetune(b, s.end, c);
  CHECK(p.test_metric == f.test_metric);
  CHECK(end_losses(p) == end_losses(f));

  // Phase one leaves the end head bit-unchanged.
  c.pretrain_steps = 25;
  c.max_steps = 0;
  auto m = model_for(s, s.aux, 1);
  const ParamSet end_head = m.head("end").params;
  const ParamSet body = m.body_params();
  const RunRecord only = pretrain_then_finetune(m, s.aux, s.end, c);
  CHECK(m.head("end").params == end_head);
  CHECK_FALSE(m.body_params() == body);
  CHECK(only.steps.size() == 25);
  for (const auto& row : only.steps) CHECK(row.alpha[0] == 0.0);
  CHECK_THROWS(pretrain_then_finetune(m, {}, s.end, c));
}

TEST_CASE("finetune with no steps keeps the initial metric") {
  const Setup s = small_setup(5);
  auto m = model_for(s, {}, 0);
  const ParamSet body = m.body_params();
  const RunRecord r = finetune(m, s.end, sgd_config(0));
  CHECK(r.steps.empty());
  CHECK(r.val_history.size() == 1);
  CHECK(r.best_val_metric == r.initial_val_metric);
  CHECK(m.body_params() == body);
}

TEST_CASE("finetuning after multitask never accepts a regression") {
  const Setup s = small_setup(6);
  auto m = model_for(s, s.aux, 0);
  TrainerConfig c = sgd_config(60);
  c.min_delta = 0.01;
  train_multitask(m, s.end, s.aux, TaskWeights::uniform({"end", "helpful", "noise"}), c);
  const RunRecord ft = finetune(m, s.end, c);
  CHECK(ft.best_val_metric >= ft.initial_val_metric - c.min_delta);
}

TEST_CASE("run records are well formed") {
  const Setup s = small_setup(7);
  auto m = model_for(s, s.aux, 0);
  TrainerConfig c = sgd_config(50);
  c.weight_lr = 0.5;
  c.log_period = 3;
  const RunRecord r = train_tartan_meta(m, s.end, s.aux, c);
  std::size_t prev = 0;
  for (const auto& row : r.steps) {
    CHECK(row.step > prev);
    prev = row.step;
    CHECK_THAT(std::accumulate(row.alpha.begin(), row.alpha.end(), 0.0), WithinAbs(1.0, 1e-12));
  }
  const nlohmann::json j = r;
  const RunRecord back = j.get<RunRecord>();
  CHECK(nlohmann::json(back) == j);
}

TEST_CASE("divergence aborts with a diagnostic") {
  Setup s = small_setup(8);
  s.body.input_dim = 12;  // masked inputs carry their indicator
  // Reconstruction gradients grow with the weights, so a huge step overflows.
  const std::vector<Task> aux{derive_masked_reconstruction_task(s.end.data, 0.15, 1, "tapt")};
  auto m = model_for(s, aux, 0);
  TrainerConfig c = sgd_config(200);
  c.body_lr = c.head_lr = 1e100;
  CHECK_THROWS_AS(train_multitask(m, s.end, aux, TaskWeights::uniform({"end", "tapt"}), c), DivergenceError);
}

TEST_CASE("a helpful auxiliary task improves pretraining over none") {
  // Helpful aux only, five seeds, Adam at the benchmark defaults.
  double with = 0.0, without = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    BenchmarkInstance b = make_benchmark("synth-helpful-harmful", nlohmann::json::object(), seed);
    std::vector<Task> helpful{b.aux_tasks[0]};
    TrainerConfig c;
    c.seed = seed;
    c.val_period = 20;
    c.max_steps = 300;
    c.pretrain_steps = 300;
    auto m1 = MultiTaskModel::build(b.body, seed);
    register_task_heads(m1, b.end_task, helpful, seed);
    with += pretrain_then_finetune(m1, helpful, b.end_task, c).best_val_metric;
    auto m2 = MultiTaskModel::build(b.body, seed);
    register_task_heads(m2, b.end_task, helpful, seed);
    without += finetune(m2, b.end_task, c).best_val_metric;
  }
  CHECK(with > without);
}

TEST_CASE("multitasking with the task-adaptive aux beats finetuning alone") {
  double mt = 0.0, ft = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    BenchmarkInstance b = make_benchmark("synth-tapt-dapt", nlohmann::json::object(), seed);
    std::vector<Task> tapt{b.aux_tasks[0]};
    TrainerConfig c;
    c.seed = seed;
    c.val_period = 20;
    c.max_steps = 600;
    auto m1 = MultiTaskModel::build(b.body, seed);
    register_task_heads(m1, b.end_task, tapt, seed);
    mt += train_multitask(m1, b.end_task, tapt, TaskWeights::uniform({"end", "tapt"}), c).best_val_metric;
    auto m2 = MultiTaskModel::build(b.body, seed);
    register_task_heads(m2, b.end_task, tapt, seed);
    ft += finetune(m2, b.end_task, c).best_val_metric;
  }
  CHECK(mt > ft);
}

TEST_CASE("same-head meta-objective rails the end-task weight") {
  BenchmarkInstance b = make_benchmark("synth-helpful-harmful", nlohmann::json::object(), 0);
  TrainerConfig c;
  c.val_period = 20;
  c.max_steps = 1000;
  c.meta_head_mode = MetaHeadMode::same_head;
  auto m = MultiTaskModel::build(b.body, 0);
  register_task_heads(m, b.end_task, b.aux_tasks, 0);
  const RunRecord same = train_tartan_meta(m, b.end_task, b.aux_tasks, c);
  double final_alpha = same.steps.back().alpha[0];
  CHECK(final_alpha > 0.8);
}
