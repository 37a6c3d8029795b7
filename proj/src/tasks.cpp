#include "endtask/tasks.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "endtask/prng.hpp"

namespace endtask {

// ---------------------------------------------------------------- dataset

void LabeledDataset::validate(bool require_val) const {
  if (features.empty() || rows() == 0) throw std::invalid_argument("dataset has no rows");
  const std::size_t m = rows();
  if (!labels.empty()) {
    if (labels.size() != m) throw std::invalid_argument("label count does not match row count");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw std::invalid_argument("label out of range");
  }
  if (real_targets && real_targets->rows() != m) throw std::invalid_argument("target rows do not match features");
  std::vector<char> used(m, 0);
  for (const auto* split : {&train, &val, &test}) {
    for (std::size_t i : *split) {
      if (i >= m) throw std::invalid_argument("split index out of range");
      if (used[i]) throw std::invalid_argument("splits overlap at row " + std::to_string(i));
      used[i] = 1;
    }
  }
  if (train.empty()) throw std::invalid_argument("dataset has an empty train split");
  if (require_val && val.empty()) throw std::invalid_argument("end-task dataset needs a nonempty val split");
}

Tensor LabeledDataset::select_rows(std::span<const std::size_t> rows_to_take) const {
  const std::size_t d = feature_dim();
  std::vector<double> values;
  values.reserve(rows_to_take.size() * d);
  for (std::size_t r : rows_to_take) {
    if (r >= rows()) throw std::out_of_range("row index out of range");
    for (std::size_t c = 0; c < d; ++c) values.push_back(features.at(r, c));
  }
  return Tensor({rows_to_take.size(), d}, std::move(values));
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string strip(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.pop_back();
  std::size_t b = 0;
  while (b < s.size() && (s[b] == ' ' || s[b] == '\t')) ++b;
  return s.substr(b);
}

double parse_real(const std::string& text, std::size_t line_no, const std::string& column) {
  double v = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || text.empty() || !std::isfinite(v)) {
    throw std::invalid_argument("non-numeric feature '" + text + "' at line " + std::to_string(line_no) +
                                ", column " + column);
  }
  return v;
}

std::size_t split_count(double fraction, std::size_t m) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(m) + 1e-9));
}

}  // namespace

LabeledDataset load_csv_dataset(const std::filesystem::path& path, const std::string& label_column,
                                SplitFractions fractions, std::uint64_t seed) {
  if (!(fractions.train > 0.0) || !(fractions.val > 0.0) || !(fractions.test > 0.0)) {
    throw std::invalid_argument("split fractions must be positive");
  }
  if (fractions.train + fractions.val + fractions.test > 1.0 + 1e-12) {
    throw std::invalid_argument("split fractions sum to more than 1");
  }
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open CSV file: " + path.string());

  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("CSV file has no header row");
  std::vector<std::string> header = split_csv_line(strip(line));
  for (auto& h : header) h = strip(h);
  auto label_it = std::find(header.begin(), header.end(), label_column);
  if (label_it == header.end()) throw std::invalid_argument("label column not found: " + label_column);
  const std::size_t label_idx = static_cast<std::size_t>(label_it - header.begin());
  const std::size_t d = header.size() - 1;
  if (d == 0) throw std::invalid_argument("CSV file has no feature columns");

  std::vector<double> values;
  std::vector<int> labels;
  std::vector<std::string> names;
  std::unordered_map<std::string, int> mapping;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip(line);
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw std::invalid_argument("ragged row at line " + std::to_string(line_no) + ": expected " +
                                  std::to_string(header.size()) + " fields, got " + std::to_string(cells.size()));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      std::string cell = strip(cells[c]);
      if (c == label_idx) {
        auto [it, inserted] = mapping.try_emplace(cell, static_cast<int>(names.size()));
        if (inserted) names.push_back(cell);
        labels.push_back(it->second);
      } else {
        values.push_back(parse_real(cell, line_no, header[c]));
      }
    }
  }
  const std::size_t m = labels.size();
  if (m == 0) throw std::invalid_argument("CSV file has no data rows");

  LabeledDataset data;
  data.features = Tensor({m, d}, std::move(values));
  data.labels = std::move(labels);
  data.num_classes = names.size();
  data.label_names = std::move(names);

  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::substream(seed, Stream::data, 0);
  rng.shuffle(std::span<std::size_t>(order));
  const std::size_t n_train = split_count(fractions.train, m);
  const std::size_t n_val = split_count(fractions.val, m);
  const std::size_t n_test = split_count(fractions.test, m);
  if (n_train == 0 || n_val == 0 || n_test == 0) throw std::invalid_argument("split fractions produce an empty split");
  data.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  data.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                  order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  data.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val),
                   order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val + n_test));
  data.validate(true);
  return data;
}

DatasetManifest make_manifest(const LabeledDataset& data, const std::string& path, const std::string& label_column,
                              SplitFractions fractions, std::uint64_t split_seed) {
  DatasetManifest m;
  m.path = path;
  m.label_column = label_column;
  m.fractions = fractions;
  m.split_seed = split_seed;
  m.rows = data.rows();
  m.train_size = data.train.size();
  m.val_size = data.val.size();
  m.test_size = data.test.size();
  m.label_mapping = data.label_names;
  return m;
}

LabeledDataset load_from_manifest(const DatasetManifest& manifest) {
  LabeledDataset data = load_csv_dataset(manifest.path, manifest.label_column, manifest.fractions, manifest.split_seed);
  if (manifest.rows != 0 && manifest.rows != data.rows()) throw std::runtime_error("manifest row count mismatch");
  if (manifest.train_size != 0 &&
      (manifest.train_size != data.train.size() || manifest.val_size != data.val.size() ||
       manifest.test_size != data.test.size())) {
    throw std::runtime_error("manifest split sizes mismatch");
  }
  if (!manifest.label_mapping.empty() && manifest.label_mapping != data.label_names) {
    throw std::runtime_error("manifest label mapping mismatch");
  }
  return data;
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = nlohmann::json{{"path", m.path},
                     {"label_column", m.label_column},
                     {"fractions", {m.fractions.train, m.fractions.val, m.fractions.test}},
                     {"split_seed", m.split_seed},
                     {"rows", m.rows},
                     {"sizes", {{"train", m.train_size}, {"val", m.val_size}, {"test", m.test_size}}},
                     {"label_mapping", m.label_mapping}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
  j.at("path").get_to(m.path);
  j.at("label_column").get_to(m.label_column);
  if (j.contains("fractions")) {
    const auto& f = j.at("fractions");
    m.fractions = {f.at(0).get<double>(), f.at(1).get<double>(), f.at(2).get<double>()};
  }
  m.split_seed = j.value("split_seed", std::uint64_t{0});
  m.rows = j.value("rows", std::size_t{0});
  if (j.contains("sizes")) {
    const auto& s = j.at("sizes");
    m.train_size = s.value("train", std::size_t{0});
    m.val_size = s.value("val", std::size_t{0});
    m.test_size = s.value("test", std::size_t{0});
  }
  m.label_mapping = j.value("label_mapping", std::vector<std::string>{});
}

// ---------------------------------------------------------------- task

std::string to_string(Objective o) {
  switch (o) {
    case Objective::classification: return "classification";
    case Objective::regression: return "regression";
    case Objective::masked_reconstruction: return "masked_reconstruction";
  }
  return "unknown";
}

void Task::validate(bool require_val) const {
  data.validate(require_val);
  switch (objective) {
    case Objective::classification:
      if (data.labels.empty()) throw std::invalid_argument("classification task " + id + " has no labels");
      if (head.kind != HeadKind::classification || head.output_dim != data.num_classes) {
        throw std::invalid_argument("classification task " + id + " head does not match its classes");
      }
      break;
    case Objective::regression:
      if (!data.real_targets) throw std::invalid_argument("regression task " + id + " has no real targets");
      if (head.output_dim != data.real_targets->cols()) throw std::invalid_argument("regression head width mismatch");
      break;
    case Objective::masked_reconstruction:
      if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw std::invalid_argument("mask_prob must lie in (0, 1)");
      if (head.kind != HeadKind::reconstruction || head.output_dim != 2 * data.feature_dim()) {
        throw std::invalid_argument("reconstruction head must output features plus indicator channel");
      }
      break;
  }
}

std::size_t Task::input_dim() const {
  return objective == Objective::masked_reconstruction ? 2 * data.feature_dim() : data.feature_dim();
}

Batch Task::make_batch(std::span<const std::size_t> rows, std::uint64_t batch_index,
                       std::size_t body_input_dim) const {
  if (rows.empty()) throw std::invalid_argument("empty batch for task " + id);
  const std::size_t d = data.feature_dim();
  const std::size_t b = rows.size();
  Tensor x = data.select_rows(rows);

  if (objective == Objective::masked_reconstruction) {
    if (body_input_dim != 2 * d) throw std::invalid_argument("reconstruction task needs body input width 2d");
    Rng rng = Rng::substream(mask_seed, Stream::masking, batch_index);
    Tensor inputs = Tensor::zeros({b, 2 * d});
    Tensor targets = Tensor::zeros({b, 2 * d});
    Tensor loss_mask = Tensor::zeros({b, 2 * d});
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        const bool masked = rng.bernoulli(mask_prob);
        const double m = masked ? 1.0 : 0.0;
        inputs.at(r, c) = masked ? 0.0 : x.at(r, c);
        inputs.at(r, d + c) = m;
        targets.at(r, c) = x.at(r, c);
        targets.at(r, d + c) = m;
        loss_mask.at(r, c) = m;
      }
    return Batch{std::move(inputs), std::move(targets), std::move(loss_mask)};
  }

  Tensor inputs;
  if (body_input_dim == d) {
    inputs = std::move(x);
  } else if (body_input_dim == 2 * d) {
    inputs = Tensor::zeros({b, 2 * d});
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t c = 0; c < d; ++c) inputs.at(r, c) = x.at(r, c);
  } else {
    throw std::invalid_argument("task " + id + " feature width does not fit the body input width");
  }

  if (objective == Objective::classification) {
    std::vector<int> ys;
    ys.reserve(b);
    for (std::size_t r : rows) ys.push_back(data.labels[r]);
    return Batch{std::move(inputs), std::move(ys), std::nullopt};
  }
  const Tensor& t = *data.real_targets;
  std::vector<double> tv;
  for (std::size_t r : rows)
    for (std::size_t c = 0; c < t.cols(); ++c) tv.push_back(t.at(r, c));
  return Batch{std::move(inputs), Tensor({b, t.cols()}, std::move(tv)), std::nullopt};
}

Var Task::loss(Var outputs, const Batch& batch) const {
  switch (objective) {
    case Objective::classification: return endtask::loss(outputs, batch.targets, LossKind::cross_entropy);
    case Objective::regression: return endtask::loss(outputs, batch.targets, LossKind::mse);
    case Objective::masked_reconstruction:
      return endtask::loss(outputs, batch.targets, LossKind::masked_mse, batch.mask ? &*batch.mask : nullptr);
  }
  throw std::invalid_argument("unknown objective");
}

// ---------------------------------------------------------------- synthetic

std::string to_string(Relatedness r) {
  switch (r) {
    case Relatedness::same_teacher: return "same_teacher";
    case Relatedness::independent_teacher: return "independent_teacher";
    case Relatedness::random_labels: return "random_labels";
  }
  return "unknown";
}

Relatedness parse_relatedness(const std::string& name) {
  if (name == "same_teacher") return Relatedness::same_teacher;
  if (name == "independent_teacher") return Relatedness::independent_teacher;
  if (name == "random_labels") return Relatedness::random_labels;
  throw std::invalid_argument("unknown relatedness mode: " + name);
}

void SyntheticSpec::validate() const {
  if (input_dim == 0 || num_classes < 2 || teacher_hidden == 0) throw std::invalid_argument("invalid synthetic dims");
  if (train_size == 0 || val_size == 0 || test_size == 0) throw std::invalid_argument("synthetic sizes must be >= 1");
  if (!(label_noise >= 0.0 && label_noise <= 1.0)) throw std::invalid_argument("label noise must lie in [0, 1]");
  if (latent_dim > input_dim) throw std::invalid_argument("latent_dim exceeds input_dim");
  if (!(latent_noise >= 0.0 && std::isfinite(latent_noise))) throw std::invalid_argument("latent_noise must be >= 0");
}

namespace {

// With a latent subspace, `clean` (if given) receives the noise-free signal.
Tensor sample_inputs(const SyntheticSpec& spec, std::size_t rows, Rng& rng, Tensor* clean = nullptr) {
  const std::size_t d = spec.input_dim;
  Tensor x = Tensor::zeros({rows, d});
  if (spec.latent_dim == 0) {
    for (double& v : x.values()) v = rng.normal();
    if (clean) *clean = x;
    return x;
  }
  if (clean) *clean = Tensor::zeros({rows, d});
  const std::size_t k = spec.latent_dim;
  Rng mix_rng = Rng::substream(spec.teacher_seed, Stream::init, 2);
  std::vector<double> mix(k * d);
  for (double& v : mix) v = mix_rng.normal() / std::sqrt(static_cast<double>(k));
  std::vector<double> z(k);
  for (std::size_t r = 0; r < rows; ++r) {
    for (double& v : z) v = rng.normal();
    for (std::size_t c = 0; c < d; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) acc += z[j] * mix[j * d + c];
      if (clean) clean->at(r, c) = acc;
      x.at(r, c) = acc + spec.latent_noise * rng.normal();
    }
  }
  return x;
}

std::vector<int> teacher_labels(const SyntheticSpec& spec, const Tensor& x) {
  const std::size_t d = spec.input_dim, h = spec.teacher_hidden, k = spec.num_classes;
  const std::uint64_t index = spec.mode == Relatedness::independent_teacher ? 1 : 0;
  Rng rng = Rng::substream(spec.teacher_seed, Stream::init, index);
  std::vector<double> w1(d * h), w2(h * k);
  for (double& v : w1) v = rng.normal() / std::sqrt(static_cast<double>(d));
  for (double& v : w2) v = rng.normal() / std::sqrt(static_cast<double>(h));
  std::vector<int> labels(x.rows());
  std::vector<double> hidden(h), logits(k);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t j = 0; j < h; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += x.at(r, c) * w1[c * h + j];
      hidden[j] = std::tanh(acc);
    }
    for (std::size_t c = 0; c < k; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < h; ++j) acc += hidden[j] * w2[j * k + c];
      logits[c] = acc;
    }
    labels[r] = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  return labels;
}

}  // namespace

Task generate_synthetic_classification(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t m = spec.train_size + spec.val_size + spec.test_size;
  Rng input_rng = Rng::substream(spec.data_seed, Stream::data, 0);
  Tensor clean;
  Tensor x = sample_inputs(spec, m, input_rng, &clean);

  std::vector<int> labels;
  if (spec.mode == Relatedness::random_labels) {
    Rng rng = Rng::substream(spec.data_seed, Stream::data, 2);
    labels.resize(m);
    for (int& y : labels) y = static_cast<int>(rng.below(spec.num_classes));
  } else {
    labels = teacher_labels(spec, clean);
  }
  if (spec.label_noise > 0.0) {
    Rng rng = Rng::substream(spec.data_seed, Stream::data, 1);
    for (int& y : labels) {
      const bool flip = rng.bernoulli(spec.label_noise);
      const auto other = static_cast<int>(rng.below(spec.num_classes - 1));
      if (flip) y = other >= y ? other + 1 : other;
    }
  }

  Task task;
  task.id = spec.id;
  task.objective = Objective::classification;
  task.data.features = std::move(x);
  task.data.labels = std::move(labels);
  task.data.num_classes = spec.num_classes;
  for (std::size_t c = 0; c < spec.num_classes; ++c) task.data.label_names.push_back(std::to_string(c));
  std::size_t i = 0;
  for (; i < spec.train_size; ++i) task.data.train.push_back(i);
  for (; i < spec.train_size + spec.val_size; ++i) task.data.val.push_back(i);
  for (; i < m; ++i) task.data.test.push_back(i);
  task.head = HeadSpec{spec.num_classes, std::nullopt, HeadKind::classification};
  task.validate(true);
  return task;
}

LabeledDataset generate_input_pool(const SyntheticSpec& spec, std::size_t rows, std::uint64_t data_seed) {
  spec.validate();
  if (rows == 0) throw std::invalid_argument("pool needs at least one row");
  Rng rng = Rng::substream(data_seed, Stream::data, 3);
  LabeledDataset pool;
  pool.features = sample_inputs(spec, rows, rng);
  pool.train.resize(rows);
  std::iota(pool.train.begin(), pool.train.end(), 0);
  return pool;
}

namespace {

Task reconstruction_task(Tensor features, double mask_prob, std::uint64_t seed, const std::string& id) {
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw std::invalid_argument("mask_prob must lie in (0, 1)");
  Task task;
  task.id = id;
  task.objective = Objective::masked_reconstruction;
  const std::size_t m = features.rows();
  const std::size_t d = features.cols();
  task.data.features = std::move(features);
  task.data.train.resize(m);
  std::iota(task.data.train.begin(), task.data.train.end(), 0);
  task.head = HeadSpec{2 * d, std::nullopt, HeadKind::reconstruction};
  task.mask_prob = mask_prob;
  task.mask_seed = seed;
  task.validate(false);
  return task;
}

}  // namespace

Task derive_masked_reconstruction_task(const LabeledDataset& dataset, double mask_prob, std::uint64_t seed,
                                       const std::string& id) {
  if (dataset.train.empty()) throw std::invalid_argument("dataset has an empty train split");
  return reconstruction_task(dataset.select_rows(dataset.train), mask_prob, seed, id);
}

Task derive_domain_task(const LabeledDataset& pool, std::size_t n, std::size_t end_task_train_size, double mask_prob,
                        std::uint64_t seed, const std::string& id) {
  const std::size_t want = n * end_task_train_size;
  if (want == 0) throw std::invalid_argument("domain task size must be >= 1");
  if (pool.rows() < want) {
    throw std::invalid_argument("domain pool too small: " + std::to_string(pool.rows()) + " rows < " +
                                std::to_string(want));
  }
  std::vector<std::size_t> order(pool.rows());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::substream(seed, Stream::data, 0);
  rng.shuffle(std::span<std::size_t>(order));
  order.resize(want);
  std::sort(order.begin(), order.end());
  return reconstruction_task(pool.select_rows(order), mask_prob, seed, id);
}

}  // namespace endtask
