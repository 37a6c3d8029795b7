#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "endtask/prng.hpp"
#include "endtask/tasks.hpp"

using namespace endtask;
namespace fs = std::filesystem;

namespace {

fs::path write_temp(const std::string& name, const std::string& content) {
  const fs::path p = fs::temp_directory_path() / name;
  std::ofstream(p) << content;
  return p;
}

std::string ten_rows() {
  std::string s = "f1,f2,label\n";
  for (int i = 0; i < 10; ++i) s += std::to_string(i) + "," + std::to_string(i * 0.5) + "," + (i % 3 ? "b" : "a") + "\n";
  return s;
}

std::set<std::size_t> as_set(const std::vector<std::size_t>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST_CASE("load_csv_dataset splits and label mapping") {
  const fs::path p = write_temp("endtask_ten.csv", ten_rows());
  const LabeledDataset d = load_csv_dataset(p, "label", {0.6, 0.2, 0.2}, 3);
  CHECK(d.train.size() == 6);
  CHECK(d.val.size() == 2);
  CHECK(d.test.size() == 2);
  CHECK(d.feature_dim() == 2);
  CHECK(d.label_names == std::vector<std::string>{"a", "b"});
  CHECK(d.num_classes == 2);
  for (std::size_t r = 0; r < d.rows(); ++r) {
    // Row identity survives the shuffle: f2 = f1 / 2 and label follows f1.
    const int f1 = int(d.features.at(r, 0));
    CHECK(d.features.at(r, 1) == f1 * 0.5);
    CHECK(d.labels[r] == (f1 % 3 ? 1 : 0));
  }
  const LabeledDataset again = load_csv_dataset(p, "label", {0.6, 0.2, 0.2}, 3);
  CHECK(again.train == d.train);
  CHECK(again.features == d.features);
  fs::remove(p);
}

TEST_CASE("load_csv_dataset errors") {
  const fs::path ragged = write_temp("endtask_ragged.csv", "a,label\n1,x\n2\n");
  CHECK_THROWS(load_csv_dataset(ragged, "label", {0.5, 0.25, 0.25}, 0));
  const fs::path text = write_temp("endtask_text.csv", "a,label\n1,x\nfoo,y\n3,x\n4,y\n");
  CHECK_THROWS(load_csv_dataset(text, "label", {0.5, 0.25, 0.25}, 0));
  const fs::path small = write_temp("endtask_small.csv", "a,label\n1,x\n2,y\n");
  CHECK_THROWS(load_csv_dataset(small, "label", {0.5, 0.25, 0.25}, 0));
  const fs::path ok = write_temp("endtask_ok.csv", ten_rows());
  CHECK_THROWS(load_csv_dataset(ok, "missing", {0.6, 0.2, 0.2}, 0));
  CHECK_THROWS(load_csv_dataset(ok, "label", {0.6, 0.3, 0.2}, 0));
  for (const auto& p : {ragged, text, small, ok}) fs::remove(p);
}

TEST_CASE("splits stay disjoint over random fractions and seeds") {
  std::string csv = "x,y,label\n";
  for (int i = 0; i < 57; ++i) csv += std::to_string(i) + "," + std::to_string(-i) + "," + std::to_string(i % 4) + "\n";
  const fs::path p = write_temp("endtask_57.csv", csv);
  Rng rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    SplitFractions f{rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.25), rng.uniform(0.1, 0.25)};
    const LabeledDataset d = load_csv_dataset(p, "label", f, trial);
    d.validate(true);
    std::set<std::size_t> all = as_set(d.train);
    for (auto i : d.val) CHECK(all.insert(i).second);
    for (auto i : d.test) CHECK(all.insert(i).second);
    CHECK(*all.rbegin() < 57);
  }
  fs::remove(p);
}

TEST_CASE("manifest round trip") {
  const fs::path p = write_temp("endtask_manifest.csv", ten_rows());
  const LabeledDataset d = load_csv_dataset(p, "label", {0.6, 0.2, 0.2}, 5);
  const DatasetManifest m = make_manifest(d, p.string(), "label", {0.6, 0.2, 0.2}, 5);
  const nlohmann::json j = m;
  const LabeledDataset r = load_from_manifest(j.get<DatasetManifest>());
  CHECK(r.features == d.features);
  CHECK(r.labels == d.labels);
  fs::remove(p);
}

TEST_CASE("same_teacher at noise 0 reproduces the end-task labels") {
  SyntheticSpec end;
  end.teacher_seed = 4;
  end.data_seed = 9;
  end.num_classes = 3;
  SyntheticSpec aux = end;
  aux.id = "aux";
  const Task a = generate_synthetic_classification(end);
  const Task b = generate_synthetic_classification(aux);
  CHECK(a.data.labels == b.data.labels);
  CHECK(a.data.features == b.data.features);

  aux.mode = Relatedness::independent_teacher;
  CHECK(generate_synthetic_classification(aux).data.labels != a.data.labels);
}

TEST_CASE("random_labels are close to uniform") {
  SyntheticSpec s;
  s.mode = Relatedness::random_labels;
  s.num_classes = 4;
  s.train_size = 2000;
  s.val_size = 500;
  s.test_size = 500;
  const Task t = generate_synthetic_classification(s);
  const double m = 3000, p = 0.25;
  std::vector<int> counts(4, 0);
  for (int y : t.data.labels) ++counts[y];
  for (int c : counts) CHECK(std::abs(c - m * p) <= 5 * std::sqrt(m * p * (1 - p)));
}

TEST_CASE("full label noise flips every binary label") {
  SyntheticSpec s;
  s.num_classes = 2;
  const Task clean = generate_synthetic_classification(s);
  s.label_noise = 1.0;
  const Task flipped = generate_synthetic_classification(s);
  for (std::size_t i = 0; i < clean.data.labels.size(); ++i) CHECK(flipped.data.labels[i] == 1 - clean.data.labels[i]);
}

TEST_CASE("synthetic spec validation") {
  SyntheticSpec s;
  s.label_noise = 1.5;
  CHECK_THROWS(generate_synthetic_classification(s));
  s = {};
  s.train_size = 0;
  CHECK_THROWS(generate_synthetic_classification(s));
  s = {};
  s.latent_dim = 20;
  CHECK_THROWS(generate_synthetic_classification(s));
}

TEST_CASE("masked reconstruction batches") {
  SyntheticSpec s;
  s.input_dim = 10;
  s.train_size = 1000;
  const Task end = generate_synthetic_classification(s);
  const Task rec = derive_masked_reconstruction_task(end.data, 0.15, 3);
  CHECK(rec.input_dim() == 20);
  CHECK(rec.head.output_dim == 20);
  std::vector<std::size_t> rows(1000);
  std::iota(rows.begin(), rows.end(), 0);
  const Batch b = rec.make_batch(rows, 0, 20);
  double masked = 0;
  for (std::size_t r = 0; r < 1000; ++r)
    for (std::size_t c = 0; c < 10; ++c) {
      const double m = b.mask->at(r, c);
      masked += m;
      CHECK(b.inputs.at(r, 10 + c) == m);
      if (m == 1.0) CHECK(b.inputs.at(r, c) == 0.0);
      else CHECK(b.inputs.at(r, c) == end.data.features.at(r, c));
      CHECK(b.mask->at(r, 10 + c) == 0.0);
    }
  const double frac = masked / 10000.0;
  CHECK(frac >= 0.13);
  CHECK(frac <= 0.17);

  // Reproducible per (seed, batch index), fresh across batch indices.
  CHECK(rec.make_batch(rows, 0, 20).mask == b.mask);
  CHECK_FALSE(rec.make_batch(rows, 1, 20).mask == b.mask);

  // A perfect predictor scores zero.
  Tape t;
  Var perfect = t.constant(std::get<Tensor>(b.targets));
  CHECK(rec.loss(perfect, b).scalar() == 0.0);
  CHECK_THROWS(rec.make_batch(rows, 0, 10));
}

TEST_CASE("a tiny mask probability surfaces the all-zero mask error") {
  SyntheticSpec s;
  s.input_dim = 2;
  s.train_size = 2;
  const Task end = generate_synthetic_classification(s);
  const Task rec = derive_masked_reconstruction_task(end.data, 1e-9, 0);
  std::vector<std::size_t> rows{0, 1};
  const Batch b = rec.make_batch(rows, 0, 4);
  Tape t;
  try {
    rec.loss(t.constant(Tensor::zeros({2, 4})), b);
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("all-zero mask") != std::string::npos);
  }
  CHECK_THROWS(derive_masked_reconstruction_task(end.data, 0.0, 0));
  CHECK_THROWS(derive_masked_reconstruction_task(end.data, 1.0, 0));
}

TEST_CASE("domain task sizes and identities") {
  SyntheticSpec s;
  s.train_size = 100;
  const LabeledDataset pool = generate_input_pool(s, 1500, 1);
  const Task dapt = derive_domain_task(pool, 10, 100, 0.15, 2);
  CHECK(dapt.data.rows() == 1000);
  CHECK(derive_domain_task(pool, 10, 100, 0.15, 2).data.features == dapt.data.features);
  CHECK_THROWS(derive_domain_task(pool, 20, 100, 0.15, 2));

  const Task end = generate_synthetic_classification(s);
  LabeledDataset train_only;
  train_only.features = end.data.select_rows(end.data.train);
  train_only.train.resize(end.data.train.size());
  std::iota(train_only.train.begin(), train_only.train.end(), 0);
  const Task tapt = derive_masked_reconstruction_task(end.data, 0.15, 2);
  const Task n1 = derive_domain_task(train_only, 1, 100, 0.15, 2);
  CHECK(n1.data.features == tapt.data.features);
}

TEST_CASE("classification rows are zero-padded for a doubled body input") {
  SyntheticSpec s;
  s.input_dim = 3;
  const Task t = generate_synthetic_classification(s);
  std::vector<std::size_t> rows{0, 5};
  const Batch b = t.make_batch(rows, 0, 6);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(b.inputs.at(r, c) == t.data.features.at(rows[r], c));
      CHECK(b.inputs.at(r, 3 + c) == 0.0);
    }
  CHECK_THROWS(t.make_batch(rows, 0, 5));
}
