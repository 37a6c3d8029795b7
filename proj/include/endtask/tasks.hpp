#pragma once

// Tasks are an objective plus a dataset with splits. Includes CSV ingestion,
// a dataset manifest, synthetic teacher-labelled classification tasks and the
// masked-feature reconstruction tasks that stand in for task- and
// domain-adaptive pre-training.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "endtask/autodiff.hpp"
#include "endtask/model.hpp"

namespace endtask {

struct LabeledDataset {
  Tensor features;                       // [m x d]
  std::vector<int> labels;               // classification targets, size m (or empty)
  std::size_t num_classes = 0;
  std::vector<std::string> label_names;  // label_names[k] is the raw value mapped to k
  std::optional<Tensor> real_targets;    // regression targets [m x t]
  std::vector<std::size_t> train, val, test;

  std::size_t rows() const { return features.rows(); }
  std::size_t feature_dim() const { return features.cols(); }
  // Splits disjoint and in range, targets consistent, m >= 1.
  void validate(bool require_val) const;
  Tensor select_rows(std::span<const std::size_t> rows) const;
};

struct SplitFractions {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

// Shuffles rows with Rng::substream(seed, data, 0) and assigns
// floor(fraction * m) rows to train, val, test in that order. Labels are
// mapped to 0..K-1 in order of first appearance in the file.
LabeledDataset load_csv_dataset(const std::filesystem::path& path, const std::string& label_column,
                                SplitFractions fractions, std::uint64_t seed);

struct DatasetManifest {
  std::string path;
  std::string label_column;
  SplitFractions fractions;
  std::uint64_t split_seed = 0;
  std::size_t rows = 0;
  std::size_t train_size = 0, val_size = 0, test_size = 0;
  std::vector<std::string> label_mapping;
};

DatasetManifest make_manifest(const LabeledDataset& data, const std::string& path, const std::string& label_column,
                              SplitFractions fractions, std::uint64_t split_seed);
// Reloads the CSV and checks sizes and label mapping against the manifest.
LabeledDataset load_from_manifest(const DatasetManifest& manifest);
void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

enum class Objective { classification, regression, masked_reconstruction };

std::string to_string(Objective o);

struct Batch {
  Tensor inputs;
  Targets targets;
  std::optional<Tensor> mask;
};

struct Task {
  std::string id;
  Objective objective = Objective::classification;
  LabeledDataset data;
  HeadSpec head;
  double mask_prob = 0.0;
  std::uint64_t mask_seed = 0;

  void validate(bool require_val) const;
  // Width of the model input this task produces natively: d, or 2d for
  // reconstruction tasks (features plus mask-indicator channel).
  std::size_t input_dim() const;

  // Classification/regression rows are zero-padded to 2d when the body is
  // configured for a mask-indicator channel. Reconstruction batches draw their
  // mask from Rng::substream(mask_seed, masking, batch_index): masked features
  // are zeroed, the indicator channel carries the mask, targets are
  // [x, mask] and the loss mask is [mask, 0].
  Batch make_batch(std::span<const std::size_t> rows, std::uint64_t batch_index, std::size_t body_input_dim) const;
  Var loss(Var outputs, const Batch& batch) const;
};

enum class Relatedness { same_teacher, independent_teacher, random_labels };

std::string to_string(Relatedness r);
Relatedness parse_relatedness(const std::string& name);

struct SyntheticSpec {
  std::string id = "end";
  std::uint64_t teacher_seed = 0;
  std::uint64_t data_seed = 0;
  std::size_t input_dim = 8;
  std::size_t num_classes = 2;
  std::size_t train_size = 100, val_size = 100, test_size = 100;
  double label_noise = 0.0;
  Relatedness mode = Relatedness::same_teacher;
  std::size_t teacher_hidden = 16;
  // 0: inputs are iid standard normal. Otherwise inputs lie near a
  // latent_dim-dimensional subspace fixed by teacher_seed,
  // x = z M + latent_noise * e, and the teacher labels the clean signal z M.
  std::size_t latent_dim = 0;
  double latent_noise = 0.1;

  void validate() const;
};

// Inputs from Rng::substream(data_seed, data, 0); labels are the argmax of a
// bias-free tanh teacher drawn from Rng::substream(teacher_seed, init, 0)
// (independent_teacher: index 1). Noisy labels are replaced by a different
// class chosen uniformly (Rng::substream(data_seed, data, 1)). random_labels
// draws labels uniformly (Rng::substream(data_seed, data, 2)).
Task generate_synthetic_classification(const SyntheticSpec& spec);

// Unlabelled rows from the same input distribution as `spec` (same latent
// subspace), drawn with Rng::substream(data_seed, data, 3).
LabeledDataset generate_input_pool(const SyntheticSpec& spec, std::size_t rows, std::uint64_t data_seed);

// Reconstruction task over the train split of `dataset`.
Task derive_masked_reconstruction_task(const LabeledDataset& dataset, double mask_prob, std::uint64_t seed,
                                       const std::string& id = "tapt");

// Subsamples exactly n * end_task_train_size rows of `pool` (all rows are
// candidates) with Rng::substream(seed, data, 0), then builds a reconstruction
// task over them.
Task derive_domain_task(const LabeledDataset& pool, std::size_t n, std::size_t end_task_train_size, double mask_prob,
                        std::uint64_t seed, const std::string& id = "dapt");

}  // namespace endtask
