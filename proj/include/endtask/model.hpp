#pragma once

// Shared-body multi-task network: one MLP body, one head per task, a
// designated end-task head and an optional meta head used only to estimate
// validation meta-gradients.
//
// Parameter naming:
//   body          body.layer{k}.weight / body.layer{k}.bias
//   task head     head.<task_id>.layer{k}.*
//   meta head     meta.layer{k}.*
//
// Initialization: uniform(+-1/sqrt(fan_in)) from Rng::substream(seed, init, 0)
// for the body and Rng::substream(seed, init, 1) for a task head. The meta head
// uses Rng::substream(seed, meta_head, 0).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "endtask/autodiff.hpp"

namespace endtask {

struct BodySpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims;
  Activation activation = Activation::tanh;

  void validate() const;
  std::vector<LayerSpec> layers() const;
  std::size_t output_dim() const { return hidden_dims.back(); }
};

enum class HeadKind { classification, regression, reconstruction };

std::string to_string(HeadKind k);
HeadKind parse_head_kind(const std::string& name);

struct HeadSpec {
  std::size_t output_dim = 0;
  std::optional<std::size_t> hidden_width;
  HeadKind kind = HeadKind::classification;
  Activation hidden_activation = Activation::relu;

  std::vector<LayerSpec> layers(std::size_t input_width) const;
  friend bool operator==(const HeadSpec&, const HeadSpec&) = default;
};

struct Head {
  HeadSpec spec;
  ParamSet params;
};

class MultiTaskModel {
 public:
  // build_model: body only, no heads.
  static MultiTaskModel build(const BodySpec& body, std::uint64_t seed);

  const std::string& register_task_head(const std::string& task_id, const HeadSpec& head, std::uint64_t seed);
  void set_end_task(const std::string& task_id);
  void reinit_meta_head(const HeadSpec& head, std::uint64_t seed);
  // Replaces the meta head parameters (names and shapes must match).
  void set_meta_head_params(ParamSet params);

  const BodySpec& body_spec() const { return body_spec_; }
  const ParamSet& body_params() const { return body_; }
  ParamSet& body_params() { return body_; }
  std::size_t representation_width() const { return body_spec_.output_dim(); }

  bool has_head(const std::string& task_id) const;
  const Head& head(const std::string& task_id) const;
  Head& head(const std::string& task_id);
  const std::vector<std::string>& task_ids() const { return task_order_; }

  const std::optional<std::string>& end_task_id() const { return end_task_; }
  const std::optional<Head>& meta_head() const { return meta_; }

  std::string head_prefix(const std::string& task_id) const { return "head." + task_id + "."; }
  static constexpr const char* kMetaPrefix = "meta.";
  static constexpr const char* kBodyPrefix = "body.";

  Var body_forward(Tape& tape, Var inputs) const;
  Var head_forward(Tape& tape, const std::string& task_id, Var representation) const;
  Var meta_head_forward(Tape& tape, Var representation) const;

  Tensor body_representation(const Tensor& inputs) const;
  Tensor predict(const std::string& task_id, const Tensor& inputs) const;

  // All parameters: body, task heads in registration order, then meta head.
  std::vector<std::pair<std::string, const Tensor*>> all_parameters() const;

 private:
  MultiTaskModel() = default;
  void check_disjoint(const ParamSet& incoming) const;

  BodySpec body_spec_;
  ParamSet body_;
  std::vector<std::string> task_order_;
  std::vector<Head> heads_;
  std::optional<std::string> end_task_;
  std::optional<Head> meta_;
};

// Checkpoint: little-endian binary listing of every named tensor.
//   magic "ETCKPT01" | u32 count | per entry: u32 name_len, name bytes,
//   u32 rank, u64 dims[rank], f64 values[prod(dims)]
void save_checkpoint(const MultiTaskModel& model, const std::filesystem::path& path);
// Overwrites parameters of an already-structured model; names and shapes must
// match the file exactly.
void load_checkpoint(MultiTaskModel& model, const std::filesystem::path& path);

}  // namespace endtask
