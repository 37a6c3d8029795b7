#include "endtask/model.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "endtask/prng.hpp"

namespace endtask {

void BodySpec::validate() const {
  if (input_dim == 0) throw std::invalid_argument("body input_dim must be >= 1");
  if (hidden_dims.empty()) throw std::invalid_argument("body needs at least one hidden layer");
  for (std::size_t h : hidden_dims)
    if (h == 0) throw std::invalid_argument("body hidden dims must be >= 1");
}

std::vector<LayerSpec> BodySpec::layers() const {
  std::vector<LayerSpec> out;
  std::size_t in = input_dim;
  for (std::size_t h : hidden_dims) {
    out.push_back({in, h, activation});
    in = h;
  }
  return out;
}

std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::classification: return "classification";
    case HeadKind::regression: return "regression";
    case HeadKind::reconstruction: return "reconstruction";
  }
  return "unknown";
}

HeadKind parse_head_kind(const std::string& name) {
  if (name == "classification") return HeadKind::classification;
  if (name == "regression") return HeadKind::regression;
  if (name == "reconstruction") return HeadKind::reconstruction;
  throw std::invalid_argument("unknown head kind: " + name);
}

std::vector<LayerSpec> HeadSpec::layers(std::size_t input_width) const {
  if (output_dim == 0) throw std::invalid_argument("head output_dim must be >= 1");
  if (hidden_width) {
    if (*hidden_width == 0) throw std::invalid_argument("head hidden width must be >= 1");
    return {{input_width, *hidden_width, hidden_activation}, {*hidden_width, output_dim, Activation::linear}};
  }
  return {{input_width, output_dim, Activation::linear}};
}

MultiTaskModel MultiTaskModel::build(const BodySpec& body, std::uint64_t seed) {
  body.validate();
  MultiTaskModel m;
  m.body_spec_ = body;
  Rng rng = Rng::substream(seed, Stream::init, 0);
  const auto layers = body.layers();
  init_mlp(m.body_, kBodyPrefix, layers, rng);
  return m;
}

void MultiTaskModel::check_disjoint(const ParamSet& incoming) const {
  std::set<std::string> seen;
  for (const auto& [name, t] : all_parameters()) seen.insert(name);
  for (const auto& [name, t] : incoming)
    if (seen.contains(name)) throw std::invalid_argument("parameter name collision: " + name);
}

const std::string& MultiTaskModel::register_task_head(const std::string& task_id, const HeadSpec& head,
                                                       std::uint64_t seed) {
  if (task_id.empty()) throw std::invalid_argument("task id must be nonempty");
  if (has_head(task_id)) throw std::invalid_argument("duplicate task id: " + task_id);
  if (head.kind == HeadKind::reconstruction && head.output_dim != body_spec_.input_dim) {
    throw std::invalid_argument("reconstruction head output_dim must equal body input_dim");
  }
  Head h{head, {}};
  Rng rng = Rng::substream(seed, Stream::init, 1);
  const auto layers = head.layers(representation_width());
  init_mlp(h.params, head_prefix(task_id), layers, rng);
  check_disjoint(h.params);
  heads_.push_back(std::move(h));
  task_order_.push_back(task_id);
  return task_order_.back();
}

void MultiTaskModel::set_end_task(const std::string& task_id) {
  if (!has_head(task_id)) throw std::invalid_argument("end task has no registered head: " + task_id);
  end_task_ = task_id;
}

void MultiTaskModel::reinit_meta_head(const HeadSpec& head, std::uint64_t seed) {
  if (!end_task_) throw std::logic_error("reinit_meta_head: no end task registered");
  if (head.kind != this->head(*end_task_).spec.kind) {
    throw std::invalid_argument("meta head kind must match the end-task head kind");
  }
  Head h{head, {}};
  Rng rng = Rng::substream(seed, Stream::meta_head, 0);
  const auto layers = head.layers(representation_width());
  init_mlp(h.params, kMetaPrefix, layers, rng);
  meta_.reset();
  check_disjoint(h.params);
  meta_ = std::move(h);
}

void MultiTaskModel::set_meta_head_params(ParamSet params) {
  if (!meta_) throw std::logic_error("no meta head to update");
  if (params.names() != meta_->params.names()) throw std::invalid_argument("meta head parameter names differ");
  for (const auto& [name, t] : params)
    if (!t.same_shape(meta_->params.get(name))) throw std::invalid_argument("meta head shape mismatch: " + name);
  meta_->params = std::move(params);
}

bool MultiTaskModel::has_head(const std::string& task_id) const {
  return std::find(task_order_.begin(), task_order_.end(), task_id) != task_order_.end();
}

const Head& MultiTaskModel::head(const std::string& task_id) const {
  auto it = std::find(task_order_.begin(), task_order_.end(), task_id);
  if (it == task_order_.end()) throw std::out_of_range("no head registered for task " + task_id);
  return heads_[static_cast<std::size_t>(it - task_order_.begin())];
}

Head& MultiTaskModel::head(const std::string& task_id) {
  return const_cast<Head&>(static_cast<const MultiTaskModel&>(*this).head(task_id));
}

Var MultiTaskModel::body_forward(Tape& tape, Var inputs) const {
  const auto layers = body_spec_.layers();
  return forward_mlp(tape, body_, kBodyPrefix, layers, inputs);
}

Var MultiTaskModel::head_forward(Tape& tape, const std::string& task_id, Var representation) const {
  const Head& h = head(task_id);
  const auto layers = h.spec.layers(representation_width());
  return forward_mlp(tape, h.params, head_prefix(task_id), layers, representation);
}

Var MultiTaskModel::meta_head_forward(Tape& tape, Var representation) const {
  if (!meta_) throw std::logic_error("meta head not initialized");
  const auto layers = meta_->spec.layers(representation_width());
  return forward_mlp(tape, meta_->params, kMetaPrefix, layers, representation);
}

Tensor MultiTaskModel::body_representation(const Tensor& inputs) const {
  if (inputs.cols() != body_spec_.input_dim) {
    throw std::invalid_argument("body_representation: input width " + std::to_string(inputs.cols()) +
                                " != body input_dim " + std::to_string(body_spec_.input_dim));
  }
  const auto layers = body_spec_.layers();
  return forward_mlp(body_, kBodyPrefix, layers, inputs);
}

Tensor MultiTaskModel::predict(const std::string& task_id, const Tensor& inputs) const {
  Tape tape;
  Var rep = body_forward(tape, tape.constant(inputs));
  return head_forward(tape, task_id, rep).value();
}

std::vector<std::pair<std::string, const Tensor*>> MultiTaskModel::all_parameters() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (const auto& [name, t] : body_) out.emplace_back(name, &t);
  for (const auto& h : heads_)
    for (const auto& [name, t] : h.params) out.emplace_back(name, &t);
  if (meta_)
    for (const auto& [name, t] : meta_->params) out.emplace_back(name, &t);
  return out;
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[8] = {'E', 'T', 'C', 'K', 'P', 'T', '0', '1'};

template <class T>
void put_le(std::ostream& os, T value) {
  std::uint64_t bits;
  if constexpr (std::is_same_v<T, double>) {
    bits = std::bit_cast<std::uint64_t>(value);
  } else {
    bits = static_cast<std::uint64_t>(value);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) os.put(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(std::istream& is) {
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = is.get();
    if (c == EOF) throw std::runtime_error("checkpoint truncated");
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  if constexpr (std::is_same_v<T, double>) {
    return std::bit_cast<double>(bits);
  } else {
    return static_cast<T>(bits);
  }
}

std::vector<std::pair<std::string, Tensor*>> mutable_parameters(MultiTaskModel& model) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& [name, t] : model.all_parameters()) out.emplace_back(name, const_cast<Tensor*>(t));
  return out;
}

}  // namespace

void save_checkpoint(const MultiTaskModel& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  const auto params = model.all_parameters();
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t d : t->shape()) put_le<std::uint64_t>(os, d);
    for (double v : t->values()) put_le<double>(os, v);
  }
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

void load_checkpoint(MultiTaskModel& model, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw std::runtime_error("not a checkpoint file");
  auto targets = mutable_parameters(model);
  const auto count = get_le<std::uint32_t>(is);
  if (count != targets.size()) throw std::runtime_error("checkpoint tensor count does not match model");
  std::vector<Tensor> loaded;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = get_le<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is || name != targets[e].first) throw std::runtime_error("checkpoint entry name mismatch at " + name);
    const auto rank = get_le<std::uint32_t>(is);
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(get_le<std::uint64_t>(is));
      n *= d;
    }
    std::vector<double> values(n);
    for (double& v : values) v = get_le<double>(is);
    Tensor t(std::move(shape), std::move(values));
    if (!t.same_shape(*targets[e].second)) throw std::runtime_error("checkpoint shape mismatch for " + name);
    loaded.push_back(std::move(t));
  }
  for (std::size_t e = 0; e < targets.size(); ++e) *targets[e].second = std::move(loaded[e]);
}

}  // namespace endtask
