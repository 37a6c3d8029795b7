#pragma once

// Dense double-precision tensors and a tape-based reverse-mode differentiator.
//
// Tensors are rank 1 ({n}) or rank 2 ({rows, cols}), row-major. A rank-1
// tensor behaves as a single row wherever a matrix is expected.
//
// Parameters are named. A Tape records every operation between a parameter
// lookup and a scalar loss; Tape::backward walks the record once and returns a
// GradientMap keyed by parameter name. Every op checks its output for
// non-finite values and throws NonFiniteError instead of propagating them.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

namespace endtask {

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor filled(std::vector<std::size_t> shape, double value);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);
  static Tensor vector(std::initializer_list<double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  std::size_t rows() const { return shape_.size() == 1 ? 1 : shape_.front(); }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  std::string shape_string() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
};

// Ordered name -> Tensor association. Insertion order is the canonical
// iteration (and flattening) order.
template <class Tag>
class TensorMap {
 public:
  using Entry = std::pair<std::string, Tensor>;

  void add(std::string name, Tensor value) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate tensor name: " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(value));
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  const Tensor& get(const std::string& name) const { return entries_[position(name)].second; }
  Tensor& get(const std::string& name) { return entries_[position(name)].second; }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.first);
    return out;
  }

  // Concatenation of all tensors in iteration order.
  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(scalar_count());
    for (const auto& e : entries_) out.insert(out.end(), e.second.values().begin(), e.second.values().end());
    return out;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  friend bool operator==(const TensorMap& a, const TensorMap& b) { return a.entries_ == b.entries_; }

 private:
  std::size_t position(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown tensor name: " + name);
    return it->second;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct ParamTag {};
struct GradTag {};
using ParamSet = TensorMap<ParamTag>;
using GradientMap = TensorMap<GradTag>;

enum class Activation { relu, tanh, linear };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);

class Tape;

// Handle to a node in a Tape. Cheap to copy; valid while its Tape lives.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  // Value of a 1x1 / size-1 node.
  double scalar() const;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf bound to params[name]; gradients are reported under that name.
  Var parameter(const ParamSet& params, const std::string& name);

  // Reverse sweep from a scalar loss. The returned map covers every entry of
  // every given ParamSet, in order; parameters that did not influence the loss
  // map to zero tensors. A tape can be swept once.
  GradientMap backward(Var loss, const ParamSet& params);
  GradientMap backward(Var loss, std::initializer_list<std::reference_wrapper<const ParamSet>> param_sets);

  bool consumed() const { return consumed_; }
  std::size_t node_count() const { return nodes_.size(); }

  // Internal: used by the op implementations.
  using Backprop = std::function<void(Tape&, std::size_t)>;
  Var record(Tensor value, std::vector<std::size_t> inputs, Backprop backprop, const char* op);
  const Tensor& value_of(std::size_t id) const { return nodes_[id].value; }
  Tensor& grad_of(std::size_t id);
  const Tensor& grad_out(std::size_t id) const { return nodes_[id].grad; }
  std::size_t input(std::size_t id, std::size_t k) const { return nodes_[id].inputs[k]; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    Backprop backprop;
    std::string param_name;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Differentiable ops. All operands must live on the same tape.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
// x[batch x n] + bias[n] broadcast over rows.
Var add_row_bias(Var x, Var bias);
Var relu(Var x);
Var tanh(Var x);
Var activate(Var x, Activation a);
Var sum(Var x);
Var concat_cols(Var a, Var b);

// Losses; all return a 1x1 node.
Var cross_entropy(Var logits, std::span<const int> labels);
Var mse(Var outputs, const Tensor& targets);
Var masked_mse(Var outputs, const Tensor& targets, const Tensor& mask);

enum class LossKind { cross_entropy, mse, masked_mse };
using Targets = std::variant<std::vector<int>, Tensor>;
Var loss(Var outputs, const Targets& targets, LossKind kind, const Tensor* mask = nullptr);

struct LayerSpec {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Activation activation = Activation::linear;
};

// Parameter names: prefix + "layer{k}.weight" ([in x out]) and
// prefix + "layer{k}.bias" ([out]). Output = act(x W + b) per layer.
std::string layer_weight_name(const std::string& prefix, std::size_t k);
std::string layer_bias_name(const std::string& prefix, std::size_t k);

Var forward_mlp(Tape& tape, const ParamSet& params, const std::string& prefix,
                std::span<const LayerSpec> layers, Var inputs);
Tensor forward_mlp(const ParamSet& params, const std::string& prefix, std::span<const LayerSpec> layers,
                   const Tensor& inputs);

class Rng;
// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases, drawn
// layer by layer, weight before bias, row-major.
void init_mlp(ParamSet& params, const std::string& prefix, std::span<const LayerSpec> layers, Rng& rng);

using ScalarProgram = std::function<Var(Tape&, const ParamSet&)>;

// Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|),
// numeric being the central difference (f(p+h) - f(p-h)) / 2h.
double grad_check(const ScalarProgram& program, const ParamSet& params, double step);

}  // namespace endtask
