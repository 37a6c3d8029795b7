#include "endtask/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>

#include "endtask/prng.hpp"

namespace endtask {

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_.empty() || shape_.size() > 2) throw std::invalid_argument("tensor rank must be 1 or 2");
  std::size_t n = 1;
  for (std::size_t d : shape_) {
    if (d == 0) throw std::invalid_argument("tensor dimensions must be positive");
    n *= d;
  }
  if (n != values_.size()) {
    throw std::invalid_argument("tensor value count " + std::to_string(values_.size()) + " does not match shape " +
                                shape_string());
  }
  if (!all_finite()) throw NonFiniteError("tensor constructed with non-finite values");
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(std::vector<std::size_t> shape, double value) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
  os << ']';
  return os.str();
}

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "linear") return Activation::linear;
  throw std::invalid_argument("unknown activation kind: " + name);
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::linear: return "linear";
  }
  return "unknown";
}

// ---------------------------------------------------------------- Tape

const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("unbound Var");
  return tape_->value_of(id_);
}

double Var::scalar() const {
  const Tensor& v = value();
  if (v.size() != 1) throw std::invalid_argument("value is not a scalar: shape " + v.shape_string());
  return v[0];
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, Backprop backprop, const char* op) {
  if (!value.all_finite()) throw NonFiniteError(std::string("non-finite value produced by ") + op);
  nodes_.push_back(Node{std::move(value), Tensor{}, std::move(inputs), std::move(backprop), {}});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_of(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
  return n.grad;
}

Var Tape::constant(Tensor value) { return record(std::move(value), {}, nullptr, "constant"); }

Var Tape::parameter(const ParamSet& params, const std::string& name) {
  Var v = record(params.get(name), {}, nullptr, "parameter");
  nodes_.back().param_name = name;
  return v;
}

GradientMap Tape::backward(Var loss, const ParamSet& params) { return backward(loss, {std::cref(params)}); }

GradientMap Tape::backward(Var loss, std::initializer_list<std::reference_wrapper<const ParamSet>> param_sets) {
  if (consumed_) throw std::logic_error("differentiation record already consumed");
  if (loss.tape() != this) throw std::invalid_argument("loss belongs to a different tape");
  if (value_of(loss.id()).size() != 1) throw std::invalid_argument("backward requires a scalar loss");
  consumed_ = true;

  grad_of(loss.id())[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.empty() || !n.backprop) continue;
    n.backprop(*this, id);
  }

  std::unordered_map<std::string, Tensor> by_name;
  for (std::size_t id = 0; id <= loss.id(); ++id) {
    Node& n = nodes_[id];
    if (n.param_name.empty() || n.grad.empty()) continue;
    auto [it, inserted] = by_name.try_emplace(n.param_name, n.grad);
    if (!inserted) {
      for (std::size_t i = 0; i < it->second.size(); ++i) it->second[i] += n.grad[i];
    }
  }

  GradientMap out;
  for (const ParamSet& params : param_sets) {
    for (const auto& [name, value] : params) {
      auto it = by_name.find(name);
      out.add(name, it != by_name.end() ? std::move(it->second) : Tensor::zeros(value.shape()));
    }
  }
  return out;
}

// ---------------------------------------------------------------- ops

namespace {

Tape& common_tape(Var a, Var b) {
  if (!a.tape() || a.tape() != b.tape()) throw std::invalid_argument("operands live on different tapes");
  return *a.tape();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.size() != b.size() || a.rows() != b.rows()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  }
}

template <class F>
Tensor map_values(const Tensor& x, F f) {
  Tensor out = x;
  for (double& v : out.values()) v = f(v);
  return out;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = common_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  if (B.rows() != k) {
    throw std::invalid_argument("matmul: shape mismatch " + A.shape_string() + " x " + B.shape_string());
  }
  Tensor C = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A.at(i, p);
      for (std::size_t j = 0; j < m; ++j) C.at(i, j) += aip * B.at(p, j);
    }
  return t.record(std::move(C), {a.id(), b.id()},
                  [n, k, m](Tape& tp, std::size_t self) {
                    const Tensor& G = tp.grad_out(self);
                    const std::size_t ia = tp.input(self, 0), ib = tp.input(self, 1);
                    const Tensor& A = tp.value_of(ia);
                    const Tensor& B = tp.value_of(ib);
                    Tensor& gA = tp.grad_of(ia);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < m; ++j) acc += G.at(i, j) * B.at(p, j);
                        gA.at(i, p) += acc;
                      }
                    Tensor& gB = tp.grad_of(ib);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t p = 0; p < k; ++p) {
                        const double aip = A.at(i, p);
                        for (std::size_t j = 0; j < m; ++j) gB.at(p, j) += aip * G.at(i, j);
                      }
                  },
                  "matmul");
}

Var add(Var a, Var b) {
  Tape& t = common_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return t.record(std::move(out), {a.id(), b.id()},
                  [](Tape& tp, std::size_t self) {
                    const Tensor& G = tp.grad_out(self);
                    for (std::size_t k = 0; k < 2; ++k) {
                      Tensor& g = tp.grad_of(tp.input(self, k));
                      for (std::size_t i = 0; i < G.size(); ++i) g[i] += G[i];
                    }
                  },
                  "add");
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var mul(Var a, Var b) {
  Tape& t = common_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return t.record(std::move(out), {a.id(), b.id()},
                  [](Tape& tp, std::size_t self) {
                    const Tensor& G = tp.grad_out(self);
                    const std::size_t ia = tp.input(self, 0), ib = tp.input(self, 1);
                    // Copy: ia and ib may be the same node.
                    const Tensor A = tp.value_of(ia);
                    const Tensor B = tp.value_of(ib);
                    Tensor& gA = tp.grad_of(ia);
                    for (std::size_t i = 0; i < G.size(); ++i) gA[i] += G[i] * B[i];
                    Tensor& gB = tp.grad_of(ib);
                    for (std::size_t i = 0; i < G.size(); ++i) gB[i] += G[i] * A[i];
                  },
                  "mul");
}

Var scale(Var a, double factor) {
  Tape& t = *a.tape();
  Tensor out = map_values(a.value(), [factor](double v) { return v * factor; });
  return t.record(std::move(out), {a.id()},
                  [factor](Tape& tp, std::size_t self) {
                    const Tensor& G = tp.grad_out(self);
                    Tensor& g = tp.grad_of(tp.input(self, 0));
                    for (std::size_t i = 0; i < G.size(); ++i) g[i] += factor * G[i];
                  },
                  "scale");
}

Var add_row_bias(Var x, Var bias) {
  Tape& t = common_tape(x, bias);
  const Tensor& X = x.value();
  const Tensor& b = bias.value();
  if (b.size() != X.cols()) {
    throw std::invalid_argument("add_row_bias: bias " + b.shape_string() + " does not match " + X.shape_string());
  }
  Tensor out = X;
  for (std::size_t r = 0; r < X.rows(); ++r)
    for (std::size_t c = 0; c < X.cols(); ++c) out.at(r, c) += b[c];
  return t.record(std::move(out), {x.id(), bias.id()},
                  [](Tape& tp, std::size_t self) {
                    const Tensor& G = tp.grad_out(self);
                    Tensor& gx = tp.grad_of(tp.input(self, 0));
                    for (std::size_t i = 0; i < G.size(); ++i) gx[i] += G[i];
                    Tensor& gb = tp.grad_of(tp.input(self, 1));
                    for (std::size_t r = 0; r < G.rows(); ++r)
                      for (std::size_t c = 0; c < G.cols(); ++c) gb[c] += G.at(r, c);
                  },
                  "add_row_bias");
}

Var relu(Var x) {
  Tensor out = map_values(x.value(), [](double v) { return v > 0.0 ? v : 0.0; });
  return x.tape()->record(std::move(out), {x.id()},
                          [](Tape& tp, std::size_t self) {
                            const Tensor& G = tp.grad_out(self);
                            const std::size_t ix = tp.input(self, 0);
                            const Tensor& X = tp.value_of(ix);
                            Tensor& g = tp.grad_of(ix);
                            for (std::size_t i = 0; i < G.size(); ++i)
                              if (X[i] > 0.0) g[i] += G[i];
                          },
                          "relu");
}

Var tanh(Var x) {
  Tensor out = map_values(x.value(), [](double v) { return std::tanh(v); });
  return x.tape()->record(std::move(out), {x.id()},
                          [](Tape& tp, std::size_t self) {
                            const Tensor& G = tp.grad_out(self);
                            const Tensor& Y = tp.value_of(self);
                            Tensor& g = tp.grad_of(tp.input(self, 0));
                            for (std::size_t i = 0; i < G.size(); ++i) g[i] += G[i] * (1.0 - Y[i] * Y[i]);
                          },
                          "tanh");
}

Var activate(Var x, Activation a) {
  switch (a) {
    case Activation::relu: return relu(x);
    case Activation::tanh: return tanh(x);
    case Activation::linear: return x;
  }
  throw std::invalid_argument("unknown activation kind");
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape()->record(Tensor({1, 1}, {s}), {x.id()},
                          [](Tape& tp, std::size_t self) {
                            const double g0 = tp.grad_out(self)[0];
                            Tensor& g = tp.grad_of(tp.input(self, 0));
                            for (double& v : g.values()) v += g0;
                          },
                          "sum");
}

Var concat_cols(Var a, Var b) {
  Tape& t = common_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rows() != B.rows()) throw std::invalid_argument("concat_cols: row count mismatch");
  const std::size_t rows = A.rows(), ca = A.cols(), cb = B.cols();
  Tensor out = Tensor::zeros({rows, ca + cb});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < ca; ++c) out.at(r, c) = A.at(r, c);
    for (std::size_t c = 0; c < cb; ++c) out.at(r, ca + c) = B.at(r, c);
  }
  return t.record(std::move(out), {a.id(), b.id()},
                  [rows, ca, cb](Tape& tp, std::size_t self) {
                    const Tensor& G = tp.grad_out(self);
                    Tensor& ga = tp.grad_of(tp.input(self, 0));
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < ca; ++c) ga.at(r, c) += G.at(r, c);
                    Tensor& gb = tp.grad_of(tp.input(self, 1));
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < cb; ++c) gb.at(r, c) += G.at(r, ca + c);
                  },
                  "concat_cols");
}

// ---------------------------------------------------------------- losses

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& Z = logits.value();
  const std::size_t batch = Z.rows(), classes = Z.cols();
  if (labels.empty()) throw std::invalid_argument("cross_entropy: empty batch");
  if (labels.size() != batch) throw std::invalid_argument("cross_entropy: label count does not match batch");
  Tensor probs = Tensor::zeros({batch, classes});
  double total = 0.0;
  for (std::size_t r = 0; r < batch; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::invalid_argument("cross_entropy: label " + std::to_string(y) + " out of class range");
    }
    double mx = Z.at(r, 0);
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, Z.at(r, c));
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(Z.at(r, c) - mx);
    const double log_denom = std::log(denom);
    for (std::size_t c = 0; c < classes; ++c) probs.at(r, c) = std::exp(Z.at(r, c) - mx - log_denom);
    total += log_denom - (Z.at(r, static_cast<std::size_t>(y)) - mx);
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.tape()->record(
      Tensor({1, 1}, {total / static_cast<double>(batch)}), {logits.id()},
      [probs = std::move(probs), ys = std::move(ys)](Tape& tp, std::size_t self) {
        const double g0 = tp.grad_out(self)[0] / static_cast<double>(ys.size());
        Tensor& g = tp.grad_of(tp.input(self, 0));
        for (std::size_t r = 0; r < probs.rows(); ++r)
          for (std::size_t c = 0; c < probs.cols(); ++c) {
            const double onehot = static_cast<int>(c) == ys[r] ? 1.0 : 0.0;
            g.at(r, c) += g0 * (probs.at(r, c) - onehot);
          }
      },
      "cross_entropy");
}

Var mse(Var outputs, const Tensor& targets) {
  const Tensor& O = outputs.value();
  if (O.empty()) throw std::invalid_argument("mse: empty batch");
  require_same_shape(O, targets, "mse");
  double total = 0.0;
  for (std::size_t i = 0; i < O.size(); ++i) total += (O[i] - targets[i]) * (O[i] - targets[i]);
  const double n = static_cast<double>(O.size());
  return outputs.tape()->record(Tensor({1, 1}, {total / n}), {outputs.id()},
                                [targets, n](Tape& tp, std::size_t self) {
                                  const double g0 = tp.grad_out(self)[0];
                                  const std::size_t io = tp.input(self, 0);
                                  const Tensor& O = tp.value_of(io);
                                  Tensor& g = tp.grad_of(io);
                                  for (std::size_t i = 0; i < O.size(); ++i)
                                    g[i] += g0 * 2.0 * (O[i] - targets[i]) / n;
                                },
                                "mse");
}

Var masked_mse(Var outputs, const Tensor& targets, const Tensor& mask) {
  const Tensor& O = outputs.value();
  if (O.empty()) throw std::invalid_argument("masked_mse: empty batch");
  require_same_shape(O, targets, "masked_mse");
  require_same_shape(O, mask, "masked_mse");
  double count = 0.0, total = 0.0;
  for (std::size_t i = 0; i < O.size(); ++i) {
    if (mask[i] != 0.0 && mask[i] != 1.0) throw std::invalid_argument("masked_mse: mask must be 0/1");
    if (mask[i] == 1.0) {
      count += 1.0;
      total += (O[i] - targets[i]) * (O[i] - targets[i]);
    }
  }
  if (count == 0.0) throw std::invalid_argument("masked_mse: all-zero mask");
  return outputs.tape()->record(Tensor({1, 1}, {total / count}), {outputs.id()},
                                [targets, mask, count](Tape& tp, std::size_t self) {
                                  const double g0 = tp.grad_out(self)[0];
                                  const std::size_t io = tp.input(self, 0);
                                  const Tensor& O = tp.value_of(io);
                                  Tensor& g = tp.grad_of(io);
                                  for (std::size_t i = 0; i < O.size(); ++i)
                                    if (mask[i] == 1.0) g[i] += g0 * 2.0 * (O[i] - targets[i]) / count;
                                },
                                "masked_mse");
}

Var loss(Var outputs, const Targets& targets, LossKind kind, const Tensor* mask) {
  switch (kind) {
    case LossKind::cross_entropy: {
      const auto* labels = std::get_if<std::vector<int>>(&targets);
      if (!labels) throw std::invalid_argument("cross_entropy requires integer labels");
      return cross_entropy(outputs, *labels);
    }
    case LossKind::mse: {
      const auto* t = std::get_if<Tensor>(&targets);
      if (!t) throw std::invalid_argument("mse requires real targets");
      return mse(outputs, *t);
    }
    case LossKind::masked_mse: {
      const auto* t = std::get_if<Tensor>(&targets);
      if (!t) throw std::invalid_argument("masked_mse requires real targets");
      if (!mask) throw std::invalid_argument("masked_mse requires a mask");
      return masked_mse(outputs, *t, *mask);
    }
  }
  throw std::invalid_argument("unknown loss kind");
}

// ---------------------------------------------------------------- MLP

std::string layer_weight_name(const std::string& prefix, std::size_t k) {
  return prefix + "layer" + std::to_string(k) + ".weight";
}

std::string layer_bias_name(const std::string& prefix, std::size_t k) {
  return prefix + "layer" + std::to_string(k) + ".bias";
}

namespace {

void check_layers(std::span<const LayerSpec> layers) {
  if (layers.empty()) throw std::invalid_argument("layer spec is empty");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    if (layers[k].in_dim == 0 || layers[k].out_dim == 0) throw std::invalid_argument("layer dims must be >= 1");
    if (k > 0 && layers[k].in_dim != layers[k - 1].out_dim) {
      throw std::invalid_argument("layer " + std::to_string(k) + " input width does not chain");
    }
  }
}

}  // namespace

Var forward_mlp(Tape& tape, const ParamSet& params, const std::string& prefix, std::span<const LayerSpec> layers,
                Var inputs) {
  check_layers(layers);
  if (inputs.value().cols() != layers.front().in_dim) {
    throw std::invalid_argument("forward_mlp: input width " + std::to_string(inputs.value().cols()) +
                                " != layer in_dim " + std::to_string(layers.front().in_dim));
  }
  Var h = inputs;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    Var w = tape.parameter(params, layer_weight_name(prefix, k));
    Var b = tape.parameter(params, layer_bias_name(prefix, k));
    if (w.value().rows() != layers[k].in_dim || w.value().cols() != layers[k].out_dim) {
      throw std::invalid_argument("forward_mlp: weight " + layer_weight_name(prefix, k) + " has shape " +
                                  w.value().shape_string());
    }
    h = activate(add_row_bias(matmul(h, w), b), layers[k].activation);
  }
  return h;
}

Tensor forward_mlp(const ParamSet& params, const std::string& prefix, std::span<const LayerSpec> layers,
                   const Tensor& inputs) {
  Tape tape;
  return forward_mlp(tape, params, prefix, layers, tape.constant(inputs)).value();
}

void init_mlp(ParamSet& params, const std::string& prefix, std::span<const LayerSpec> layers, Rng& rng) {
  check_layers(layers);
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layers[k].in_dim));
    Tensor w = Tensor::zeros({layers[k].in_dim, layers[k].out_dim});
    for (double& v : w.values()) v = rng.uniform(-bound, bound);
    Tensor b = Tensor::zeros({layers[k].out_dim});
    for (double& v : b.values()) v = rng.uniform(-bound, bound);
    params.add(layer_weight_name(prefix, k), std::move(w));
    params.add(layer_bias_name(prefix, k), std::move(b));
  }
}

double grad_check(const ScalarProgram& program, const ParamSet& params, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  auto evaluate = [&](const ParamSet& p) {
    Tape tape;
    const double v = program(tape, p).scalar();
    if (!std::isfinite(v)) throw NonFiniteError("grad_check: program returned a non-finite value");
    return v;
  };

  GradientMap analytic;
  {
    Tape tape;
    Var out = program(tape, params);
    analytic = tape.backward(out, params);
  }

  double worst = 0.0;
  ParamSet probe = params;
  for (const auto& [name, value] : params) {
    Tensor& slot = probe.get(name);
    const Tensor& g = analytic.get(name);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double original = value[i];
      slot[i] = original + step;
      const double up = evaluate(probe);
      slot[i] = original - step;
      const double down = evaluate(probe);
      slot[i] = original;
      const double numeric = (up - down) / (2.0 * step);
      const double denom = std::max({1.0, std::abs(g[i]), std::abs(numeric)});
      worst = std::max(worst, std::abs(g[i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace endtask
