#include <stdexcept>

#include "endtask/harness.hpp"

namespace endtask {

namespace {

constexpr const char* kHelpfulHarmful = "synth-helpful-harmful";
constexpr const char* kTaptDapt = "synth-tapt-dapt";

nlohmann::json merged(const std::string& id, const nlohmann::json& options) {
  nlohmann::json opts = benchmark_defaults(id);
  if (options.is_null()) return opts;
  if (!options.is_object()) throw std::invalid_argument("benchmark options must be a JSON object");
  for (const auto& [key, value] : options.items()) {
    if (!opts.contains(key)) throw std::invalid_argument("unknown option '" + key + "' for benchmark " + id);
    opts[key] = value;
  }
  return opts;
}

BodySpec body_from(const nlohmann::json& opts, std::size_t input_dim) {
  BodySpec body;
  body.input_dim = input_dim;
  body.hidden_dims = opts.at("hidden_dims").get<std::vector<std::size_t>>();
  body.activation = parse_activation(opts.at("activation").get<std::string>());
  body.validate();
  return body;
}

// Auxiliary tasks only use their train split; the generator still wants
// nonempty val/test splits.
SyntheticSpec aux_spec(const SyntheticSpec& end, std::string id, std::size_t rows) {
  SyntheticSpec s = end;
  s.id = std::move(id);
  s.train_size = rows;
  s.val_size = 1;
  s.test_size = 1;
  return s;
}

BenchmarkInstance helpful_harmful(const nlohmann::json& opts, std::uint64_t data_seed) {
  SyntheticSpec end;
  end.id = "end";
  end.teacher_seed = derive_seed(data_seed, 0);
  end.data_seed = derive_seed(data_seed, 1);
  end.input_dim = opts.at("input_dim").get<std::size_t>();
  end.num_classes = opts.at("num_classes").get<std::size_t>();
  end.teacher_hidden = opts.at("teacher_hidden").get<std::size_t>();
  end.train_size = opts.at("end_train").get<std::size_t>();
  end.val_size = opts.at("end_val").get<std::size_t>();
  end.test_size = opts.at("end_test").get<std::size_t>();

  SyntheticSpec helpful = aux_spec(end, "helpful", opts.at("aux_train").get<std::size_t>());
  helpful.data_seed = derive_seed(data_seed, 2);
  helpful.label_noise = opts.at("helpful_noise").get<double>();
  helpful.mode = Relatedness::same_teacher;

  SyntheticSpec harmful = aux_spec(end, "harmful", opts.at("harmful_train").get<std::size_t>());
  harmful.data_seed = derive_seed(data_seed, 3);
  harmful.mode = Relatedness::random_labels;
  harmful.num_classes = opts.at("harmful_classes").get<std::size_t>();

  BenchmarkInstance b{body_from(opts, end.input_dim), generate_synthetic_classification(end), {}};
  b.aux_tasks.push_back(generate_synthetic_classification(helpful));
  b.aux_tasks.push_back(generate_synthetic_classification(harmful));
  return b;
}

BenchmarkInstance tapt_dapt(const nlohmann::json& opts, std::uint64_t data_seed) {
  SyntheticSpec end;
  end.id = "end";
  end.teacher_seed = derive_seed(data_seed, 0);
  end.data_seed = derive_seed(data_seed, 1);
  end.input_dim = opts.at("input_dim").get<std::size_t>();
  end.latent_dim = opts.at("latent_dim").get<std::size_t>();
  end.num_classes = opts.at("num_classes").get<std::size_t>();
  end.teacher_hidden = opts.at("teacher_hidden").get<std::size_t>();
  end.train_size = opts.at("end_train").get<std::size_t>();
  end.val_size = opts.at("end_val").get<std::size_t>();
  end.test_size = opts.at("end_test").get<std::size_t>();
  end.label_noise = opts.at("end_noise").get<double>();
  end.latent_noise = opts.at("latent_noise").get<double>();
  const auto n = opts.at("n").get<std::size_t>();
  const auto mask_prob = opts.at("mask_prob").get<double>();
  if (n == 0) throw std::invalid_argument("synth-tapt-dapt needs n >= 1");

  Task end_task = generate_synthetic_classification(end);
  const std::size_t pool_rows = n * end.train_size;
  LabeledDataset pool = generate_input_pool(end, pool_rows, derive_seed(data_seed, 2));

  BenchmarkInstance b{body_from(opts, 2 * end.input_dim), end_task, {}};
  b.aux_tasks.push_back(derive_masked_reconstruction_task(end_task.data, mask_prob, derive_seed(data_seed, 3), "tapt"));
  b.aux_tasks.push_back(derive_domain_task(pool, n, end.train_size, mask_prob, derive_seed(data_seed, 4), "dapt"));
  return b;
}

}  // namespace

std::vector<std::string> benchmark_ids() { return {kHelpfulHarmful, kTaptDapt}; }

nlohmann::json benchmark_defaults(const std::string& id) {
  if (id == kHelpfulHarmful) {
    return {{"input_dim", 10},       {"num_classes", 3},      {"teacher_hidden", 16}, {"end_train", 64},
            {"end_val", 200},        {"end_test", 1000},      {"aux_train", 1000},    {"helpful_noise", 0.2},
            {"harmful_train", 64},   {"harmful_classes", 10}, {"activation", "tanh"},
            {"hidden_dims", nlohmann::json::array({16})}};
  }
  if (id == kTaptDapt) {
    return {{"input_dim", 16},     {"latent_dim", 4},   {"latent_noise", 0.5}, {"num_classes", 3},
            {"teacher_hidden", 16}, {"end_train", 32},   {"end_val", 200},      {"end_test", 1000},
            {"end_noise", 0.0},     {"n", 10},           {"mask_prob", 0.3},    {"activation", "tanh"},
            {"hidden_dims", nlohmann::json::array({32})}};
  }
  throw std::invalid_argument("unknown benchmark '" + id + "'");
}

BenchmarkInstance make_benchmark(const std::string& id, const nlohmann::json& options, std::uint64_t data_seed) {
  const nlohmann::json opts = merged(id, options);
  if (id == kHelpfulHarmful) return helpful_harmful(opts, data_seed);
  return tapt_dapt(opts, data_seed);
}

}  // namespace endtask
