#include "cbm/config.hpp"

#include <fstream>
#include <set>
#include <string>

namespace cbm {
using nlohmann::json;

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

namespace {

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.contains(key)) throw ConfigError(std::string(what) + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
  reject_unknown_keys(j,
                      {"gate", "backend", "lr", "epochs", "lambda", "batch_size", "seed", "beta", "gamma", "zeta",
                       "prior_pi", "mc_samples", "kl_scale", "normalize", "predictor_normalize", "literal_bernoulli_location",
                       "adam_beta1", "adam_beta2", "adam_epsilon"},
                      "training config");
  RunConfig c;
  std::string gate(to_string(c.gate)), backend(to_string(c.backend));
  read_opt(j, "gate", gate);
  read_opt(j, "backend", backend);
  c.gate = parse_gate_kind(gate);
  c.backend = parse_backend_kind(backend);
  read_opt(j, "lr", c.train.learning_rate);
  read_opt(j, "epochs", c.train.epochs);
  read_opt(j, "batch_size", c.train.batch_size);
  read_opt(j, "seed", c.train.seed);
  read_opt(j, "adam_beta1", c.train.beta1);
  read_opt(j, "adam_beta2", c.train.beta2);
  read_opt(j, "adam_epsilon", c.train.epsilon);
  read_opt(j, "lambda", c.hyper.lambda);
  read_opt(j, "beta", c.hyper.beta);
  read_opt(j, "gamma", c.hyper.gamma);
  read_opt(j, "zeta", c.hyper.zeta);
  read_opt(j, "prior_pi", c.hyper.prior_pi);
  read_opt(j, "mc_samples", c.hyper.mc_samples);
  read_opt(j, "kl_scale", c.hyper.kl_scale);
  read_opt(j, "literal_bernoulli_location", c.hyper.literal_bernoulli_location);
  read_opt(j, "normalize", c.normalize);
  read_opt(j, "predictor_normalize", c.predictor_normalize);
  c.train.validate();
  c.hyper.validate();
  return c;
}

json to_json(const RunConfig& c) {
  return {
      {"gate", to_string(c.gate)},
      {"backend", to_string(c.backend)},
      {"lr", c.train.learning_rate},
      {"epochs", c.train.epochs},
      {"lambda", c.hyper.lambda},
      {"batch_size", c.train.batch_size},
      {"seed", c.train.seed},
      {"beta", c.hyper.beta},
      {"gamma", c.hyper.gamma},
      {"zeta", c.hyper.zeta},
      {"prior_pi", c.hyper.prior_pi},
      {"mc_samples", c.hyper.mc_samples},
      {"kl_scale", c.hyper.kl_scale},
      {"normalize", c.normalize},
      {"predictor_normalize", c.predictor_normalize},
      {"literal_bernoulli_location", c.hyper.literal_bernoulli_location},
      {"adam_beta1", c.train.beta1},
      {"adam_beta2", c.train.beta2},
      {"adam_epsilon", c.train.epsilon},
  };
}

SyntheticSpec synthetic_spec_from_json(const json& j) {
  reject_unknown_keys(j,
                      {"n_examples", "n_concepts", "n_classes", "embed_dim", "concepts_per_class",
                       "attribute_flip_rate", "embedding_noise_std", "seed", "test_fraction"},
                      "synthetic spec");
  SyntheticSpec s;
  read_opt(j, "n_examples", s.n_examples);
  read_opt(j, "n_concepts", s.n_concepts);
  read_opt(j, "n_classes", s.n_classes);
  read_opt(j, "embed_dim", s.embed_dim);
  read_opt(j, "concepts_per_class", s.concepts_per_class);
  read_opt(j, "attribute_flip_rate", s.attribute_flip_rate);
  read_opt(j, "embedding_noise_std", s.embedding_noise_std);
  read_opt(j, "seed", s.seed);
  s.validate();
  return s;
}

json to_json(const SyntheticSpec& s) {
  return {
      {"n_examples", s.n_examples},
      {"n_concepts", s.n_concepts},
      {"n_classes", s.n_classes},
      {"embed_dim", s.embed_dim},
      {"concepts_per_class", s.concepts_per_class},
      {"attribute_flip_rate", s.attribute_flip_rate},
      {"embedding_noise_std", s.embedding_noise_std},
      {"seed", s.seed},
  };
}

}  // namespace cbm
