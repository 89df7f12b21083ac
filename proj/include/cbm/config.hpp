#ifndef CBM_CONFIG_HPP
#define CBM_CONFIG_HPP

#include <filesystem>

#include <json.hpp>

#include "cbm/backends.hpp"
#include "cbm/data.hpp"
#include "cbm/gates.hpp"
#include "cbm/optim.hpp"

namespace cbm {

nlohmann::json read_json_file(const std::filesystem::path& path);

// Flat training config:
// { "gate", "backend", "lr", "epochs", "lambda", "batch_size", "seed",
//   "beta", "gamma", "zeta", "prior_pi", "mc_samples" }
// plus optional "kl_scale", "normalize", "predictor_normalize", "literal_bernoulli_location",
// "adam_beta1", "adam_beta2", "adam_epsilon". Unknown keys are rejected.
struct RunConfig {
  GateKind gate = GateKind::kL1;
  BackendKind backend = BackendKind::kPredictor;
  TrainConfig train;
  GateHyperparams hyper;
  // Cosine similarity for the VLM backend.
  bool normalize = true;
  // L2-normalize embeddings before the attribute predictor.
  bool predictor_normalize = false;
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& config);

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SyntheticSpec& spec);

}  // namespace cbm

#endif  // CBM_CONFIG_HPP
