#include "cbm/gates.hpp"

#include <fstream>

#include <json.hpp>

#include "cbm/binary_io.hpp"
#include "cbm/rng.hpp"

namespace cbm {
namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(GateKind kind) {
  switch (kind) {
    case GateKind::kL1:
      return "l1";
    case GateKind::kL0:
      return "l0";
    case GateKind::kBernoulli:
      return "bernoulli";
  }
  return "unknown";
}

GateKind parse_gate_kind(std::string_view name) {
  if (name == "l1") return GateKind::kL1;
  if (name == "l0") return GateKind::kL0;
  if (name == "bernoulli") return GateKind::kBernoulli;
  throw ConfigError("unknown gate kind '" + std::string(name) + "' (expected l1, l0 or bernoulli)");
}

void GateHyperparams::validate() const {
  if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
  if (!(gamma < 0.0)) throw ConfigError("gamma must be < 0");
  if (!(zeta > 1.0)) throw ConfigError("zeta must be > 1");
  if (!(prior_pi > 0.0 && prior_pi < 1.0)) throw ConfigError("prior_pi must lie in (0,1)");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be finite and >= 0");
  if (!(kl_scale >= 0.0) || !std::isfinite(kl_scale)) throw ConfigError("kl_scale must be finite and >= 0");
  if (mc_samples < 1) throw ConfigError("mc_samples must be >= 1");
}

BinaryMask gate_threshold(const GateParams& gate, const Eigen::MatrixXd& embeddings, double tau) {
  const Eigen::MatrixXd phi = gate_logits(gate.w_s, embeddings);
  return threshold_activation(deterministic_activation(gate.kind, phi, gate.hyper), tau);
}

Eigen::MatrixXd gate_noise(std::uint64_t seed, std::uint64_t epoch, std::uint64_t sample,
                           std::span<const std::uint32_t> example_ids, Eigen::Index num_concepts) {
  Eigen::MatrixXd u(static_cast<Eigen::Index>(example_ids.size()), num_concepts);
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    const auto example = example_ids[static_cast<std::size_t>(i)];
    for (Eigen::Index m = 0; m < num_concepts; ++m) {
      u(i, m) = counter_uniform(seed, Stream::kGateNoise, epoch, sample, example,
                                static_cast<std::uint64_t>(m));
    }
  }
  return u;
}

void save_gate(const GateParams& gate, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir.string());
  const auto& h = gate.hyper;
  json meta = {
      {"kind", to_string(gate.kind)},
      {"k", gate.w_s.rows()},
      {"m", gate.w_s.cols()},
      {"beta", h.beta},
      {"gamma", h.gamma},
      {"zeta", h.zeta},
      {"prior_pi", h.prior_pi},
      {"lambda", h.lambda},
      {"kl_scale", h.kl_scale},
      {"mc_samples", h.mc_samples},
      {"literal_bernoulli_location", h.literal_bernoulli_location},
  };
  std::ofstream out(dir / "meta.json");
  if (!out) throw DataError("cannot write " + (dir / "meta.json").string());
  out << meta.dump(2) << '\n';
  const EmbeddingMatrix w = gate.w_s.cast<float>();
  io::write_f32(dir / "w_s.f32", {w.data(), static_cast<std::size_t>(w.size())});
}

GateParams load_gate(const fs::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw DataError("missing file: " + (dir / "meta.json").string());
  GateParams gate;
  Eigen::Index k = 0, m = 0;
  try {
    const json meta = json::parse(in);
    gate.kind = parse_gate_kind(meta.at("kind").get<std::string>());
    k = meta.at("k").get<Eigen::Index>();
    m = meta.at("m").get<Eigen::Index>();
    auto& h = gate.hyper;
    h.beta = meta.value("beta", h.beta);
    h.gamma = meta.value("gamma", h.gamma);
    h.zeta = meta.value("zeta", h.zeta);
    h.prior_pi = meta.value("prior_pi", h.prior_pi);
    h.lambda = meta.value("lambda", h.lambda);
    h.kl_scale = meta.value("kl_scale", h.kl_scale);
    h.mc_samples = meta.value("mc_samples", h.mc_samples);
    h.literal_bernoulli_location = meta.value("literal_bernoulli_location", false);
  } catch (const json::exception& e) {
    throw DataError("gate meta.json: " + std::string(e.what()));
  }
  gate.hyper.validate();
  const auto values = io::read_f32(dir / "w_s.f32", static_cast<std::size_t>(k * m));
  EmbeddingMatrix w(k, m);
  std::copy(values.begin(), values.end(), w.data());
  gate.w_s = w.cast<double>();
  return gate;
}

}  // namespace cbm
