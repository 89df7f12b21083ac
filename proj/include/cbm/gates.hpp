#ifndef CBM_GATES_HPP
#define CBM_GATES_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "cbm/data.hpp"
#include "cbm/error.hpp"

namespace cbm {

enum class GateKind { kL1, kL0, kBernoulli };

std::string_view to_string(GateKind kind);
GateKind parse_gate_kind(std::string_view name);

// Distribution and penalty hyperparameters shared by the three gate families.
// Defaults: temperature 0.1, stretch interval (-0.1, 1.1), Bernoulli prior
// 1e-4, one Monte-Carlo sample.
struct GateHyperparams {
  double beta = 0.1;
  double gamma = -0.1;
  double zeta = 1.1;
  double prior_pi = 1e-4;
  // Weight of the l1 / l0 penalty.
  double lambda = 0.0;
  // Weight of the Bernoulli KL term.
  double kl_scale = 1.0;
  int mc_samples = 1;
  // Use log(pi) instead of logit(pi) as the relaxed-Bernoulli location.
  bool literal_bernoulli_location = false;

  void validate() const;
};

struct GateParams {
  Eigen::MatrixXd w_s;  // K x M amortization matrix
  GateKind kind = GateKind::kL1;
  GateHyperparams hyper;
};

struct BinaryMask {
  AttributeMatrix z;  // N x M, entries in {0,1}
  double tau = 0.5;
};

// Probabilities are clamped to this range before entering the KL.
inline constexpr double kProbClamp = 1e-7;

namespace gate_math {

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// Logistic sample log(u) - log(1-u).
template <typename T>
T logistic_noise(T u) {
  return std::log(u) - std::log1p(-u);
}

template <typename T>
T clip01(T x) {
  return std::min(T(1), std::max(T(0), x));
}

// Stretched Hard Concrete value before clipping.
template <typename T>
T hard_concrete_stretched(T phi, T u, const GateHyperparams& h) {
  const T s = sigmoid((logistic_noise(u) + phi) / T(h.beta));
  return s * T(h.zeta - h.gamma) + T(h.gamma);
}

template <typename T>
T hard_concrete(T phi, T u, const GateHyperparams& h) {
  return clip01(hard_concrete_stretched(phi, u, h));
}

// dz/dphi; zero on the clipped region.
template <typename T>
T hard_concrete_grad(T phi, T u, const GateHyperparams& h) {
  const T s = sigmoid((logistic_noise(u) + phi) / T(h.beta));
  const T stretched = s * T(h.zeta - h.gamma) + T(h.gamma);
  if (stretched <= T(0) || stretched >= T(1)) return T(0);
  return s * (T(1) - s) / T(h.beta) * T(h.zeta - h.gamma);
}

// Probability that the Hard Concrete gate is non-zero.
template <typename T>
T l0_open_probability(T phi, const GateHyperparams& h) {
  return sigmoid(phi - T(h.beta) * std::log(T(-h.gamma / h.zeta)));
}

template <typename T>
T l0_open_probability_grad(T phi, const GateHyperparams& h) {
  const T p = l0_open_probability(phi, h);
  return p * (T(1) - p);
}

template <typename T>
T l0_inference(T phi, const GateHyperparams& h) {
  return clip01(sigmoid(phi) * T(h.zeta - h.gamma) + T(h.gamma));
}

// Location of the relaxed Bernoulli sample as a function of the logit.
template <typename T>
T bernoulli_location(T phi, bool literal) {
  if (!literal) return phi;
  // log(sigmoid(phi)) = -softplus(-phi)
  return phi >= T(0) ? -std::log1p(std::exp(-phi)) : phi - std::log1p(std::exp(phi));
}

template <typename T>
T bernoulli_location_grad(T phi, bool literal) {
  return literal ? T(1) - sigmoid(phi) : T(1);
}

template <typename T>
T concrete_relaxed(T phi, T u, T beta, bool literal = false) {
  return sigmoid((bernoulli_location(phi, literal) + logistic_noise(u)) / beta);
}

template <typename T>
T concrete_relaxed_grad(T phi, T u, T beta, bool literal = false) {
  const T z = concrete_relaxed(phi, u, beta, literal);
  return z * (T(1) - z) / beta * bernoulli_location_grad(phi, literal);
}

template <typename T>
T clamp_probability(T p) {
  return std::clamp(p, T(kProbClamp), T(1) - T(kProbClamp));
}

// KL(Bernoulli(pi) || Bernoulli(prior)) for one entry, pi clamped first.
template <typename T>
T bernoulli_kl_term(T pi, T prior) {
  const T p = clamp_probability(pi);
  return p * std::log(p / prior) + (T(1) - p) * std::log((T(1) - p) / (T(1) - prior));
}

// d/dphi of bernoulli_kl_term(sigmoid(phi), prior); zero where the clamp is active.
template <typename T>
T bernoulli_kl_grad_logit(T phi, T prior) {
  const T p = sigmoid(phi);
  if (p <= T(kProbClamp) || p >= T(1) - T(kProbClamp)) return T(0);
  const T dkl_dp = std::log(p / prior) - std::log((T(1) - p) / (T(1) - prior));
  return dkl_dp * p * (T(1) - p);
}

}  // namespace gate_math

namespace detail {

template <typename Derived>
void require_open_unit(const Eigen::MatrixBase<Derived>& u) {
  if (!((u.array() > 0).all() && (u.array() < 1).all())) {
    throw DataError("gate noise must lie strictly inside (0,1)");
  }
}

template <typename A, typename B>
void require_same_shape(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError(what);
}

}  // namespace detail

// Unnormalized concept logits: embeddings (N x K) times w_s (K x M).
template <typename W, typename E>
Eigen::Matrix<typename W::Scalar, Eigen::Dynamic, Eigen::Dynamic> gate_logits(
    const Eigen::MatrixBase<W>& w_s, const Eigen::MatrixBase<E>& embeddings) {
  if (embeddings.cols() != w_s.rows()) {
    throw DimensionError("gate_logits: embedding width " + std::to_string(embeddings.cols()) +
                         " != amortization rows " + std::to_string(w_s.rows()));
  }
  return embeddings.template cast<typename W::Scalar>() * w_s;
}

template <typename Derived>
typename Derived::PlainObject gate_l1_forward(const Eigen::MatrixBase<Derived>& phi) {
  using T = typename Derived::Scalar;
  return phi.unaryExpr([](T x) { return gate_math::sigmoid(x); });
}

// lambda * (1/N) * sum of activations. Activations are non-negative so this is the l1 norm.
template <typename Derived>
typename Derived::Scalar gate_l1_penalty(const Eigen::MatrixBase<Derived>& z, double lambda) {
  using T = typename Derived::Scalar;
  if (z.rows() == 0) return T(0);
  return T(lambda) * z.sum() / T(z.rows());
}

template <typename P, typename U>
typename P::PlainObject gate_l0_sample(const Eigen::MatrixBase<P>& phi, const Eigen::MatrixBase<U>& noise,
                                       const GateHyperparams& hyper) {
  using T = typename P::Scalar;
  detail::require_same_shape(phi, noise, "gate_l0_sample: noise shape != logits shape");
  detail::require_open_unit(noise);
  return phi.binaryExpr(noise.template cast<T>(),
                        [&hyper](T p, T u) { return gate_math::hard_concrete(p, u, hyper); });
}

// lambda * (1/N) * sum over entries of the gate-open probability.
template <typename Derived>
typename Derived::Scalar gate_l0_penalty(const Eigen::MatrixBase<Derived>& phi, const GateHyperparams& hyper) {
  using T = typename Derived::Scalar;
  if (phi.rows() == 0) return T(0);
  const T total = phi.unaryExpr([&hyper](T p) { return gate_math::l0_open_probability(p, hyper); }).sum();
  return T(hyper.lambda) * total / T(phi.rows());
}

template <typename Derived>
typename Derived::PlainObject gate_l0_inference(const Eigen::MatrixBase<Derived>& phi,
                                                const GateHyperparams& hyper) {
  using T = typename Derived::Scalar;
  return phi.unaryExpr([&hyper](T p) { return gate_math::l0_inference(p, hyper); });
}

template <typename P, typename U>
typename P::PlainObject gate_bernoulli_sample_relaxed(const Eigen::MatrixBase<P>& phi,
                                                      const Eigen::MatrixBase<U>& noise, double beta,
                                                      bool literal_location = false) {
  using T = typename P::Scalar;
  detail::require_same_shape(phi, noise, "gate_bernoulli_sample_relaxed: noise shape != logits shape");
  detail::require_open_unit(noise);
  if (!(beta > 0)) throw ConfigError("temperature must be positive");
  return phi.binaryExpr(noise.template cast<T>(), [beta, literal_location](T p, T u) {
    return gate_math::concrete_relaxed(p, u, T(beta), literal_location);
  });
}

template <typename Derived>
typename Derived::PlainObject gate_bernoulli_probs(const Eigen::MatrixBase<Derived>& phi) {
  return gate_l1_forward(phi);
}

// (1/N) * sum of per-entry KL(q || prior) after clamping.
template <typename Derived>
typename Derived::Scalar gate_bernoulli_kl(const Eigen::MatrixBase<Derived>& pi, double prior_pi) {
  using T = typename Derived::Scalar;
  if (pi.rows() == 0) return T(0);
  const T total = pi.unaryExpr([prior_pi](T p) { return gate_math::bernoulli_kl_term(p, T(prior_pi)); }).sum();
  return total / T(pi.rows());
}

// Noise-free activation each family thresholds at inference.
template <typename Derived>
typename Derived::PlainObject deterministic_activation(GateKind kind, const Eigen::MatrixBase<Derived>& phi,
                                                       const GateHyperparams& hyper) {
  switch (kind) {
    case GateKind::kL0:
      return gate_l0_inference(phi, hyper);
    case GateKind::kL1:
    case GateKind::kBernoulli:
      break;
  }
  return gate_l1_forward(phi);
}

// Strict comparison: an entry is active iff its activation exceeds tau.
template <typename Derived>
BinaryMask threshold_activation(const Eigen::MatrixBase<Derived>& activation, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("threshold must lie in (0,1)");
  BinaryMask mask;
  mask.tau = tau;
  mask.z = (activation.array() > typename Derived::Scalar(tau)).template cast<std::uint8_t>();
  return mask;
}

BinaryMask gate_threshold(const GateParams& gate, const Eigen::MatrixXd& embeddings, double tau);

// Uniform noise for one Monte-Carlo sample of one epoch, keyed by the global
// example index and concept index (rows follow `example_ids`).
Eigen::MatrixXd gate_noise(std::uint64_t seed, std::uint64_t epoch, std::uint64_t sample,
                           std::span<const std::uint32_t> example_ids, Eigen::Index num_concepts);

void save_gate(const GateParams& gate, const std::filesystem::path& dir);
GateParams load_gate(const std::filesystem::path& dir);

}  // namespace cbm

#endif  // CBM_GATES_HPP
