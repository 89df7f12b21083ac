#ifndef CBM_OPTIM_HPP
#define CBM_OPTIM_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "cbm/error.hpp"
#include "cbm/rng.hpp"

namespace cbm {

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 1500;
  // Batches larger than the training split run full-batch.
  int batch_size = 512;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be > 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("Adam betas must lie in [0,1)");
    }
    if (!(epsilon > 0.0)) throw ConfigError("Adam epsilon must be > 0");
  }
};

// Adam with bias-corrected moments, no schedule and no weight decay.
template <typename Scalar>
class Adam {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  Adam(const TrainConfig& config, std::vector<std::reference_wrapper<Matrix>> params)
      : lr_(config.learning_rate),
        beta1_(config.beta1),
        beta2_(config.beta2),
        epsilon_(config.epsilon),
        params_(std::move(params)) {
    for (const Matrix& p : params_) {
      m_.push_back(Matrix::Zero(p.rows(), p.cols()));
      v_.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }

  void step(const std::vector<Matrix>& grads) {
    if (grads.size() != params_.size()) throw DimensionError("Adam: gradient count != parameter count");
    ++t_;
    const Scalar c1 = Scalar(1) - std::pow(Scalar(beta1_), Scalar(t_));
    const Scalar c2 = Scalar(1) - std::pow(Scalar(beta2_), Scalar(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Matrix& p = params_[i];
      if (grads[i].rows() != p.rows() || grads[i].cols() != p.cols()) {
        throw DimensionError("Adam: gradient shape != parameter shape");
      }
      m_[i] = Scalar(beta1_) * m_[i] + Scalar(1 - beta1_) * grads[i];
      v_[i] = Scalar(beta2_) * v_[i] + Scalar(1 - beta2_) * grads[i].cwiseAbs2();
      p.array() -= Scalar(lr_) * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + Scalar(epsilon_));
    }
  }

  long steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, epsilon_;
  std::vector<std::reference_wrapper<Matrix>> params_;
  std::vector<Matrix> m_, v_;
  long t_ = 0;
};

// Positions [0, n) shuffled per epoch and cut into consecutive batches.
inline std::vector<std::vector<std::uint32_t>> shuffled_batches(std::size_t n, int batch_size, std::uint64_t seed,
                                                                std::uint64_t epoch) {
  std::vector<std::uint32_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);
  CounterRng rng(seed, Stream::kShuffle, epoch);
  deterministic_shuffle(order, rng);
  std::vector<std::vector<std::uint32_t>> batches;
  const auto step = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0; start < n; start += step) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + step)));
  }
  return batches;
}

}  // namespace cbm

#endif  // CBM_OPTIM_HPP
