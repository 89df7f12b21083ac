#ifndef CBM_TRAINING_HPP
#define CBM_TRAINING_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cbm/autodiff.hpp"
#include "cbm/backends.hpp"
#include "cbm/data.hpp"
#include "cbm/gates.hpp"
#include "cbm/optim.hpp"

namespace cbm {

struct ClassifierHead {
  Eigen::MatrixXd w_c;      // M x C
  Eigen::RowVectorXd bias;  // C
};

struct EpochRecord {
  double task_loss = 0.0;
  double penalty = 0.0;
  double total_loss = 0.0;  // task_loss + penalty
  double mean_activation = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::vector<std::string> warnings;
};

// Class logits (z .* scores) * W_c + bias, row per example.
template <typename S, typename Z>
Eigen::MatrixXd classify(const Eigen::MatrixBase<S>& scores, const Eigen::MatrixBase<Z>& z,
                         const ClassifierHead& head) {
  if (scores.rows() != z.rows() || scores.cols() != z.cols()) {
    throw DimensionError("classify: gate shape != score shape");
  }
  if (scores.cols() != head.w_c.rows() || head.bias.size() != head.w_c.cols()) {
    throw DimensionError("classify: classifier head does not match concept count");
  }
  Eigen::MatrixXd logits =
      scores.template cast<double>().cwiseProduct(z.template cast<double>()) * head.w_c;
  logits.rowwise() += head.bias;
  return logits;
}

std::vector<std::uint32_t> argmax_rows(const Eigen::MatrixXd& logits);

struct JointModel {
  GateParams gate;
  ClassifierHead head;
  TrainHistory history;
};

// End-to-end Adam on (W_s, W_c, bias) over the dataset's train split.
// `scores` holds precomputed concept scores for every example and is never modified.
JointModel train_joint(const ConceptDataset& dataset, const ConceptScores& scores, GateKind kind,
                       const TrainConfig& config, const GateHyperparams& hyper);

// Softmax-regression probe on fixed features (N x M), zero-initialized.
ClassifierHead train_classifier(const Eigen::MatrixXd& features, std::span<const std::uint32_t> labels,
                                Eigen::Index num_classes, const TrainConfig& config,
                                TrainHistory* history = nullptr);

struct RetrainResult {
  ClassifierHead head;
  BinaryMask train_mask;
  std::vector<std::string> warnings;
};

// Freezes the gate, thresholds it at tau on the train split and retrains only the classifier.
RetrainResult retrain_classifier(const ConceptDataset& dataset, const ConceptScores& scores,
                                 const GateParams& gate, double tau, const TrainConfig& config);

// Loss graph of one batch, shared by training and gradient checking.
struct JointLoss {
  ad::Var total;
  ad::Var task;
  ad::Var penalty;
  double mean_activation = 0.0;
};

// `noise` holds one uniform matrix per Monte-Carlo sample (ignored for l1).
JointLoss build_joint_loss(const ad::Var& w_s, const ad::Var& w_c, const ad::Var& bias,
                           const Eigen::MatrixXd& embeddings, const Eigen::MatrixXd& scores,
                           std::span<const std::uint32_t> labels, GateKind kind, const GateHyperparams& hyper,
                           std::span<const Eigen::MatrixXd> noise);

enum class LossPart { kTotal, kTask, kPenalty };

// A fixed small instance of the joint objective.
struct GradientCheckProblem {
  Eigen::MatrixXd embeddings;  // N x K
  Eigen::MatrixXd scores;      // N x M
  std::vector<std::uint32_t> labels;
  std::vector<Eigen::MatrixXd> noise;
  Eigen::MatrixXd w_s;         // K x M
  Eigen::MatrixXd w_c;         // M x C
  Eigen::RowVectorXd bias;     // C
  GateKind kind = GateKind::kL1;
  GateHyperparams hyper;
};

struct JointGradients {
  double loss = 0.0;
  Eigen::MatrixXd w_s;
  Eigen::MatrixXd w_c;
  Eigen::RowVectorXd bias;
};

// Reverse-mode gradients through the tape.
JointGradients joint_gradients(const GradientCheckProblem& problem, LossPart part = LossPart::kTotal);

// Plain forward evaluation of the same objective, written directly against the
// gate functions without the tape.
double joint_loss_value(const GradientCheckProblem& problem, LossPart part = LossPart::kTotal);

// Random instance whose stochastic gates sit at least `margin` away from the
// clip boundaries, so finite differences never cross a kink.
GradientCheckProblem make_gradient_check_problem(GateKind kind, const GateHyperparams& hyper, Eigen::Index n,
                                                 Eigen::Index k, Eigen::Index m, Eigen::Index c,
                                                 std::uint64_t seed, double margin = 1e-2);

// Max over every entry of W_s, W_c and bias of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8),
// numeric by central differences with step h.
double gradient_check(const GradientCheckProblem& problem, double h = 1e-4);

void save_classifier(const ClassifierHead& head, const std::filesystem::path& dir);
ClassifierHead load_classifier(const std::filesystem::path& dir, Eigen::Index m, Eigen::Index c);

}  // namespace cbm

#endif  // CBM_TRAINING_HPP
