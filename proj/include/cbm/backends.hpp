#ifndef CBM_BACKENDS_HPP
#define CBM_BACKENDS_HPP

#include <filesystem>
#include <span>
#include <string_view>

#include <Eigen/Dense>

#include "cbm/data.hpp"
#include "cbm/error.hpp"
#include "cbm/gates.hpp"
#include "cbm/optim.hpp"

namespace cbm {

enum class BackendKind { kPredictor, kVlm };

std::string_view to_string(BackendKind kind);
BackendKind parse_backend_kind(std::string_view name);

// Single linear layer plus sigmoid, mapping embeddings to concept probabilities.
struct AttributePredictor {
  Eigen::MatrixXd w_pred;     // K x M
  Eigen::RowVectorXd bias;    // M
  bool normalize_inputs = false;
};

struct ConceptScores {
  Eigen::MatrixXd scores;  // N x M
  BackendKind kind = BackendKind::kPredictor;
};

template <typename Derived>
Eigen::MatrixXd l2_normalize_rows(const Eigen::MatrixBase<Derived>& m) {
  Eigen::MatrixXd out = m.template cast<double>();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double norm = out.row(i).norm();
    if (norm == 0.0) throw DataError("cannot normalize a zero-norm row");
    out.row(i) /= norm;
  }
  return out;
}

// Mean BCE against the dataset's attributes over its train split (all rows
// when no split is present), optimized with Adam.
AttributePredictor train_attribute_predictor(const ConceptDataset& dataset, const TrainConfig& config,
                                             bool normalize_inputs = false);

template <typename Derived>
ConceptScores predict_scores(const AttributePredictor& predictor, const Eigen::MatrixBase<Derived>& embeddings) {
  if (embeddings.cols() != predictor.w_pred.rows()) {
    throw DimensionError("predict_scores: embedding width != predictor input dimension");
  }
  Eigen::MatrixXd x = predictor.normalize_inputs ? l2_normalize_rows(embeddings)
                                                 : Eigen::MatrixXd(embeddings.template cast<double>());
  Eigen::MatrixXd logits = x * predictor.w_pred;
  logits.rowwise() += predictor.bias;
  return {logits.unaryExpr([](double v) { return gate_math::sigmoid(v); }), BackendKind::kPredictor};
}

// Image-text inner products, optionally after per-row L2 normalization (cosine).
template <typename A, typename B>
ConceptScores vlm_scores(const Eigen::MatrixBase<A>& image_embeddings, const Eigen::MatrixBase<B>& text_embeddings,
                         bool normalize = true) {
  if (image_embeddings.cols() != text_embeddings.cols()) {
    throw DimensionError("vlm_scores: image and text embedding widths differ");
  }
  if (normalize) {
    return {l2_normalize_rows(image_embeddings) * l2_normalize_rows(text_embeddings).transpose(),
            BackendKind::kVlm};
  }
  return {image_embeddings.template cast<double>() * text_embeddings.template cast<double>().transpose(),
          BackendKind::kVlm};
}

// Non-interpolated average precision; tied scores share one threshold.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);
// Mann-Whitney ROC area, ties counted as one half.
double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct AttributeEvaluation {
  double map = 0.0;
  double auc = 0.0;
  int evaluated = 0;
  // Attributes whose ground truth is single-class.
  int skipped = 0;
};

AttributeEvaluation evaluate_attribute_prediction(const Eigen::MatrixXd& scores, const AttributeMatrix& gt);

void save_predictor(const AttributePredictor& predictor, const std::filesystem::path& dir);
AttributePredictor load_predictor(const std::filesystem::path& dir);

}  // namespace cbm

#endif  // CBM_BACKENDS_HPP
