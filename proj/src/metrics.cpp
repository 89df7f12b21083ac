#include "cbm/metrics.hpp"

#include <cmath>

namespace cbm {
namespace {

void require_same_shape(const AttributeMatrix& a, const AttributeMatrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError(std::string(what) + ": shape mismatch");
}

}  // namespace

double classification_accuracy(std::span<const std::uint32_t> predicted, std::span<const std::uint32_t> truth) {
  if (predicted.size() != truth.size()) throw DimensionError("classification_accuracy: length mismatch");
  if (predicted.empty()) throw DataError("classification_accuracy: no examples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

SparsityScore sparsity_score(const AttributeMatrix& mask) {
  if (mask.size() == 0) throw DataError("sparsity_score: empty mask");
  SparsityScore s;
  s.avg_active_fraction = mask.cast<double>().sum() / static_cast<double>(mask.size());
  s.sparsity = 1.0 - s.avg_active_fraction;
  return s;
}

PrecisionScore concept_precision(const AttributeMatrix& mask, const AttributeMatrix& gt) {
  require_same_shape(mask, gt, "concept_precision");
  const double active = mask.cast<double>().sum();
  if (active == 0.0) return {0.0, true};
  const double hits = (mask.array() * gt.array()).cast<double>().sum();
  return {hits / active, false};
}

PrecisionScore concept_precision_macro(const AttributeMatrix& mask, const AttributeMatrix& gt) {
  require_same_shape(mask, gt, "concept_precision_macro");
  double total = 0.0;
  int counted = 0;
  for (Eigen::Index i = 0; i < mask.rows(); ++i) {
    const double active = mask.row(i).cast<double>().sum();
    if (active == 0.0) continue;
    total += (mask.row(i).array() * gt.row(i).array()).cast<double>().sum() / active;
    ++counted;
  }
  if (counted == 0) return {0.0, true};
  return {total / counted, false};
}

double binary_accuracy(const AttributeMatrix& mask, const AttributeMatrix& gt) {
  require_same_shape(mask, gt, "binary_accuracy");
  if (mask.size() == 0) throw DataError("binary_accuracy: empty mask");
  return (mask.array() == gt.array()).cast<double>().sum() / static_cast<double>(mask.size());
}

double clarity(double accuracy, double sparsity, double precision) {
  for (double v : {accuracy, sparsity, precision}) {
    if (!(v >= 0.0 && v <= 1.0)) throw DataError("clarity inputs must lie in [0,1]");
  }
  const double numerator = 3.0 * accuracy * sparsity * precision;
  if (numerator == 0.0) return 0.0;
  return numerator / (accuracy * sparsity + accuracy * precision + sparsity * precision);
}

ClarityReport make_clarity_report(const ClarityReport& tag, double accuracy, const AttributeMatrix& mask,
                                  const AttributeMatrix& gt) {
  ClarityReport r = tag;
  const auto sp = sparsity_score(mask);
  const auto pr = concept_precision(mask, gt);
  r.accuracy = accuracy;
  r.avg_active_fraction = sp.avg_active_fraction;
  r.sparsity = sp.sparsity;
  r.precision = pr.value;
  r.precision_degenerate = pr.degenerate;
  r.binary_accuracy = binary_accuracy(mask, gt);
  r.clarity = clarity(r.accuracy, r.sparsity, r.precision);
  return r;
}

bool is_consistent(const ClarityReport& r, double tol) {
  if (std::abs(r.sparsity - (1.0 - r.avg_active_fraction)) > tol) return false;
  for (double v : {r.accuracy, r.sparsity, r.precision, r.binary_accuracy, r.avg_active_fraction}) {
    if (!(v >= 0.0 && v <= 1.0)) return false;
  }
  return std::abs(r.clarity - clarity(r.accuracy, r.sparsity, r.precision)) <= tol;
}

}  // namespace cbm
