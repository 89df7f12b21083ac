#ifndef CBM_METRICS_HPP
#define CBM_METRICS_HPP

#include <cstdint>
#include <span>

#include "cbm/backends.hpp"
#include "cbm/data.hpp"
#include "cbm/gates.hpp"

namespace cbm {

double classification_accuracy(std::span<const std::uint32_t> predicted, std::span<const std::uint32_t> truth);

struct SparsityScore {
  double avg_active_fraction = 0.0;
  double sparsity = 1.0;  // 1 - avg_active_fraction
};

SparsityScore sparsity_score(const AttributeMatrix& mask);
inline SparsityScore sparsity_score(const BinaryMask& mask) { return sparsity_score(mask.z); }

struct PrecisionScore {
  double value = 0.0;
  // No active cell at all; value is reported as 0.
  bool degenerate = false;
};

// Micro-averaged: true positives over all active cells.
PrecisionScore concept_precision(const AttributeMatrix& mask, const AttributeMatrix& gt);
// Mean of per-example precision over examples with at least one active concept.
// Sensitivity-analysis variant only.
PrecisionScore concept_precision_macro(const AttributeMatrix& mask, const AttributeMatrix& gt);

double binary_accuracy(const AttributeMatrix& mask, const AttributeMatrix& gt);

// Harmonic mean of accuracy, sparsity and precision; 0 when any input is 0.
double clarity(double accuracy, double sparsity, double precision);

struct ClarityReport {
  GateKind gate = GateKind::kL1;
  BackendKind backend = BackendKind::kPredictor;
  double lr = 0.0;
  double lambda = 0.0;
  double tau = 0.0;
  std::uint64_t seed = 0;

  double accuracy = 0.0;
  double avg_active_fraction = 0.0;
  double sparsity = 0.0;
  double precision = 0.0;
  double binary_accuracy = 0.0;
  double clarity = 0.0;
  bool precision_degenerate = false;
};

// Fills every metric from test-split predictions and the thresholded mask.
ClarityReport make_clarity_report(const ClarityReport& tag, double accuracy, const AttributeMatrix& mask,
                                  const AttributeMatrix& gt);

// sparsity == 1 - avg_active_fraction and clarity recomputes from its components, within tol.
bool is_consistent(const ClarityReport& report, double tol = 1e-12);

}  // namespace cbm

#endif  // CBM_METRICS_HPP
