#ifndef CBM_EXPERIMENT_HPP
#define CBM_EXPERIMENT_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbm/backends.hpp"
#include "cbm/data.hpp"
#include "cbm/gates.hpp"
#include "cbm/metrics.hpp"
#include "cbm/optim.hpp"

namespace cbm {

// Hyperparameter grid over gate families. Each (gate, lr, lambda, seed) cell
// trains W_s once; every threshold then retrains only the classifier.
//
// For the Bernoulli gate the lambda grid scales the KL term (default {1}).
struct SweepConfig {
  BackendKind backend = BackendKind::kPredictor;
  std::vector<GateKind> gates{GateKind::kL1, GateKind::kL0, GateKind::kBernoulli};
  std::vector<double> lr_grid{1e-2, 5e-3, 1e-3, 5e-4, 1e-4};
  std::map<GateKind, std::vector<double>> lambda_grid{
      {GateKind::kL1, {1e-5, 5e-5, 1e-6, 5e-6, 1e-7}},
      {GateKind::kL0, {1e-2, 5e-2, 1e-1, 5e-1, 1.0}},
      {GateKind::kBernoulli, {1.0}},
  };
  std::vector<double> thresholds{1e-4, 1e-3, 5e-3, 1e-2, 2e-2, 3e-2, 4e-2, 5e-2, 7e-2,
                                 0.1,  0.2,  0.3,  0.5,  0.6,  0.7,  0.8,  0.9};
  std::vector<std::uint64_t> seeds{0};
  int epochs_joint = 1500;
  int epochs_retrain = 200;
  int batch_size = 512;
  // Classifier-retraining learning rate; the cell's lr when unset.
  std::optional<double> retrain_lr;
  GateHyperparams hyper;
  // Cosine similarity for the VLM backend.
  bool normalize = true;
  TrainConfig predictor{1e-3, 200, 512, 0};
  bool predictor_normalize = false;
  std::optional<std::filesystem::path> predictor_checkpoint;

  // Empty disables all file output (and resume).
  std::filesystem::path output_dir;
  int jobs = 1;
  bool resume = false;

  // Shrinks epochs and grids to a laptop-sized run.
  void apply_desk_scale();
  void validate() const;
  std::size_t expected_rows() const;
};

// Applies keys from sweep.json on top of `base`. Unknown keys are rejected.
SweepConfig sweep_config_from_json(const nlohmann::json& j, SweepConfig base = {});
// Everything that determines results (no output paths, job counts or resume flag).
nlohmann::json to_json(const SweepConfig& config);

struct CellFailure {
  std::string cell;
  std::string message;
};

struct SweepResult {
  std::vector<ClarityReport> rows;
  std::vector<CellFailure> failures;
  std::string config_hash;
  std::string started_at;
  std::string finished_at;
  // Trained gates of cells run in this process, by cell key.
  std::map<std::string, GateParams> gates;
};

std::string cell_key(GateKind gate, double lr, double lambda, std::uint64_t seed);
std::string cell_key(const ClarityReport& row);

SweepResult run_sweep(const SweepConfig& config, const ConceptDataset& dataset);
SweepResult run_sweep(const SweepConfig& config, const std::filesystem::path& dataset_dir);

// Per group, the row with maximal clarity; ties go to higher accuracy, then
// lower active fraction, then the lexicographically smallest configuration.
// Keys: any of gate, backend, lr, lambda, tau, seed. Output is ordered by group.
std::vector<ClarityReport> select_best_clarity(const std::vector<ClarityReport>& rows,
                                               const std::vector<std::string>& group_keys);

inline constexpr const char* kCurvesHeader =
    "gate,backend,lr,lambda,tau,seed,accuracy,avg_active_fraction,sparsity,precision,binary_accuracy,clarity";

// Rows ordered by (gate, backend, sparsity) with the remaining configuration as tie-break.
std::vector<ClarityReport> sorted_for_curves(std::vector<ClarityReport> rows);

// Writes curves.csv (9 significant digits) and best.json grouped by gate and backend.
void emit_curves(const SweepResult& result, const std::filesystem::path& dir);
std::vector<ClarityReport> read_curves(const std::filesystem::path& csv_path);

nlohmann::json to_json(const ClarityReport& row);

// Human-readable list of the concepts selected for one example, each tagged
// against the ground truth.
std::string concept_report(const ConceptDataset& dataset, const GateParams& gate, double tau,
                           Eigen::Index example_index);
// Same report from an explicit mask row.
std::string format_concept_report(const ConceptDataset& dataset, Eigen::Index example_index,
                                  std::span<const std::uint8_t> mask_row, double tau);

}  // namespace cbm

#endif  // CBM_EXPERIMENT_HPP
