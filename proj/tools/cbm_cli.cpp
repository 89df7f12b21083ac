// Command-line front end: synthetic data, predictor and gate training, sweeps and reports.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "cbm/config.hpp"
#include "cbm/experiment.hpp"
#include "cbm/training.hpp"

namespace fs = std::filesystem;
using namespace cbm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitPartial = 2;

std::vector<std::string> split_keys(const std::string& text) {
  std::vector<std::string> keys;
  std::stringstream ss(text);
  std::string key;
  while (std::getline(ss, key, ',')) {
    if (!key.empty()) keys.push_back(key);
  }
  return keys;
}

void print_report_table(const std::vector<ClarityReport>& rows) {
  std::printf("%-10s %-10s %9s %9s %7s %5s %8s %8s %8s %8s %8s\n", "gate", "backend", "lr", "lambda", "tau", "seed",
              "acc", "avg_act", "prec", "bin_acc", "clarity");
  for (const auto& r : rows) {
    std::printf("%-10s %-10s %9.3g %9.3g %7.3g %5llu %8.2f %8.3f %8.4f %8.4f %8.3f\n",
                std::string(to_string(r.gate)).c_str(), std::string(to_string(r.backend)).c_str(), r.lr, r.lambda,
                r.tau, static_cast<unsigned long long>(r.seed), 100.0 * r.accuracy, r.avg_active_fraction,
                r.precision, r.binary_accuracy, r.clarity);
  }
}

ConceptScores backend_scores(const ConceptDataset& data, const RunConfig& cfg, const std::string& predictor_dir) {
  if (cfg.backend == BackendKind::kVlm) {
    if (!data.text_embeddings) throw ConfigError("vlm backend needs text embeddings in the dataset");
    return vlm_scores(data.image_embeddings, *data.text_embeddings, cfg.normalize);
  }
  if (predictor_dir.empty()) {
    throw ConfigError("predictor backend needs --predictor (a checkpoint from train-predictor)");
  }
  return predict_scores(load_predictor(predictor_dir), data.image_embeddings);
}

int cmd_gen_synth(const std::string& spec_path, const std::string& out) {
  const auto j = read_json_file(spec_path);
  const SyntheticSpec spec = synthetic_spec_from_json(j);
  const double test_fraction = j.value("test_fraction", 0.2);
  const ConceptDataset data = split_dataset(generate_synthetic(spec), test_fraction, spec.seed);
  save_dataset(data, out);
  std::printf("wrote %ld examples (%zu train / %zu test), %ld concepts, %ld classes to %s\n",
              static_cast<long>(data.num_examples()), data.split.train.size(), data.split.test.size(),
              static_cast<long>(data.num_concepts()), static_cast<long>(data.num_classes()), out.c_str());
  return kExitOk;
}

int cmd_train_predictor(const std::string& data_dir, const std::string& config_path, const std::string& out) {
  const ConceptDataset data = load_dataset(data_dir);
  const RunConfig cfg = run_config_from_json(read_json_file(config_path));
  const AttributePredictor predictor = train_attribute_predictor(data, cfg.train, cfg.predictor_normalize);
  save_predictor(predictor, out);
  const auto& eval_rows = data.split.test.empty() ? IndexList{} : data.split.test;
  const Eigen::MatrixXd scores = predict_scores(predictor, data.image_embeddings).scores;
  const AttributeEvaluation ev =
      eval_rows.empty() ? evaluate_attribute_prediction(scores, data.attributes)
                        : evaluate_attribute_prediction(select_rows(scores, eval_rows),
                                                        select_rows(data.attributes, eval_rows));
  std::printf("%s split: mAP %.2f  AUC %.4f  (%ld attributes, %ld skipped)\n", eval_rows.empty() ? "full" : "test",
              100.0 * ev.map, ev.auc, static_cast<long>(ev.evaluated), static_cast<long>(ev.skipped));
  return kExitOk;
}

int cmd_train_gates(const std::string& data_dir, const std::string& config_path, const std::string& backend,
                    const std::string& gate, const std::string& predictor_dir, const std::string& out) {
  const ConceptDataset data = load_dataset(data_dir);
  RunConfig cfg = run_config_from_json(read_json_file(config_path));
  if (!backend.empty()) cfg.backend = parse_backend_kind(backend);
  if (!gate.empty()) cfg.gate = parse_gate_kind(gate);
  const ConceptScores scores = backend_scores(data, cfg, predictor_dir);
  const JointModel model = train_joint(data, scores, cfg.gate, cfg.train, cfg.hyper);
  save_gate(model.gate, out);
  save_classifier(model.head, out);
  std::ofstream hist(fs::path(out) / "history.csv");
  hist << "epoch,task_loss,penalty,total_loss,mean_activation\n";
  for (std::size_t e = 0; e < model.history.epochs.size(); ++e) {
    const auto& r = model.history.epochs[e];
    char line[160];
    std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g,%.9g\n", e + 1, r.task_loss, r.penalty, r.total_loss,
                  r.mean_activation);
    hist << line;
  }
  for (const auto& w : model.history.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  const auto& last = model.history.epochs.back();
  std::printf("%s gate: final task loss %.4f, penalty %.4g, mean activation %.4f\n",
              std::string(to_string(cfg.gate)).c_str(), last.task_loss, last.penalty, last.mean_activation);
  return kExitOk;
}

int cmd_sweep(const std::string& data_dir, const std::string& sweep_path, const std::string& out, bool resume,
              int jobs, bool desk_scale, int num_seeds) {
  SweepConfig base;
  if (desk_scale) base.apply_desk_scale();
  SweepConfig cfg = sweep_path.empty() ? base : sweep_config_from_json(read_json_file(sweep_path), base);
  if (num_seeds > 0) {
    cfg.seeds.clear();
    for (int s = 0; s < num_seeds; ++s) cfg.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  cfg.output_dir = out;
  cfg.resume = resume;
  cfg.jobs = jobs;
  const SweepResult result = run_sweep(cfg, fs::path(data_dir));
  std::printf("%zu rows (%zu expected), %zu failed cells; results in %s\n", result.rows.size(), cfg.expected_rows(),
              result.failures.size(), out.c_str());
  for (const auto& f : result.failures) std::fprintf(stderr, "cell %s failed: %s\n", f.cell.c_str(), f.message.c_str());
  if (!result.rows.empty()) print_report_table(select_best_clarity(result.rows, {"gate", "backend"}));
  return result.failures.empty() ? kExitOk : kExitPartial;
}

int cmd_report(const std::string& results, const std::string& best_by) {
  const auto rows = read_curves(fs::path(results) / "curves.csv");
  print_report_table(select_best_clarity(rows, split_keys(best_by)));
  return kExitOk;
}

int cmd_explain(const std::string& data_dir, const std::string& gate_dir, double tau, long index) {
  const ConceptDataset data = load_dataset(data_dir);
  std::fputs(concept_report(data, load_gate(gate_dir), tau, index).c_str(), stdout);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse concept bottleneck models over precomputed embeddings"};
  app.require_subcommand(1);

  std::string spec, out, data, config, backend, gate, predictor, sweep_path, results, best_by = "gate,backend",
                                                                                   gate_dir;
  bool resume = false, desk_scale = false;
  int jobs = 1, seeds = 0;
  double tau = 0.5;
  long index = 0;

  auto* gen = app.add_subcommand("gen-synth", "generate a synthetic dataset with known concepts");
  gen->add_option("--spec", spec, "synthetic spec JSON")->required();
  gen->add_option("--out", out, "output dataset directory")->required();

  auto* tp = app.add_subcommand("train-predictor", "train the linear attribute predictor");
  tp->add_option("--data", data)->required();
  tp->add_option("--config", config)->required();
  tp->add_option("--out", out)->required();

  auto* tg = app.add_subcommand("train-gates", "jointly train the gate and classifier");
  tg->add_option("--data", data)->required();
  tg->add_option("--backend", backend)->check(CLI::IsMember({"predictor", "vlm"}));
  tg->add_option("--gate", gate)->check(CLI::IsMember({"l1", "l0", "bernoulli"}));
  tg->add_option("--config", config)->required();
  tg->add_option("--predictor", predictor, "predictor checkpoint directory");
  tg->add_option("--out", out)->required();

  auto* sw = app.add_subcommand("sweep", "grid sweep with threshold retraining");
  sw->add_option("--data", data)->required();
  sw->add_option("--sweep", sweep_path, "sweep JSON (defaults when omitted)");
  sw->add_option("--out", out)->required();
  sw->add_flag("--resume", resume, "skip cells already in the journal");
  sw->add_option("--jobs", jobs)->check(CLI::PositiveNumber);
  sw->add_flag("--desk-scale", desk_scale, "short epochs and reduced grids");
  sw->add_option("--seeds", seeds, "use seeds 0..N-1")->check(CLI::PositiveNumber);

  auto* rp = app.add_subcommand("report", "best-clarity rows from a results directory");
  rp->add_option("--results", results)->required();
  rp->add_option("--best-by", best_by);

  auto* ex = app.add_subcommand("explain", "concepts selected for one example");
  ex->add_option("--data", data)->required();
  ex->add_option("--gate", gate_dir, "gate checkpoint directory")->required();
  ex->add_option("--tau", tau)->required();
  ex->add_option("--index", index)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_synth(spec, out);
    if (tp->parsed()) return cmd_train_predictor(data, config, out);
    if (tg->parsed()) return cmd_train_gates(data, config, backend, gate, predictor, out);
    if (sw->parsed()) return cmd_sweep(data, sweep_path, out, resume, jobs, desk_scale, seeds);
    if (rp->parsed()) return cmd_report(results, best_by);
    if (ex->parsed()) return cmd_explain(data, gate_dir, tau, index);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  }
  return kExitOk;
}
