#include <doctest.h>

#include <algorithm>
#include <sstream>

#include "cbm/config.hpp"
#include "cbm/error.hpp"
#include "cbm/experiment.hpp"
#include "support.hpp"

using namespace cbm;
using testing::TempDir;

namespace {

SweepConfig tiny_sweep() {
  SweepConfig c;
  c.backend = BackendKind::kVlm;
  c.gates = {GateKind::kL1};
  c.lr_grid = {1e-2};
  c.lambda_grid = {{GateKind::kL1, {1e-3}}};
  c.thresholds = {0.1, 0.5, 0.9};
  c.epochs_joint = 5;
  c.epochs_retrain = 5;
  c.batch_size = 64;
  return c;
}

ClarityReport row(double clarity, double accuracy, double active, double lr = 1e-3) {
  ClarityReport r;
  r.clarity = clarity;
  r.accuracy = accuracy;
  r.avg_active_fraction = active;
  r.sparsity = 1 - active;
  r.lr = lr;
  return r;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string l;
  while (std::getline(ss, l)) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("one cell with three thresholds gives three rows sharing one gate") {
  const ConceptDataset d = testing::small_synthetic(200);
  const SweepConfig c = tiny_sweep();
  CHECK(c.expected_rows() == 3);
  const SweepResult r = run_sweep(c, d);
  CHECK(r.rows.size() == 3);
  CHECK(r.failures.empty());
  CHECK(r.gates.size() == 1);
  for (const auto& row : r.rows) {
    CHECK(cell_key(row) == r.gates.begin()->first);
    CHECK(is_consistent(row));
  }
  CHECK_FALSE(r.config_hash.empty());
}

TEST_CASE("row count follows the grid") {
  const ConceptDataset d = testing::small_synthetic(200);
  SweepConfig c = tiny_sweep();
  c.gates = {GateKind::kL1, GateKind::kL0};
  c.lambda_grid[GateKind::kL0] = {0.01, 0.1};
  c.seeds = {0, 1};
  c.thresholds = {0.5};
  c.epochs_joint = 2;
  c.epochs_retrain = 2;
  CHECK(c.expected_rows() == 2 + 4);
  CHECK(run_sweep(c, d).rows.size() == 6);
}

TEST_CASE("identical sweeps write identical curves") {
  TempDir dir("det");
  const ConceptDataset d = testing::small_synthetic(200);
  SweepConfig c = tiny_sweep();
  c.gates = {GateKind::kL1, GateKind::kBernoulli};
  c.lambda_grid[GateKind::kBernoulli] = {0.05};
  c.output_dir = dir / "a";
  run_sweep(c, d);
  c.output_dir = dir / "b";
  c.jobs = 2;
  run_sweep(c, d);
  const std::string a = testing::slurp(dir / "a" / "curves.csv");
  CHECK_FALSE(a.empty());
  CHECK(a == testing::slurp(dir / "b" / "curves.csv"));
  CHECK(std::filesystem::exists(dir / "a" / "best.json"));
  CHECK(std::filesystem::exists(dir / "a" / "provenance.json"));
}

TEST_CASE("resume after an interrupted run reproduces the uninterrupted result") {
  TempDir dir("resume");
  const ConceptDataset d = testing::small_synthetic(200);
  SweepConfig c = tiny_sweep();
  c.gates = {GateKind::kL1, GateKind::kL0};
  c.lambda_grid[GateKind::kL0] = {0.05};
  c.output_dir = dir / "full";
  run_sweep(c, d);
  const std::string reference = testing::slurp(dir / "full" / "curves.csv");

  // Simulate a kill: the journal keeps the header, the first cell and part of the second.
  c.output_dir = dir / "partial";
  run_sweep(c, d);
  const auto journal = lines(testing::slurp(dir / "partial" / "journal.csv"));
  REQUIRE(journal.size() == 7);
  {
    std::ofstream out(dir / "partial" / "journal.csv", std::ios::trunc);
    for (std::size_t i = 0; i < 5; ++i) out << journal[i] << '\n';
  }
  std::filesystem::remove(dir / "partial" / "curves.csv");
  c.resume = true;
  const SweepResult resumed = run_sweep(c, d);
  CHECK(resumed.rows.size() == 6);
  CHECK(resumed.gates.size() == 1);  // only the incomplete cell was retrained
  CHECK(testing::slurp(dir / "partial" / "curves.csv") == reference);
}

TEST_CASE("per-cell failures are recorded and the sweep continues") {
  TempDir dir("fail");
  const ConceptDataset d = testing::small_synthetic(200);
  SweepConfig c = tiny_sweep();
  c.lr_grid = {1e-2, 1e308};
  c.output_dir = dir.path();
  const SweepResult r = run_sweep(c, d);
  CHECK(r.rows.size() == 3);
  REQUIRE(r.failures.size() == 1);
  CHECK(r.failures[0].cell.find("1e+308") != std::string::npos);
  CHECK(testing::slurp(dir / "failures.csv").find("1e+308") != std::string::npos);
}

TEST_CASE("configuration errors abort the sweep") {
  const ConceptDataset d = testing::small_synthetic(200);
  SweepConfig c = tiny_sweep();
  c.thresholds = {0.5, 1.0};
  CHECK_THROWS_AS(run_sweep(c, d), ConfigError);
  c = tiny_sweep();
  c.lr_grid.clear();
  CHECK_THROWS_AS(run_sweep(c, d), ConfigError);
  c = tiny_sweep();
  ConceptDataset no_text = d;
  no_text.text_embeddings.reset();
  CHECK_THROWS_AS(run_sweep(c, no_text), ConfigError);
  ConceptDataset no_split = d;
  no_split.split = {};
  CHECK_THROWS_AS(run_sweep(tiny_sweep(), no_split), ConfigError);
}

TEST_CASE("the predictor backend trains, checkpoints and reuses its predictor") {
  TempDir dir("pred");
  const ConceptDataset d = testing::small_synthetic(200);
  SweepConfig c = tiny_sweep();
  c.backend = BackendKind::kPredictor;
  c.predictor.epochs = 5;
  c.output_dir = dir / "a";
  const SweepResult first = run_sweep(c, d);
  CHECK(std::filesystem::exists(dir / "a" / "predictor" / "w_pred.f32"));
  c.output_dir = dir / "b";
  c.predictor_checkpoint = dir / "a" / "predictor";
  run_sweep(c, d);
  CHECK(testing::slurp(dir / "a" / "curves.csv") == testing::slurp(dir / "b" / "curves.csv"));
  CHECK(first.rows.front().backend == BackendKind::kPredictor);
}

TEST_CASE("select_best_clarity examples") {
  const ClarityReport a = row(0.4, 0.9, 0.1);
  CHECK(select_best_clarity({a}, {"gate"}).front().clarity == 0.4);
  const ClarityReport b = row(0.5, 0.6, 0.2);
  CHECK(select_best_clarity({a, b}, {"gate"}).front().clarity == 0.5);
  const ClarityReport c = row(0.5, 0.70, 0.1);
  const ClarityReport e = row(0.5, 0.75, 0.3);
  CHECK(select_best_clarity({c, e}, {"gate"}).front().accuracy == 0.75);
  const ClarityReport f = row(0.5, 0.75, 0.2);
  CHECK(select_best_clarity({e, f}, {"gate"}).front().avg_active_fraction == 0.2);
  const ClarityReport g = row(0.5, 0.75, 0.2, 1e-4);
  CHECK(select_best_clarity({f, g}, {"gate"}).front().lr == 1e-4);

  CHECK_THROWS_AS(select_best_clarity({}, {"gate"}), DataError);
  CHECK_THROWS_AS(select_best_clarity({a}, {"colour"}), ConfigError);
}

TEST_CASE("select_best_clarity groups and ignores input order") {
  std::vector<ClarityReport> rows;
  CounterRng rng(1, Stream::kSynthetic);
  for (int i = 0; i < 60; ++i) {
    ClarityReport r = row(std::round(rng.uniform() * 5) / 5, std::round(rng.uniform() * 4) / 4, rng.uniform(),
                          static_cast<double>(i));
    r.gate = static_cast<GateKind>(i % 3);
    r.backend = static_cast<BackendKind>(i % 2);
    rows.push_back(r);
  }
  const auto best = select_best_clarity(rows, {"gate", "backend"});
  CHECK(best.size() == 6);
  for (int trial = 0; trial < 10; ++trial) {
    CounterRng shuffler(trial, Stream::kShuffle);
    deterministic_shuffle(rows, shuffler);
    const auto again = select_best_clarity(rows, {"gate", "backend"});
    REQUIRE(again.size() == best.size());
    for (std::size_t i = 0; i < best.size(); ++i) CHECK(again[i].lr == best[i].lr);
  }
}

TEST_CASE("curves round-trip and are sorted by sparsity within each group") {
  TempDir dir("curves");
  SweepResult r;
  CounterRng rng(3, Stream::kSynthetic);
  for (int i = 0; i < 3; ++i) {
    ClarityReport x;
    x.gate = GateKind::kL0;
    x.tau = 0.1 * (i + 1);
    x.lr = 1e-3;
    x.lambda = 0.05;
    x.accuracy = rng.uniform();
    x.avg_active_fraction = rng.uniform();
    x.sparsity = 1 - x.avg_active_fraction;
    x.precision = rng.uniform();
    x.binary_accuracy = rng.uniform();
    x.clarity = clarity(x.accuracy, x.sparsity, x.precision);
    r.rows.push_back(x);
  }
  emit_curves(r, dir.path());
  const auto text = lines(testing::slurp(dir / "curves.csv"));
  REQUIRE(text.size() == 4);
  CHECK(text[0] == kCurvesHeader);
  const auto back = read_curves(dir / "curves.csv");
  REQUIRE(back.size() == 3);
  for (std::size_t i = 1; i < back.size(); ++i) CHECK(back[i - 1].sparsity <= back[i].sparsity);
  for (const auto& b : back) {
    const auto it = std::find_if(r.rows.begin(), r.rows.end(), [&](const auto& x) { return std::abs(x.tau - b.tau) < 1e-12; });
    REQUIRE(it != r.rows.end());
    CHECK(testing::rel_err(b.accuracy, it->accuracy) < 1e-8);
    CHECK(testing::rel_err(b.precision, it->precision) < 1e-8);
    CHECK(testing::rel_err(b.clarity, it->clarity) < 1e-8);
    CHECK(b.gate == GateKind::kL0);
  }
  CHECK_THROWS_AS(emit_curves(SweepResult{}, dir.path()), DataError);
}

TEST_CASE("concept reports") {
  ConceptDataset d;
  d.image_embeddings = EmbeddingMatrix::Ones(2, 3);
  d.attributes = AttributeMatrix::Zero(2, 50);
  d.attributes.block(0, 0, 1, 34).setOnes();
  d.labels = {0, 0};
  for (int m = 0; m < 50; ++m) d.concept_names.push_back("concept_" + std::to_string(m));
  d.class_names = {"bird"};

  std::vector<std::uint8_t> mask(50, 0);
  const std::string none = format_concept_report(d, 0, mask, 0.5);
  CHECK(none.find("0 selected") != std::string::npos);
  CHECK(none.find("[correct]") == std::string::npos);
  CHECK(none.find("[incorrect]") == std::string::npos);

  for (int m = 0; m < 6; ++m) mask[m] = 1;
  for (int m = 40; m < 46; ++m) mask[m] = 1;
  const std::string fig = format_concept_report(d, 0, mask, 0.5);
  CHECK(fig.find("12 selected, 6 correct, 34 ground-truth active") != std::string::npos);
  CHECK(fig.find("precision: 0.500") != std::string::npos);

  std::vector<std::uint8_t> exact(d.attributes.data(), d.attributes.data() + 50);
  const std::string all = format_concept_report(d, 0, exact, 0.5);
  CHECK(all.find("[incorrect]") == std::string::npos);
  CHECK(all.find("precision: 1.000") != std::string::npos);

  GateParams g;
  g.w_s = Eigen::MatrixXd::Zero(3, 50);
  CHECK(concept_report(d, g, 0.4, 1).find("50 selected") != std::string::npos);
  CHECK_THROWS_AS(concept_report(d, g, 0.4, 2), DataError);
  CHECK_THROWS_AS(concept_report(d, g, 0.4, -1), DataError);
}

TEST_CASE("sweep configuration parsing") {
  const auto j = nlohmann::json::parse(R"({"gates":["l0"],"lr":[0.01],"lambda":{"l0":[0.1,0.5]},
    "thresholds":[0.2],"seeds":[0,1,2],"epochs_joint":3,"predictor":{"epochs":7,"normalize":true}})");
  const SweepConfig c = sweep_config_from_json(j);
  CHECK(c.gates == std::vector<GateKind>{GateKind::kL0});
  CHECK(c.lambda_grid.at(GateKind::kL0).size() == 2);
  CHECK(c.expected_rows() == 6);
  CHECK(c.epochs_joint == 3);
  CHECK(c.predictor.epochs == 7);
  CHECK(c.predictor_normalize);
  CHECK(sweep_config_from_json(to_json(c)).expected_rows() == 6);
  CHECK_THROWS_AS(sweep_config_from_json(nlohmann::json::parse(R"({"learning_rate":[1]})")), ConfigError);
  CHECK_THROWS_AS(sweep_config_from_json(nlohmann::json::parse(R"({"gates":["l3"]})")), ConfigError);

  SweepConfig defaults;
  CHECK(defaults.lr_grid.size() == 5);
  CHECK(defaults.thresholds.size() == 17);
  CHECK(defaults.epochs_joint == 1500);
  CHECK(defaults.epochs_retrain == 200);
  CHECK(defaults.seeds.size() == 1);
  defaults.apply_desk_scale();
  CHECK(defaults.epochs_joint == 150);
  CHECK(defaults.epochs_retrain == 20);
  CHECK(defaults.thresholds.size() == 17);
}

TEST_CASE("training and synthetic configuration parsing") {
  const RunConfig r = run_config_from_json(nlohmann::json::parse(
      R"({"gate":"bernoulli","backend":"vlm","lr":0.005,"epochs":10,"lambda":0.1,"batch_size":32,"seed":4,
          "beta":0.2,"gamma":-0.2,"zeta":1.2,"prior_pi":0.001,"mc_samples":2})"));
  CHECK(r.gate == GateKind::kBernoulli);
  CHECK(r.backend == BackendKind::kVlm);
  CHECK(r.train.learning_rate == 0.005);
  CHECK(r.train.batch_size == 32);
  CHECK(r.hyper.mc_samples == 2);
  CHECK(r.hyper.prior_pi == 0.001);
  CHECK(run_config_from_json(to_json(r)).hyper.zeta == 1.2);
  CHECK_THROWS_AS(run_config_from_json(nlohmann::json::parse(R"({"epochs":0})")), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(nlohmann::json::parse(R"({"optimizer":"sgd"})")), ConfigError);
  CHECK_THROWS_AS(run_config_from_json(nlohmann::json::parse(R"({"gamma":0.5})")), ConfigError);

  const SyntheticSpec s = synthetic_spec_from_json(nlohmann::json::parse(R"({"n_examples":100,"seed":9})"));
  CHECK(s.n_examples == 100);
  CHECK(s.seed == 9);
  CHECK_THROWS_AS(synthetic_spec_from_json(nlohmann::json::parse(R"({"concepts_per_class":99})")), ConfigError);
}
