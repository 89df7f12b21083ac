#include "cbm/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "cbm/config.hpp"
#include "cbm/training.hpp"

namespace cbm {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt_g(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("sweep key '") + key + "': " + e.what());
  }
}

std::string csv_row(const ClarityReport& r, int digits) {
  std::string line;
  line += std::string(to_string(r.gate)) + ',' + std::string(to_string(r.backend)) + ',';
  line += fmt_g(r.lr, digits) + ',' + fmt_g(r.lambda, digits) + ',' + fmt_g(r.tau, digits) + ',';
  line += std::to_string(r.seed) + ',';
  for (double v : {r.accuracy, r.avg_active_fraction, r.sparsity, r.precision, r.binary_accuracy}) {
    line += fmt_g(v, digits) + ',';
  }
  line += fmt_g(r.clarity, digits);
  return line;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

ClarityReport parse_row(const std::vector<std::string>& f) {
  if (f.size() < 12) throw DataError("curves row has " + std::to_string(f.size()) + " fields, expected 12");
  ClarityReport r;
  try {
    r.gate = parse_gate_kind(f[0]);
    r.backend = parse_backend_kind(f[1]);
    r.lr = std::stod(f[2]);
    r.lambda = std::stod(f[3]);
    r.tau = std::stod(f[4]);
    r.seed = std::stoull(f[5]);
    r.accuracy = std::stod(f[6]);
    r.avg_active_fraction = std::stod(f[7]);
    r.sparsity = std::stod(f[8]);
    r.precision = std::stod(f[9]);
    r.binary_accuracy = std::stod(f[10]);
    r.clarity = std::stod(f[11]);
    if (f.size() > 12) r.precision_degenerate = f[12] == "1";
  } catch (const std::logic_error& e) {
    throw DataError(std::string("malformed curves row: ") + e.what());
  }
  return r;
}

auto config_tuple(const ClarityReport& r) {
  return std::make_tuple(std::string(to_string(r.gate)), std::string(to_string(r.backend)), r.lr, r.lambda, r.tau,
                         r.seed);
}

std::string group_field(const ClarityReport& r, const std::string& key) {
  if (key == "gate") return std::string(to_string(r.gate));
  if (key == "backend") return std::string(to_string(r.backend));
  if (key == "lr") return fmt_g(r.lr, 17);
  if (key == "lambda") return fmt_g(r.lambda, 17);
  if (key == "tau") return fmt_g(r.tau, 17);
  if (key == "seed") return std::to_string(r.seed);
  throw ConfigError("unknown grouping key '" + key + "' (expected gate, backend, lr, lambda, tau or seed)");
}

bool better_clarity(const ClarityReport& a, const ClarityReport& b) {
  if (a.clarity != b.clarity) return a.clarity > b.clarity;
  if (a.accuracy != b.accuracy) return a.accuracy > b.accuracy;
  if (a.avg_active_fraction != b.avg_active_fraction) return a.avg_active_fraction < b.avg_active_fraction;
  return config_tuple(a) < config_tuple(b);
}

struct Cell {
  GateKind gate;
  double lr;
  double lambda;
  std::uint64_t seed;
  std::string key;
};

ConceptScores compute_scores(const SweepConfig& config, const ConceptDataset& dataset) {
  if (config.backend == BackendKind::kVlm) {
    if (!dataset.text_embeddings) throw ConfigError("vlm backend needs text embeddings in the dataset");
    return vlm_scores(dataset.image_embeddings, *dataset.text_embeddings, config.normalize);
  }
  AttributePredictor predictor;
  const fs::path saved = config.output_dir.empty() ? fs::path() : config.output_dir / "predictor";
  if (config.predictor_checkpoint) {
    predictor = load_predictor(*config.predictor_checkpoint);
  } else if (config.resume && !saved.empty() && fs::exists(saved / "meta.json")) {
    predictor = load_predictor(saved);
  } else {
    predictor = train_attribute_predictor(dataset, config.predictor, config.predictor_normalize);
    // Round through float32 so a resumed run sees exactly the checkpointed weights.
    predictor.w_pred = predictor.w_pred.cast<float>().cast<double>();
    predictor.bias = predictor.bias.cast<float>().cast<double>();
    if (!saved.empty()) save_predictor(predictor, saved);
  }
  return predict_scores(predictor, dataset.image_embeddings);
}

}  // namespace

void SweepConfig::apply_desk_scale() {
  epochs_joint = 150;
  epochs_retrain = 20;
  lr_grid = {1e-2};
  // Short runs need stronger penalties than the long-run defaults: l1 at 1e-2,
  // and the Bernoulli KL averaged over the concept axis instead of summed.
  lambda_grid = {
      {GateKind::kL1, {1e-2}},
      {GateKind::kL0, {1e-1}},
      {GateKind::kBernoulli, {2e-2}},
  };
}

void SweepConfig::validate() const {
  if (gates.empty()) throw ConfigError("sweep: gate list is empty");
  if (lr_grid.empty()) throw ConfigError("sweep: learning-rate grid is empty");
  if (thresholds.empty()) throw ConfigError("sweep: threshold grid is empty");
  if (seeds.empty()) throw ConfigError("sweep: seed list is empty");
  for (double lr : lr_grid) {
    if (!(lr > 0.0)) throw ConfigError("sweep: learning rates must be > 0");
  }
  for (double t : thresholds) {
    if (!(t > 0.0 && t < 1.0)) throw ConfigError("sweep: thresholds must lie in (0,1)");
  }
  for (GateKind g : gates) {
    auto it = lambda_grid.find(g);
    if (it == lambda_grid.end() || it->second.empty()) {
      throw ConfigError("sweep: lambda grid for gate " + std::string(to_string(g)) + " is empty");
    }
    for (double l : it->second) {
      if (!(l >= 0.0)) throw ConfigError("sweep: lambda values must be >= 0");
    }
  }
  if (epochs_joint < 1 || epochs_retrain < 1) throw ConfigError("sweep: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("sweep: batch size must be >= 1");
  if (retrain_lr && !(*retrain_lr > 0.0)) throw ConfigError("sweep: retrain_lr must be > 0");
  if (jobs < 1) throw ConfigError("sweep: jobs must be >= 1");
  if (resume && output_dir.empty()) throw ConfigError("sweep: resume needs an output directory");
  hyper.validate();
  predictor.validate();
}

std::size_t SweepConfig::expected_rows() const {
  std::size_t rows = 0;
  for (GateKind g : gates) {
    rows += lr_grid.size() * lambda_grid.at(g).size() * thresholds.size() * seeds.size();
  }
  return rows;
}

SweepConfig sweep_config_from_json(const json& j, SweepConfig c) {
  static const std::set<std::string> allowed = {
      "backend", "gates",  "lr",       "lambda",   "thresholds", "seeds",      "epochs_joint",
      "epochs_retrain", "batch_size", "retrain_lr", "beta", "gamma", "zeta", "prior_pi", "mc_samples",
      "literal_bernoulli_location", "normalize", "predictor", "predictor_checkpoint"};
  if (!j.is_object()) throw ConfigError("sweep config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.contains(key)) throw ConfigError("sweep config: unknown key '" + key + "'");
  }
  if (j.contains("backend")) c.backend = parse_backend_kind(j["backend"].get<std::string>());
  if (j.contains("gates")) {
    c.gates.clear();
    for (const auto& g : j["gates"]) c.gates.push_back(parse_gate_kind(g.get<std::string>()));
  }
  read_opt(j, "lr", c.lr_grid);
  if (j.contains("lambda")) {
    if (!j["lambda"].is_object()) throw ConfigError("sweep 'lambda' must map gate names to grids");
    for (const auto& [gate, grid] : j["lambda"].items()) {
      c.lambda_grid[parse_gate_kind(gate)] = grid.get<std::vector<double>>();
    }
  }
  read_opt(j, "thresholds", c.thresholds);
  read_opt(j, "seeds", c.seeds);
  read_opt(j, "epochs_joint", c.epochs_joint);
  read_opt(j, "epochs_retrain", c.epochs_retrain);
  read_opt(j, "batch_size", c.batch_size);
  if (j.contains("retrain_lr") && !j["retrain_lr"].is_null()) c.retrain_lr = j["retrain_lr"].get<double>();
  read_opt(j, "beta", c.hyper.beta);
  read_opt(j, "gamma", c.hyper.gamma);
  read_opt(j, "zeta", c.hyper.zeta);
  read_opt(j, "prior_pi", c.hyper.prior_pi);
  read_opt(j, "mc_samples", c.hyper.mc_samples);
  read_opt(j, "literal_bernoulli_location", c.hyper.literal_bernoulli_location);
  read_opt(j, "normalize", c.normalize);
  if (j.contains("predictor")) {
    const auto& p = j["predictor"];
    read_opt(p, "lr", c.predictor.learning_rate);
    read_opt(p, "epochs", c.predictor.epochs);
    read_opt(p, "batch_size", c.predictor.batch_size);
    read_opt(p, "seed", c.predictor.seed);
    read_opt(p, "normalize", c.predictor_normalize);
  }
  if (j.contains("predictor_checkpoint")) c.predictor_checkpoint = j["predictor_checkpoint"].get<std::string>();
  return c;
}

json to_json(const SweepConfig& c) {
  json lambda = json::object();
  for (const auto& [gate, grid] : c.lambda_grid) lambda[std::string(to_string(gate))] = grid;
  json gates = json::array();
  for (GateKind g : c.gates) gates.push_back(to_string(g));
  json j = {
      {"backend", to_string(c.backend)},
      {"gates", gates},
      {"lr", c.lr_grid},
      {"lambda", lambda},
      {"thresholds", c.thresholds},
      {"seeds", c.seeds},
      {"epochs_joint", c.epochs_joint},
      {"epochs_retrain", c.epochs_retrain},
      {"batch_size", c.batch_size},
      {"retrain_lr", c.retrain_lr ? json(*c.retrain_lr) : json(nullptr)},
      {"beta", c.hyper.beta},
      {"gamma", c.hyper.gamma},
      {"zeta", c.hyper.zeta},
      {"prior_pi", c.hyper.prior_pi},
      {"mc_samples", c.hyper.mc_samples},
      {"literal_bernoulli_location", c.hyper.literal_bernoulli_location},
      {"normalize", c.normalize},
      {"predictor",
       {{"lr", c.predictor.learning_rate},
        {"epochs", c.predictor.epochs},
        {"batch_size", c.predictor.batch_size},
        {"seed", c.predictor.seed},
        {"normalize", c.predictor_normalize}}},
  };
  if (c.predictor_checkpoint) j["predictor_checkpoint"] = c.predictor_checkpoint->string();
  return j;
}

std::string cell_key(GateKind gate, double lr, double lambda, std::uint64_t seed) {
  return std::string(to_string(gate)) + "_lr" + fmt_g(lr, 9) + "_lam" + fmt_g(lambda, 9) + "_seed" +
         std::to_string(seed);
}

std::string cell_key(const ClarityReport& row) { return cell_key(row.gate, row.lr, row.lambda, row.seed); }

SweepResult run_sweep(const SweepConfig& config, const fs::path& dataset_dir) {
  return run_sweep(config, load_dataset(dataset_dir));
}

SweepResult run_sweep(const SweepConfig& config, const ConceptDataset& dataset) {
  config.validate();
  validate_dataset(dataset);
  if (dataset.split.train.empty() || dataset.split.test.empty()) {
    throw ConfigError("sweep needs a dataset with non-empty train and test splits");
  }

  SweepResult result;
  result.started_at = utc_now();
  result.config_hash = fnv1a_hex(to_json(config).dump());

  const bool write = !config.output_dir.empty();
  if (write) {
    std::error_code ec;
    fs::create_directories(config.output_dir, ec);
    if (ec) throw ConfigError("cannot create output directory " + config.output_dir.string());
  }

  const ConceptScores scores = compute_scores(config, dataset);

  std::vector<Cell> cells;
  for (GateKind g : config.gates) {
    for (double lr : config.lr_grid) {
      for (double lambda : config.lambda_grid.at(g)) {
        for (auto seed : config.seeds) cells.push_back({g, lr, lambda, seed, cell_key(g, lr, lambda, seed)});
      }
    }
  }

  // Resume: keep journal rows of cells whose whole threshold grid is present.
  const fs::path journal_path = write ? config.output_dir / "journal.csv" : fs::path();
  std::map<std::string, std::vector<ClarityReport>> done;
  if (config.resume && fs::exists(journal_path)) {
    std::map<std::string, std::map<double, ClarityReport>> by_cell;
    std::ifstream in(journal_path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto row = parse_row(split_csv(line));
      if (row.backend != config.backend) continue;
      by_cell[cell_key(row)][row.tau] = row;
    }
    for (const auto& cell : cells) {
      auto it = by_cell.find(cell.key);
      if (it == by_cell.end()) continue;
      std::vector<ClarityReport> rows;
      for (double tau : config.thresholds) {
        auto hit = it->second.find(tau);
        if (hit == it->second.end()) break;
        rows.push_back(hit->second);
      }
      if (rows.size() == config.thresholds.size()) done[cell.key] = std::move(rows);
    }
  }

  std::ofstream journal;
  std::mutex journal_mutex;
  if (write) {
    journal.open(journal_path, std::ios::trunc);
    if (!journal) throw ConfigError("cannot write " + journal_path.string());
    journal << kCurvesHeader << ",precision_degenerate\n";
    for (const auto& [_, rows] : done) {
      for (const auto& r : rows) journal << csv_row(r, 17) << ',' << (r.precision_degenerate ? 1 : 0) << '\n';
    }
    journal.flush();
  }

  const Eigen::MatrixXd e_test = select_rows(dataset.image_embeddings, dataset.split.test).cast<double>();
  const Eigen::MatrixXd s_test = select_rows(scores.scores, dataset.split.test);
  const auto y_test = select_labels(dataset.labels, dataset.split.test);
  const AttributeMatrix gt_test = select_rows(dataset.attributes, dataset.split.test);

  struct CellOutput {
    std::vector<ClarityReport> rows;
    std::optional<GateParams> gate;
    std::optional<std::string> error;
  };
  std::vector<CellOutput> outputs(cells.size());

  auto run_cell = [&](std::size_t idx) {
    const Cell& cell = cells[idx];
    CellOutput& out = outputs[idx];
    if (auto it = done.find(cell.key); it != done.end()) {
      out.rows = it->second;
      return;
    }
    try {
      TrainConfig joint{cell.lr, config.epochs_joint, config.batch_size, cell.seed};
      GateHyperparams hyper = config.hyper;
      if (cell.gate == GateKind::kBernoulli) {
        hyper.kl_scale = cell.lambda;
        hyper.lambda = 0.0;
      } else {
        hyper.lambda = cell.lambda;
      }
      const JointModel model = train_joint(dataset, scores, cell.gate, joint, hyper);
      const TrainConfig retrain{config.retrain_lr.value_or(cell.lr), config.epochs_retrain, config.batch_size,
                                cell.seed};
      for (double tau : config.thresholds) {
        const RetrainResult rr = retrain_classifier(dataset, scores, model.gate, tau, retrain);
        const BinaryMask mask = gate_threshold(model.gate, e_test, tau);
        const auto predicted = argmax_rows(classify(s_test, mask.z.cast<double>(), rr.head));
        ClarityReport tag;
        tag.gate = cell.gate;
        tag.backend = config.backend;
        tag.lr = cell.lr;
        tag.lambda = cell.lambda;
        tag.tau = tau;
        tag.seed = cell.seed;
        out.rows.push_back(make_clarity_report(tag, classification_accuracy(predicted, y_test), mask.z, gt_test));
      }
      out.gate = model.gate;
      if (write) {
        const fs::path dir = config.output_dir / "gates" / cell.key;
        save_gate(model.gate, dir);
        save_classifier(model.head, dir);
        std::lock_guard lock(journal_mutex);
        for (const auto& r : out.rows) {
          journal << csv_row(r, 17) << ',' << (r.precision_degenerate ? 1 : 0) << '\n';
        }
        journal.flush();
      }
    } catch (const Error& e) {
      out.rows.clear();
      out.error = e.what();
    }
  };

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) run_cell(i);
  };
  const auto threads = std::min<std::size_t>(static_cast<std::size_t>(config.jobs), cells.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (std::size_t i = 0; i < cells.size(); ++i) {
    auto& out = outputs[i];
    if (out.error) {
      result.failures.push_back({cells[i].key, *out.error});
      continue;
    }
    result.rows.insert(result.rows.end(), out.rows.begin(), out.rows.end());
    if (out.gate) result.gates.emplace(cells[i].key, std::move(*out.gate));
  }
  result.finished_at = utc_now();

  if (write) {
    if (!result.rows.empty()) emit_curves(result, config.output_dir);
    std::ofstream failures(config.output_dir / "failures.csv", std::ios::trunc);
    failures << "cell,message\n";
    for (const auto& f : result.failures) failures << f.cell << ",\"" << f.message << "\"\n";
    json provenance = {
        {"config_hash", result.config_hash},
        {"started_at", result.started_at},
        {"finished_at", result.finished_at},
        {"rows", result.rows.size()},
        {"failures", result.failures.size()},
        {"resumed_cells", done.size()},
        {"config", to_json(config)},
    };
    std::ofstream(config.output_dir / "provenance.json") << provenance.dump(2) << '\n';
  }
  return result;
}

std::vector<ClarityReport> select_best_clarity(const std::vector<ClarityReport>& rows,
                                               const std::vector<std::string>& group_keys) {
  if (rows.empty()) throw DataError("select_best_clarity: no rows");
  std::map<std::vector<std::string>, ClarityReport> best;
  for (const auto& r : rows) {
    std::vector<std::string> key;
    for (const auto& k : group_keys) key.push_back(group_field(r, k));
    auto [it, inserted] = best.emplace(key, r);
    if (!inserted && better_clarity(r, it->second)) it->second = r;
  }
  std::vector<ClarityReport> out;
  for (auto& [_, r] : best) out.push_back(r);
  return out;
}

std::vector<ClarityReport> sorted_for_curves(std::vector<ClarityReport> rows) {
  std::sort(rows.begin(), rows.end(), [](const ClarityReport& a, const ClarityReport& b) {
    const auto ka = std::make_tuple(std::string(to_string(a.gate)), std::string(to_string(a.backend)), a.sparsity,
                                    a.lr, a.lambda, a.tau, a.seed);
    const auto kb = std::make_tuple(std::string(to_string(b.gate)), std::string(to_string(b.backend)), b.sparsity,
                                    b.lr, b.lambda, b.tau, b.seed);
    return ka < kb;
  });
  return rows;
}

json to_json(const ClarityReport& r) {
  return {
      {"gate", to_string(r.gate)},
      {"backend", to_string(r.backend)},
      {"lr", r.lr},
      {"lambda", r.lambda},
      {"tau", r.tau},
      {"seed", r.seed},
      {"accuracy", r.accuracy},
      {"avg_active_fraction", r.avg_active_fraction},
      {"sparsity", r.sparsity},
      {"precision", r.precision},
      {"binary_accuracy", r.binary_accuracy},
      {"clarity", r.clarity},
      {"precision_degenerate", r.precision_degenerate},
  };
}

void emit_curves(const SweepResult& result, const fs::path& dir) {
  if (result.rows.empty()) throw DataError("emit_curves: no rows");
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::ofstream csv(dir / "curves.csv", std::ios::trunc);
  if (!csv) throw DataError("cannot write " + (dir / "curves.csv").string());
  csv << kCurvesHeader << '\n';
  for (const auto& r : sorted_for_curves(result.rows)) csv << csv_row(r, 9) << '\n';
  if (!csv) throw DataError("write failed: " + (dir / "curves.csv").string());

  json best = json::array();
  for (const auto& r : select_best_clarity(result.rows, {"gate", "backend"})) best.push_back(to_json(r));
  std::ofstream(dir / "best.json", std::ios::trunc) << best.dump(2) << '\n';
}

std::vector<ClarityReport> read_curves(const fs::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw DataError("missing file: " + csv_path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind(kCurvesHeader, 0) != 0) {
    throw DataError(csv_path.string() + ": unexpected header");
  }
  std::vector<ClarityReport> rows;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(parse_row(split_csv(line)));
  }
  return rows;
}

std::string format_concept_report(const ConceptDataset& dataset, Eigen::Index example_index,
                                  std::span<const std::uint8_t> mask_row, double tau) {
  if (example_index < 0 || example_index >= dataset.num_examples()) {
    throw DataError("example index " + std::to_string(example_index) + " out of range");
  }
  if (static_cast<Eigen::Index>(mask_row.size()) != dataset.num_concepts()) {
    throw DimensionError("mask row length != number of concepts");
  }
  const auto gt = dataset.attributes.row(example_index);
  int selected = 0, correct = 0;
  const int gt_active = static_cast<int>(gt.cast<int>().sum());
  std::string lines;
  for (Eigen::Index m = 0; m < dataset.num_concepts(); ++m) {
    if (!mask_row[static_cast<std::size_t>(m)]) continue;
    ++selected;
    const bool hit = gt(m) == 1;
    correct += hit;
    lines += std::string("  ") + (hit ? "+ " : "- ") + dataset.concept_names[static_cast<std::size_t>(m)] +
             (hit ? "  [correct]\n" : "  [incorrect]\n");
  }
  std::ostringstream out;
  out << "example " << example_index << " ("
      << dataset.class_names[dataset.labels[static_cast<std::size_t>(example_index)]] << "), tau = " << tau << '\n';
  out << selected << " selected, " << correct << " correct, " << gt_active << " ground-truth active\n";
  if (selected == 0) {
    out << "precision: n/a (no concepts selected)\n";
  } else {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", static_cast<double>(correct) / selected);
    out << "precision: " << buf << '\n';
  }
  out << lines;
  return out.str();
}

std::string concept_report(const ConceptDataset& dataset, const GateParams& gate, double tau,
                           Eigen::Index example_index) {
  if (example_index < 0 || example_index >= dataset.num_examples()) {
    throw DataError("example index " + std::to_string(example_index) + " out of range");
  }
  const Eigen::MatrixXd row = dataset.image_embeddings.row(example_index).cast<double>();
  const BinaryMask mask = gate_threshold(gate, row, tau);
  return format_concept_report(dataset, example_index, {mask.z.data(), static_cast<std::size_t>(mask.z.cols())},
                               tau);
}

}  // namespace cbm
