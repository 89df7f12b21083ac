#include "cbm/backends.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <vector>

#include <json.hpp>

#include "cbm/autodiff.hpp"
#include "cbm/binary_io.hpp"

namespace cbm {
namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(BackendKind kind) {
  return kind == BackendKind::kPredictor ? "predictor" : "vlm";
}

BackendKind parse_backend_kind(std::string_view name) {
  if (name == "predictor") return BackendKind::kPredictor;
  if (name == "vlm") return BackendKind::kVlm;
  throw ConfigError("unknown backend '" + std::string(name) + "' (expected predictor or vlm)");
}

AttributePredictor train_attribute_predictor(const ConceptDataset& dataset, const TrainConfig& config,
                                             bool normalize_inputs) {
  config.validate();
  IndexList rows = dataset.split.train;
  if (rows.empty()) {
    rows.resize(static_cast<std::size_t>(dataset.num_examples()));
    std::iota(rows.begin(), rows.end(), 0u);
  }
  if (rows.empty()) throw DataError("train_attribute_predictor: no training examples");

  Eigen::MatrixXd x = normalize_inputs ? l2_normalize_rows(dataset.image_embeddings)
                                       : Eigen::MatrixXd(dataset.image_embeddings.cast<double>());
  x = select_rows(x, rows);
  const Eigen::MatrixXd y = select_rows(dataset.attributes, rows).cast<double>();

  AttributePredictor predictor;
  predictor.normalize_inputs = normalize_inputs;
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(x.cols(), y.cols());
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(1, y.cols());
  Adam<double> adam(config, {w, b});

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (const auto& batch : shuffled_batches(rows.size(), config.batch_size, config.seed,
                                              static_cast<std::uint64_t>(epoch))) {
      ad::Tape tape;
      auto wv = tape.variable(w);
      auto bv = tape.variable(b);
      auto xv = tape.constant(select_rows(x, batch));
      auto loss = ad::sigmoid_binary_cross_entropy(ad::add_row(ad::matmul(xv, wv), bv), select_rows(y, batch));
      if (!std::isfinite(loss.scalar())) {
        throw NumericError("attribute predictor loss is not finite (learning rate too large?)");
      }
      tape.backward(loss);
      adam.step({tape.grad(wv), tape.grad(bv)});
    }
  }
  predictor.w_pred = std::move(w);
  predictor.bias = b.row(0);
  return predictor;
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw DimensionError("average_precision: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  const double positives = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  if (positives == 0) return 0.0;
  double ap = 0.0, tp = 0.0, seen = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    double group_tp = 0.0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      group_tp += labels[order[j]] ? 1.0 : 0.0;
      ++j;
    }
    tp += group_tp;
    seen += static_cast<double>(j - i);
    ap += (group_tp / positives) * (tp / seen);
    i = j;
  }
  return ap;
}

double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw DimensionError("roc_auc: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  // Rank-sum with average ranks over ties.
  double positive_rank_sum = 0.0, positives = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    double group_pos = 0.0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      group_pos += labels[order[j]] ? 1.0 : 0.0;
      ++j;
    }
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    positive_rank_sum += group_pos * avg_rank;
    positives += group_pos;
    i = j;
  }
  const double negatives = static_cast<double>(scores.size()) - positives;
  if (positives == 0 || negatives == 0) return 0.5;
  return (positive_rank_sum - positives * (positives + 1) / 2.0) / (positives * negatives);
}

AttributeEvaluation evaluate_attribute_prediction(const Eigen::MatrixXd& scores, const AttributeMatrix& gt) {
  if (scores.rows() != gt.rows() || scores.cols() != gt.cols()) {
    throw DimensionError("evaluate_attribute_prediction: score and ground-truth shapes differ");
  }
  AttributeEvaluation eval;
  std::vector<double> col(static_cast<std::size_t>(scores.rows()));
  std::vector<std::uint8_t> labels(col.size());
  double map_sum = 0.0, auc_sum = 0.0;
  for (Eigen::Index m = 0; m < scores.cols(); ++m) {
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      col[static_cast<std::size_t>(i)] = scores(i, m);
      labels[static_cast<std::size_t>(i)] = gt(i, m);
    }
    const auto pos = std::count(labels.begin(), labels.end(), 1);
    if (pos == 0 || pos == static_cast<std::ptrdiff_t>(labels.size())) {
      ++eval.skipped;
      continue;
    }
    map_sum += average_precision(col, labels);
    auc_sum += roc_auc(col, labels);
    ++eval.evaluated;
  }
  if (eval.evaluated == 0) throw DataError("every attribute has single-class ground truth; mAP/AUC undefined");
  eval.map = map_sum / eval.evaluated;
  eval.auc = auc_sum / eval.evaluated;
  return eval;
}

void save_predictor(const AttributePredictor& p, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir.string());
  std::ofstream out(dir / "meta.json");
  if (!out) throw DataError("cannot write " + (dir / "meta.json").string());
  out << json{{"k", p.w_pred.rows()}, {"m", p.w_pred.cols()}, {"normalize_inputs", p.normalize_inputs}}.dump(2)
      << '\n';
  const EmbeddingMatrix w = p.w_pred.cast<float>();
  const Eigen::RowVectorXf b = p.bias.cast<float>();
  io::write_f32(dir / "w_pred.f32", {w.data(), static_cast<std::size_t>(w.size())});
  io::write_f32(dir / "bias.f32", {b.data(), static_cast<std::size_t>(b.size())});
}

AttributePredictor load_predictor(const fs::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw DataError("missing file: " + (dir / "meta.json").string());
  Eigen::Index k = 0, m = 0;
  AttributePredictor p;
  try {
    const json meta = json::parse(in);
    k = meta.at("k").get<Eigen::Index>();
    m = meta.at("m").get<Eigen::Index>();
    p.normalize_inputs = meta.value("normalize_inputs", false);
  } catch (const json::exception& e) {
    throw DataError("predictor meta.json: " + std::string(e.what()));
  }
  const auto w = io::read_f32(dir / "w_pred.f32", static_cast<std::size_t>(k * m));
  const auto b = io::read_f32(dir / "bias.f32", static_cast<std::size_t>(m));
  EmbeddingMatrix wm(k, m);
  std::copy(w.begin(), w.end(), wm.data());
  p.w_pred = wm.cast<double>();
  p.bias = Eigen::Map<const Eigen::RowVectorXf>(b.data(), m).cast<double>();
  return p;
}

}  // namespace cbm
