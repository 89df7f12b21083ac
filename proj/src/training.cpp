#include "cbm/training.hpp"

#include <cmath>
#include <sstream>

#include "cbm/binary_io.hpp"
#include "cbm/rng.hpp"

namespace cbm {
namespace fs = std::filesystem;

std::vector<std::uint32_t> argmax_rows(const Eigen::MatrixXd& logits) {
  std::vector<std::uint32_t> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(best);
  }
  return out;
}

JointLoss build_joint_loss(const ad::Var& w_s, const ad::Var& w_c, const ad::Var& bias,
                           const Eigen::MatrixXd& embeddings, const Eigen::MatrixXd& scores,
                           std::span<const std::uint32_t> labels, GateKind kind, const GateHyperparams& hyper,
                           std::span<const Eigen::MatrixXd> noise) {
  ad::Tape& tape = *w_s.tape();
  const Eigen::Index n = embeddings.rows();
  if (n == 0) throw DimensionError("build_joint_loss: empty batch");
  if (scores.rows() != n) throw DimensionError("build_joint_loss: score rows != embedding rows");
  const double inv_n = 1.0 / static_cast<double>(n);

  const auto e = tape.constant(embeddings);
  const auto s = tape.constant(scores);
  const auto phi = ad::matmul(e, w_s);
  auto task_for = [&](const ad::Var& z) {
    return ad::softmax_cross_entropy(ad::add_row(ad::matmul(ad::cwise_product(z, s), w_c), bias), labels);
  };

  JointLoss loss;
  if (kind == GateKind::kL1) {
    const auto z = ad::sigmoid(phi);
    loss.task = task_for(z);
    loss.penalty = ad::scale(ad::sum(z), hyper.lambda * inv_n);
    loss.mean_activation = z.value().mean();
  } else {
    if (noise.empty()) throw DimensionError("stochastic gates need at least one noise sample");
    const GateHyperparams h = hyper;
    for (std::size_t l = 0; l < noise.size(); ++l) {
      ad::Var z;
      if (kind == GateKind::kL0) {
        z = ad::elementwise(
            phi, noise[l], [h](double p, double u) { return gate_math::hard_concrete(p, u, h); },
            [h](double p, double u) { return gate_math::hard_concrete_grad(p, u, h); });
      } else {
        z = ad::elementwise(
            phi, noise[l],
            [h](double p, double u) { return gate_math::concrete_relaxed(p, u, h.beta, h.literal_bernoulli_location); },
            [h](double p, double u) {
              return gate_math::concrete_relaxed_grad(p, u, h.beta, h.literal_bernoulli_location);
            });
      }
      const auto task = task_for(z);
      loss.task = l == 0 ? task : ad::add(loss.task, task);
      loss.mean_activation += z.value().mean();
    }
    const double inv_l = 1.0 / static_cast<double>(noise.size());
    loss.task = ad::scale(loss.task, inv_l);
    loss.mean_activation *= inv_l;

    if (kind == GateKind::kL0) {
      const auto open = ad::elementwise(
          phi, [h](double p) { return gate_math::l0_open_probability(p, h); },
          [h](double p) { return gate_math::l0_open_probability_grad(p, h); });
      loss.penalty = ad::scale(ad::sum(open), h.lambda * inv_n);
    } else {
      const double prior = h.prior_pi;
      const auto kl = ad::elementwise(
          phi, [prior](double p) { return gate_math::bernoulli_kl_term(gate_math::sigmoid(p), prior); },
          [prior](double p) { return gate_math::bernoulli_kl_grad_logit(p, prior); });
      loss.penalty = ad::scale(ad::sum(kl), h.kl_scale * inv_n);
    }
  }
  loss.total = ad::add(loss.task, loss.penalty);
  return loss;
}

namespace {

const IndexList& require_train_split(const ConceptDataset& dataset) {
  if (dataset.split.train.empty()) throw DataError("dataset has no train split; run split_dataset first");
  return dataset.split.train;
}

void require_scores_match(const ConceptDataset& dataset, const ConceptScores& scores) {
  if (scores.scores.rows() != dataset.num_examples() || scores.scores.cols() != dataset.num_concepts()) {
    throw DimensionError("concept scores must be N x M for the dataset");
  }
}

Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, CounterRng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = stddev * rng.normal();
  }
  return m;
}

double mean_softmax_cross_entropy(const Eigen::MatrixXd& logits, std::span<const std::uint32_t> labels) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    total += lse - logits(i, labels[static_cast<std::size_t>(i)]);
  }
  return total / static_cast<double>(logits.rows());
}

}  // namespace

JointModel train_joint(const ConceptDataset& dataset, const ConceptScores& scores, GateKind kind,
                       const TrainConfig& config, const GateHyperparams& hyper) {
  config.validate();
  hyper.validate();
  require_scores_match(dataset, scores);
  const IndexList& train = require_train_split(dataset);

  const Eigen::MatrixXd e_all = dataset.image_embeddings.cast<double>();
  const Eigen::Index k = dataset.embed_dim(), m = dataset.num_concepts(), c = dataset.num_classes();

  CounterRng init(config.seed, Stream::kInit);
  Eigen::MatrixXd w_s = gaussian(k, m, 0.01, init);
  Eigen::MatrixXd w_c = gaussian(m, c, 0.01, init);
  Eigen::MatrixXd bias = Eigen::MatrixXd::Zero(1, c);
  Adam<double> adam(config, {w_s, w_c, bias});

  JointModel model;
  const int samples = kind == GateKind::kL1 ? 0 : hyper.mc_samples;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double task_sum = 0.0, penalty_sum = 0.0, act_sum = 0.0;
    for (const auto& batch :
         shuffled_batches(train.size(), config.batch_size, config.seed, static_cast<std::uint64_t>(epoch))) {
      IndexList ids(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i) ids[i] = train[batch[i]];
      std::vector<Eigen::MatrixXd> noise;
      for (int l = 0; l < samples; ++l) {
        noise.push_back(gate_noise(config.seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(l),
                                   ids, m));
      }
      const auto labels = select_labels(dataset.labels, ids);

      ad::Tape tape;
      const auto ws_v = tape.variable(w_s);
      const auto wc_v = tape.variable(w_c);
      const auto b_v = tape.variable(bias);
      const auto loss = build_joint_loss(ws_v, wc_v, b_v, select_rows(e_all, ids), select_rows(scores.scores, ids),
                                         labels, kind, hyper, noise);
      if (!std::isfinite(loss.total.scalar())) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << " (gate " << to_string(kind)
            << ", lr " << config.learning_rate << ", lambda " << hyper.lambda
            << "); learning rate or penalty weight too large";
        throw NumericError(msg.str());
      }
      tape.backward(loss.total);
      adam.step({tape.grad(ws_v), tape.grad(wc_v), tape.grad(b_v)});

      const auto weight = static_cast<double>(batch.size());
      task_sum += weight * loss.task.scalar();
      penalty_sum += weight * loss.penalty.scalar();
      act_sum += weight * loss.mean_activation;
    }
    const auto count = static_cast<double>(train.size());
    EpochRecord rec;
    rec.task_loss = task_sum / count;
    rec.penalty = penalty_sum / count;
    rec.total_loss = rec.task_loss + rec.penalty;
    rec.mean_activation = act_sum / count;
    model.history.epochs.push_back(rec);
  }
  model.gate = {std::move(w_s), kind, hyper};
  model.head = {std::move(w_c), bias.row(0)};
  return model;
}

ClassifierHead train_classifier(const Eigen::MatrixXd& features, std::span<const std::uint32_t> labels,
                                Eigen::Index num_classes, const TrainConfig& config, TrainHistory* history) {
  config.validate();
  if (static_cast<Eigen::Index>(labels.size()) != features.rows()) {
    throw DimensionError("train_classifier: label count != feature rows");
  }
  if (features.rows() == 0) throw DataError("train_classifier: no training examples");
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(features.cols(), num_classes);
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(1, num_classes);
  Adam<double> adam(config, {w, b});
  const auto n = static_cast<std::size_t>(features.rows());
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (const auto& batch : shuffled_batches(n, config.batch_size, config.seed, static_cast<std::uint64_t>(epoch))) {
      ad::Tape tape;
      const auto wv = tape.variable(w);
      const auto bv = tape.variable(b);
      const auto x = tape.constant(select_rows(features, batch));
      const auto loss =
          ad::softmax_cross_entropy(ad::add_row(ad::matmul(x, wv), bv), select_labels(labels, batch));
      if (!std::isfinite(loss.scalar())) throw NumericError("classifier loss is not finite");
      tape.backward(loss);
      adam.step({tape.grad(wv), tape.grad(bv)});
      loss_sum += loss.scalar() * static_cast<double>(batch.size());
    }
    if (history) {
      EpochRecord rec;
      rec.task_loss = loss_sum / static_cast<double>(n);
      rec.total_loss = rec.task_loss;
      history->epochs.push_back(rec);
    }
  }
  return {std::move(w), b.row(0)};
}

RetrainResult retrain_classifier(const ConceptDataset& dataset, const ConceptScores& scores,
                                 const GateParams& gate, double tau, const TrainConfig& config) {
  require_scores_match(dataset, scores);
  const IndexList& train = require_train_split(dataset);
  RetrainResult result;
  result.train_mask = gate_threshold(gate, select_rows(dataset.image_embeddings, train).cast<double>(), tau);
  if ((result.train_mask.z.array() == 0).all()) {
    result.warnings.push_back("mask is empty for every training example at tau=" + std::to_string(tau) +
                              "; classifier reduces to its bias");
  }
  const Eigen::MatrixXd features =
      select_rows(scores.scores, train).cwiseProduct(result.train_mask.z.cast<double>());
  result.head = train_classifier(features, select_labels(dataset.labels, train), dataset.num_classes(), config);
  return result;
}

JointGradients joint_gradients(const GradientCheckProblem& p, LossPart part) {
  ad::Tape tape;
  const auto ws = tape.variable(p.w_s);
  const auto wc = tape.variable(p.w_c);
  const auto b = tape.variable(Eigen::MatrixXd(p.bias));
  const auto loss = build_joint_loss(ws, wc, b, p.embeddings, p.scores, p.labels, p.kind, p.hyper, p.noise);
  const auto& root = part == LossPart::kTotal ? loss.total : part == LossPart::kTask ? loss.task : loss.penalty;
  tape.backward(root);
  return {root.scalar(), tape.grad(ws), tape.grad(wc), tape.grad(b).row(0)};
}

double joint_loss_value(const GradientCheckProblem& p, LossPart part) {
  const Eigen::MatrixXd phi = gate_logits(p.w_s, p.embeddings);
  const ClassifierHead head{p.w_c, p.bias};
  auto task_for = [&](const Eigen::MatrixXd& z) {
    return mean_softmax_cross_entropy(classify(p.scores, z, head), p.labels);
  };
  const auto& h = p.hyper;
  double task = 0.0, penalty = 0.0;
  switch (p.kind) {
    case GateKind::kL1: {
      const Eigen::MatrixXd z = gate_l1_forward(phi);
      task = task_for(z);
      penalty = gate_l1_penalty(z, h.lambda);
      break;
    }
    case GateKind::kL0:
      for (const auto& u : p.noise) task += task_for(gate_l0_sample(phi, u, h));
      task /= static_cast<double>(p.noise.size());
      penalty = gate_l0_penalty(phi, h);
      break;
    case GateKind::kBernoulli:
      for (const auto& u : p.noise) {
        task += task_for(gate_bernoulli_sample_relaxed(phi, u, h.beta, h.literal_bernoulli_location));
      }
      task /= static_cast<double>(p.noise.size());
      penalty = h.kl_scale * gate_bernoulli_kl(gate_bernoulli_probs(phi), h.prior_pi);
      break;
  }
  switch (part) {
    case LossPart::kTask:
      return task;
    case LossPart::kPenalty:
      return penalty;
    case LossPart::kTotal:
      break;
  }
  return task + penalty;
}

GradientCheckProblem make_gradient_check_problem(GateKind kind, const GateHyperparams& hyper, Eigen::Index n,
                                                 Eigen::Index k, Eigen::Index m, Eigen::Index c,
                                                 std::uint64_t seed, double margin) {
  hyper.validate();
  CounterRng rng(seed, Stream::kInit, 0x9c);
  GradientCheckProblem p;
  p.kind = kind;
  p.hyper = hyper;
  p.embeddings = gaussian(n, k, 1.0, rng);
  p.scores = Eigen::MatrixXd(n, m);
  for (Eigen::Index i = 0; i < p.scores.size(); ++i) p.scores.data()[i] = rng.uniform();
  for (Eigen::Index i = 0; i < n; ++i) p.labels.push_back(static_cast<std::uint32_t>(rng.below(static_cast<std::uint64_t>(c))));
  p.w_s = gaussian(k, m, 0.5, rng);
  p.w_c = gaussian(m, c, 1.0, rng);
  p.bias = gaussian(1, c, 0.1, rng).row(0);
  if (kind == GateKind::kL1) return p;

  const Eigen::MatrixXd phi = gate_logits(p.w_s, p.embeddings);
  for (int l = 0; l < hyper.mc_samples; ++l) {
    Eigen::MatrixXd u(n, m);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < m; ++j) {
        double draw = rng.uniform();
        if (kind == GateKind::kL0) {
          auto near_kink = [&](double v) {
            const double s = gate_math::hard_concrete_stretched(phi(i, j), v, hyper);
            return std::abs(s) < margin || std::abs(s - 1.0) < margin;
          };
          while (near_kink(draw)) draw = rng.uniform();
        }
        u(i, j) = draw;
      }
    }
    p.noise.push_back(std::move(u));
  }
  return p;
}

double gradient_check(const GradientCheckProblem& problem, double h) {
  const JointGradients analytic = joint_gradients(problem);
  double worst = 0.0;
  auto compare = [&](auto member, const auto& grad) {
    GradientCheckProblem probe = problem;
    auto& param = probe.*member;
    for (Eigen::Index i = 0; i < param.size(); ++i) {
      const double original = param.data()[i];
      param.data()[i] = original + h;
      const double up = joint_loss_value(probe);
      param.data()[i] = original - h;
      const double down = joint_loss_value(probe);
      param.data()[i] = original;
      const double numeric = (up - down) / (2.0 * h);
      const double a = grad.data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  };
  compare(&GradientCheckProblem::w_s, analytic.w_s);
  compare(&GradientCheckProblem::w_c, analytic.w_c);
  compare(&GradientCheckProblem::bias, analytic.bias);
  return worst;
}

void save_classifier(const ClassifierHead& head, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir.string());
  const EmbeddingMatrix w = head.w_c.cast<float>();
  const Eigen::RowVectorXf b = head.bias.cast<float>();
  io::write_f32(dir / "w_c.f32", {w.data(), static_cast<std::size_t>(w.size())});
  io::write_f32(dir / "b_c.f32", {b.data(), static_cast<std::size_t>(b.size())});
}

ClassifierHead load_classifier(const fs::path& dir, Eigen::Index m, Eigen::Index c) {
  const auto w = io::read_f32(dir / "w_c.f32", static_cast<std::size_t>(m * c));
  const auto b = io::read_f32(dir / "b_c.f32", static_cast<std::size_t>(c));
  EmbeddingMatrix wm(m, c);
  std::copy(w.begin(), w.end(), wm.data());
  return {wm.cast<double>(), Eigen::Map<const Eigen::RowVectorXf>(b.data(), c).cast<double>()};
}

}  // namespace cbm
