#include "cbm/autodiff.hpp"

#include <cmath>

#include "cbm/error.hpp"
#include "cbm/gates.hpp"

namespace cbm::ad {

const Matrix& Var::value() const { return tape_->value(id_); }

double Var::scalar() const {
  const auto& v = value();
  if (v.size() != 1) throw DimensionError("scalar() on a non-1x1 node");
  return v(0, 0);
}

Var Tape::variable(Matrix value) {
  nodes_.push_back({std::move(value), Matrix(), nullptr, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back({std::move(value), Matrix(), nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  bool needs = false;
  for (const auto& p : parents) needs = needs || nodes_[p.id()].needs_grad;
  nodes_.push_back({std::move(value), Matrix(), needs ? std::move(backward) : nullptr, needs});
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(const Var& target, const Matrix& delta) {
  auto& node = nodes_[target.id()];
  if (!node.needs_grad) return;
  if (node.grad.size() == 0) {
    node.grad = delta;
  } else {
    node.grad += delta;
  }
}

void Tape::backward(const Var& root) {
  if (root.value().size() != 1) throw DimensionError("backward() root must be 1x1");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  nodes_[root.id()].grad = Matrix::Ones(1, 1);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.backward || node.grad.size() == 0) continue;
    // accumulate() never touches nodes at or after i, so the reference stays valid.
    node.backward(*this, node.grad);
  }
}

Matrix Tape::grad(const Var& v) const {
  const auto& node = nodes_[v.id()];
  if (node.grad.size() == 0) return Matrix::Zero(node.value.rows(), node.value.cols());
  return node.grad;
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": operand shapes differ");
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
  return a.tape()->record(a.value() * b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g * b.value().transpose());
    t.accumulate(b, a.value().transpose() * g);
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return a.tape()->record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw DimensionError("add_row: row must be 1 x cols");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return a.tape()->record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(row, g.colwise().sum());
  });
}

Var cwise_product(const Var& a, const Var& b) {
  require_same_shape(a, b, "cwise_product");
  return a.tape()->record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(b.value()));
    t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var scale(const Var& a, double factor) {
  return a.tape()->record(a.value() * factor, {a},
                          [a, factor](Tape& t, const Matrix& g) { t.accumulate(a, g * factor); });
}

Var add_scalar(const Var& a, double offset) {
  Matrix out = a.value().array() + offset;
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var elementwise(const Var& a, const std::function<double(double)>& f,
                const std::function<double(double)>& df) {
  return a.tape()->record(a.value().unaryExpr(f), {a}, [a, df](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(a.value().unaryExpr(df)));
  });
}

Var elementwise(const Var& a, const Matrix& aux, const std::function<double(double, double)>& f,
                const std::function<double(double, double)>& df) {
  if (aux.rows() != a.rows() || aux.cols() != a.cols()) {
    throw DimensionError("elementwise: auxiliary matrix shape differs");
  }
  return a.tape()->record(a.value().binaryExpr(aux, f), {a}, [a, aux, df](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(a.value().binaryExpr(aux, df)));
  });
}

Var sigmoid(const Var& a) {
  Matrix out = a.value().unaryExpr([](double x) { return gate_math::sigmoid(x); });
  Matrix local = out.array() * (1.0 - out.array());
  return a.tape()->record(std::move(out), {a}, [a, local = std::move(local)](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(local));
  });
}

Var softmax_cross_entropy(const Var& logits, std::span<const std::uint32_t> labels) {
  const Matrix& z = logits.value();
  const Eigen::Index n = z.rows();
  if (static_cast<Eigen::Index>(labels.size()) != n) {
    throw DimensionError("softmax_cross_entropy: label count != rows");
  }
  Matrix probs(n, z.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto label = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]);
    if (label >= z.cols()) throw DimensionError("softmax_cross_entropy: label >= number of classes");
    const double mx = z.row(i).maxCoeff();
    const double lse = mx + std::log((z.row(i).array() - mx).exp().sum());
    probs.row(i) = (z.row(i).array() - lse).exp();
    total += lse - z(i, label);
  }
  Matrix out(1, 1);
  out(0, 0) = n > 0 ? total / static_cast<double>(n) : 0.0;
  std::vector<std::uint32_t> owned(labels.begin(), labels.end());
  return logits.tape()->record(
      std::move(out), {logits},
      [logits, probs = std::move(probs), owned = std::move(owned)](Tape& t, const Matrix& g) {
        Matrix d = probs;
        for (std::size_t i = 0; i < owned.size(); ++i) d(static_cast<Eigen::Index>(i), owned[i]) -= 1.0;
        d *= g(0, 0) / static_cast<double>(std::max<std::size_t>(owned.size(), 1));
        t.accumulate(logits, d);
      });
}

Var sigmoid_binary_cross_entropy(const Var& logits, const Matrix& targets) {
  const Matrix& x = logits.value();
  if (targets.rows() != x.rows() || targets.cols() != x.cols()) {
    throw DimensionError("sigmoid_binary_cross_entropy: target shape differs");
  }
  // max(x,0) - x*y + log(1 + exp(-|x|))
  const double count = static_cast<double>(std::max<Eigen::Index>(x.size(), 1));
  const double total =
      (x.array().max(0.0) - x.array() * targets.array() + (-x.array().abs()).exp().log1p()).sum();
  Matrix out(1, 1);
  out(0, 0) = total / count;
  return logits.tape()->record(std::move(out), {logits}, [logits, targets, count](Tape& t, const Matrix& g) {
    Matrix p = logits.value().unaryExpr([](double v) { return gate_math::sigmoid(v); });
    t.accumulate(logits, (p - targets) * (g(0, 0) / count));
  });
}

}  // namespace cbm::ad
