#ifndef CBM_AUTODIFF_HPP
#define CBM_AUTODIFF_HPP

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace cbm::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  // Value of a 1x1 node.
  double scalar() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode tape over dense matrices. Nodes are appended in evaluation
// order, so a reverse sweep visits every node after all of its consumers.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& upstream)>;

  Var variable(Matrix value);
  Var constant(Matrix value);

  // Records a derived node. `backward` receives the node's accumulated
  // gradient and must push contributions to its parents via accumulate().
  Var record(Matrix value, std::initializer_list<Var> parents, Backward backward);

  void accumulate(const Var& target, const Matrix& delta);

  // Seeds d(root)/d(root) = 1 and sweeps the tape. Root must be 1x1.
  // Clears gradients from any previous sweep first.
  void backward(const Var& root);

  // Gradient of the last backward() root w.r.t. v; zeros if v was unreachable.
  Matrix grad(const Var& v) const;

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
};

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
// a (N x C) plus a 1 x C row broadcast over rows.
Var add_row(const Var& a, const Var& row);
Var cwise_product(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
Var sum(const Var& a);

// Elementwise map with an explicit derivative, both functions of the input entry.
Var elementwise(const Var& a, const std::function<double(double)>& f,
                const std::function<double(double)>& df);
// Elementwise map parameterized by a fixed auxiliary matrix (e.g. noise).
Var elementwise(const Var& a, const Matrix& aux, const std::function<double(double, double)>& f,
                const std::function<double(double, double)>& df);

Var sigmoid(const Var& a);

// Mean softmax cross-entropy of logits (N x C) against integer labels.
Var softmax_cross_entropy(const Var& logits, std::span<const std::uint32_t> labels);

// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets, over all entries.
Var sigmoid_binary_cross_entropy(const Var& logits, const Matrix& targets);

}  // namespace cbm::ad

#endif  // CBM_AUTODIFF_HPP
