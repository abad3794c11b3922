#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace delmix {

struct TapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NonScalarOutput : TapeError {
  using TapeError::TapeError;
};
struct ShapeMismatch : TapeError {
  using TapeError::TapeError;
};
struct TapeReused : TapeError {
  using TapeError::TapeError;
};

// Overflow-safe scalar nonlinearities.
double softplus(double x);
double sigmoid(double x);
// softplus^-1, used for initializing pre-activation constants.
double inv_softplus(double y);

// Dense row-major matrix. Scalars are 1x1, columns n x 1.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}
  static Mat scalar(double v) {
    Mat m(1, 1);
    m.a[0] = v;
    return m;
  }
  static Mat column(std::span<const double> v) {
    Mat m(static_cast<int>(v.size()), 1);
    std::copy(v.begin(), v.end(), m.a.begin());
    return m;
  }
  double& at(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
  double at(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }
  int size() const { return rows * cols; }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

using NodeId = int;

// Append-only reverse-mode tape over Mat values. Backward touches nodes in
// reverse creation order exactly once and rejects a second pass.
class Tape {
 public:
  NodeId constant(Mat v);
  NodeId param(Mat v);

  // add/mul broadcast: same shape, or one side 1x1, or a 1xM row / Nx1
  // column against an NxM matrix.
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b) { return add(a, affine(b, -1.0, 0.0)); }
  // scale * x + shift, elementwise.
  NodeId affine(NodeId x, double scale, double shift);
  NodeId matmul(NodeId a, NodeId b);
  NodeId concat_cols(NodeId a, NodeId b);
  NodeId gather_rows(NodeId a, std::vector<int> idx);
  NodeId scatter_add_rows(NodeId a, std::vector<int> idx, int out_rows);
  NodeId colsum(NodeId a);
  NodeId sum(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId softplus(NodeId a);
  NodeId tanh(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId log1p(NodeId a);
  NodeId reciprocal(NodeId a);
  NodeId lgamma(NodeId a);

  const Mat& value(NodeId id) const { return nodes_[id].value; }
  const Mat& grad(NodeId id) const;
  bool requires_grad(NodeId id) const { return nodes_[id].needs_grad; }

  // output must be 1x1; fills adjoints of every grad-requiring node.
  void backward(NodeId output);

  size_t size() const { return nodes_.size(); }

 private:
  enum class Op {
    Leaf,
    Add,
    Mul,
    Affine,
    MatMul,
    ConcatCols,
    GatherRows,
    ScatterAddRows,
    ColSum,
    Sum,
    Sigmoid,
    Softplus,
    Tanh,
    Exp,
    Log,
    Log1p,
    Reciprocal,
    Lgamma,
  };

  struct Node {
    Op op = Op::Leaf;
    NodeId in0 = -1;
    NodeId in1 = -1;
    Mat value;
    Mat grad;
    bool needs_grad = false;
    double c0 = 0.0;  // affine scale
    double c1 = 0.0;  // affine shift
    std::vector<int> idx;
  };

  NodeId push(Node n);
  Node& node(NodeId id) { return nodes_[id]; }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamState {
 public:
  AdamState(size_t n, AdamConfig cfg = {}) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<double> params, std::span<const double> grads);
  std::int64_t steps_taken() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::int64_t t_ = 0;
};

}  // namespace delmix
