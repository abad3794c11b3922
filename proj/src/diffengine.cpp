#include "delmix/diffengine.hpp"

#include <boost/math/special_functions/digamma.hpp>

#include <algorithm>
#include <cmath>

namespace delmix {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); }

double sigmoid(double x) {
  if (x >= 0.0) {
    const double z = std::exp(-x);
    return 1.0 / (1.0 + z);
  }
  const double z = std::exp(x);
  return z / (1.0 + z);
}

double inv_softplus(double y) {
  // log(e^y - 1), stable for both tails.
  if (y > 30.0) return y;
  return std::log(std::expm1(y));
}

namespace {

enum class Broadcast { None, Scalar, Row, Col };

bool can_broadcast(const Mat& big, const Mat& small) {
  if (big.same_shape(small)) return true;
  if (small.rows == 1 && small.cols == 1) return true;
  if (small.rows == 1 && small.cols == big.cols) return true;
  if (small.cols == 1 && small.rows == big.rows) return true;
  return false;
}

Broadcast broadcast_kind(const Mat& big, const Mat& small) {
  if (big.same_shape(small)) return Broadcast::None;
  if (small.rows == 1 && small.cols == 1) return Broadcast::Scalar;
  if (small.rows == 1 && small.cols == big.cols) return Broadcast::Row;
  if (small.cols == 1 && small.rows == big.rows) return Broadcast::Col;
  throw ShapeMismatch("incompatible shapes " + std::to_string(big.rows) + "x" +
                      std::to_string(big.cols) + " vs " + std::to_string(small.rows) + "x" +
                      std::to_string(small.cols));
}

double broadcast_at(const Mat& m, Broadcast b, int i, int j) {
  switch (b) {
    case Broadcast::None:
      return m.at(i, j);
    case Broadcast::Scalar:
      return m.a[0];
    case Broadcast::Row:
      return m.at(0, j);
    case Broadcast::Col:
      return m.at(i, 0);
  }
  return 0.0;
}

void broadcast_accumulate(Mat& gsmall, Broadcast b, int i, int j, double g) {
  switch (b) {
    case Broadcast::None:
      gsmall.at(i, j) += g;
      break;
    case Broadcast::Scalar:
      gsmall.a[0] += g;
      break;
    case Broadcast::Row:
      gsmall.at(0, j) += g;
      break;
    case Broadcast::Col:
      gsmall.at(i, 0) += g;
      break;
  }
}

}  // namespace

NodeId Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::constant(Mat v) {
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(v);
  n.needs_grad = false;
  return push(std::move(n));
}

NodeId Tape::param(Mat v) {
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(v);
  n.needs_grad = true;
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  const Mat& va = nodes_[a].value;
  const Mat& vb = nodes_[b].value;
  // Arrange so the first operand carries the output shape.
  if (!can_broadcast(va, vb) && can_broadcast(vb, va)) return add(b, a);
  Broadcast bk = broadcast_kind(va, vb);
  Node n;
  n.op = Op::Add;
  n.in0 = a;
  n.in1 = b;
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  n.value = Mat(va.rows, va.cols);
  for (int i = 0; i < va.rows; ++i)
    for (int j = 0; j < va.cols; ++j)
      n.value.at(i, j) = va.at(i, j) + broadcast_at(vb, bk, i, j);
  return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
  const Mat& va = nodes_[a].value;
  const Mat& vb = nodes_[b].value;
  if (!can_broadcast(va, vb) && can_broadcast(vb, va)) return mul(b, a);
  Broadcast bk = broadcast_kind(va, vb);
  Node n;
  n.op = Op::Mul;
  n.in0 = a;
  n.in1 = b;
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  n.value = Mat(va.rows, va.cols);
  for (int i = 0; i < va.rows; ++i)
    for (int j = 0; j < va.cols; ++j)
      n.value.at(i, j) = va.at(i, j) * broadcast_at(vb, bk, i, j);
  return push(std::move(n));
}

NodeId Tape::affine(NodeId x, double scale, double shift) {
  const Mat& v = nodes_[x].value;
  Node n;
  n.op = Op::Affine;
  n.in0 = x;
  n.c0 = scale;
  n.c1 = shift;
  n.needs_grad = nodes_[x].needs_grad;
  n.value = Mat(v.rows, v.cols);
  for (int k = 0; k < v.size(); ++k) n.value.a[k] = scale * v.a[k] + shift;
  return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  const Mat& va = nodes_[a].value;
  const Mat& vb = nodes_[b].value;
  if (va.cols != vb.rows)
    throw ShapeMismatch("matmul " + std::to_string(va.rows) + "x" + std::to_string(va.cols) +
                        " * " + std::to_string(vb.rows) + "x" + std::to_string(vb.cols));
  Node n;
  n.op = Op::MatMul;
  n.in0 = a;
  n.in1 = b;
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  n.value = Mat(va.rows, vb.cols);
  for (int i = 0; i < va.rows; ++i) {
    for (int k = 0; k < va.cols; ++k) {
      const double aik = va.at(i, k);
      if (aik == 0.0) continue;
      const double* brow = vb.a.data() + static_cast<size_t>(k) * vb.cols;
      double* orow = n.value.a.data() + static_cast<size_t>(i) * vb.cols;
      for (int j = 0; j < vb.cols; ++j) orow[j] += aik * brow[j];
    }
  }
  return push(std::move(n));
}

NodeId Tape::concat_cols(NodeId a, NodeId b) {
  const Mat& va = nodes_[a].value;
  const Mat& vb = nodes_[b].value;
  if (va.rows != vb.rows) throw ShapeMismatch("concat_cols row mismatch");
  Node n;
  n.op = Op::ConcatCols;
  n.in0 = a;
  n.in1 = b;
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  n.value = Mat(va.rows, va.cols + vb.cols);
  for (int i = 0; i < va.rows; ++i) {
    for (int j = 0; j < va.cols; ++j) n.value.at(i, j) = va.at(i, j);
    for (int j = 0; j < vb.cols; ++j) n.value.at(i, va.cols + j) = vb.at(i, j);
  }
  return push(std::move(n));
}

NodeId Tape::gather_rows(NodeId a, std::vector<int> idx) {
  const Mat& va = nodes_[a].value;
  for (int r : idx)
    if (r < 0 || r >= va.rows) throw ShapeMismatch("gather_rows index out of range");
  Node n;
  n.op = Op::GatherRows;
  n.in0 = a;
  n.needs_grad = nodes_[a].needs_grad;
  n.value = Mat(static_cast<int>(idx.size()), va.cols);
  for (size_t i = 0; i < idx.size(); ++i)
    for (int j = 0; j < va.cols; ++j) n.value.at(static_cast<int>(i), j) = va.at(idx[i], j);
  n.idx = std::move(idx);
  return push(std::move(n));
}

NodeId Tape::scatter_add_rows(NodeId a, std::vector<int> idx, int out_rows) {
  const Mat& va = nodes_[a].value;
  if (static_cast<int>(idx.size()) != va.rows)
    throw ShapeMismatch("scatter_add_rows needs one target per input row");
  for (int r : idx)
    if (r < 0 || r >= out_rows) throw ShapeMismatch("scatter_add_rows index out of range");
  Node n;
  n.op = Op::ScatterAddRows;
  n.in0 = a;
  n.needs_grad = nodes_[a].needs_grad;
  n.value = Mat(out_rows, va.cols);
  for (int i = 0; i < va.rows; ++i)
    for (int j = 0; j < va.cols; ++j) n.value.at(idx[i], j) += va.at(i, j);
  n.idx = std::move(idx);
  return push(std::move(n));
}

NodeId Tape::colsum(NodeId a) {
  const Mat& va = nodes_[a].value;
  Node n;
  n.op = Op::ColSum;
  n.in0 = a;
  n.needs_grad = nodes_[a].needs_grad;
  n.value = Mat(1, va.cols);
  for (int i = 0; i < va.rows; ++i)
    for (int j = 0; j < va.cols; ++j) n.value.at(0, j) += va.at(i, j);
  return push(std::move(n));
}

NodeId Tape::sum(NodeId a) {
  const Mat& va = nodes_[a].value;
  Node n;
  n.op = Op::Sum;
  n.in0 = a;
  n.needs_grad = nodes_[a].needs_grad;
  double s = 0.0;
  for (double v : va.a) s += v;
  n.value = Mat::scalar(s);
  return push(std::move(n));
}

namespace {
template <typename F>
Mat map_mat(const Mat& v, F f) {
  Mat out(v.rows, v.cols);
  for (int k = 0; k < v.size(); ++k) out.a[k] = f(v.a[k]);
  return out;
}
}  // namespace

NodeId Tape::sigmoid(NodeId a) {
  Node n;
  n.op = Op::Sigmoid;
  n.in0 = a;
  n.needs_grad = nodes_[a].needs_grad;
  n.value = map_mat(nodes_[a].value, [](double x) { return delmix::sigmoid(x); });
  return push(std::move(n));
}

NodeId Tape::softplus(NodeId a) {
  Node n;
  n.op = Op::Softplus;
  n.in0 = a;
  n.needs_grad = nodes_[a].needs_grad;
  n.value = map_mat(nodes_[a].value, [](double x) { return delmix::softplus(x); });
  return push(std::move(n));
}

NodeId Tape::tanh(NodeId a) {
  Node n;
  n.op = Op::Tanh;
  n.in0 = a;
  n.needs_grad = nodes_[a].needs_grad;
  n.value = map_mat(nodes_[a].value, [](double x) { return std::tanh(x); });
  return push(std::move(n));
}

NodeId Tape::exp(NodeId a) {
  Node n;
  n.op = Op::Exp;
  n.in0 = a;
  n.needs_grad = nodes_[a].needs_grad;
  n.value = map_mat(nodes_[a].value, [](double x) { return std::exp(x); });
  return push(std::move(n));
}

NodeId Tape::log(NodeId a) {
  Node n;
  n.op = Op::Log;
  n.in0 = a;
  n.needs_grad = nodes_[a].needs_grad;
  n.value = map_mat(nodes_[a].value, [](double x) { return std::log(x); });
  return push(std::move(n));
}

NodeId Tape::log1p(NodeId a) {
  Node n;
  n.op = Op::Log1p;
  n.in0 = a;
  n.needs_grad = nodes_[a].needs_grad;
  n.value = map_mat(nodes_[a].value, [](double x) { return std::log1p(x); });
  return push(std::move(n));
}

NodeId Tape::reciprocal(NodeId a) {
  Node n;
  n.op = Op::Reciprocal;
  n.in0 = a;
  n.needs_grad = nodes_[a].needs_grad;
  n.value = map_mat(nodes_[a].value, [](double x) { return 1.0 / x; });
  return push(std::move(n));
}

NodeId Tape::lgamma(NodeId a) {
  Node n;
  n.op = Op::Lgamma;
  n.in0 = a;
  n.needs_grad = nodes_[a].needs_grad;
  n.value = map_mat(nodes_[a].value, [](double x) { return std::lgamma(x); });
  return push(std::move(n));
}

const Mat& Tape::grad(NodeId id) const {
  if (!backward_done_) throw TapeError("grad queried before backward");
  return nodes_[id].grad;
}

void Tape::backward(NodeId output) {
  if (backward_done_) throw TapeReused("backward called twice on the same tape");
  const Mat& out = nodes_[output].value;
  if (out.rows != 1 || out.cols != 1)
    throw NonScalarOutput("backward output must be a scalar node");
  backward_done_ = true;

  for (auto& n : nodes_)
    if (n.needs_grad) n.grad = Mat(n.value.rows, n.value.cols);
  if (!nodes_[output].needs_grad) return;  // constant objective: all adjoints zero
  nodes_[output].grad.a[0] = 1.0;

  for (NodeId id = output; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.op == Op::Leaf) continue;
    const Mat& g = n.grad;
    switch (n.op) {
      case Op::Add: {
        Node& a = nodes_[n.in0];
        Node& b = nodes_[n.in1];
        if (a.needs_grad)
          for (int k = 0; k < g.size(); ++k) a.grad.a[k] += g.a[k];
        if (b.needs_grad) {
          Broadcast bk = broadcast_kind(a.value, b.value);
          for (int i = 0; i < g.rows; ++i)
            for (int j = 0; j < g.cols; ++j) broadcast_accumulate(b.grad, bk, i, j, g.at(i, j));
        }
        break;
      }
      case Op::Mul: {
        Node& a = nodes_[n.in0];
        Node& b = nodes_[n.in1];
        Broadcast bk = broadcast_kind(a.value, b.value);
        if (a.needs_grad)
          for (int i = 0; i < g.rows; ++i)
            for (int j = 0; j < g.cols; ++j)
              a.grad.at(i, j) += g.at(i, j) * broadcast_at(b.value, bk, i, j);
        if (b.needs_grad)
          for (int i = 0; i < g.rows; ++i)
            for (int j = 0; j < g.cols; ++j)
              broadcast_accumulate(b.grad, bk, i, j, g.at(i, j) * a.value.at(i, j));
        break;
      }
      case Op::Affine: {
        Node& a = nodes_[n.in0];
        for (int k = 0; k < g.size(); ++k) a.grad.a[k] += n.c0 * g.a[k];
        break;
      }
      case Op::MatMul: {
        Node& a = nodes_[n.in0];
        Node& b = nodes_[n.in1];
        // dA = g * B^T ; dB = A^T * g
        if (a.needs_grad) {
          const Mat& vb = b.value;
          for (int i = 0; i < a.value.rows; ++i)
            for (int k = 0; k < a.value.cols; ++k) {
              double acc = 0.0;
              const double* grow = g.a.data() + static_cast<size_t>(i) * g.cols;
              const double* brow = vb.a.data() + static_cast<size_t>(k) * vb.cols;
              for (int j = 0; j < g.cols; ++j) acc += grow[j] * brow[j];
              a.grad.at(i, k) += acc;
            }
        }
        if (b.needs_grad) {
          const Mat& va = a.value;
          for (int i = 0; i < va.rows; ++i) {
            const double* grow = g.a.data() + static_cast<size_t>(i) * g.cols;
            for (int k = 0; k < va.cols; ++k) {
              const double aik = va.at(i, k);
              if (aik == 0.0) continue;
              double* brow = b.grad.a.data() + static_cast<size_t>(k) * g.cols;
              for (int j = 0; j < g.cols; ++j) brow[j] += aik * grow[j];
            }
          }
        }
        break;
      }
      case Op::ConcatCols: {
        Node& a = nodes_[n.in0];
        Node& b = nodes_[n.in1];
        const int ca = a.value.cols;
        if (a.needs_grad)
          for (int i = 0; i < g.rows; ++i)
            for (int j = 0; j < ca; ++j) a.grad.at(i, j) += g.at(i, j);
        if (b.needs_grad)
          for (int i = 0; i < g.rows; ++i)
            for (int j = 0; j < b.value.cols; ++j) b.grad.at(i, j) += g.at(i, ca + j);
        break;
      }
      case Op::GatherRows: {
        Node& a = nodes_[n.in0];
        for (size_t i = 0; i < n.idx.size(); ++i)
          for (int j = 0; j < g.cols; ++j) a.grad.at(n.idx[i], j) += g.at(static_cast<int>(i), j);
        break;
      }
      case Op::ScatterAddRows: {
        Node& a = nodes_[n.in0];
        for (size_t i = 0; i < n.idx.size(); ++i)
          for (int j = 0; j < g.cols; ++j) a.grad.at(static_cast<int>(i), j) += g.at(n.idx[i], j);
        break;
      }
      case Op::ColSum: {
        Node& a = nodes_[n.in0];
        for (int i = 0; i < a.value.rows; ++i)
          for (int j = 0; j < g.cols; ++j) a.grad.at(i, j) += g.at(0, j);
        break;
      }
      case Op::Sum: {
        Node& a = nodes_[n.in0];
        for (int k = 0; k < a.value.size(); ++k) a.grad.a[k] += g.a[0];
        break;
      }
      case Op::Sigmoid: {
        Node& a = nodes_[n.in0];
        for (int k = 0; k < g.size(); ++k) {
          const double s = n.value.a[k];
          a.grad.a[k] += g.a[k] * s * (1.0 - s);
        }
        break;
      }
      case Op::Softplus: {
        Node& a = nodes_[n.in0];
        for (int k = 0; k < g.size(); ++k)
          a.grad.a[k] += g.a[k] * delmix::sigmoid(a.value.a[k]);
        break;
      }
      case Op::Tanh: {
        Node& a = nodes_[n.in0];
        for (int k = 0; k < g.size(); ++k) {
          const double t = n.value.a[k];
          a.grad.a[k] += g.a[k] * (1.0 - t * t);
        }
        break;
      }
      case Op::Exp: {
        Node& a = nodes_[n.in0];
        for (int k = 0; k < g.size(); ++k) a.grad.a[k] += g.a[k] * n.value.a[k];
        break;
      }
      case Op::Log: {
        Node& a = nodes_[n.in0];
        for (int k = 0; k < g.size(); ++k) a.grad.a[k] += g.a[k] / a.value.a[k];
        break;
      }
      case Op::Log1p: {
        Node& a = nodes_[n.in0];
        for (int k = 0; k < g.size(); ++k) a.grad.a[k] += g.a[k] / (1.0 + a.value.a[k]);
        break;
      }
      case Op::Reciprocal: {
        Node& a = nodes_[n.in0];
        for (int k = 0; k < g.size(); ++k) {
          const double r = n.value.a[k];
          a.grad.a[k] -= g.a[k] * r * r;
        }
        break;
      }
      case Op::Lgamma: {
        Node& a = nodes_[n.in0];
        for (int k = 0; k < g.size(); ++k)
          a.grad.a[k] += g.a[k] * boost::math::digamma(a.value.a[k]);
        break;
      }
      case Op::Leaf:
        break;
    }
  }
}

void AdamState::step(std::span<double> params, std::span<const double> grads) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw ShapeMismatch("adam step size mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < m_.size(); ++i) {
    const double g = grads[i];
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
    const double mhat = m_[i] / bc1;
    const double vhat = v_[i] / bc2;
    params[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
  }
}

}  // namespace delmix
