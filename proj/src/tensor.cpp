#include "bingo/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace bingo {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> v, bool rg)
    : shape(std::move(s)), values(std::move(v)), requires_grad(rg) {
  if (numel(shape) != values.size()) {
    throw InvariantError("Tensor: " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  for (std::size_t d : shape) {
    if (d == 0) throw InvariantError("Tensor: zero dimension in " + shape_str(shape));
  }
}

Tensor Tensor::zeros(Shape s, bool rg) {
  std::size_t n = numel(s);
  return Tensor(std::move(s), std::vector<double>(n, 0.0), rg);
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::vec(std::vector<double> v) {
  Shape s{v.size()};
  return Tensor(std::move(s), std::move(v));
}

Tensor Tensor::row(std::vector<double> v) {
  Shape s{1, v.size()};
  return Tensor(std::move(s), std::move(v));
}

Tensor Tensor::matrix(std::size_t r, std::size_t c, std::vector<double> v) {
  return Tensor({r, c}, std::move(v));
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Relu: return "relu";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sum: return "sum";
    case OpKind::Scale: return "scale";
    case OpKind::ConcatRows: return "concat-rows";
    case OpKind::RowL2Normalize: return "rowwise-l2-normalize";
    case OpKind::DotRows: return "dot-rows";
    case OpKind::LogSoftmaxNll: return "log-softmax-nll";
  }
  return "?";
}

namespace {

std::string node_label(const Node& n, NodeId id) {
  std::string s = std::string(op_name(n.kind)) + "#" + std::to_string(id);
  if (!n.name.empty()) s += " '" + n.name + "'";
  return s;
}

// Rows/cols view of a rank-1 or rank-2 shape: rank-1 {n} counts as one row.
struct RowView {
  std::size_t rows;
  std::size_t cols;
};

RowView row_view(const Shape& s, const char* op) {
  if (s.size() == 1) return {1, s[0]};
  if (s.size() == 2) return {s[0], s[1]};
  throw InvariantError(std::string(op) + ": rank-" + std::to_string(s.size()) +
                       " tensor not supported, want rank 1 or 2");
}

}  // namespace

NodeId Graph::check(NodeId id, const char* op) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
    throw InvariantError(std::string(op) + ": input node id " + std::to_string(id) +
                         " does not exist");
  }
  return id;
}

NodeId Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::input(Shape shape, bool requires_grad, std::string name) {
  if (shape.empty() || numel(shape) == 0) {
    throw InvariantError("input: empty shape");
  }
  Node n;
  n.kind = OpKind::Input;
  n.shape = std::move(shape);
  n.requires_grad = requires_grad;
  n.name = std::move(name);
  return push(std::move(n));
}

NodeId Graph::constant(Tensor value, std::string name) {
  Shape shape = value.shape;
  NodeId id = input(std::move(shape), false, std::move(name));
  value.requires_grad = false;
  value.grad.clear();
  baked_.emplace(id, std::move(value));
  return id;
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Node& na = nodes_[check(a, "matmul")];
  const Node& nb = nodes_[check(b, "matmul")];
  if (na.shape.size() != 2 || nb.shape.size() != 2) {
    throw InvariantError("matmul: both operands must be rank-2, got " +
                         shape_str(na.shape) + " and " + shape_str(nb.shape));
  }
  if (na.shape[1] != nb.shape[0]) {
    throw InvariantError("matmul: inner dimensions disagree, " + shape_str(na.shape) +
                         " * " + shape_str(nb.shape));
  }
  Node n;
  n.kind = OpKind::MatMul;
  n.inputs = {a, b};
  n.shape = {na.shape[0], nb.shape[1]};
  n.requires_grad = na.requires_grad || nb.requires_grad;
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Node& na = nodes_[check(a, "add")];
  const Node& nb = nodes_[check(b, "add")];
  if (na.shape != nb.shape) {
    throw InvariantError("add: shapes disagree, " + shape_str(na.shape) + " vs " +
                         shape_str(nb.shape));
  }
  Node n;
  n.kind = OpKind::Add;
  n.inputs = {a, b};
  n.shape = na.shape;
  n.requires_grad = na.requires_grad || nb.requires_grad;
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const Node& na = nodes_[check(a, "mul")];
  const Node& nb = nodes_[check(b, "mul")];
  if (na.shape != nb.shape) {
    throw InvariantError("mul: shapes disagree, " + shape_str(na.shape) + " vs " +
                         shape_str(nb.shape));
  }
  Node n;
  n.kind = OpKind::Mul;
  n.inputs = {a, b};
  n.shape = na.shape;
  n.requires_grad = na.requires_grad || nb.requires_grad;
  return push(std::move(n));
}

NodeId Graph::relu(NodeId a) {
  const Node& na = nodes_[check(a, "relu")];
  Node n;
  n.kind = OpKind::Relu;
  n.inputs = {a};
  n.shape = na.shape;
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Graph::exp(NodeId a) {
  const Node& na = nodes_[check(a, "exp")];
  Node n;
  n.kind = OpKind::Exp;
  n.inputs = {a};
  n.shape = na.shape;
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Graph::log(NodeId a) {
  const Node& na = nodes_[check(a, "log")];
  Node n;
  n.kind = OpKind::Log;
  n.inputs = {a};
  n.shape = na.shape;
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Graph::sum(NodeId a) {
  const Node& na = nodes_[check(a, "sum")];
  Node n;
  n.kind = OpKind::Sum;
  n.inputs = {a};
  n.shape = {1};
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double factor) {
  const Node& na = nodes_[check(a, "scale")];
  Node n;
  n.kind = OpKind::Scale;
  n.inputs = {a};
  n.shape = na.shape;
  n.requires_grad = na.requires_grad;
  n.scale_factor = factor;
  return push(std::move(n));
}

NodeId Graph::concat_rows(const std::vector<NodeId>& parts) {
  if (parts.empty()) throw InvariantError("concat-rows: no inputs");
  std::size_t rank = nodes_[check(parts[0], "concat-rows")].shape.size();
  if (rank != 1 && rank != 2) {
    throw InvariantError("concat-rows: rank-" + std::to_string(rank) + " not supported");
  }
  std::size_t total_rows = 0;
  std::size_t cols = rank == 2 ? nodes_[parts[0]].shape[1] : 0;
  bool rg = false;
  for (NodeId p : parts) {
    const Node& np = nodes_[check(p, "concat-rows")];
    if (np.shape.size() != rank) {
      throw InvariantError("concat-rows: mixed ranks among inputs");
    }
    if (rank == 2 && np.shape[1] != cols) {
      throw InvariantError("concat-rows: column counts disagree, " +
                           std::to_string(cols) + " vs " + std::to_string(np.shape[1]));
    }
    total_rows += np.shape[0];
    rg = rg || np.requires_grad;
  }
  Node n;
  n.kind = OpKind::ConcatRows;
  n.inputs = parts;
  n.shape = rank == 2 ? Shape{total_rows, cols} : Shape{total_rows};
  n.requires_grad = rg;
  return push(std::move(n));
}

NodeId Graph::row_l2_normalize(NodeId a) {
  const Node& na = nodes_[check(a, "rowwise-l2-normalize")];
  row_view(na.shape, "rowwise-l2-normalize");
  Node n;
  n.kind = OpKind::RowL2Normalize;
  n.inputs = {a};
  n.shape = na.shape;
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Graph::dot_rows(NodeId a, NodeId b) {
  const Node& na = nodes_[check(a, "dot-rows")];
  const Node& nb = nodes_[check(b, "dot-rows")];
  if (na.shape != nb.shape) {
    throw InvariantError("dot-rows: shapes disagree, " + shape_str(na.shape) + " vs " +
                         shape_str(nb.shape));
  }
  RowView rv = row_view(na.shape, "dot-rows");
  Node n;
  n.kind = OpKind::DotRows;
  n.inputs = {a, b};
  n.shape = {rv.rows};
  n.requires_grad = na.requires_grad || nb.requires_grad;
  return push(std::move(n));
}

NodeId Graph::log_softmax_nll(NodeId logits, std::size_t target) {
  const Node& nl = nodes_[check(logits, "log-softmax-nll")];
  bool vector_like = nl.shape.size() == 1 || (nl.shape.size() == 2 && nl.shape[0] == 1);
  if (!vector_like) {
    throw InvariantError("log-softmax-nll: logits must be a vector or single row, got " +
                         shape_str(nl.shape));
  }
  if (target >= numel(nl.shape)) {
    throw InvariantError("log-softmax-nll: target " + std::to_string(target) +
                         " out of range for " + std::to_string(nl.shape[0]) + " logits");
  }
  Node n;
  n.kind = OpKind::LogSoftmaxNll;
  n.inputs = {logits};
  n.shape = {1};
  n.requires_grad = nl.requires_grad;
  n.target = target;
  return push(std::move(n));
}

const Node& Graph::node(NodeId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
    throw InvariantError("node id " + std::to_string(id) + " does not exist");
  }
  return nodes_[static_cast<std::size_t>(id)];
}

const std::vector<double>& Evaluation::grad(NodeId id) const {
  const Tensor& t = values.at(static_cast<std::size_t>(id));
  if (t.grad.empty()) {
    throw InvariantError("no gradient at node " + std::to_string(id) +
                         " (not on a differentiable path, or backpropagate not run)");
  }
  return t.grad;
}

namespace {

// C[m x n] += A[m x k] * B[k x n]
void matmul_accumulate(const double* a, std::size_t m, std::size_t k, const double* b,
                       std::size_t n, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void check_finite(const Tensor& t, const Node& n, NodeId id) {
  for (std::size_t i = 0; i < t.values.size(); ++i) {
    if (!std::isfinite(t.values[i])) {
      throw NumericError("non-finite value at node " + node_label(n, id) +
                         ", flat index " + std::to_string(i));
    }
  }
}

void forward_node(const Graph& g, const Node& n, NodeId id, Evaluation& ev) {
  auto& out = ev.values[static_cast<std::size_t>(id)];
  out.shape = n.shape;
  out.requires_grad = n.requires_grad;
  out.values.assign(numel(n.shape), 0.0);
  auto in = [&](std::size_t i) -> const Tensor& {
    return ev.values[static_cast<std::size_t>(n.inputs[i])];
  };
  switch (n.kind) {
    case OpKind::Input:
      break;  // handled by the binding pass
    case OpKind::MatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      matmul_accumulate(a.values.data(), a.shape[0], a.shape[1], b.values.data(),
                        b.shape[1], out.values.data());
      break;
    }
    case OpKind::Add: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = a.values[i] + b.values[i];
      break;
    }
    case OpKind::Mul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = a.values[i] * b.values[i];
      break;
    }
    case OpKind::Relu: {
      const Tensor& a = in(0);
      for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = a.values[i] > 0.0 ? a.values[i] : 0.0;
      break;
    }
    case OpKind::Exp: {
      const Tensor& a = in(0);
      for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = std::exp(a.values[i]);
      break;
    }
    case OpKind::Log: {
      const Tensor& a = in(0);
      for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = std::log(a.values[i]);
      break;
    }
    case OpKind::Sum: {
      const Tensor& a = in(0);
      double s = 0.0;
      for (double v : a.values) s += v;
      out.values[0] = s;
      break;
    }
    case OpKind::Scale: {
      const Tensor& a = in(0);
      for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = n.scale_factor * a.values[i];
      break;
    }
    case OpKind::ConcatRows: {
      std::size_t offset = 0;
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        const Tensor& part = in(i);
        std::copy(part.values.begin(), part.values.end(), out.values.begin() + offset);
        offset += part.values.size();
      }
      break;
    }
    case OpKind::RowL2Normalize: {
      const Tensor& a = in(0);
      RowView rv = row_view(a.shape, "rowwise-l2-normalize");
      for (std::size_t r = 0; r < rv.rows; ++r) {
        const double* x = a.values.data() + r * rv.cols;
        double* y = out.values.data() + r * rv.cols;
        double nsq = 0.0;
        for (std::size_t j = 0; j < rv.cols; ++j) nsq += x[j] * x[j];
        double nrm = std::sqrt(nsq);
        if (nrm < kDegenerateRowNorm) {
          std::copy(x, x + rv.cols, y);
          ev.degenerate_rows.push_back({id, r});
        } else {
          for (std::size_t j = 0; j < rv.cols; ++j) y[j] = x[j] / nrm;
        }
      }
      break;
    }
    case OpKind::DotRows: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      RowView rv = row_view(a.shape, "dot-rows");
      for (std::size_t r = 0; r < rv.rows; ++r) {
        const double* xa = a.values.data() + r * rv.cols;
        const double* xb = b.values.data() + r * rv.cols;
        double s = 0.0;
        for (std::size_t j = 0; j < rv.cols; ++j) s += xa[j] * xb[j];
        out.values[r] = s;
      }
      break;
    }
    case OpKind::LogSoftmaxNll: {
      const Tensor& a = in(0);
      double mx = a.values[0];
      for (double v : a.values) mx = std::max(mx, v);
      double se = 0.0;
      for (double v : a.values) se += std::exp(v - mx);
      out.values[0] = (mx + std::log(se)) - a.values[n.target];
      break;
    }
  }
}

void backward_node(const Graph& g, const Node& n, NodeId id, Evaluation& ev) {
  const Tensor& out = ev.values[static_cast<std::size_t>(id)];
  auto in_val = [&](std::size_t i) -> const Tensor& {
    return ev.values[static_cast<std::size_t>(n.inputs[i])];
  };
  auto in_grad = [&](std::size_t i) -> std::vector<double>* {
    Tensor& t = ev.values[static_cast<std::size_t>(n.inputs[i])];
    if (!t.requires_grad) return nullptr;
    if (t.grad.empty()) t.grad.assign(t.values.size(), 0.0);
    return &t.grad;
  };
  const std::vector<double>& g_out = out.grad;
  switch (n.kind) {
    case OpKind::Input:
      break;
    case OpKind::MatMul: {
      const Tensor& a = in_val(0);
      const Tensor& b = in_val(1);
      std::size_t m = a.shape[0], k = a.shape[1], nn = b.shape[1];
      if (auto* ga = in_grad(0)) {
        // dA = dC * B^T
        for (std::size_t i = 0; i < m; ++i) {
          const double* gc = g_out.data() + i * nn;
          double* garow = ga->data() + i * k;
          for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b.values.data() + p * nn;
            double s = 0.0;
            for (std::size_t j = 0; j < nn; ++j) s += gc[j] * brow[j];
            garow[p] += s;
          }
        }
      }
      if (auto* gb = in_grad(1)) {
        // dB = A^T * dC
        for (std::size_t i = 0; i < m; ++i) {
          const double* arow = a.values.data() + i * k;
          const double* gc = g_out.data() + i * nn;
          for (std::size_t p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            double* gbrow = gb->data() + p * nn;
            for (std::size_t j = 0; j < nn; ++j) gbrow[j] += av * gc[j];
          }
        }
      }
      break;
    }
    case OpKind::Add: {
      for (std::size_t which = 0; which < 2; ++which) {
        if (auto* gi = in_grad(which)) {
          for (std::size_t i = 0; i < g_out.size(); ++i) (*gi)[i] += g_out[i];
        }
      }
      break;
    }
    case OpKind::Mul: {
      const Tensor& a = in_val(0);
      const Tensor& b = in_val(1);
      if (auto* ga = in_grad(0)) {
        for (std::size_t i = 0; i < g_out.size(); ++i) (*ga)[i] += g_out[i] * b.values[i];
      }
      if (auto* gb = in_grad(1)) {
        for (std::size_t i = 0; i < g_out.size(); ++i) (*gb)[i] += g_out[i] * a.values[i];
      }
      break;
    }
    case OpKind::Relu: {
      const Tensor& a = in_val(0);
      if (auto* ga = in_grad(0)) {
        // subgradient at exactly 0 is 0
        for (std::size_t i = 0; i < g_out.size(); ++i)
          if (a.values[i] > 0.0) (*ga)[i] += g_out[i];
      }
      break;
    }
    case OpKind::Exp: {
      if (auto* ga = in_grad(0)) {
        for (std::size_t i = 0; i < g_out.size(); ++i) (*ga)[i] += g_out[i] * out.values[i];
      }
      break;
    }
    case OpKind::Log: {
      const Tensor& a = in_val(0);
      if (auto* ga = in_grad(0)) {
        for (std::size_t i = 0; i < g_out.size(); ++i) (*ga)[i] += g_out[i] / a.values[i];
      }
      break;
    }
    case OpKind::Sum: {
      if (auto* ga = in_grad(0)) {
        double gv = g_out[0];
        for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += gv;
      }
      break;
    }
    case OpKind::Scale: {
      if (auto* ga = in_grad(0)) {
        for (std::size_t i = 0; i < g_out.size(); ++i)
          (*ga)[i] += n.scale_factor * g_out[i];
      }
      break;
    }
    case OpKind::ConcatRows: {
      std::size_t offset = 0;
      for (std::size_t which = 0; which < n.inputs.size(); ++which) {
        std::size_t len = in_val(which).values.size();
        if (auto* gi = in_grad(which)) {
          for (std::size_t i = 0; i < len; ++i) (*gi)[i] += g_out[offset + i];
        }
        offset += len;
      }
      break;
    }
    case OpKind::RowL2Normalize: {
      const Tensor& a = in_val(0);
      auto* ga = in_grad(0);
      if (!ga) break;
      RowView rv = row_view(a.shape, "rowwise-l2-normalize");
      for (std::size_t r = 0; r < rv.rows; ++r) {
        const double* x = a.values.data() + r * rv.cols;
        const double* y = out.values.data() + r * rv.cols;
        const double* gy = g_out.data() + r * rv.cols;
        double* gx = ga->data() + r * rv.cols;
        double nsq = 0.0;
        for (std::size_t j = 0; j < rv.cols; ++j) nsq += x[j] * x[j];
        double nrm = std::sqrt(nsq);
        if (nrm < kDegenerateRowNorm) {
          for (std::size_t j = 0; j < rv.cols; ++j) gx[j] += gy[j];
        } else {
          double proj = 0.0;
          for (std::size_t j = 0; j < rv.cols; ++j) proj += gy[j] * y[j];
          for (std::size_t j = 0; j < rv.cols; ++j) gx[j] += (gy[j] - proj * y[j]) / nrm;
        }
      }
      break;
    }
    case OpKind::DotRows: {
      const Tensor& a = in_val(0);
      const Tensor& b = in_val(1);
      RowView rv = row_view(a.shape, "dot-rows");
      auto* ga = in_grad(0);
      auto* gb = in_grad(1);
      for (std::size_t r = 0; r < rv.rows; ++r) {
        double gv = g_out[r];
        if (gv == 0.0) continue;
        const double* xa = a.values.data() + r * rv.cols;
        const double* xb = b.values.data() + r * rv.cols;
        if (ga) {
          double* gar = ga->data() + r * rv.cols;
          for (std::size_t j = 0; j < rv.cols; ++j) gar[j] += gv * xb[j];
        }
        if (gb) {
          double* gbr = gb->data() + r * rv.cols;
          for (std::size_t j = 0; j < rv.cols; ++j) gbr[j] += gv * xa[j];
        }
      }
      break;
    }
    case OpKind::LogSoftmaxNll: {
      const Tensor& a = in_val(0);
      auto* ga = in_grad(0);
      if (!ga) break;
      double mx = a.values[0];
      for (double v : a.values) mx = std::max(mx, v);
      double se = 0.0;
      for (double v : a.values) se += std::exp(v - mx);
      double gv = g_out[0];
      for (std::size_t i = 0; i < a.values.size(); ++i) {
        double p = std::exp(a.values[i] - mx) / se;
        (*ga)[i] += gv * (p - (i == n.target ? 1.0 : 0.0));
      }
      break;
    }
  }
}

}  // namespace

Evaluation evaluate(const Graph& g, const std::map<NodeId, Tensor>& bindings) {
  for (const auto& [id, t] : bindings) {
    const Node& n = g.node(id);
    if (n.kind != OpKind::Input) {
      throw InvariantError("binding for non-input node " + node_label(n, id));
    }
    if (g.baked_bindings().count(id)) {
      throw InvariantError("binding overrides constant node " + node_label(n, id));
    }
    if (t.shape != n.shape) {
      throw InvariantError("binding for " + node_label(n, id) + " has shape " +
                           shape_str(t.shape) + ", node wants " + shape_str(n.shape));
    }
  }
  Evaluation ev;
  ev.values.resize(g.node_count());
  for (NodeId id = 0; static_cast<std::size_t>(id) < g.node_count(); ++id) {
    const Node& n = g.node(id);
    if (n.kind == OpKind::Input) {
      auto baked = g.baked_bindings().find(id);
      if (baked != g.baked_bindings().end()) {
        ev.values[static_cast<std::size_t>(id)] = baked->second;
      } else {
        auto bound = bindings.find(id);
        if (bound == bindings.end()) {
          throw InvariantError("input node " + node_label(n, id) + " not bound");
        }
        ev.values[static_cast<std::size_t>(id)] = bound->second;
      }
      Tensor& t = ev.values[static_cast<std::size_t>(id)];
      t.requires_grad = n.requires_grad;
      t.grad.clear();
    } else {
      forward_node(g, n, id, ev);
    }
    check_finite(ev.values[static_cast<std::size_t>(id)], n, id);
  }
  return ev;
}

void backpropagate(const Graph& g, Evaluation& ev, NodeId loss) {
  if (ev.values.size() != g.node_count()) {
    throw InvariantError("backpropagate: graph not evaluated (have " +
                         std::to_string(ev.values.size()) + " node values, graph has " +
                         std::to_string(g.node_count()) + " nodes)");
  }
  const Node& loss_node = g.node(loss);
  Tensor& loss_val = ev.values[static_cast<std::size_t>(loss)];
  if (loss_val.size() != 1) {
    throw InvariantError("backpropagate: loss " + node_label(loss_node, loss) +
                         " is not scalar, shape " + shape_str(loss_val.shape));
  }
  for (auto& t : ev.values) t.grad.clear();
  loss_val.grad.assign(1, 1.0);
  for (NodeId id = loss; id >= 0; --id) {
    Tensor& t = ev.values[static_cast<std::size_t>(id)];
    if (t.grad.empty()) continue;
    backward_node(g, g.node(id), id, ev);
  }
}

double finite_difference_check(const Graph& g, const std::map<NodeId, Tensor>& bindings,
                               NodeId loss, NodeId param, double epsilon) {
  if (!(epsilon > 0.0)) throw InvariantError("finite_difference_check: epsilon must be > 0");
  const Node& pnode = g.node(param);
  if (pnode.kind != OpKind::Input || !pnode.requires_grad) {
    throw InvariantError("finite_difference_check: param must be a requires-grad input");
  }
  if (!bindings.count(param)) {
    throw InvariantError("finite_difference_check: param node is not bound");
  }
  Evaluation ev = evaluate(g, bindings);
  backpropagate(g, ev, loss);
  const std::vector<double>& analytic = ev.grad(param);

  std::map<NodeId, Tensor> work = bindings;
  Tensor& pt = work[param];
  double max_rel = 0.0;
  for (std::size_t i = 0; i < pt.values.size(); ++i) {
    double saved = pt.values[i];
    pt.values[i] = saved + epsilon;
    double up = evaluate(g, work).value(loss).values[0];
    pt.values[i] = saved - epsilon;
    double down = evaluate(g, work).value(loss).values[0];
    pt.values[i] = saved;
    double central = (up - down) / (2.0 * epsilon);
    double rel = std::abs(analytic[i] - central) / std::max(1e-12, std::abs(central));
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace bingo
