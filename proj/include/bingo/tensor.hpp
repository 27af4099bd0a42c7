#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bingo/errors.hpp"

namespace bingo {

using NodeId = std::int32_t;
inline constexpr NodeId kNoNode = -1;

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major tensor of 64-bit reals. `grad` is filled by backpropagate()
// for nodes on a differentiable path and has the same length as `values`.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> v, bool rg = false);

  static Tensor zeros(Shape s, bool rg = false);
  static Tensor scalar(double v);
  static Tensor vec(std::vector<double> v);                               // shape {n}
  static Tensor row(std::vector<double> v);                               // shape {1, n}
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v);

  std::size_t size() const { return values.size(); }
};

enum class OpKind : std::uint8_t {
  Input,
  MatMul,
  Add,
  Mul,
  Relu,
  Exp,
  Log,
  Sum,
  Scale,
  ConcatRows,
  RowL2Normalize,
  DotRows,
  LogSoftmaxNll,
};

const char* op_name(OpKind kind);

struct Node {
  OpKind kind = OpKind::Input;
  std::vector<NodeId> inputs;
  Shape shape;
  bool requires_grad = false;
  double scale_factor = 1.0;   // Scale only
  std::size_t target = 0;      // LogSoftmaxNll only
  std::string name;            // optional, used in error messages
};

// Immutable-after-construction compute graph. Nodes reference strictly earlier
// nodes, so node ids are already a topological order. Shape inference runs at
// construction; evaluate() can only fail on bindings or numerics.
class Graph {
 public:
  NodeId input(Shape shape, bool requires_grad = false, std::string name = {});
  // An input node with its binding baked into the graph (used for per-step
  // view/key/negative constants). Never differentiable.
  NodeId constant(Tensor value, std::string name = {});

  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId relu(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId sum(NodeId a);
  NodeId scale(NodeId a, double factor);
  NodeId concat_rows(const std::vector<NodeId>& parts);
  NodeId row_l2_normalize(NodeId a);
  NodeId dot_rows(NodeId a, NodeId b);
  NodeId log_softmax_nll(NodeId logits, std::size_t target);

  const Node& node(NodeId id) const;
  std::size_t node_count() const { return nodes_.size(); }
  const std::map<NodeId, Tensor>& baked_bindings() const { return baked_; }

 private:
  NodeId check(NodeId id, const char* op) const;
  NodeId push(Node n);

  std::vector<Node> nodes_;
  std::map<NodeId, Tensor> baked_;
};

// Pre-normalization row norm below this makes RowL2Normalize pass the row
// through unchanged and flag it; loss paths treat the flag as an error.
inline constexpr double kDegenerateRowNorm = 1e-8;

struct DegenerateRow {
  NodeId node;
  std::size_t row;
};

// Result of one evaluate() pass: per-node outputs, plus gradients after
// backpropagate(). Indexed by NodeId.
struct Evaluation {
  std::vector<Tensor> values;
  std::vector<DegenerateRow> degenerate_rows;

  const Tensor& value(NodeId id) const { return values.at(static_cast<std::size_t>(id)); }
  // Gradient of the loss w.r.t. a node; throws if backpropagate has not
  // produced one for it.
  const std::vector<double>& grad(NodeId id) const;
};

Evaluation evaluate(const Graph& g, const std::map<NodeId, Tensor>& bindings);

void backpropagate(const Graph& g, Evaluation& ev, NodeId loss);

// Max over components of |analytic - central difference| / max(1e-12, |central|)
// for the gradient of `loss` w.r.t. the bound input `param`.
double finite_difference_check(const Graph& g, const std::map<NodeId, Tensor>& bindings,
                               NodeId loss, NodeId param, double epsilon);

}  // namespace bingo
