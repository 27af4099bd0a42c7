#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "bingo/augment.hpp"
#include "bingo/matrix.hpp"
#include "bingo/membank.hpp"
#include "bingo/nets.hpp"
#include "bingo/tensor.hpp"

namespace bingo {

struct LossInputs {
  std::vector<double> query;    // unit D-vector, the differentiable side
  std::vector<double> key_pos;  // unit D-vector, constant
  Matrix negatives;             // M x D bank snapshot, constant
  double tau = 0.2;

  void validate() const;
};

// Negatives appended once per graph and shared by every anchor block. `ones`
// tiles a query row to M rows so dot-rows can score it against the bank.
struct NegativesBlock {
  NodeId rows = kNoNode;
  NodeId ones = kNoNode;
  std::size_t count = 0;
};

NegativesBlock add_negatives(Graph& g, const Matrix& negatives);

// -log( exp(q.k+/tau) / (exp(q.k+/tau) + sum_j exp(q.k_j-/tau)) ), built as a
// temperature-scaled log-softmax-nll over [positive | negatives] logits (max
// subtraction lives inside that node). Gradients flow through the query only.
NodeId append_info_nce(Graph& g, NodeId query_row, NodeId key_pos_row,
                       const NegativesBlock& negs, double tau);

struct InfoNceGraph {
  Graph graph;
  NodeId query = kNoNode;
  NodeId loss = kNoNode;
  std::map<NodeId, Tensor> bindings;
};

InfoNceGraph build_info_nce(const LossInputs& in);
double info_nce(const LossInputs& in);

// One anchor's distillation block appended to an existing training graph.
// `t3_positive` empty builds the intra term only.
struct AnchorLossNodes {
  NodeId intra = kNoNode;
  NodeId inter = kNoNode;
  NodeId combined = kNoNode;
};

AnchorLossNodes append_anchor_loss(Graph& g, const EncoderSpec& spec,
                                   const EncoderGraphRefs& student,
                                   const std::vector<double>& t1_anchor,
                                   const std::vector<double>& t3_positive,
                                   std::span<const double> teacher_key,
                                   const NegativesBlock& negs, double tau,
                                   double lambda_inter);

// Teacher embedding of one view via the plain forward path; degenerate rows
// are an error here because the result feeds a loss.
std::vector<double> teacher_key(const EncoderParams& teacher, std::span<const double> view);

// Standalone single-anchor loss graphs. The student parameters arrive as
// requires-grad inputs, already bound in `bindings`; the teacher never enters
// the graph.
struct LossGraph {
  Graph graph;
  NodeId loss = kNoNode;
  NodeId intra = kNoNode;
  NodeId inter = kNoNode;
  EncoderGraphRefs student;
  std::map<NodeId, Tensor> bindings;
};

LossGraph build_intra_loss(const EncoderParams& student, const EncoderParams& teacher,
                           std::span<const double> x_anchor, std::size_t anchor_instance,
                           const AugmentationPolicy& policy, const MemoryBank& bank,
                           double tau, std::uint64_t step);

LossGraph build_inter_loss(const EncoderParams& student, const EncoderParams& teacher,
                           std::span<const double> x_positive, std::span<const double> x_anchor,
                           std::size_t positive_instance, std::size_t anchor_instance,
                           const AugmentationPolicy& policy, const MemoryBank& bank,
                           double tau, std::uint64_t step);

LossGraph build_bingo_step_loss(const EncoderParams& student, const EncoderParams& teacher,
                                std::span<const double> x_anchor,
                                std::span<const double> x_positive,
                                std::size_t anchor_instance, std::size_t positive_instance,
                                const AugmentationPolicy& policy, const MemoryBank& bank,
                                double tau, std::uint64_t step, double lambda_inter);

// Evaluates a loss graph, treating any degenerate embedding row as an error.
double eval_loss_graph(const LossGraph& lg);

double intra_loss(const EncoderParams& student, const EncoderParams& teacher,
                  std::span<const double> x_anchor, std::size_t anchor_instance,
                  const AugmentationPolicy& policy, const MemoryBank& bank, double tau,
                  std::uint64_t step);

double inter_loss(const EncoderParams& student, const EncoderParams& teacher,
                  std::span<const double> x_positive, std::span<const double> x_anchor,
                  std::size_t positive_instance, std::size_t anchor_instance,
                  const AugmentationPolicy& policy, const MemoryBank& bank, double tau,
                  std::uint64_t step);

double bingo_step_loss(const EncoderParams& student, const EncoderParams& teacher,
                       std::span<const double> x_anchor, std::span<const double> x_positive,
                       std::size_t anchor_instance, std::size_t positive_instance,
                       const AugmentationPolicy& policy, const MemoryBank& bank, double tau,
                       std::uint64_t step, double lambda_inter);

// Mean over the batch of ||s_i - t_i||^2.
double kd_l2(const Matrix& student_emb, const Matrix& teacher_emb);

// Mean squared difference of the two B x B cosine-similarity matrices,
// diagonal excluded (unordered pairs).
double rkd_graph(const Matrix& student_batch, const Matrix& teacher_batch);

}  // namespace bingo
