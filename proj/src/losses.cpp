#include "bingo/losses.hpp"

#include <cmath>

namespace bingo {

void LossInputs::validate() const {
  if (!(tau > 0.0)) throw InvariantError("LossInputs: tau must be > 0");
  if (negatives.rows == 0) throw InvariantError("LossInputs: empty negatives");
  if (key_pos.size() != query.size() || negatives.cols != query.size()) {
    throw InvariantError("LossInputs: dimension mismatch");
  }
  auto check_unit = [](std::span<const double> v, const char* what) {
    double nrm = norm(v);
    if (std::abs(nrm - 1.0) > 1e-5) {
      throw InvariantError(std::string("LossInputs: ") + what + " has norm " +
                           std::to_string(nrm) + ", want unit");
    }
  };
  check_unit(query, "query");
  check_unit(key_pos, "key_pos");
  for (std::size_t i = 0; i < negatives.rows; ++i) check_unit(negatives.row(i), "negative");
}

NegativesBlock add_negatives(Graph& g, const Matrix& negatives) {
  if (negatives.rows == 0) throw InvariantError("add_negatives: empty negatives");
  NegativesBlock b;
  b.count = negatives.rows;
  b.rows = g.constant(Tensor::matrix(negatives.rows, negatives.cols, negatives.data),
                      "negatives");
  b.ones = g.constant(
      Tensor::matrix(negatives.rows, 1, std::vector<double>(negatives.rows, 1.0)),
      "neg-tile");
  return b;
}

NodeId append_info_nce(Graph& g, NodeId query_row, NodeId key_pos_row,
                       const NegativesBlock& negs, double tau) {
  if (!(tau > 0.0)) throw InvariantError("info_nce: tau must be > 0");
  NodeId l_pos = g.dot_rows(query_row, key_pos_row);          // {1}
  NodeId tiled = g.matmul(negs.ones, query_row);              // [M x D]
  NodeId l_neg = g.dot_rows(tiled, negs.rows);                // {M}
  NodeId logits = g.concat_rows({l_pos, l_neg});              // {M+1}, positive first
  NodeId scaled = g.scale(logits, 1.0 / tau);
  return g.log_softmax_nll(scaled, 0);
}

InfoNceGraph build_info_nce(const LossInputs& in) {
  in.validate();
  InfoNceGraph r;
  r.query = r.graph.input({1, in.query.size()}, true, "query");
  NodeId key = r.graph.constant(Tensor::row(in.key_pos), "key_pos");
  NegativesBlock negs = add_negatives(r.graph, in.negatives);
  r.loss = append_info_nce(r.graph, r.query, key, negs, in.tau);
  r.bindings[r.query] = Tensor::row(in.query);
  r.bindings[r.query].requires_grad = true;
  return r;
}

double info_nce(const LossInputs& in) {
  InfoNceGraph g = build_info_nce(in);
  return evaluate(g.graph, g.bindings).value(g.loss).values[0];
}

std::vector<double> teacher_key(const EncoderParams& teacher, std::span<const double> view) {
  Matrix batch(1, view.size(), std::vector<double>(view.begin(), view.end()));
  ForwardResult fwd = encoder_forward(teacher, batch);
  if (!fwd.degenerate_rows.empty()) {
    throw NumericError("teacher key is degenerate (pre-normalization norm < 1e-8)");
  }
  return fwd.embeddings.data;
}

AnchorLossNodes append_anchor_loss(Graph& g, const EncoderSpec& spec,
                                   const EncoderGraphRefs& student,
                                   const std::vector<double>& t1_anchor,
                                   const std::vector<double>& t3_positive,
                                   std::span<const double> teacher_key,
                                   const NegativesBlock& negs, double tau,
                                   double lambda_inter) {
  NodeId key = g.constant(
      Tensor::row(std::vector<double>(teacher_key.begin(), teacher_key.end())), "key");
  AnchorLossNodes nodes;
  NodeId x1 = g.constant(Tensor::row(t1_anchor), "t1");
  NodeId q1 = append_encoder_forward(g, spec, student, x1, 1);
  nodes.intra = append_info_nce(g, q1, key, negs, tau);
  if (t3_positive.empty()) {
    nodes.combined = nodes.intra;
    return nodes;
  }
  NodeId x3 = g.constant(Tensor::row(t3_positive), "t3");
  NodeId q3 = append_encoder_forward(g, spec, student, x3, 1);
  nodes.inter = append_info_nce(g, q3, key, negs, tau);
  nodes.combined = g.add(nodes.intra, g.scale(nodes.inter, lambda_inter));
  return nodes;
}

namespace {

LossGraph build_anchor_graph(const EncoderParams& student, const std::vector<double>& t1,
                             const std::vector<double>& t3,
                             const std::vector<double>& key, const MemoryBank& bank,
                             double tau, double lambda_inter) {
  LossGraph lg;
  lg.student = add_encoder_inputs(lg.graph, student.spec, "student");
  NegativesBlock negs = add_negatives(lg.graph, bank.negatives_view());
  AnchorLossNodes nodes = append_anchor_loss(lg.graph, student.spec, lg.student, t1, t3,
                                             key, negs, tau, lambda_inter);
  lg.intra = nodes.intra;
  lg.inter = nodes.inter;
  lg.loss = nodes.combined;
  lg.student.bind(student, lg.bindings);
  return lg;
}

}  // namespace

LossGraph build_intra_loss(const EncoderParams& student, const EncoderParams& teacher,
                           std::span<const double> x_anchor, std::size_t anchor_instance,
                           const AugmentationPolicy& policy, const MemoryBank& bank,
                           double tau, std::uint64_t step) {
  std::vector<double> t1 = sample_view(x_anchor, policy, anchor_instance, step, 1);
  std::vector<double> t2 = sample_view(x_anchor, policy, anchor_instance, step, 2);
  std::vector<double> key = teacher_key(teacher, t2);
  LossGraph lg = build_anchor_graph(student, t1, {}, key, bank, tau, 0.0);
  lg.loss = lg.intra;
  return lg;
}

LossGraph build_inter_loss(const EncoderParams& student, const EncoderParams& teacher,
                           std::span<const double> x_positive, std::span<const double> x_anchor,
                           std::size_t positive_instance, std::size_t anchor_instance,
                           const AugmentationPolicy& policy, const MemoryBank& bank,
                           double tau, std::uint64_t step) {
  // Same t2 draw as the intra term at this step: the teacher key is shared.
  std::vector<double> t2 = sample_view(x_anchor, policy, anchor_instance, step, 2);
  std::vector<double> t3 = sample_view(x_positive, policy, positive_instance, step, 3);
  std::vector<double> key = teacher_key(teacher, t2);
  // Build the positive-view query as the sole query path.
  LossGraph lg = build_anchor_graph(student, t3, {}, key, bank, tau, 0.0);
  lg.inter = lg.intra;
  lg.intra = kNoNode;
  lg.loss = lg.inter;
  return lg;
}

LossGraph build_bingo_step_loss(const EncoderParams& student, const EncoderParams& teacher,
                                std::span<const double> x_anchor,
                                std::span<const double> x_positive,
                                std::size_t anchor_instance, std::size_t positive_instance,
                                const AugmentationPolicy& policy, const MemoryBank& bank,
                                double tau, std::uint64_t step, double lambda_inter) {
  ThreeViews views = sample_three_views(x_anchor, x_positive, anchor_instance,
                                        positive_instance, policy, step);
  std::vector<double> key = teacher_key(teacher, views.anchor_t2);
  return build_anchor_graph(student, views.anchor_t1, views.positive_t3, key, bank, tau,
                            lambda_inter);
}

double eval_loss_graph(const LossGraph& lg) {
  Evaluation ev = evaluate(lg.graph, lg.bindings);
  if (!ev.degenerate_rows.empty()) {
    throw NumericError("degenerate embedding row in loss graph (node " +
                       std::to_string(ev.degenerate_rows.front().node) + ")");
  }
  return ev.value(lg.loss).values[0];
}

double intra_loss(const EncoderParams& student, const EncoderParams& teacher,
                  std::span<const double> x_anchor, std::size_t anchor_instance,
                  const AugmentationPolicy& policy, const MemoryBank& bank, double tau,
                  std::uint64_t step) {
  return eval_loss_graph(
      build_intra_loss(student, teacher, x_anchor, anchor_instance, policy, bank, tau, step));
}

double inter_loss(const EncoderParams& student, const EncoderParams& teacher,
                  std::span<const double> x_positive, std::span<const double> x_anchor,
                  std::size_t positive_instance, std::size_t anchor_instance,
                  const AugmentationPolicy& policy, const MemoryBank& bank, double tau,
                  std::uint64_t step) {
  return eval_loss_graph(build_inter_loss(student, teacher, x_positive, x_anchor,
                                          positive_instance, anchor_instance, policy, bank,
                                          tau, step));
}

double bingo_step_loss(const EncoderParams& student, const EncoderParams& teacher,
                       std::span<const double> x_anchor, std::span<const double> x_positive,
                       std::size_t anchor_instance, std::size_t positive_instance,
                       const AugmentationPolicy& policy, const MemoryBank& bank, double tau,
                       std::uint64_t step, double lambda_inter) {
  return eval_loss_graph(build_bingo_step_loss(student, teacher, x_anchor, x_positive,
                                               anchor_instance, positive_instance, policy,
                                               bank, tau, step, lambda_inter));
}

double kd_l2(const Matrix& student_emb, const Matrix& teacher_emb) {
  if (student_emb.rows != teacher_emb.rows || student_emb.cols != teacher_emb.cols) {
    throw InvariantError("kd_l2: shape mismatch");
  }
  if (student_emb.rows == 0) throw InvariantError("kd_l2: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < student_emb.rows; ++i) {
    total += squared_distance(student_emb.row(i), teacher_emb.row(i));
  }
  return total / static_cast<double>(student_emb.rows);
}

double rkd_graph(const Matrix& student_batch, const Matrix& teacher_batch) {
  if (student_batch.rows != teacher_batch.rows ||
      student_batch.cols != teacher_batch.cols) {
    throw InvariantError("rkd_graph: shape mismatch");
  }
  if (student_batch.rows < 2) throw InvariantError("rkd_graph: need at least 2 rows");
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < student_batch.rows; ++i) {
    for (std::size_t j = i + 1; j < student_batch.rows; ++j) {
      double ds = dot(student_batch.row(i), student_batch.row(j)) -
                  dot(teacher_batch.row(i), teacher_batch.row(j));
      total += ds * ds;
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

}  // namespace bingo
