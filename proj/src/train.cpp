#include "bingo/train.hpp"

#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>

#include "bingo/losses.hpp"
#include "bingo/membank.hpp"
#include "bingo/rng.hpp"

namespace bingo {

const char* train_mode_name(TrainMode m) {
  return m == TrainMode::PretrainTeacher ? "pretrain-teacher" : "distill";
}

const char* relation_source_name(RelationSource r) {
  switch (r) {
    case RelationSource::Teacher: return "teacher";
    case RelationSource::StudentOnline: return "student-online";
    case RelationSource::None: return "none";
  }
  return "?";
}

const char* teacher_params_mode_name(TeacherParamsMode t) {
  return t == TeacherParamsMode::Pretrained ? "pretrained" : "momentum-of-student";
}

const char* distill_loss_name(DistillLoss d) {
  switch (d) {
    case DistillLoss::Bingo: return "bingo";
    case DistillLoss::KdL2: return "kd-l2";
    case DistillLoss::Rkd: return "rkd";
  }
  return "?";
}

TrainMode train_mode_from_name(const std::string& s) {
  if (s == "pretrain-teacher") return TrainMode::PretrainTeacher;
  if (s == "distill") return TrainMode::Distill;
  throw InvariantError("unknown train mode '" + s + "'");
}

RelationSource relation_source_from_name(const std::string& s) {
  if (s == "teacher") return RelationSource::Teacher;
  if (s == "student-online") return RelationSource::StudentOnline;
  if (s == "none") return RelationSource::None;
  throw InvariantError("unknown relation source '" + s + "'");
}

TeacherParamsMode teacher_params_mode_from_name(const std::string& s) {
  if (s == "pretrained") return TeacherParamsMode::Pretrained;
  if (s == "momentum-of-student") return TeacherParamsMode::MomentumOfStudent;
  throw InvariantError("unknown teacher params mode '" + s + "'");
}

DistillLoss distill_loss_from_name(const std::string& s) {
  if (s == "bingo") return DistillLoss::Bingo;
  if (s == "kd-l2") return DistillLoss::KdL2;
  if (s == "rkd") return DistillLoss::Rkd;
  throw InvariantError("unknown distill loss '" + s + "'");
}

void TrainConfig::validate() const {
  if (!(base_lr > 0.0)) throw InvariantError("TrainConfig: base_lr must be > 0");
  if (!(tau > 0.0)) throw InvariantError("TrainConfig: tau must be > 0");
  if (batch_size < 1) throw InvariantError("TrainConfig: batch_size must be >= 1");
  if (bank_capacity < 1 || bank_capacity % batch_size != 0) {
    throw InvariantError("TrainConfig: batch_size must divide bank_capacity");
  }
  if (momentum_m < 0.0 || momentum_m > 1.0) {
    throw InvariantError("TrainConfig: momentum_m outside [0, 1]");
  }
  if (sgd_momentum < 0.0 || sgd_momentum >= 1.0) {
    throw InvariantError("TrainConfig: sgd_momentum outside [0, 1)");
  }
  if (weight_decay < 0.0) throw InvariantError("TrainConfig: weight_decay must be >= 0");
  if (lambda_inter < 0.0) throw InvariantError("TrainConfig: lambda_inter must be >= 0");
  if (rebag_period_epochs < 1) {
    throw InvariantError("TrainConfig: rebag_period_epochs must be >= 1");
  }
  if (kmeans_max_iters < 1) throw InvariantError("TrainConfig: kmeans_max_iters must be >= 1");
  if (log_every < 1) throw InvariantError("TrainConfig: log_every must be >= 1");
  if (bag_strategy != BagStrategy::Labels && bag_param < 1) {
    throw InvariantError("TrainConfig: bag_param must be >= 1");
  }
  policy().validate();
  if (proj_hidden_dim < 1 || embed_dim < 1) {
    throw InvariantError("TrainConfig: encoder dims must be >= 1");
  }
}

AugmentationPolicy TrainConfig::policy() const {
  AugmentationPolicy p;
  p.noise_sigma = augment_noise_sigma;
  p.mask_prob = augment_mask_prob;
  p.scale_lo = augment_scale_lo;
  p.scale_hi = augment_scale_hi;
  p.seed = mix64(seed ^ 0x617567ULL);
  return p;
}

EncoderSpec TrainConfig::encoder_spec(std::size_t input_dim) const {
  EncoderSpec spec;
  spec.input_dim = input_dim;
  spec.hidden_dims = hidden_dims;
  spec.proj_hidden_dim = proj_hidden_dim;
  spec.embed_dim = embed_dim;
  return spec;
}

std::string TrainConfig::canonical_text() const {
  std::ostringstream os;
  char buf[64];
  auto put_f = [&os, &buf](const char* key, double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << key << " = " << buf << "\n";
  };
  os << "mode = " << train_mode_name(mode) << "\n";
  os << "epochs = " << epochs << "\n";
  os << "batch_size = " << batch_size << "\n";
  put_f("base_lr", base_lr);
  put_f("sgd_momentum", sgd_momentum);
  put_f("weight_decay", weight_decay);
  put_f("tau", tau);
  os << "bank_capacity = " << bank_capacity << "\n";
  put_f("momentum_m", momentum_m);
  os << "seed = " << seed << "\n";
  os << "bag_strategy = " << strategy_name(bag_strategy) << "\n";
  os << "bag_param = " << bag_param << "\n";
  os << "relation_source = " << relation_source_name(relation_source) << "\n";
  os << "teacher_params_mode = " << teacher_params_mode_name(teacher_params_mode) << "\n";
  os << "rebag_period_epochs = " << rebag_period_epochs << "\n";
  put_f("lambda_inter", lambda_inter);
  os << "distill_loss = " << distill_loss_name(distill_loss) << "\n";
  put_f("augment_noise_sigma", augment_noise_sigma);
  put_f("augment_mask_prob", augment_mask_prob);
  put_f("augment_scale_lo", augment_scale_lo);
  put_f("augment_scale_hi", augment_scale_hi);
  os << "hidden_dims = ";
  for (std::size_t i = 0; i < hidden_dims.size(); ++i) {
    if (i) os << ',';
    os << hidden_dims[i];
  }
  os << "\n";
  os << "proj_hidden_dim = " << proj_hidden_dim << "\n";
  os << "embed_dim = " << embed_dim << "\n";
  os << "kmeans_max_iters = " << kmeans_max_iters << "\n";
  os << "log_every = " << log_every << "\n";
  return os.str();
}

std::uint32_t TrainConfig::fingerprint() const {
  std::string text = canonical_text();
  return crc32_bytes(text.data(), text.size());
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
  if (step > total_steps) {
    throw InvariantError("cosine_lr: step " + std::to_string(step) + " > total_steps " +
                         std::to_string(total_steps));
  }
  if (total_steps == 0) return base_lr;
  double phase = 3.14159265358979323846 * static_cast<double>(step) /
                 static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(phase));
}

void sgd_momentum_step(std::span<double> params, std::span<const double> grads, double lr,
                       double momentum, double weight_decay, std::span<double> velocity) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw InvariantError("sgd_momentum_step: size mismatch");
  }
  for (double gv : grads) {
    if (!std::isfinite(gv)) {
      throw NumericError("sgd_momentum_step: non-finite gradient, step aborted");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grads[i] + weight_decay * params[i];
    params[i] -= lr * velocity[i];
  }
}

namespace {

struct Velocity {
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> biases;

  explicit Velocity(const EncoderParams& p) {
    for (const Matrix& w : p.weights) weights.emplace_back(w.data.size(), 0.0);
    for (const auto& b : p.biases) biases.emplace_back(b.size(), 0.0);
  }
};

void apply_sgd(EncoderParams& params, const Evaluation& ev, const EncoderGraphRefs& refs,
               double lr, double momentum, double weight_decay, Velocity& vel) {
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    sgd_momentum_step(params.weights[l].data, ev.grad(refs.weight_nodes[l]), lr, momentum,
                      weight_decay, vel.weights[l]);
    sgd_momentum_step(params.biases[l], ev.grad(refs.bias_nodes[l]), lr, momentum,
                      weight_decay, vel.biases[l]);
  }
}

void write_metrics(std::ostream* metrics, std::size_t step, double lr, double loss,
                   double loss_intra, double loss_inter) {
  if (!metrics) return;
  char line[160];
  std::snprintf(line, sizeof line, "step=%zu lr=%.9g loss=%.9g loss_intra=%.9g loss_inter=%.9g",
                step, lr, loss, loss_intra, loss_inter);
  (*metrics) << line << "\n";
  metrics->flush();
}

std::vector<std::size_t> epoch_order(const std::vector<std::size_t>& train_rows,
                                     std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(train_rows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = keyed_rng(seed, 0x736875666cULL, epoch);
  shuffle(order, rng);
  return order;
}

Matrix rows_to_matrix(const std::vector<std::vector<double>>& rows) {
  Matrix m(rows.size(), rows.empty() ? 0 : rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
  }
  return m;
}

// Mean of per-anchor scalar loss nodes: concat -> sum -> scale(1/B).
NodeId mean_of(Graph& g, const std::vector<NodeId>& parts) {
  NodeId total = g.sum(g.concat_rows(parts));
  return g.scale(total, 1.0 / static_cast<double>(parts.size()));
}

double mean_value(const Evaluation& ev, const std::vector<NodeId>& parts) {
  if (parts.empty()) return 0.0;
  double s = 0.0;
  for (NodeId id : parts) s += ev.value(id).values[0];
  return s / static_cast<double>(parts.size());
}

Checkpoint make_checkpoint(const TrainConfig& config, EncoderParams params) {
  Checkpoint ckpt;
  ckpt.params = std::move(params);
  ckpt.config_fingerprint = config.fingerprint();
  ckpt.mode = train_mode_name(config.mode);
  ckpt.epochs = static_cast<std::uint32_t>(config.epochs);
  ckpt.seed = config.seed;
  return ckpt;
}

struct BatchPlan {
  std::vector<std::size_t> train_rows;  // global row ids, split order
  std::size_t steps_per_epoch = 0;
  std::size_t total_steps = 0;
};

BatchPlan plan_batches(const TrainConfig& config, const Dataset& data) {
  BatchPlan plan;
  plan.train_rows = data.split_indices(kSplitTrain);
  if (config.epochs > 0 && plan.train_rows.size() < config.batch_size) {
    throw InvariantError("training: train split holds " +
                         std::to_string(plan.train_rows.size()) +
                         " rows, need at least one batch of " +
                         std::to_string(config.batch_size));
  }
  plan.steps_per_epoch = plan.train_rows.empty() ? 0 : plan.train_rows.size() / config.batch_size;
  plan.total_steps = plan.steps_per_epoch * config.epochs;
  return plan;
}

}  // namespace

Checkpoint pretrain_teacher(const TrainConfig& config, const Dataset& data,
                            std::ostream* metrics) {
  config.validate();
  data.validate();
  if (config.mode != TrainMode::PretrainTeacher) {
    throw InvariantError("pretrain_teacher: config.mode must be pretrain-teacher");
  }
  EncoderSpec spec = config.encoder_spec(data.input_dim);
  EncoderParams online = init_params(spec, config.seed, EncoderRole::Teacher);
  if (config.epochs == 0) return make_checkpoint(config, std::move(online));

  EncoderParams momentum_key = online;
  momentum_key.role = EncoderRole::MomentumKey;
  MemoryBank bank = MemoryBank::random_unit(config.bank_capacity, spec.embed_dim,
                                            mix64(config.seed ^ 0xba4b5eedULL));
  AugmentationPolicy policy = config.policy();
  BatchPlan plan = plan_batches(config, data);
  Velocity vel(online);

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order = epoch_order(plan.train_rows, config.seed, epoch);
    for (std::size_t b = 0; b < plan.steps_per_epoch; ++b, ++step) {
      try {
        std::vector<std::vector<double>> query_views(config.batch_size);
        std::vector<std::vector<double>> key_views(config.batch_size);
        for (std::size_t i = 0; i < config.batch_size; ++i) {
          std::size_t row = plan.train_rows[order[b * config.batch_size + i]];
          auto x = data.rows.row(row);
          query_views[i] = sample_view(x, policy, row, step, 1);
          key_views[i] = sample_view(x, policy, row, step, 2);
        }
        ForwardResult keys = encoder_forward(momentum_key, rows_to_matrix(key_views));
        if (!keys.degenerate_rows.empty()) {
          throw NumericError("degenerate momentum-encoder key");
        }
        Graph g;
        EncoderGraphRefs refs = add_encoder_inputs(g, spec, "online");
        NegativesBlock negs = add_negatives(g, bank.negatives_view());
        std::vector<NodeId> anchor_losses;
        for (std::size_t i = 0; i < config.batch_size; ++i) {
          AnchorLossNodes nodes =
              append_anchor_loss(g, spec, refs, query_views[i], {}, keys.embeddings.row(i),
                                 negs, config.tau, 0.0);
          anchor_losses.push_back(nodes.combined);
        }
        NodeId loss = mean_of(g, anchor_losses);
        std::map<NodeId, Tensor> bindings;
        refs.bind(online, bindings);
        Evaluation ev = evaluate(g, bindings);
        if (!ev.degenerate_rows.empty()) {
          throw NumericError("degenerate embedding row in contrastive loss");
        }
        backpropagate(g, ev, loss);
        double lr = cosine_lr(step, plan.total_steps, config.base_lr);
        apply_sgd(online, ev, refs, lr, config.sgd_momentum, config.weight_decay, vel);
        momentum_update(online, momentum_key, config.momentum_m);
        bank.enqueue_batch(keys.embeddings);
        double loss_val = ev.value(loss).values[0];
        if (step % config.log_every == 0 || step + 1 == plan.total_steps) {
          write_metrics(metrics, step, lr, loss_val, loss_val, 0.0);
        }
      } catch (const NumericError& e) {
        throw NumericError("pretrain step " + std::to_string(step) + ": " + e.what());
      }
    }
  }
  return make_checkpoint(config, std::move(online));
}

Checkpoint distill(const TrainConfig& config, const Checkpoint& teacher,
                   const BagTable* bags, const Dataset& data, std::ostream* metrics) {
  config.validate();
  data.validate();
  if (config.mode != TrainMode::Distill) {
    throw InvariantError("distill: config.mode must be distill");
  }
  if (config.distill_loss == DistillLoss::Rkd && config.batch_size < 2) {
    throw InvariantError("distill: rkd loss needs batch_size >= 2");
  }
  EncoderSpec spec = config.encoder_spec(data.input_dim);
  EncoderParams student = init_params(spec, config.seed, EncoderRole::Student);
  if (config.epochs == 0) return make_checkpoint(config, std::move(student));

  BatchPlan plan = plan_batches(config, data);

  // Teacher side: frozen pretrained weights, or a momentum copy of the student.
  bool momentum_teacher = config.teacher_params_mode == TeacherParamsMode::MomentumOfStudent;
  EncoderParams teacher_params;
  if (momentum_teacher) {
    teacher_params = student;
    teacher_params.role = EncoderRole::MomentumKey;
  } else {
    teacher.params.validate();
    if (teacher.params.spec.input_dim != data.input_dim) {
      throw InvariantError("distill: teacher input_dim does not match dataset");
    }
    if (teacher.params.spec.embed_dim != spec.embed_dim) {
      throw InvariantError("distill: teacher embed_dim " +
                           std::to_string(teacher.params.spec.embed_dim) +
                           " != student embed_dim " + std::to_string(spec.embed_dim));
    }
    teacher_params = teacher.params;
  }

  bool use_bags = config.relation_source != RelationSource::None;
  bool bingo = config.distill_loss == DistillLoss::Bingo;
  BagTable local_bags;
  const BagTable* active_bags = nullptr;
  if (use_bags && bingo) {
    if (config.relation_source == RelationSource::Teacher) {
      if (!bags) throw InvariantError("distill: relation_source=teacher needs a bag table");
      bags->validate();
      if (bags->n() != plan.train_rows.size()) {
        throw InvariantError("distill: bag table covers " + std::to_string(bags->n()) +
                             " anchors, train split holds " +
                             std::to_string(plan.train_rows.size()));
      }
      active_bags = bags;
    }
    // StudentOnline bags are produced at epoch boundaries below.
  }

  MemoryBank bank = MemoryBank::random_unit(config.bank_capacity, spec.embed_dim,
                                            mix64(config.seed ^ 0xba4b5eedULL));
  AugmentationPolicy policy = config.policy();
  Velocity vel(student);
  Dataset train_subset = data.subset(plan.train_rows);

  auto rebag_from_student = [&](std::size_t epoch) {
    switch (config.bag_strategy) {
      case BagStrategy::Knn:
        local_bags = bag_knn(extract_embeddings(student, train_subset), config.bag_param);
        break;
      case BagStrategy::Kmeans:
        local_bags = bag_kmeans(extract_embeddings(student, train_subset), config.bag_param,
                                config.kmeans_max_iters, keyed_rng(config.seed, 0x726562ULL, epoch)
                                                             .next_u64())
                         .second;
        break;
      case BagStrategy::Labels: {
        if (!train_subset.has_labels()) {
          throw InvariantError("distill: bag_strategy=labels needs a labeled dataset");
        }
        local_bags = bag_labels(train_subset.labels);
        break;
      }
    }
    active_bags = &local_bags;
  };

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (use_bags && bingo && config.relation_source == RelationSource::StudentOnline &&
        epoch % config.rebag_period_epochs == 0) {
      rebag_from_student(epoch);
    }
    std::vector<std::size_t> order = epoch_order(plan.train_rows, config.seed, epoch);
    for (std::size_t b = 0; b < plan.steps_per_epoch; ++b, ++step) {
      try {
        // Per anchor: a positive drawn from its bag, three views, one teacher key.
        std::size_t batch = config.batch_size;
        std::vector<std::vector<double>> t1(batch), t2(batch), t3(batch);
        for (std::size_t i = 0; i < batch; ++i) {
          std::size_t anchor_pos = order[b * batch + i];
          std::size_t anchor_row = plan.train_rows[anchor_pos];
          auto x_anchor = data.rows.row(anchor_row);
          if (bingo && use_bags) {
            Rng pos_rng = keyed_rng(config.seed, 0x706f73ULL, step, anchor_row);
            PositiveDraw draw = sample_positive(*active_bags, anchor_pos, pos_rng);
            std::size_t positive_row = plan.train_rows[static_cast<std::size_t>(draw.index)];
            ThreeViews views = sample_three_views(x_anchor, data.rows.row(positive_row),
                                                  anchor_row, positive_row, policy, step);
            t1[i] = std::move(views.anchor_t1);
            t2[i] = std::move(views.anchor_t2);
            t3[i] = std::move(views.positive_t3);
          } else {
            t1[i] = sample_view(x_anchor, policy, anchor_row, step, 1);
            t2[i] = sample_view(x_anchor, policy, anchor_row, step, 2);
          }
        }
        ForwardResult keys = encoder_forward(teacher_params, rows_to_matrix(t2));
        if (!keys.degenerate_rows.empty()) {
          throw NumericError("degenerate teacher key");
        }

        Graph g;
        EncoderGraphRefs refs = add_encoder_inputs(g, spec, "student");
        std::vector<NodeId> per_anchor, intra_nodes, inter_nodes;
        if (config.distill_loss == DistillLoss::Bingo) {
          NegativesBlock negs = add_negatives(g, bank.negatives_view());
          for (std::size_t i = 0; i < batch; ++i) {
            AnchorLossNodes nodes = append_anchor_loss(
                g, spec, refs, t1[i], use_bags ? t3[i] : std::vector<double>{},
                keys.embeddings.row(i), negs, config.tau,
                use_bags ? config.lambda_inter : 0.0);
            per_anchor.push_back(nodes.combined);
            intra_nodes.push_back(nodes.intra);
            if (nodes.inter != kNoNode) inter_nodes.push_back(nodes.inter);
          }
        } else if (config.distill_loss == DistillLoss::KdL2) {
          for (std::size_t i = 0; i < batch; ++i) {
            NodeId x1 = g.constant(Tensor::row(t1[i]), "t1");
            NodeId q = append_encoder_forward(g, spec, refs, x1, 1);
            auto key_row = keys.embeddings.row(i);
            NodeId key = g.constant(
                Tensor::row(std::vector<double>(key_row.begin(), key_row.end())), "key");
            NodeId diff = g.add(q, g.scale(key, -1.0));
            per_anchor.push_back(g.sum(g.mul(diff, diff)));
          }
        } else {  // Rkd: align pairwise similarity graphs of the batch
          std::vector<NodeId> queries;
          for (std::size_t i = 0; i < batch; ++i) {
            NodeId x1 = g.constant(Tensor::row(t1[i]), "t1");
            queries.push_back(append_encoder_forward(g, spec, refs, x1, 1));
          }
          for (std::size_t i = 0; i < batch; ++i) {
            for (std::size_t j = i + 1; j < batch; ++j) {
              double tsim = dot(keys.embeddings.row(i), keys.embeddings.row(j));
              NodeId d = g.add(g.dot_rows(queries[i], queries[j]),
                               g.constant(Tensor::vec({-tsim})));
              per_anchor.push_back(g.mul(d, d));
            }
          }
        }
        NodeId loss = mean_of(g, per_anchor);
        std::map<NodeId, Tensor> bindings;
        refs.bind(student, bindings);
        Evaluation ev = evaluate(g, bindings);
        if (!ev.degenerate_rows.empty()) {
          throw NumericError("degenerate embedding row in distillation loss");
        }
        backpropagate(g, ev, loss);
        double lr = cosine_lr(step, plan.total_steps, config.base_lr);
        apply_sgd(student, ev, refs, lr, config.sgd_momentum, config.weight_decay, vel);
        if (momentum_teacher) {
          momentum_update(student, teacher_params, config.momentum_m);
        }
        bank.enqueue_batch(keys.embeddings);
        double loss_val = ev.value(loss).values[0];
        if (step % config.log_every == 0 || step + 1 == plan.total_steps) {
          write_metrics(metrics, step, lr, loss_val, mean_value(ev, intra_nodes),
                        mean_value(ev, inter_nodes));
        }
      } catch (const NumericError& e) {
        throw NumericError("distill step " + std::to_string(step) + ": " + e.what());
      }
    }
  }
  return make_checkpoint(config, std::move(student));
}

}  // namespace bingo
