#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "bingo/augment.hpp"
#include "bingo/bagging.hpp"
#include "bingo/data_io.hpp"
#include "bingo/nets.hpp"

namespace bingo {

enum class TrainMode : std::uint8_t { PretrainTeacher, Distill };
enum class RelationSource : std::uint8_t { Teacher, StudentOnline, None };
enum class TeacherParamsMode : std::uint8_t { Pretrained, MomentumOfStudent };
enum class DistillLoss : std::uint8_t { Bingo, KdL2, Rkd };

const char* train_mode_name(TrainMode m);
const char* relation_source_name(RelationSource r);
const char* teacher_params_mode_name(TeacherParamsMode t);
const char* distill_loss_name(DistillLoss d);
TrainMode train_mode_from_name(const std::string& s);
RelationSource relation_source_from_name(const std::string& s);
TeacherParamsMode teacher_params_mode_from_name(const std::string& s);
DistillLoss distill_loss_from_name(const std::string& s);

struct TrainConfig {
  TrainMode mode = TrainMode::Distill;
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double base_lr = 0.03;
  double sgd_momentum = 0.9;
  double weight_decay = 1e-4;
  double tau = 0.2;
  std::size_t bank_capacity = 1024;
  double momentum_m = 0.999;
  std::uint64_t seed = 0;
  BagStrategy bag_strategy = BagStrategy::Knn;
  std::uint32_t bag_param = 5;
  RelationSource relation_source = RelationSource::Teacher;
  TeacherParamsMode teacher_params_mode = TeacherParamsMode::Pretrained;
  std::size_t rebag_period_epochs = 5;
  double lambda_inter = 1.0;
  DistillLoss distill_loss = DistillLoss::Bingo;
  // View policy; its RNG stream is derived from `seed`.
  double augment_noise_sigma = 0.1;
  double augment_mask_prob = 0.05;
  double augment_scale_lo = 0.9;
  double augment_scale_hi = 1.1;
  // Architecture of the encoder being trained.
  std::vector<std::size_t> hidden_dims = {128};
  std::size_t proj_hidden_dim = 128;
  std::size_t embed_dim = 64;
  std::size_t kmeans_max_iters = 100;
  std::size_t log_every = 10;

  void validate() const;
  AugmentationPolicy policy() const;
  EncoderSpec encoder_spec(std::size_t input_dim) const;
  // Fully-resolved "key = value" lines; the fingerprint is their CRC-32.
  std::string canonical_text() const;
  std::uint32_t fingerprint() const;
};

// base_lr * 0.5 * (1 + cos(pi * step / total_steps))
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr);

// v <- momentum * v + grad + weight_decay * theta; theta <- theta - lr * v
void sgd_momentum_step(std::span<double> params, std::span<const double> grads, double lr,
                       double momentum, double weight_decay, std::span<double> velocity);

// MoCo-style contrastive pretraining: online encoder against momentum-encoder
// keys over a memory-bank of negatives. Also serves as the no-distillation
// baseline when pointed at a student-sized architecture.
Checkpoint pretrain_teacher(const TrainConfig& config, const Dataset& data,
                            std::ostream* metrics = nullptr);

// Bag-aggregation distillation of a student against a frozen (or momentum)
// teacher. `bags` indexes the train-split rows in split order; it may be null
// when relation_source is None or StudentOnline.
Checkpoint distill(const TrainConfig& config, const Checkpoint& teacher,
                   const BagTable* bags, const Dataset& data,
                   std::ostream* metrics = nullptr);

}  // namespace bingo
