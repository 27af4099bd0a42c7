#include "doctest.h"

#include <cmath>
#include <sstream>
#include <vector>

#include "bingo/eval.hpp"
#include "bingo/losses.hpp"
#include "bingo/membank.hpp"
#include "bingo/train.hpp"

using namespace bingo;

namespace {

TrainConfig tiny_pretrain(std::uint64_t seed) {
  TrainConfig c;
  c.mode = TrainMode::PretrainTeacher;
  c.epochs = 2;
  c.batch_size = 16;
  c.bank_capacity = 64;
  c.hidden_dims = {16};
  c.proj_hidden_dim = 16;
  c.embed_dim = 8;
  c.seed = seed;
  c.log_every = 1;
  return c;
}

TrainConfig tiny_distill(std::uint64_t seed) {
  TrainConfig c;
  c.mode = TrainMode::Distill;
  c.epochs = 2;
  c.batch_size = 16;
  c.bank_capacity = 64;
  c.hidden_dims = {12};
  c.proj_hidden_dim = 12;
  c.embed_dim = 8;
  c.seed = seed;
  c.log_every = 1;
  return c;
}

Dataset tiny_blobs(std::uint64_t seed) {
  return gen_blobs(120, 6, 4, 3.0, 0.4, seed, 0.2);
}

std::vector<double> parse_losses(const std::string& metrics) {
  std::vector<double> out;
  std::istringstream is(metrics);
  std::string line;
  while (std::getline(is, line)) {
    auto pos = line.find(" loss=");
    REQUIRE(pos != std::string::npos);
    out.push_back(std::stod(line.substr(pos + 6)));
  }
  return out;
}

bool same_params(const EncoderParams& a, const EncoderParams& b) {
  if (!(a.spec == b.spec)) return false;
  for (std::size_t l = 0; l < a.weights.size(); ++l) {
    if (a.weights[l].data != b.weights[l].data) return false;
    if (a.biases[l] != b.biases[l]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(cosine_lr(0, 100, 0.03) == 0.03);
  CHECK(cosine_lr(100, 100, 0.03) == 0.0);
  CHECK(cosine_lr(50, 100, 0.03) == doctest::Approx(0.015).epsilon(1e-12));
  CHECK_THROWS_AS(cosine_lr(101, 100, 0.03), InvariantError);
}

TEST_CASE("sgd with zero momentum and decay is plain gradient descent") {
  std::vector<double> theta{1.0, -2.0};
  std::vector<double> grad{0.5, 0.25};
  std::vector<double> vel{0.0, 0.0};
  sgd_momentum_step(theta, grad, 0.1, 0.0, 0.0, vel);
  CHECK(theta[0] == doctest::Approx(1.0 - 0.1 * 0.5).epsilon(1e-15));
  CHECK(theta[1] == doctest::Approx(-2.0 - 0.1 * 0.25).epsilon(1e-15));
}

TEST_CASE("velocity decays geometrically once gradients stop") {
  std::vector<double> theta{0.0};
  std::vector<double> vel{1.0};
  std::vector<double> zero{0.0};
  double expected = 1.0;
  for (int k = 0; k < 10; ++k) {
    sgd_momentum_step(theta, zero, 0.0, 0.9, 0.0, vel);
    expected *= 0.9;
    CHECK(vel[0] == expected);
  }
}

TEST_CASE("sgd momentum converges on the quadratic bowl") {
  // f(theta) = theta^2 / 2, grad = theta
  std::vector<double> theta{1.0};
  std::vector<double> vel{0.0};
  int steps = 0;
  for (; steps < 500 && std::abs(theta[0]) >= 1e-6; ++steps) {
    std::vector<double> grad{theta[0]};
    sgd_momentum_step(theta, grad, 0.1, 0.9, 0.0, vel);
  }
  CHECK(std::abs(theta[0]) < 1e-6);
  CHECK(steps < 500);
}

TEST_CASE("sgd rejects shape mismatches and non-finite gradients") {
  std::vector<double> theta{1.0, 2.0};
  std::vector<double> vel{0.0, 0.0};
  std::vector<double> short_grad{1.0};
  CHECK_THROWS_AS(sgd_momentum_step(theta, short_grad, 0.1, 0.9, 0.0, vel), InvariantError);
  std::vector<double> bad_grad{1.0, std::nan("")};
  CHECK_THROWS_AS(sgd_momentum_step(theta, bad_grad, 0.1, 0.9, 0.0, vel), NumericError);
}

TEST_CASE("config fingerprints track every field") {
  TrainConfig a = tiny_distill(1);
  TrainConfig b = tiny_distill(1);
  CHECK(a.fingerprint() == b.fingerprint());
  b.lambda_inter = 0.5;
  CHECK(a.fingerprint() != b.fingerprint());
  TrainConfig c = tiny_distill(2);
  CHECK(a.fingerprint() != c.fingerprint());
}

TEST_CASE("config validation pins the bank/batch contract") {
  TrainConfig c = tiny_distill(1);
  c.bank_capacity = 65;  // not a multiple of 16
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("divide"), InvariantError);
}

TEST_CASE("zero-epoch runs return the initialization") {
  Dataset data = tiny_blobs(1);
  TrainConfig c = tiny_pretrain(5);
  c.epochs = 0;
  Checkpoint ckpt = pretrain_teacher(c, data);
  EncoderParams expect = init_params(c.encoder_spec(data.input_dim), 5, EncoderRole::Teacher);
  CHECK(same_params(ckpt.params, expect));

  TrainConfig d = tiny_distill(6);
  d.epochs = 0;
  d.relation_source = RelationSource::None;
  Checkpoint student = distill(d, ckpt, nullptr, data);
  EncoderParams sexpect = init_params(d.encoder_spec(data.input_dim), 6, EncoderRole::Student);
  CHECK(same_params(student.params, sexpect));
}

TEST_CASE("identical config and seed give bit-identical checkpoints") {
  Dataset data = tiny_blobs(2);
  TrainConfig c = tiny_pretrain(7);
  Checkpoint a = pretrain_teacher(c, data);
  Checkpoint b = pretrain_teacher(c, data);
  CHECK(same_params(a.params, b.params));

  TrainConfig d = tiny_distill(8);
  d.relation_source = RelationSource::None;
  Checkpoint s1 = distill(d, a, nullptr, data);
  Checkpoint s2 = distill(d, a, nullptr, data);
  CHECK(same_params(s1.params, s2.params));
}

TEST_CASE("pretraining separable blobs reaches strong knn accuracy") {
  std::vector<double> accs;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Dataset data = gen_blobs(600, 8, 10, 4.0, 0.35, 40 + seed, 0.25);
    TrainConfig c;
    c.mode = TrainMode::PretrainTeacher;
    c.epochs = 30;
    c.batch_size = 32;
    c.bank_capacity = 128;
    c.base_lr = 0.06;
    c.hidden_dims = {32};
    c.proj_hidden_dim = 32;
    c.embed_dim = 16;
    c.augment_noise_sigma = 0.1;
    c.augment_mask_prob = 0.05;
    c.seed = seed;
    Checkpoint ckpt = pretrain_teacher(c, data);

    Dataset train = data.subset(data.split_indices(kSplitTrain));
    Dataset val = data.subset(data.split_indices(kSplitVal));
    EmbeddingMatrix tr = extract_embeddings(ckpt.params, train);
    EmbeddingMatrix va = extract_embeddings(ckpt.params, val);
    accs.push_back(knn_eval(tr.rows, train.labels, va.rows, val.labels, 10));
  }
  std::sort(accs.begin(), accs.end());
  CHECK(accs[1] > 0.9);  // median of 3 seeds
}

TEST_CASE("teacher parameters are bit-identical across a distillation run") {
  Dataset data = tiny_blobs(3);
  TrainConfig p = tiny_pretrain(9);
  p.epochs = 1;
  Checkpoint teacher = pretrain_teacher(p, data);
  Checkpoint frozen = teacher;

  TrainConfig d = tiny_distill(10);
  d.embed_dim = p.embed_dim;
  Dataset train = data.subset(data.split_indices(kSplitTrain));
  BagTable bags = bag_knn(extract_embeddings(teacher.params, train), 5);
  Checkpoint student = distill(d, teacher, &bags, data);
  (void)student;
  CHECK(same_params(teacher.params, frozen.params));
}

TEST_CASE("relation none is exactly the lambda-zero arm") {
  Dataset data = tiny_blobs(4);
  TrainConfig p = tiny_pretrain(11);
  p.epochs = 1;
  Checkpoint teacher = pretrain_teacher(p, data);

  TrainConfig none = tiny_distill(12);
  none.relation_source = RelationSource::None;
  Checkpoint a = distill(none, teacher, nullptr, data);

  TrainConfig zeroed = tiny_distill(12);
  zeroed.relation_source = RelationSource::Teacher;
  zeroed.lambda_inter = 0.0;
  Dataset train = data.subset(data.split_indices(kSplitTrain));
  BagTable bags = bag_knn(extract_embeddings(teacher.params, train), 5);
  Checkpoint b = distill(zeroed, teacher, &bags, data);

  CHECK(same_params(a.params, b.params));
}

TEST_CASE("distill step zero equals the mean standalone intra loss") {
  Dataset data = tiny_blobs(5);
  std::vector<std::size_t> train_rows = data.split_indices(kSplitTrain);

  TrainConfig p = tiny_pretrain(13);
  p.epochs = 1;
  Checkpoint teacher = pretrain_teacher(p, data);

  TrainConfig d = tiny_distill(14);
  d.relation_source = RelationSource::None;
  d.epochs = 1;
  d.batch_size = static_cast<std::size_t>(train_rows.size());  // one full-batch step
  d.bank_capacity = d.batch_size * 2;
  d.log_every = 1;
  std::ostringstream metrics;
  distill(d, teacher, nullptr, data, &metrics);
  double logged_first = parse_losses(metrics.str()).front();

  EncoderSpec spec = d.encoder_spec(data.input_dim);
  EncoderParams student = init_params(spec, d.seed, EncoderRole::Student);
  MemoryBank bank = MemoryBank::random_unit(d.bank_capacity, spec.embed_dim,
                                            mix64(d.seed ^ 0xba4b5eedULL));
  AugmentationPolicy policy = d.policy();
  double sum = 0.0;
  for (std::size_t row : train_rows) {
    sum += intra_loss(student, teacher.params, data.rows.row(row), row, policy, bank, d.tau,
                      0);
  }
  double mean = sum / static_cast<double>(train_rows.size());
  CHECK(logged_first == doctest::Approx(mean).epsilon(1e-9));
}

TEST_CASE("the training loss trends downward") {
  Dataset data = gen_blobs(400, 6, 5, 3.0, 0.4, 21, 0.2);
  TrainConfig p = tiny_pretrain(15);
  p.epochs = 8;
  p.batch_size = 32;
  p.bank_capacity = 128;
  p.momentum_m = 0.99;  // short-schedule key encoder
  std::ostringstream metrics;
  pretrain_teacher(p, data, &metrics);
  std::vector<double> losses = parse_losses(metrics.str());
  REQUIRE(losses.size() >= 20);
  std::size_t tenth = losses.size() / 10;
  REQUIRE(tenth >= 1);
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < tenth; ++i) head += losses[i];
  for (std::size_t i = losses.size() - tenth; i < losses.size(); ++i) tail += losses[i];
  for (double v : losses) CHECK(std::isfinite(v));
  CHECK(tail / static_cast<double>(tenth) < head / static_cast<double>(tenth));
}

TEST_CASE("numeric blowups abort with the step index") {
  Dataset data = tiny_blobs(6);
  TrainConfig c = tiny_pretrain(16);
  c.base_lr = 1e9;
  CHECK_THROWS_WITH_AS(pretrain_teacher(c, data), doctest::Contains("step"), NumericError);
}

TEST_CASE("distill validates bag coverage") {
  Dataset data = tiny_blobs(7);
  TrainConfig p = tiny_pretrain(17);
  p.epochs = 1;
  Checkpoint teacher = pretrain_teacher(p, data);
  TrainConfig d = tiny_distill(18);
  BagTable tiny;
  tiny.strategy = BagStrategy::Labels;
  tiny.members = {{0}};
  CHECK_THROWS_WITH_AS(distill(d, teacher, &tiny, data), doctest::Contains("covers"),
                       InvariantError);
  CHECK_THROWS_WITH_AS(distill(d, teacher, nullptr, data), doctest::Contains("bag table"),
                       InvariantError);
}

TEST_CASE("student-online relation rebags from the evolving student") {
  Dataset data = tiny_blobs(8);
  TrainConfig p = tiny_pretrain(19);
  p.epochs = 1;
  Checkpoint teacher = pretrain_teacher(p, data);
  TrainConfig d = tiny_distill(20);
  d.relation_source = RelationSource::StudentOnline;
  d.rebag_period_epochs = 1;
  d.bag_param = 3;
  Checkpoint student = distill(d, teacher, nullptr, data);
  CHECK(student.params.spec.embed_dim == d.embed_dim);
}

TEST_CASE("momentum-of-student teacher mode trains without a checkpoint") {
  Dataset data = tiny_blobs(9);
  TrainConfig d = tiny_distill(21);
  d.teacher_params_mode = TeacherParamsMode::MomentumOfStudent;
  d.relation_source = RelationSource::None;
  Checkpoint unused;
  unused.params = init_params(d.encoder_spec(data.input_dim), 0);
  Checkpoint student = distill(d, unused, nullptr, data);
  CHECK(student.mode == "distill");
}

TEST_CASE("baseline distillation losses run end to end") {
  Dataset data = tiny_blobs(10);
  TrainConfig p = tiny_pretrain(22);
  p.epochs = 1;
  Checkpoint teacher = pretrain_teacher(p, data);

  TrainConfig kd = tiny_distill(23);
  kd.distill_loss = DistillLoss::KdL2;
  kd.relation_source = RelationSource::None;
  Checkpoint kd_student = distill(kd, teacher, nullptr, data);
  CHECK(kd_student.params.spec.embed_dim == kd.embed_dim);

  TrainConfig rkd = tiny_distill(24);
  rkd.distill_loss = DistillLoss::Rkd;
  rkd.relation_source = RelationSource::None;
  rkd.epochs = 1;
  Checkpoint rkd_student = distill(rkd, teacher, nullptr, data);
  CHECK(rkd_student.params.spec.embed_dim == rkd.embed_dim);
}
