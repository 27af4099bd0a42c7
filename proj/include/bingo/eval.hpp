#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bingo/bagging.hpp"
#include "bingo/data_io.hpp"
#include "bingo/matrix.hpp"

namespace bingo {

struct EvalReport {
  std::string metric;
  double value = 0.0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  std::uint32_t config_fingerprint = 0;
  std::uint64_t seed = 0;

  // "metric=<name> value=<v> train=<n> test=<m> seed=<s> config=<hex>";
  // value round-trips losslessly.
  std::string to_line() const;
  static EvalReport from_line(const std::string& line);
};

// Majority vote over the k highest-cosine training rows. Neighbor ties break
// toward the lower train index, vote ties toward the smaller label.
double knn_eval(const Matrix& train_emb, const std::vector<std::int32_t>& train_labels,
                const Matrix& test_emb, const std::vector<std::int32_t>& test_labels,
                std::size_t k);

struct ProbeConfig {
  std::size_t epochs = 100;
  double lr = 0.5;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
};

// Single linear layer + log-softmax-nll over frozen embeddings, SGD with
// cosine decay; returns test accuracy.
double linear_probe(const Matrix& train_emb, const std::vector<std::int32_t>& train_labels,
                    const Matrix& test_emb, const std::vector<std::int32_t>& test_labels,
                    const ProbeConfig& config);

struct FinetuneConfig {
  std::size_t epochs = 30;
  double lr = 0.01;
  double head_lr_ratio = 10.0;  // fresh classifier layer trains 10x faster
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

// Stratified seeded subset of the train split (label_fraction per class),
// full-network fine-tune with a fresh classification layer, accuracy on the
// val split.
double finetune_fraction(const Checkpoint& student, const Dataset& data,
                         double label_fraction, const FinetuneConfig& config);

struct BagDistanceResult {
  double value = 0.0;
  std::size_t skipped_singletons = 0;
};

// Mean over anchors of the mean squared embedding distance to the anchor's
// bag mates; singleton bags are skipped and counted.
BagDistanceResult bag_distance_embeddings(const Matrix& emb, const BagTable& bags);
BagDistanceResult bag_distance(const EncoderParams& encoder, const BagTable& bags,
                               const Dataset& data);

// Mean squared distance over unordered same-label pairs.
double intra_class_distance(const Matrix& emb, const std::vector<std::int32_t>& labels);

}  // namespace bingo
