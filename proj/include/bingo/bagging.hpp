#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bingo/data_io.hpp"
#include "bingo/matrix.hpp"
#include "bingo/nets.hpp"
#include "bingo/rng.hpp"

namespace bingo {

// N x D matrix of unit-norm teacher (or student) embeddings.
struct EmbeddingMatrix {
  Matrix rows;

  EmbeddingMatrix() = default;
  // Validates row norms to 1e-5.
  explicit EmbeddingMatrix(Matrix m);

  std::size_t n() const { return rows.rows; }
  std::size_t dim() const { return rows.cols; }
};

// Cosine scores of one anchor against every instance (self included).
std::vector<double> similarity_row(const EmbeddingMatrix& emb, std::size_t anchor);

enum class BagStrategy : std::uint8_t { Knn = 0, Kmeans = 1, Labels = 2 };

const char* strategy_name(BagStrategy s);
BagStrategy strategy_from_name(const std::string& name);

// Per-anchor member lists. Members are sorted ascending and always include the
// anchor. Knn bags hold exactly K+1 entries; kmeans/labels bags partition the
// index space.
struct BagTable {
  BagStrategy strategy = BagStrategy::Knn;
  std::uint32_t param = 0;  // K for knn, C for kmeans, 0 for labels
  std::vector<std::vector<std::int32_t>> members;

  std::size_t n() const { return members.size(); }
  void validate() const;
};

struct ClusterAssignment {
  std::size_t cluster_count = 0;
  std::vector<std::int32_t> labels;      // cluster id per instance
  Matrix centroids;                      // C x D unit rows
  std::vector<double> objective_trace;   // mean of -v.c per iteration
  bool converged = false;
  std::size_t reseeded_clusters = 0;     // empty clusters restarted on far points
};

// Embeddings of the un-augmented rows, in dataset order, chunked internally.
EmbeddingMatrix extract_embeddings(const EncoderParams& params, const Dataset& data);

BagTable bag_knn(const EmbeddingMatrix& emb, std::size_t k);

// Spherical Lloyd iterations: assign to the highest-dot centroid, recompute
// centroids as renormalized member sums. Stops on an assignment fixpoint or
// after max_iters.
std::pair<ClusterAssignment, BagTable> bag_kmeans(const EmbeddingMatrix& emb,
                                                  std::size_t clusters,
                                                  std::size_t max_iters,
                                                  std::uint64_t seed);

BagTable bag_labels(const std::vector<std::int32_t>& labels);

struct PositiveDraw {
  std::int32_t index;
  bool fallback;  // singleton bag: the anchor itself was returned
};

PositiveDraw sample_positive(const BagTable& bags, std::size_t anchor, Rng& rng);

// Text bag file: header "#bingo-bags v1 strategy=<s> param=<v> n=<N>", then one
// "anchor<TAB>m1,m2,..." line per anchor, anchors ascending.
void save_bags(const BagTable& bags, const std::string& path);
BagTable load_bags(const std::string& path);

}  // namespace bingo
