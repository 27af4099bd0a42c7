#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "bingo/bagging.hpp"
#include "test_util.hpp"

using namespace bingo;
using bingo_test::TempDir;
using bingo_test::slurp;
using bingo_test::spit;

namespace {

EmbeddingMatrix random_unit(std::size_t n, std::size_t d, std::uint64_t seed) {
  Matrix m(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = keyed_rng(seed, i);
    double nsq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      m.at(i, j) = rng.next_normal();
      nsq += m.at(i, j) * m.at(i, j);
    }
    double nrm = std::sqrt(nsq);
    for (std::size_t j = 0; j < d; ++j) m.at(i, j) /= nrm;
  }
  return EmbeddingMatrix(std::move(m));
}

// Full-sort reference for KNN bagging.
std::set<std::int32_t> brute_force_bag(const EmbeddingMatrix& emb, std::size_t a,
                                       std::size_t k) {
  std::vector<double> scores = similarity_row(emb, a);
  std::vector<std::int32_t> order;
  for (std::size_t i = 0; i < emb.n(); ++i) {
    if (i != a) order.push_back(static_cast<std::int32_t>(i));
  }
  std::sort(order.begin(), order.end(), [&scores](std::int32_t x, std::int32_t y) {
    if (scores[static_cast<std::size_t>(x)] != scores[static_cast<std::size_t>(y)])
      return scores[static_cast<std::size_t>(x)] > scores[static_cast<std::size_t>(y)];
    return x < y;
  });
  std::set<std::int32_t> bag(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  bag.insert(static_cast<std::int32_t>(a));
  return bag;
}

}  // namespace

TEST_CASE("knn over orthogonal basis rows breaks ties toward lower indices") {
  Matrix m(4, 4);
  for (std::size_t i = 0; i < 4; ++i) m.at(i, i) = 1.0;
  BagTable bags = bag_knn(EmbeddingMatrix(std::move(m)), 1);
  CHECK(bags.members[0] == std::vector<std::int32_t>{0, 1});
  CHECK(bags.members[2] == std::vector<std::int32_t>{0, 2});
}

TEST_CASE("knn picks the cosine-nearest neighbor") {
  Matrix m(3, 2, {1.0, 0.0, 0.866, 0.5, 0.0, 1.0});
  for (std::size_t i = 0; i < 3; ++i) {
    double nrm = norm(m.row(i));
    for (double& v : m.row(i)) v /= nrm;
  }
  EmbeddingMatrix emb(std::move(m));
  BagTable bags = bag_knn(emb, 1);
  CHECK(bags.members[0] == std::vector<std::int32_t>{0, 1});
  // cross-check against the reference ranking
  std::set<std::int32_t> expect = brute_force_bag(emb, 0, 1);
  std::set<std::int32_t> got(bags.members[0].begin(), bags.members[0].end());
  CHECK(got == expect);
}

TEST_CASE("knn with K=N-1 bags everything") {
  EmbeddingMatrix emb = random_unit(7, 3, 1);
  BagTable bags = bag_knn(emb, 6);
  for (std::size_t a = 0; a < 7; ++a) {
    CHECK(bags.members[a].size() == 7);
  }
}

TEST_CASE("knn matches the brute-force oracle on random matrices") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    EmbeddingMatrix emb = random_unit(200, 8, 100 + seed);
    for (std::size_t k : {1, 5, 20}) {
      BagTable bags = bag_knn(emb, k);
      bags.validate();
      for (std::size_t a = 0; a < emb.n(); a += 17) {
        std::set<std::int32_t> got(bags.members[a].begin(), bags.members[a].end());
        CHECK(got == brute_force_bag(emb, a, k));
      }
    }
  }
}

TEST_CASE("knn rejects K out of range") {
  EmbeddingMatrix emb = random_unit(5, 3, 2);
  CHECK_THROWS_AS(bag_knn(emb, 5), InvariantError);
  CHECK_THROWS_AS(bag_knn(emb, 0), InvariantError);
}

TEST_CASE("kmeans separates antipodal groups") {
  Matrix m(8, 2);
  for (std::size_t i = 0; i < 4; ++i) {
    double angle = 0.05 * static_cast<double>(i);
    m.at(i, 0) = std::cos(angle);
    m.at(i, 1) = std::sin(angle);
    m.at(i + 4, 0) = -std::cos(angle);
    m.at(i + 4, 1) = -std::sin(angle);
  }
  auto [assign, bags] = bag_kmeans(EmbeddingMatrix(std::move(m)), 2, 50, 0);
  CHECK(assign.converged);
  std::set<std::int32_t> first(bags.members[0].begin(), bags.members[0].end());
  CHECK(first == std::set<std::int32_t>{0, 1, 2, 3});
  std::set<std::int32_t> second(bags.members[4].begin(), bags.members[4].end());
  CHECK(second == std::set<std::int32_t>{4, 5, 6, 7});
}

TEST_CASE("kmeans with one cluster bags the whole dataset") {
  EmbeddingMatrix emb = random_unit(10, 4, 4);
  auto [assign, bags] = bag_kmeans(emb, 1, 20, 5);
  for (std::size_t a = 0; a < 10; ++a) {
    CHECK(bags.members[a].size() == 10);
  }
}

TEST_CASE("kmeans with C=N reaches the singleton optimum") {
  EmbeddingMatrix emb = random_unit(9, 5, 6);
  auto [assign, bags] = bag_kmeans(emb, 9, 50, 7);
  CHECK(assign.converged);
  CHECK(assign.objective_trace.back() == doctest::Approx(-1.0).epsilon(1e-12));
  for (std::size_t a = 0; a < 9; ++a) {
    CHECK(bags.members[a] == std::vector<std::int32_t>{static_cast<std::int32_t>(a)});
  }
}

TEST_CASE("kmeans objective never increases and converged means fixpoint") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    EmbeddingMatrix emb = random_unit(60, 6, 200 + seed);
    auto [assign, bags] = bag_kmeans(emb, 5, 40, seed);
    for (std::size_t i = 1; i < assign.objective_trace.size(); ++i) {
      CHECK(assign.objective_trace[i] <= assign.objective_trace[i - 1] + 1e-12);
    }
    if (assign.converged) {
      // one more sweep from the final state keeps every assignment
      for (std::size_t p = 0; p < emb.n(); ++p) {
        auto v = emb.rows.row(p);
        std::size_t best = 0;
        double best_dot = dot(v, assign.centroids.row(0));
        for (std::size_t c = 1; c < assign.cluster_count; ++c) {
          double s = dot(v, assign.centroids.row(c));
          if (s > best_dot) {
            best_dot = s;
            best = c;
          }
        }
        CHECK(static_cast<std::int32_t>(best) == assign.labels[p]);
      }
    }
  }
}

TEST_CASE("kmeans reseeds empty clusters and flags them") {
  Matrix m(6, 2);
  for (std::size_t i = 0; i < 6; ++i) {
    m.at(i, 0) = 1.0;  // all identical: ties collapse into cluster 0
    m.at(i, 1) = 0.0;
  }
  auto [assign, bags] = bag_kmeans(EmbeddingMatrix(std::move(m)), 2, 10, 1);
  CHECK(assign.reseeded_clusters >= 1);
  for (std::size_t a = 0; a < 6; ++a) {
    CHECK(bags.members[a].size() == 6);
  }
}

TEST_CASE("label bags follow the ground truth partition") {
  BagTable bags = bag_labels({0, 0, 1});
  CHECK(bags.members[0] == std::vector<std::int32_t>{0, 1});
  CHECK(bags.members[1] == std::vector<std::int32_t>{0, 1});
  CHECK(bags.members[2] == std::vector<std::int32_t>{2});

  BagTable all_same = bag_labels({4, 4, 4, 4});
  for (std::size_t a = 0; a < 4; ++a) CHECK(all_same.members[a].size() == 4);

  BagTable all_distinct = bag_labels({3, 1, 7});
  for (std::size_t a = 0; a < 3; ++a) {
    CHECK(all_distinct.members[a] == std::vector<std::int32_t>{static_cast<std::int32_t>(a)});
  }
}

TEST_CASE("partition strategies are symmetric and anchors belong to their bags") {
  EmbeddingMatrix emb = random_unit(40, 4, 8);
  auto [assign, kmeans_bags] = bag_kmeans(emb, 4, 30, 9);
  BagTable knn_bags = bag_knn(emb, 3);
  std::vector<std::int32_t> labels(40);
  for (std::size_t i = 0; i < 40; ++i) labels[i] = static_cast<std::int32_t>(i % 5);
  BagTable label_bags = bag_labels(labels);

  for (const BagTable* bags : {&kmeans_bags, &knn_bags, &label_bags}) {
    for (std::size_t a = 0; a < bags->n(); ++a) {
      CHECK(std::binary_search(bags->members[a].begin(), bags->members[a].end(),
                               static_cast<std::int32_t>(a)));
    }
  }
  for (const BagTable* bags : {&kmeans_bags, &label_bags}) {
    for (std::size_t a = 0; a < bags->n(); ++a) {
      for (std::int32_t m : bags->members[a]) {
        CHECK(std::binary_search(bags->members[static_cast<std::size_t>(m)].begin(),
                                 bags->members[static_cast<std::size_t>(m)].end(),
                                 static_cast<std::int32_t>(a)));
      }
    }
  }
}

TEST_CASE("sample_positive draws uniformly and flags singleton fallbacks") {
  BagTable pair;
  pair.strategy = BagStrategy::Labels;
  pair.members = {{0, 1}, {0, 1}};
  Rng rng = keyed_rng(10, 0);
  for (int i = 0; i < 20; ++i) {
    PositiveDraw d = sample_positive(pair, 0, rng);
    CHECK(d.index == 1);
    CHECK_FALSE(d.fallback);
  }

  BagTable singleton;
  singleton.strategy = BagStrategy::Labels;
  singleton.members = {{0}};
  PositiveDraw d = sample_positive(singleton, 0, rng);
  CHECK(d.index == 0);
  CHECK(d.fallback);

  BagTable trio;
  trio.strategy = BagStrategy::Labels;
  trio.members = {{0, 1, 2}, {0, 1, 2}, {0, 1, 2}};
  int count1 = 0;
  const int n = 10000;
  Rng rng2 = keyed_rng(11, 0);
  for (int i = 0; i < n; ++i) {
    PositiveDraw draw = sample_positive(trio, 0, rng2);
    CHECK(draw.index != 0);
    if (draw.index == 1) ++count1;
  }
  double sigma = std::sqrt(n * 0.25);
  CHECK(std::abs(count1 - n / 2) <= 3.0 * sigma);
}

TEST_CASE("extract_embeddings is chunking-independent and handles edge sizes") {
  EncoderSpec spec;
  spec.input_dim = 5;
  spec.hidden_dims = {6};
  spec.proj_hidden_dim = 5;
  spec.embed_dim = 4;
  EncoderParams params = init_params(spec, 12);
  Dataset data = gen_blobs(300, 5, 3, 2.0, 0.3, 13, 0.0);
  EmbeddingMatrix emb = extract_embeddings(params, data);
  REQUIRE(emb.n() == 300);
  // row-by-row reference forward
  for (std::size_t i = 0; i < data.n; i += 37) {
    Matrix one(1, 5);
    std::copy(data.rows.row(i).begin(), data.rows.row(i).end(), one.row(0).begin());
    ForwardResult fwd = encoder_forward(params, one);
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(emb.rows.at(i, j) == fwd.embeddings.at(0, j));
    }
  }

  Dataset single = gen_blobs(1, 5, 1, 1.0, 0.0, 14, 0.0);
  EmbeddingMatrix one_emb = extract_embeddings(params, single);
  CHECK(one_emb.n() == 1);
  CHECK(std::abs(norm(one_emb.rows.row(0)) - 1.0) <= 1e-10);

  // duplicate instances embed identically
  Dataset dup = gen_blobs(6, 5, 3, 2.0, 0.0, 15, 0.0);
  EmbeddingMatrix dup_emb = extract_embeddings(params, dup);
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(dup_emb.rows.at(0, j) == dup_emb.rows.at(3, j));  // same class center
  }
}

TEST_CASE("bag files round trip and enforce their invariants") {
  TempDir tmp("bags");
  EmbeddingMatrix emb = random_unit(12, 4, 16);
  BagTable bags = bag_knn(emb, 3);
  save_bags(bags, tmp.file("b.tsv"));
  BagTable loaded = load_bags(tmp.file("b.tsv"));
  CHECK(loaded.strategy == bags.strategy);
  CHECK(loaded.param == bags.param);
  CHECK(loaded.members == bags.members);
  save_bags(loaded, tmp.file("b2.tsv"));
  CHECK(slurp(tmp.file("b.tsv")) == slurp(tmp.file("b2.tsv")));

  std::string text = slurp(tmp.file("b.tsv"));
  CHECK(text.rfind("#bingo-bags v1 strategy=knn param=3 n=12", 0) == 0);

  // anchor missing from its own member list
  spit(tmp.file("bad.tsv"), "#bingo-bags v1 strategy=labels param=0 n=2\n0\t0,1\n1\t0\n");
  CHECK_THROWS_WITH_AS(load_bags(tmp.file("bad.tsv")),
                       doctest::Contains("missing from its own bag"), InvariantError);

  // empty table: header only
  BagTable empty;
  empty.strategy = BagStrategy::Labels;
  save_bags(empty, tmp.file("empty.tsv"));
  BagTable empty_loaded = load_bags(tmp.file("empty.tsv"));
  CHECK(empty_loaded.n() == 0);

  // fuzzed header bytes are rejected
  std::string bytes = slurp(tmp.file("b.tsv"));
  for (std::size_t off = 0; off < std::min<std::size_t>(64, bytes.size()); ++off) {
    std::string mutated = bytes;
    mutated[off] = static_cast<char>(mutated[off] ^ 0xff);
    spit(tmp.file("fuzz.tsv"), mutated);
    CHECK_THROWS_AS(load_bags(tmp.file("fuzz.tsv")), Error);
  }
}
