#include "bingo/bagging.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace bingo {

EmbeddingMatrix::EmbeddingMatrix(Matrix m) : rows(std::move(m)) {
  for (std::size_t i = 0; i < rows.rows; ++i) {
    double nrm = norm(rows.row(i));
    if (std::abs(nrm - 1.0) > 1e-5) {
      throw InvariantError("EmbeddingMatrix: row " + std::to_string(i) +
                           " has norm " + std::to_string(nrm) + ", want 1 within 1e-5");
    }
  }
}

std::vector<double> similarity_row(const EmbeddingMatrix& emb, std::size_t anchor) {
  if (anchor >= emb.n()) throw InvariantError("similarity_row: anchor out of range");
  std::vector<double> scores(emb.n());
  auto a = emb.rows.row(anchor);
  for (std::size_t i = 0; i < emb.n(); ++i) scores[i] = dot(a, emb.rows.row(i));
  return scores;
}

const char* strategy_name(BagStrategy s) {
  switch (s) {
    case BagStrategy::Knn: return "knn";
    case BagStrategy::Kmeans: return "kmeans";
    case BagStrategy::Labels: return "labels";
  }
  return "?";
}

BagStrategy strategy_from_name(const std::string& name) {
  if (name == "knn") return BagStrategy::Knn;
  if (name == "kmeans") return BagStrategy::Kmeans;
  if (name == "labels") return BagStrategy::Labels;
  throw InvariantError("unknown bag strategy '" + name + "'");
}

void BagTable::validate() const {
  std::int32_t n_i32 = static_cast<std::int32_t>(n());
  for (std::size_t a = 0; a < members.size(); ++a) {
    const auto& bag = members[a];
    if (bag.empty()) throw InvariantError("BagTable: empty bag at anchor " + std::to_string(a));
    if (!std::is_sorted(bag.begin(), bag.end())) {
      throw InvariantError("BagTable: members not sorted at anchor " + std::to_string(a));
    }
    if (std::adjacent_find(bag.begin(), bag.end()) != bag.end()) {
      throw InvariantError("BagTable: duplicate members at anchor " + std::to_string(a));
    }
    if (bag.front() < 0 || bag.back() >= n_i32) {
      throw InvariantError("BagTable: member out of range at anchor " + std::to_string(a));
    }
    if (!std::binary_search(bag.begin(), bag.end(), static_cast<std::int32_t>(a))) {
      throw InvariantError("BagTable: anchor " + std::to_string(a) +
                           " missing from its own bag");
    }
    if (strategy == BagStrategy::Knn && bag.size() != static_cast<std::size_t>(param) + 1) {
      throw InvariantError("BagTable: knn bag at anchor " + std::to_string(a) + " has " +
                           std::to_string(bag.size()) + " members, want K+1");
    }
  }
}

EmbeddingMatrix extract_embeddings(const EncoderParams& params, const Dataset& data) {
  params.validate();
  data.validate();
  if (data.input_dim != params.spec.input_dim) {
    throw InvariantError("extract_embeddings: dataset dim " + std::to_string(data.input_dim) +
                         " != encoder input_dim " + std::to_string(params.spec.input_dim));
  }
  constexpr std::size_t kChunk = 256;
  Matrix out(data.n, params.spec.embed_dim);
  for (std::size_t start = 0; start < data.n; start += kChunk) {
    std::size_t count = std::min(kChunk, data.n - start);
    Matrix chunk(count, data.input_dim);
    std::copy(data.rows.data.begin() + static_cast<std::ptrdiff_t>(start * data.input_dim),
              data.rows.data.begin() + static_cast<std::ptrdiff_t>((start + count) * data.input_dim),
              chunk.data.begin());
    ForwardResult fwd = encoder_forward(params, chunk);
    if (!fwd.degenerate_rows.empty()) {
      throw NumericError("extract_embeddings: degenerate embedding at row " +
                         std::to_string(start + fwd.degenerate_rows.front()));
    }
    std::copy(fwd.embeddings.data.begin(), fwd.embeddings.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(start * params.spec.embed_dim));
  }
  return EmbeddingMatrix(std::move(out));
}

BagTable bag_knn(const EmbeddingMatrix& emb, std::size_t k) {
  std::size_t n = emb.n();
  if (k < 1 || k >= n) {
    throw InvariantError("bag_knn: need 1 <= K < N, got K=" + std::to_string(k) +
                         " N=" + std::to_string(n));
  }
  BagTable bags;
  bags.strategy = BagStrategy::Knn;
  bags.param = static_cast<std::uint32_t>(k);
  bags.members.resize(n);
  std::vector<std::int32_t> order(n - 1);
  for (std::size_t a = 0; a < n; ++a) {
    std::vector<double> scores = similarity_row(emb, a);
    // rank all candidates except the anchor; score descending, index ascending
    std::size_t w = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (i != a) order[w++] = static_cast<std::int32_t>(i);
    }
    auto better = [&scores](std::int32_t x, std::int32_t y) {
      if (scores[static_cast<std::size_t>(x)] != scores[static_cast<std::size_t>(y)])
        return scores[static_cast<std::size_t>(x)] > scores[static_cast<std::size_t>(y)];
      return x < y;
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                      order.end(), better);
    auto& bag = bags.members[a];
    bag.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    bag.push_back(static_cast<std::int32_t>(a));
    std::sort(bag.begin(), bag.end());
  }
  return bags;
}

namespace {

BagTable bags_from_partition(BagStrategy strategy, std::uint32_t param,
                             const std::vector<std::int32_t>& assignment,
                             std::size_t group_count) {
  std::vector<std::vector<std::int32_t>> groups(group_count);
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    groups[static_cast<std::size_t>(assignment[i])].push_back(static_cast<std::int32_t>(i));
  }
  BagTable bags;
  bags.strategy = strategy;
  bags.param = param;
  bags.members.resize(assignment.size());
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    bags.members[i] = groups[static_cast<std::size_t>(assignment[i])];
  }
  return bags;
}

}  // namespace

std::pair<ClusterAssignment, BagTable> bag_kmeans(const EmbeddingMatrix& emb,
                                                  std::size_t clusters,
                                                  std::size_t max_iters,
                                                  std::uint64_t seed) {
  std::size_t n = emb.n();
  std::size_t d = emb.dim();
  if (clusters < 1 || clusters > n) {
    throw InvariantError("bag_kmeans: need 1 <= C <= N");
  }
  if (max_iters < 1) throw InvariantError("bag_kmeans: max_iters must be >= 1");

  ClusterAssignment ca;
  ca.cluster_count = clusters;
  ca.centroids = Matrix(clusters, d);
  // Seeded distinct-row initialization: partial Fisher-Yates over indices.
  {
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    Rng rng = keyed_rng(seed, 0x6b6d65616e73ULL);
    for (std::size_t c = 0; c < clusters; ++c) {
      std::size_t j = c + static_cast<std::size_t>(rng.next_below(n - c));
      std::swap(pool[c], pool[j]);
      auto src = emb.rows.row(pool[c]);
      std::copy(src.begin(), src.end(), ca.centroids.row(c).begin());
    }
  }

  ca.labels.assign(n, -1);
  std::vector<std::int32_t> prev(n, -1);
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    // Assignment: highest dot, ties to the lower cluster index.
    double objective = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      auto v = emb.rows.row(i);
      std::size_t best = 0;
      double best_dot = dot(v, ca.centroids.row(0));
      for (std::size_t c = 1; c < clusters; ++c) {
        double s = dot(v, ca.centroids.row(c));
        if (s > best_dot) {
          best_dot = s;
          best = c;
        }
      }
      ca.labels[i] = static_cast<std::int32_t>(best);
      objective -= best_dot;
    }
    ca.objective_trace.push_back(objective / static_cast<double>(n));
    if (ca.labels == prev) {
      ca.converged = true;
      break;
    }
    prev = ca.labels;

    // Update: renormalized member sums.
    Matrix sums(clusters, d);
    std::vector<std::size_t> counts(clusters, 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto v = emb.rows.row(i);
      auto s = sums.row(static_cast<std::size_t>(ca.labels[i]));
      for (std::size_t j = 0; j < d; ++j) s[j] += v[j];
      ++counts[static_cast<std::size_t>(ca.labels[i])];
    }
    std::vector<std::size_t> empties;
    for (std::size_t c = 0; c < clusters; ++c) {
      if (counts[c] == 0) {
        empties.push_back(c);
        continue;
      }
      double nrm = norm(sums.row(c));
      if (nrm < 1e-12) continue;  // cancelled sum: keep the previous centroid
      auto dst = ca.centroids.row(c);
      auto s = sums.row(c);
      for (std::size_t j = 0; j < d; ++j) dst[j] = s[j] / nrm;
    }
    if (!empties.empty()) {
      // Reseed each empty cluster on the point farthest from its nearest
      // centroid (lowest max-similarity), skipping already-used points.
      std::vector<double> nearest(n, -2.0);
      for (std::size_t i = 0; i < n; ++i) {
        auto v = emb.rows.row(i);
        for (std::size_t c = 0; c < clusters; ++c) {
          nearest[i] = std::max(nearest[i], dot(v, ca.centroids.row(c)));
        }
      }
      std::vector<bool> used(n, false);
      for (std::size_t c : empties) {
        std::size_t far_idx = n;
        for (std::size_t i = 0; i < n; ++i) {
          if (used[i]) continue;
          if (far_idx == n || nearest[i] < nearest[far_idx]) far_idx = i;
        }
        used[far_idx] = true;
        auto src = emb.rows.row(far_idx);
        std::copy(src.begin(), src.end(), ca.centroids.row(c).begin());
        ++ca.reseeded_clusters;
      }
    }
  }

  BagTable bags = bags_from_partition(BagStrategy::Kmeans, static_cast<std::uint32_t>(clusters),
                                      ca.labels, clusters);
  return {std::move(ca), std::move(bags)};
}

BagTable bag_labels(const std::vector<std::int32_t>& labels) {
  // Map arbitrary label values onto dense group ids.
  std::vector<std::int32_t> sorted_vals(labels);
  std::sort(sorted_vals.begin(), sorted_vals.end());
  sorted_vals.erase(std::unique(sorted_vals.begin(), sorted_vals.end()), sorted_vals.end());
  std::vector<std::int32_t> group(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    group[i] = static_cast<std::int32_t>(
        std::lower_bound(sorted_vals.begin(), sorted_vals.end(), labels[i]) -
        sorted_vals.begin());
  }
  return bags_from_partition(BagStrategy::Labels, 0, group, sorted_vals.size());
}

PositiveDraw sample_positive(const BagTable& bags, std::size_t anchor, Rng& rng) {
  if (anchor >= bags.n()) throw InvariantError("sample_positive: anchor out of range");
  const auto& bag = bags.members[anchor];
  if (bag.size() == 1) {
    return {static_cast<std::int32_t>(anchor), true};
  }
  std::size_t r = static_cast<std::size_t>(rng.next_below(bag.size() - 1));
  auto anchor_pos = static_cast<std::size_t>(
      std::lower_bound(bag.begin(), bag.end(), static_cast<std::int32_t>(anchor)) -
      bag.begin());
  return {bag[r < anchor_pos ? r : r + 1], false};
}

void save_bags(const BagTable& bags, const std::string& path) {
  bags.validate();
  std::ostringstream os;
  os << "#bingo-bags v1 strategy=" << strategy_name(bags.strategy) << " param=" << bags.param
     << " n=" << bags.n() << "\n";
  for (std::size_t a = 0; a < bags.n(); ++a) {
    os << a << '\t';
    const auto& bag = bags.members[a];
    for (std::size_t i = 0; i < bag.size(); ++i) {
      if (i) os << ',';
      os << bag[i];
    }
    os << '\n';
  }
  std::string payload = os.str();
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InvariantError("cannot open " + tmp + " for writing");
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw InvariantError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

namespace {

std::int64_t parse_int(const std::string& s, const char* what) {
  if (s.empty()) throw InvariantError(std::string("bag file: empty ") + what);
  std::size_t pos = 0;
  std::int64_t v = 0;
  for (; pos < s.size(); ++pos) {
    char c = s[pos];
    if (c < '0' || c > '9') {
      throw InvariantError(std::string("bag file: malformed ") + what + " '" + s + "'");
    }
    v = v * 10 + (c - '0');
    if (v > (std::int64_t{1} << 40)) {
      throw InvariantError(std::string("bag file: ") + what + " out of range");
    }
  }
  return v;
}

}  // namespace

BagTable load_bags(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvariantError("bag file: cannot open " + path);
  std::string header;
  if (!std::getline(in, header)) throw InvariantError("bag file: missing header");
  std::istringstream hs(header);
  std::string tag, version, strategy_kv, param_kv, n_kv;
  hs >> tag >> version >> strategy_kv >> param_kv >> n_kv;
  std::string extra;
  if (tag != "#bingo-bags" || version != "v1" || (hs >> extra)) {
    throw InvariantError("bag file: bad header '" + header + "'");
  }
  auto kv = [](const std::string& s, const char* key) {
    std::string prefix = std::string(key) + "=";
    if (s.rfind(prefix, 0) != 0) {
      throw InvariantError("bag file: expected '" + prefix + "...' in header, got '" + s + "'");
    }
    return s.substr(prefix.size());
  };
  BagTable bags;
  bags.strategy = strategy_from_name(kv(strategy_kv, "strategy"));
  bags.param = static_cast<std::uint32_t>(parse_int(kv(param_kv, "param"), "param"));
  std::int64_t n = parse_int(kv(n_kv, "n"), "n");
  bags.members.resize(static_cast<std::size_t>(n));
  std::string line;
  for (std::int64_t a = 0; a < n; ++a) {
    if (!std::getline(in, line)) {
      throw InvariantError("bag file: missing line for anchor " + std::to_string(a));
    }
    std::size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw InvariantError("bag file: no tab separator at anchor " + std::to_string(a));
    }
    if (parse_int(line.substr(0, tab), "anchor id") != a) {
      throw InvariantError("bag file: anchors out of order at line " + std::to_string(a + 2));
    }
    auto& bag = bags.members[static_cast<std::size_t>(a)];
    std::string rest = line.substr(tab + 1);
    std::size_t start = 0;
    while (start <= rest.size()) {
      std::size_t comma = rest.find(',', start);
      std::string item = rest.substr(start, comma == std::string::npos ? std::string::npos
                                                                       : comma - start);
      bag.push_back(static_cast<std::int32_t>(parse_int(item, "member id")));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  }
  if (std::getline(in, line) && !line.empty()) {
    throw InvariantError("bag file: trailing content after " + std::to_string(n) + " anchors");
  }
  bags.validate();
  return bags;
}

}  // namespace bingo
