#include "bingo/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "bingo/rng.hpp"
#include "bingo/tensor.hpp"
#include "bingo/train.hpp"

namespace bingo {

std::string EvalReport::to_line() const {
  char buf[192];
  std::snprintf(buf, sizeof buf, "metric=%s value=%.17g train=%zu test=%zu seed=%llu config=%08x",
                metric.c_str(), value, train_size, test_size,
                static_cast<unsigned long long>(seed), config_fingerprint);
  return buf;
}

EvalReport EvalReport::from_line(const std::string& line) {
  std::istringstream is(line);
  std::string tok;
  EvalReport r;
  bool have[6] = {};
  while (is >> tok) {
    std::size_t eq = tok.find('=');
    if (eq == std::string::npos) throw InvariantError("EvalReport: malformed token '" + tok + "'");
    std::string key = tok.substr(0, eq);
    std::string val = tok.substr(eq + 1);
    try {
      if (key == "metric") { r.metric = val; have[0] = true; }
      else if (key == "value") { r.value = std::stod(val); have[1] = true; }
      else if (key == "train") { r.train_size = std::stoull(val); have[2] = true; }
      else if (key == "test") { r.test_size = std::stoull(val); have[3] = true; }
      else if (key == "seed") { r.seed = std::stoull(val); have[4] = true; }
      else if (key == "config") { r.config_fingerprint = static_cast<std::uint32_t>(std::stoul(val, nullptr, 16)); have[5] = true; }
      else throw InvariantError("EvalReport: unknown key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw InvariantError("EvalReport: malformed value in '" + tok + "'");
    } catch (const std::out_of_range&) {
      throw InvariantError("EvalReport: value out of range in '" + tok + "'");
    }
  }
  for (bool h : have) {
    if (!h) throw InvariantError("EvalReport: missing field in '" + line + "'");
  }
  return r;
}

double knn_eval(const Matrix& train_emb, const std::vector<std::int32_t>& train_labels,
                const Matrix& test_emb, const std::vector<std::int32_t>& test_labels,
                std::size_t k) {
  if (train_emb.rows != train_labels.size() || test_emb.rows != test_labels.size()) {
    throw InvariantError("knn_eval: labels/embeddings length mismatch");
  }
  if (train_emb.cols != test_emb.cols) {
    throw InvariantError("knn_eval: embedding dims disagree");
  }
  if (k < 1 || k > train_emb.rows) {
    throw InvariantError("knn_eval: need 1 <= k <= train size");
  }
  if (test_emb.rows == 0) throw InvariantError("knn_eval: empty test set");
  std::size_t correct = 0;
  std::vector<std::int32_t> order(train_emb.rows);
  std::vector<double> scores(train_emb.rows);
  for (std::size_t t = 0; t < test_emb.rows; ++t) {
    auto q = test_emb.row(t);
    for (std::size_t i = 0; i < train_emb.rows; ++i) scores[i] = dot(q, train_emb.row(i));
    std::iota(order.begin(), order.end(), 0);
    auto better = [&scores](std::int32_t a, std::int32_t b) {
      if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)])
        return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
      return a < b;
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k),
                      order.end(), better);
    std::map<std::int32_t, std::size_t> votes;
    for (std::size_t i = 0; i < k; ++i) {
      ++votes[train_labels[static_cast<std::size_t>(order[i])]];
    }
    std::int32_t winner = votes.begin()->first;
    std::size_t best = votes.begin()->second;
    for (const auto& [label, count] : votes) {
      if (count > best) {  // vote ties keep the smaller label (map order)
        best = count;
        winner = label;
      }
    }
    if (winner == test_labels[t]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test_emb.rows);
}

namespace {

std::size_t class_count(const std::vector<std::int32_t>& labels, const char* what) {
  std::int32_t mx = -1;
  for (std::int32_t l : labels) {
    if (l < 0) throw InvariantError(std::string(what) + ": labels must be >= 0");
    mx = std::max(mx, l);
  }
  return static_cast<std::size_t>(mx) + 1;
}

std::size_t argmax_row(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < logits.size(); ++j) {
    if (logits[j] > logits[best]) best = j;  // ties keep the smallest index
  }
  return best;
}

}  // namespace

double linear_probe(const Matrix& train_emb, const std::vector<std::int32_t>& train_labels,
                    const Matrix& test_emb, const std::vector<std::int32_t>& test_labels,
                    const ProbeConfig& config) {
  if (train_emb.rows != train_labels.size() || test_emb.rows != test_labels.size()) {
    throw InvariantError("linear_probe: labels/embeddings length mismatch");
  }
  if (train_emb.rows == 0 || test_emb.rows == 0) {
    throw InvariantError("linear_probe: empty split");
  }
  std::size_t classes = class_count(train_labels, "linear_probe");
  if (classes < 2) throw InvariantError("linear_probe: single-class labels are degenerate");
  std::size_t dim = train_emb.cols;

  Matrix w(dim, classes);
  std::vector<double> b(classes, 0.0);
  std::vector<double> vel_w(w.data.size(), 0.0), vel_b(classes, 0.0);

  std::size_t n = train_emb.rows;
  std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  std::size_t total_steps = steps_per_epoch * config.epochs;
  std::size_t step = 0;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng rng = keyed_rng(config.seed, 0x70726f6265ULL, epoch);
    shuffle(order, rng);
    for (std::size_t start = 0; start < n; start += config.batch_size, ++step) {
      std::size_t count = std::min(config.batch_size, n - start);
      Graph g;
      NodeId wn = g.input({dim, classes}, true, "probe.w");
      NodeId bn = g.input({1, classes}, true, "probe.b");
      std::vector<NodeId> losses;
      for (std::size_t i = 0; i < count; ++i) {
        std::size_t row = order[start + i];
        auto x = train_emb.row(row);
        NodeId xn = g.constant(Tensor::row(std::vector<double>(x.begin(), x.end())));
        NodeId logits = g.add(g.matmul(xn, wn), bn);
        losses.push_back(g.log_softmax_nll(
            logits, static_cast<std::size_t>(train_labels[row])));
      }
      NodeId loss = g.scale(g.sum(g.concat_rows(losses)), 1.0 / static_cast<double>(count));
      std::map<NodeId, Tensor> bindings;
      bindings[wn] = Tensor::matrix(dim, classes, w.data);
      bindings[bn] = Tensor::row(b);
      Evaluation ev = evaluate(g, bindings);
      backpropagate(g, ev, loss);
      double lr = cosine_lr(step, total_steps, config.lr);
      sgd_momentum_step(w.data, ev.grad(wn), lr, config.momentum, config.weight_decay, vel_w);
      sgd_momentum_step(b, ev.grad(bn), lr, config.momentum, config.weight_decay, vel_b);
    }
  }

  std::size_t correct = 0;
  std::vector<double> logits(classes);
  for (std::size_t t = 0; t < test_emb.rows; ++t) {
    auto x = test_emb.row(t);
    for (std::size_t c = 0; c < classes; ++c) logits[c] = b[c];
    for (std::size_t j = 0; j < dim; ++j) {
      double xv = x[j];
      if (xv == 0.0) continue;
      for (std::size_t c = 0; c < classes; ++c) logits[c] += xv * w.at(j, c);
    }
    if (argmax_row(logits) == static_cast<std::size_t>(test_labels[t])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test_emb.rows);
}

double finetune_fraction(const Checkpoint& student, const Dataset& data,
                         double label_fraction, const FinetuneConfig& config) {
  data.validate();
  if (!data.has_labels()) throw InvariantError("finetune_fraction: dataset has no labels");
  if (!(label_fraction > 0.0) || label_fraction > 1.0) {
    throw InvariantError("finetune_fraction: label_fraction must lie in (0, 1]");
  }
  student.params.validate();
  if (student.params.spec.input_dim != data.input_dim) {
    throw InvariantError("finetune_fraction: encoder input_dim does not match dataset");
  }
  std::size_t classes = class_count(data.labels, "finetune_fraction");
  std::vector<std::size_t> train_rows = data.split_indices(kSplitTrain);
  std::vector<std::size_t> val_rows = data.split_indices(kSplitVal);
  if (val_rows.empty()) throw InvariantError("finetune_fraction: empty val split");

  // Seeded stratified subset of the train split.
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t row : train_rows) {
    by_class[static_cast<std::size_t>(data.labels[row])].push_back(row);
  }
  std::vector<std::size_t> selected;
  std::string uncovered;
  for (std::size_t c = 0; c < classes; ++c) {
    auto& members = by_class[c];
    std::size_t take = static_cast<std::size_t>(
        std::floor(label_fraction * static_cast<double>(members.size())));
    if (take == 0) {
      if (!uncovered.empty()) uncovered += ", ";
      uncovered += std::to_string(c);
      continue;
    }
    Rng rng = keyed_rng(config.seed, 0x66726163ULL, c);
    shuffle(members, rng);
    selected.insert(selected.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take));
  }
  if (!uncovered.empty()) {
    throw InvariantError("finetune_fraction: fraction leaves classes uncovered: " + uncovered);
  }
  std::sort(selected.begin(), selected.end());

  EncoderParams encoder = student.params;
  const EncoderSpec& spec = encoder.spec;
  // Fresh classification layer, trained at head_lr_ratio times the encoder lr.
  Matrix head_w(spec.embed_dim, classes);
  {
    double s = std::sqrt(6.0 / static_cast<double>(spec.embed_dim + classes));
    Rng rng = keyed_rng(config.seed, 0x68656164ULL);
    for (double& v : head_w.data) v = rng.next_uniform(-s, s);
  }
  std::vector<double> head_b(classes, 0.0);
  std::vector<double> vel_hw(head_w.data.size(), 0.0), vel_hb(classes, 0.0);
  std::vector<std::vector<double>> vel_w, vel_b;
  for (const Matrix& w : encoder.weights) vel_w.emplace_back(w.data.size(), 0.0);
  for (const auto& bb : encoder.biases) vel_b.emplace_back(bb.size(), 0.0);

  std::size_t n = selected.size();
  std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  std::size_t total_steps = steps_per_epoch * config.epochs;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = keyed_rng(config.seed, 0x66747368ULL, epoch);
    shuffle(order, rng);
    for (std::size_t start = 0; start < n; start += config.batch_size, ++step) {
      std::size_t count = std::min(config.batch_size, n - start);
      Graph g;
      EncoderGraphRefs refs = add_encoder_inputs(g, spec, "enc");
      NodeId wn = g.input({spec.embed_dim, classes}, true, "head.w");
      NodeId bn = g.input({1, classes}, true, "head.b");
      std::vector<NodeId> losses;
      for (std::size_t i = 0; i < count; ++i) {
        std::size_t row = selected[order[start + i]];
        auto x = data.rows.row(row);
        NodeId xn = g.constant(Tensor::row(std::vector<double>(x.begin(), x.end())));
        NodeId emb = append_encoder_forward(g, spec, refs, xn, 1);
        NodeId logits = g.add(g.matmul(emb, wn), bn);
        losses.push_back(
            g.log_softmax_nll(logits, static_cast<std::size_t>(data.labels[row])));
      }
      NodeId loss = g.scale(g.sum(g.concat_rows(losses)), 1.0 / static_cast<double>(count));
      std::map<NodeId, Tensor> bindings;
      refs.bind(encoder, bindings);
      bindings[wn] = Tensor::matrix(spec.embed_dim, classes, head_w.data);
      bindings[bn] = Tensor::row(head_b);
      Evaluation ev = evaluate(g, bindings);
      if (!ev.degenerate_rows.empty()) {
        throw NumericError("finetune_fraction: degenerate embedding row");
      }
      backpropagate(g, ev, loss);
      double lr = cosine_lr(step, total_steps, config.lr);
      double head_lr = lr * config.head_lr_ratio;
      for (std::size_t l = 0; l < encoder.weights.size(); ++l) {
        sgd_momentum_step(encoder.weights[l].data, ev.grad(refs.weight_nodes[l]), lr,
                          config.momentum, config.weight_decay, vel_w[l]);
        sgd_momentum_step(encoder.biases[l], ev.grad(refs.bias_nodes[l]), lr,
                          config.momentum, config.weight_decay, vel_b[l]);
      }
      sgd_momentum_step(head_w.data, ev.grad(wn), head_lr, config.momentum,
                        config.weight_decay, vel_hw);
      sgd_momentum_step(head_b, ev.grad(bn), head_lr, config.momentum, config.weight_decay,
                        vel_hb);
    }
  }

  Dataset val = data.subset(val_rows);
  ForwardResult fwd = encoder_forward(encoder, val.rows);
  std::size_t correct = 0;
  std::vector<double> logits(classes);
  for (std::size_t i = 0; i < val.n; ++i) {
    auto e = fwd.embeddings.row(i);
    for (std::size_t c = 0; c < classes; ++c) logits[c] = head_b[c];
    for (std::size_t j = 0; j < spec.embed_dim; ++j) {
      double xv = e[j];
      if (xv == 0.0) continue;
      for (std::size_t c = 0; c < classes; ++c) logits[c] += xv * head_w.at(j, c);
    }
    if (argmax_row(logits) == static_cast<std::size_t>(val.labels[i])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(val.n);
}

BagDistanceResult bag_distance_embeddings(const Matrix& emb, const BagTable& bags) {
  if (bags.n() != emb.rows) {
    throw InvariantError("bag_distance: bag table covers " + std::to_string(bags.n()) +
                         " anchors, embeddings hold " + std::to_string(emb.rows));
  }
  BagDistanceResult res;
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t a = 0; a < bags.n(); ++a) {
    const auto& bag = bags.members[a];
    if (bag.size() == 1) {
      ++res.skipped_singletons;
      continue;
    }
    double anchor_mean = 0.0;
    for (std::int32_t m : bag) {
      if (static_cast<std::size_t>(m) == a) continue;
      anchor_mean += squared_distance(emb.row(a), emb.row(static_cast<std::size_t>(m)));
    }
    total += anchor_mean / static_cast<double>(bag.size() - 1);
    ++counted;
  }
  if (counted == 0) throw InvariantError("bag_distance: all bags are singletons");
  res.value = total / static_cast<double>(counted);
  return res;
}

BagDistanceResult bag_distance(const EncoderParams& encoder, const BagTable& bags,
                               const Dataset& data) {
  EmbeddingMatrix emb = extract_embeddings(encoder, data);
  return bag_distance_embeddings(emb.rows, bags);
}

double intra_class_distance(const Matrix& emb, const std::vector<std::int32_t>& labels) {
  if (labels.size() != emb.rows) {
    throw InvariantError("intra_class_distance: labels/embeddings length mismatch");
  }
  double total = 0.0;
  std::size_t pairs = 0;
  std::map<std::int32_t, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < labels.size(); ++i) by_label[labels[i]].push_back(i);
  for (const auto& [label, members] : by_label) {
    for (std::size_t i = 0; i < members.size(); ++i) {
      for (std::size_t j = i + 1; j < members.size(); ++j) {
        total += squared_distance(emb.row(members[i]), emb.row(members[j]));
        ++pairs;
      }
    }
  }
  if (pairs == 0) throw InvariantError("intra_class_distance: no same-label pair");
  return total / static_cast<double>(pairs);
}

}  // namespace bingo
