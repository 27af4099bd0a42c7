#include "bingo/nets.hpp"

#include <cmath>

#include "bingo/rng.hpp"

namespace bingo {

std::vector<std::size_t> EncoderSpec::layer_dims() const {
  std::vector<std::size_t> dims;
  dims.reserve(hidden_dims.size() + 3);
  dims.push_back(input_dim);
  for (std::size_t h : hidden_dims) dims.push_back(h);
  dims.push_back(proj_hidden_dim);
  dims.push_back(embed_dim);
  return dims;
}

void EncoderSpec::validate() const {
  if (input_dim < 1 || proj_hidden_dim < 1 || embed_dim < 1) {
    throw InvariantError("EncoderSpec: all dims must be >= 1");
  }
  for (std::size_t h : hidden_dims) {
    if (h < 1) throw InvariantError("EncoderSpec: all dims must be >= 1");
  }
}

std::size_t EncoderParams::parameter_count() const {
  std::size_t n = 0;
  for (const Matrix& w : weights) n += w.data.size();
  for (const auto& b : biases) n += b.size();
  return n;
}

void EncoderParams::validate() const {
  spec.validate();
  auto dims = spec.layer_dims();
  if (weights.size() != spec.layer_count() || biases.size() != spec.layer_count()) {
    throw InvariantError("EncoderParams: layer count does not match spec");
  }
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i].rows != dims[i] || weights[i].cols != dims[i + 1] ||
        biases[i].size() != dims[i + 1]) {
      throw InvariantError("EncoderParams: layer " + std::to_string(i) +
                           " shapes do not chain with spec");
    }
    for (double v : weights[i].data) {
      if (!std::isfinite(v)) throw InvariantError("EncoderParams: non-finite weight");
    }
    for (double v : biases[i]) {
      if (!std::isfinite(v)) throw InvariantError("EncoderParams: non-finite bias");
    }
  }
}

EncoderParams init_params(const EncoderSpec& spec, std::uint64_t seed, EncoderRole role) {
  spec.validate();
  EncoderParams p;
  p.spec = spec;
  p.role = role;
  auto dims = spec.layer_dims();
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    std::size_t fan_in = dims[i], fan_out = dims[i + 1];
    double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Matrix w(fan_in, fan_out);
    Rng rng = keyed_rng(seed, 0x77656967687473ULL, i);  // per-layer stream
    for (double& v : w.data) v = rng.next_uniform(-s, s);
    p.weights.push_back(std::move(w));
    p.biases.emplace_back(fan_out, 0.0);
  }
  return p;
}

ForwardResult encoder_forward(const EncoderParams& params, const Matrix& batch) {
  if (batch.cols != params.spec.input_dim) {
    throw InvariantError("encoder_forward: batch width " + std::to_string(batch.cols) +
                         " != input_dim " + std::to_string(params.spec.input_dim));
  }
  std::size_t layers = params.weights.size();
  Matrix cur = batch;
  for (std::size_t l = 0; l < layers; ++l) {
    const Matrix& w = params.weights[l];
    const auto& b = params.biases[l];
    Matrix next(cur.rows, w.cols);
    // Accumulation order mirrors the graph path (matmul, then bias add, then
    // relu) so the two routes agree bit-for-bit.
    for (std::size_t i = 0; i < cur.rows; ++i) {
      double* out = next.data.data() + i * w.cols;
      const double* x = cur.data.data() + i * cur.cols;
      for (std::size_t p = 0; p < cur.cols; ++p) {
        double xv = x[p];
        if (xv == 0.0) continue;
        const double* wrow = w.data.data() + p * w.cols;
        for (std::size_t j = 0; j < w.cols; ++j) out[j] += xv * wrow[j];
      }
      for (std::size_t j = 0; j < w.cols; ++j) out[j] += b[j];
      if (l + 1 < layers) {
        for (std::size_t j = 0; j < w.cols; ++j) out[j] = out[j] > 0.0 ? out[j] : 0.0;
      }
    }
    cur = std::move(next);
  }
  ForwardResult res;
  res.embeddings = Matrix(cur.rows, cur.cols);
  for (std::size_t i = 0; i < cur.rows; ++i) {
    const double* x = cur.data.data() + i * cur.cols;
    double* y = res.embeddings.data.data() + i * cur.cols;
    double nsq = 0.0;
    for (std::size_t j = 0; j < cur.cols; ++j) nsq += x[j] * x[j];
    if (!std::isfinite(nsq)) {
      throw NumericError("encoder_forward: non-finite embedding at row " + std::to_string(i));
    }
    double nrm = std::sqrt(nsq);
    if (nrm < kDegenerateRowNorm) {
      std::copy(x, x + cur.cols, y);
      res.degenerate_rows.push_back(i);
    } else {
      for (std::size_t j = 0; j < cur.cols; ++j) y[j] = x[j] / nrm;
    }
  }
  return res;
}

void EncoderGraphRefs::bind(const EncoderParams& params,
                            std::map<NodeId, Tensor>& out) const {
  for (std::size_t l = 0; l < weight_nodes.size(); ++l) {
    const Matrix& w = params.weights[l];
    out[weight_nodes[l]] = Tensor::matrix(w.rows, w.cols, w.data);
    out[bias_nodes[l]] = Tensor::row(params.biases[l]);
  }
}

EncoderGraphRefs add_encoder_inputs(Graph& g, const EncoderSpec& spec,
                                    const std::string& prefix) {
  spec.validate();
  EncoderGraphRefs refs;
  auto dims = spec.layer_dims();
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    refs.weight_nodes.push_back(
        g.input({dims[i], dims[i + 1]}, true, prefix + ".w" + std::to_string(i)));
    refs.bias_nodes.push_back(
        g.input({1, dims[i + 1]}, true, prefix + ".b" + std::to_string(i)));
  }
  return refs;
}

NodeId append_encoder_forward(Graph& g, const EncoderSpec& spec,
                              const EncoderGraphRefs& refs, NodeId batch,
                              std::size_t batch_rows) {
  std::size_t layers = refs.weight_nodes.size();
  NodeId ones = kNoNode;
  if (batch_rows > 1) {
    ones = g.constant(Tensor::matrix(batch_rows, 1, std::vector<double>(batch_rows, 1.0)),
                      "bias-tile");
  }
  NodeId cur = batch;
  for (std::size_t l = 0; l < layers; ++l) {
    NodeId z = g.matmul(cur, refs.weight_nodes[l]);
    NodeId b = refs.bias_nodes[l];
    // `add` has no broadcasting; replicate the bias row when the batch has
    // more than one row.
    if (batch_rows > 1) b = g.matmul(ones, b);
    cur = g.add(z, b);
    if (l + 1 < layers) cur = g.relu(cur);
  }
  return g.row_l2_normalize(cur);
}

void momentum_update(const EncoderParams& online, EncoderParams& target, double m) {
  if (!(online.spec == target.spec)) {
    throw InvariantError("momentum_update: encoder specs differ");
  }
  if (!(m >= 0.0 && m <= 1.0)) {
    throw InvariantError("momentum_update: m must lie in [0, 1]");
  }
  for (std::size_t l = 0; l < target.weights.size(); ++l) {
    double* t = target.weights[l].data.data();
    const double* o = online.weights[l].data.data();
    for (std::size_t i = 0; i < target.weights[l].data.size(); ++i)
      t[i] = m * t[i] + (1.0 - m) * o[i];
    double* tb = target.biases[l].data();
    const double* ob = online.biases[l].data();
    for (std::size_t i = 0; i < target.biases[l].size(); ++i)
      tb[i] = m * tb[i] + (1.0 - m) * ob[i];
  }
}

}  // namespace bingo
