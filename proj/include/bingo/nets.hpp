#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "bingo/matrix.hpp"
#include "bingo/tensor.hpp"

namespace bingo {

// MLP backbone topped by a 2-layer projection head; the forward pass ends in a
// row-wise L2 normalization, so every consumer sees unit-norm embeddings.
struct EncoderSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims;
  std::size_t proj_hidden_dim = 0;
  std::size_t embed_dim = 0;

  // Widths of the full layer chain: input, hidden..., proj_hidden, embed.
  std::vector<std::size_t> layer_dims() const;
  std::size_t layer_count() const { return hidden_dims.size() + 2; }
  void validate() const;
  bool operator==(const EncoderSpec&) const = default;
};

enum class EncoderRole : std::uint8_t { Student = 0, Teacher = 1, MomentumKey = 2 };

struct EncoderParams {
  EncoderSpec spec;
  std::vector<Matrix> weights;              // layer i: [dims[i] x dims[i+1]]
  std::vector<std::vector<double>> biases;  // layer i: dims[i+1]
  EncoderRole role = EncoderRole::Student;

  std::size_t parameter_count() const;
  void validate() const;
};

// Xavier-uniform weights (s = sqrt(6/(fan_in+fan_out))), zero biases,
// bit-deterministic per (spec, seed).
EncoderParams init_params(const EncoderSpec& spec, std::uint64_t seed,
                          EncoderRole role = EncoderRole::Student);

struct ForwardResult {
  Matrix embeddings;                        // B x embed_dim, unit rows
  std::vector<std::size_t> degenerate_rows; // rows whose pre-norm norm < 1e-8
};

// Fast non-graph forward used for embedding extraction, teacher keys, and
// metrics. Matches the graph path bit-for-bit.
ForwardResult encoder_forward(const EncoderParams& params, const Matrix& batch);

// Graph construction: parameters enter as requires-grad inputs so training can
// backpropagate into them.
struct EncoderGraphRefs {
  std::vector<NodeId> weight_nodes;
  std::vector<NodeId> bias_nodes;

  // Bindings mapping the weight/bias nodes to the given parameter values.
  void bind(const EncoderParams& params, std::map<NodeId, Tensor>& out) const;
};

EncoderGraphRefs add_encoder_inputs(Graph& g, const EncoderSpec& spec,
                                    const std::string& prefix = "enc");

// Appends the forward chain for a [rows x input_dim] node; returns the
// [rows x embed_dim] unit-norm output node.
NodeId append_encoder_forward(Graph& g, const EncoderSpec& spec,
                              const EncoderGraphRefs& refs, NodeId batch,
                              std::size_t batch_rows);

// theta_target <- m * theta_target + (1 - m) * theta_online, for every parameter.
void momentum_update(const EncoderParams& online, EncoderParams& target, double m);

}  // namespace bingo
