#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "laqt/tensor.hpp"

namespace laqt {

/// Visits every learnable tensor of a block under a dotted name.
using ParamVisitor = std::function<void(const std::string& name, Tensor& param)>;

/// Logit value written into masked attention slots.
inline constexpr double kMaskedLogit = -1e9;

struct Linear {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  /// uniform(-1/sqrt(in), 1/sqrt(in)) for weight and bias.
  static Linear init(std::size_t in, std::size_t out, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
  std::size_t in_dim() const { return weight.dim(1); }
  std::size_t out_dim() const { return weight.dim(0); }
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm init(std::size_t dim);
  Tensor operator()(const Tensor& x) const;
  void visit(const std::string& prefix, const ParamVisitor& f);
};

/// Attention mask over logits [..., n_q, n_k]; nonzero marks a blocked slot.
using AttentionMask = std::vector<double>;

struct AttentionResult {
  Tensor out;      // [..., n_q, d_v]
  Tensor weights;  // [..., n_q, n_k]
};

/// softmax(Q K^T / sqrt(d)) V over the last two axes; batch axes must agree.
AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                     const AttentionMask* mask = nullptr);

struct MultiHeadAttention {
  std::size_t model_dim = 0;
  std::size_t num_heads = 1;
  Linear query, key, value;  // fused per-head projections, heads are column blocks
  Linear output;

  static MultiHeadAttention init(std::size_t model_dim, std::size_t num_heads, std::mt19937_64& rng);
  std::size_t head_dim() const { return model_dim / num_heads; }
  void visit(const std::string& prefix, const ParamVisitor& f);
};

/// [B, n, H*dh] -> [B, H, n, dh]
Tensor split_heads(const Tensor& x, std::size_t num_heads);
/// [B, H, n, dh] -> [B, n, H*dh]
Tensor merge_heads(const Tensor& x);
/// Repeats a [B, n_q, n_k] mask across heads -> [B, H, n_q, n_k].
AttentionMask repeat_mask(const AttentionMask& mask, std::size_t batch, std::size_t heads, std::size_t per_head);

struct MultiHeadResult {
  Tensor out;      // [B, n_q, model_dim]
  Tensor weights;  // [B, H, n_q, n_k]
};

/// Accepts [n, D] or [B, n, D] sequences; mask is [B, n_q, n_k] (or [n_q, n_k]).
MultiHeadResult multi_head_attention(const Tensor& query_seq, const Tensor& kv_seq, const MultiHeadAttention& params,
                                     const AttentionMask* mask = nullptr);

/// Sampling source for the Gumbel perturbation. A null generator gives the
/// noise-free variant used for evaluation and deterministic tests.
struct GumbelOptions {
  double temperature = 1.0;
  bool hard = true;
  std::mt19937_64* rng = nullptr;
};

/// Gumbel-softmax along the last axis. Hard mode returns an exact one-hot in
/// the forward value and routes the gradient through the soft sample.
Tensor gumbel_softmax(const Tensor& logits, const GumbelOptions& options);
/// Draws -log(-log(u)) noise with u in the open unit interval.
std::vector<double> gumbel_noise(std::size_t n, std::mt19937_64& rng);
/// Gumbel-softmax with the noise supplied explicitly.
Tensor gumbel_softmax_with_noise(const Tensor& logits, std::span<const double> noise, double temperature, bool hard);

/// Position-wise two-layer MLP (ReLU) with residual, then layer norm.
struct FeedForward {
  Linear inner;   // model_dim -> ffn_dim
  Linear outer;   // ffn_dim -> model_dim
  LayerNorm norm;
  double dropout = 0.0;

  static FeedForward init(std::size_t model_dim, std::size_t ffn_dim, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

Tensor feed_forward(const Tensor& x, const FeedForward& params, std::mt19937_64* dropout_rng = nullptr);

/// Gated recurrent unit; gate order in the fused maps is reset, update, candidate.
struct GruCell {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  Linear input_map;   // in -> 3H
  Linear hidden_map;  // H -> 3H

  static GruCell init(std::size_t input_dim, std::size_t hidden_dim, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

/// x [..., in], h_prev [..., H] -> h [..., H]
Tensor gru_cell(const Tensor& x, const Tensor& h_prev, const GruCell& params);

/// Multi-head attention followed by the feed-forward block.
struct TransformerBlock {
  MultiHeadAttention attention;
  FeedForward ff;

  static TransformerBlock init(std::size_t model_dim, std::size_t num_heads, std::size_t ffn_dim,
                               std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

MultiHeadResult transformer_block(const Tensor& x, const TransformerBlock& params, const AttentionMask* mask = nullptr);

}  // namespace laqt
