#include "laqt/nn.hpp"

#include <cmath>
#include <limits>

#include "laqt/errors.hpp"

namespace laqt {

Linear Linear::init(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.weight = Tensor::uniform({out, in}, bound, rng, true);
  l.bias = Tensor::uniform({out}, bound, rng, true);
  return l;
}

void Linear::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".weight", weight);
  f(prefix + ".bias", bias);
}

LayerNorm LayerNorm::init(std::size_t dim) {
  return {Tensor::full({dim}, 1.0, true), Tensor::zeros({dim}, true)};
}

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gain, bias, 1e-12); }

void LayerNorm::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".gain", gain);
  f(prefix + ".bias", bias);
}

AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask* mask) {
  if (q.rank() < 2 || k.rank() < 2 || q.shape().back() != k.shape().back()) {
    throw ShapeError("attention: query " + shape_str(q.shape()) + " and key " + shape_str(k.shape()) +
                     " disagree on feature dim");
  }
  if (k.shape()[k.rank() - 2] != v.shape()[v.rank() - 2]) {
    throw ShapeError("attention: key " + shape_str(k.shape()) + " and value " + shape_str(v.shape()) +
                     " disagree on length");
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.shape().back()));
  Tensor logits = scale(matmul(q, transpose_last(k)), inv_sqrt_d);
  if (mask) {
    const std::size_t nk = logits.shape().back();
    if (mask->size() != logits.numel()) {
      throw ShapeError("attention: mask has " + std::to_string(mask->size()) + " entries, logits are " +
                       shape_str(logits.shape()));
    }
    for (std::size_t r = 0; r < mask->size() / nk; ++r) {
      bool open = false;
      for (std::size_t j = 0; j < nk && !open; ++j) open = (*mask)[r * nk + j] == 0.0;
      if (!open) throw ContractError("attention: query row " + std::to_string(r) + " has every key masked");
    }
    logits = masked_fill(logits, *mask, kMaskedLogit);
  }
  Tensor weights = softmax(logits, logits.rank() - 1);
  return {matmul(weights, v), weights};
}

MultiHeadAttention MultiHeadAttention::init(std::size_t model_dim, std::size_t num_heads, std::mt19937_64& rng) {
  if (num_heads == 0 || model_dim % num_heads != 0) {
    throw ConfigError("multi-head attention: model_dim " + std::to_string(model_dim) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  MultiHeadAttention m;
  m.model_dim = model_dim;
  m.num_heads = num_heads;
  m.query = Linear::init(model_dim, model_dim, rng);
  m.key = Linear::init(model_dim, model_dim, rng);
  m.value = Linear::init(model_dim, model_dim, rng);
  m.output = Linear::init(model_dim, model_dim, rng);
  return m;
}

void MultiHeadAttention::visit(const std::string& prefix, const ParamVisitor& f) {
  query.visit(prefix + ".query", f);
  key.visit(prefix + ".key", f);
  value.visit(prefix + ".value", f);
  output.visit(prefix + ".output", f);
}

Tensor split_heads(const Tensor& x, std::size_t num_heads) {
  const std::size_t B = x.dim(0), n = x.dim(1), D = x.dim(2);
  return permute(reshape(x, {B, n, num_heads, D / num_heads}), {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
  const std::size_t B = x.dim(0), H = x.dim(1), n = x.dim(2), dh = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), {B, n, H * dh});
}

AttentionMask repeat_mask(const AttentionMask& mask, std::size_t batch, std::size_t heads, std::size_t per_head) {
  AttentionMask out;
  out.reserve(batch * heads * per_head);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      out.insert(out.end(), mask.begin() + static_cast<std::ptrdiff_t>(b * per_head),
                 mask.begin() + static_cast<std::ptrdiff_t>((b + 1) * per_head));
  return out;
}

MultiHeadResult multi_head_attention(const Tensor& query_seq, const Tensor& kv_seq, const MultiHeadAttention& params,
                                     const AttentionMask* mask) {
  const bool single = query_seq.rank() == 2;
  const Tensor qs = single ? reshape(query_seq, {1, query_seq.dim(0), query_seq.dim(1)}) : query_seq;
  const Tensor ks = kv_seq.rank() == 2 ? reshape(kv_seq, {1, kv_seq.dim(0), kv_seq.dim(1)}) : kv_seq;
  if (qs.rank() != 3 || ks.rank() != 3 || qs.dim(2) != params.model_dim || ks.dim(2) != params.model_dim ||
      qs.dim(0) != ks.dim(0)) {
    throw ShapeError("multi_head_attention: query " + shape_str(query_seq.shape()) + " kv " +
                     shape_str(kv_seq.shape()) + " model_dim " + std::to_string(params.model_dim));
  }
  const std::size_t B = qs.dim(0), nq = qs.dim(1), nk = ks.dim(1), H = params.num_heads;
  Tensor q = split_heads(params.query(qs), H);
  Tensor k = split_heads(params.key(ks), H);
  Tensor v = split_heads(params.value(ks), H);
  AttentionResult att;
  if (mask) {
    if (mask->size() != B * nq * nk) {
      throw ShapeError("multi_head_attention: mask size " + std::to_string(mask->size()) + " expected " +
                       std::to_string(B * nq * nk));
    }
    AttentionMask full = repeat_mask(*mask, B, H, nq * nk);
    att = scaled_dot_attention(q, k, v, &full);
  } else {
    att = scaled_dot_attention(q, k, v);
  }
  Tensor out = params.output(merge_heads(att.out));
  if (single) out = reshape(out, {nq, params.model_dim});
  return {out, att.weights};
}

std::vector<double> gumbel_noise(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(std::numeric_limits<double>::min(), 1.0);
  std::vector<double> g(n);
  for (double& x : g) {
    double u = unit(rng);
    if (u >= 1.0) u = std::nextafter(1.0, 0.0);
    x = -std::log(-std::log(u));
  }
  return g;
}

Tensor gumbel_softmax_with_noise(const Tensor& logits, std::span<const double> noise, double temperature, bool hard) {
  if (!(temperature > 0.0)) throw ContractError("gumbel_softmax: temperature must be positive");
  Tensor perturbed = logits;
  if (!noise.empty()) {
    if (noise.size() != logits.numel()) throw ShapeError("gumbel_softmax: noise size mismatch");
    perturbed = add(logits, Tensor::from(logits.shape(), std::vector<double>(noise.begin(), noise.end())));
  }
  Tensor soft = softmax(scale(perturbed, 1.0 / temperature), logits.rank() - 1);
  if (!hard) return soft;
  const std::size_t n = logits.shape().back();
  auto sv = soft.data();
  std::vector<double> one_hot(sv.size(), 0.0);
  for (std::size_t r = 0; r < sv.size() / n; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j)
      if (sv[r * n + j] > sv[r * n + best]) best = j;
    one_hot[r * n + best] = 1.0;
  }
  return straight_through(Tensor::from(logits.shape(), std::move(one_hot)), soft);
}

Tensor gumbel_softmax(const Tensor& logits, const GumbelOptions& options) {
  if (options.rng == nullptr) return gumbel_softmax_with_noise(logits, {}, options.temperature, options.hard);
  const auto noise = gumbel_noise(logits.numel(), *options.rng);
  return gumbel_softmax_with_noise(logits, noise, options.temperature, options.hard);
}

FeedForward FeedForward::init(std::size_t model_dim, std::size_t ffn_dim, std::mt19937_64& rng) {
  FeedForward f;
  f.inner = Linear::init(model_dim, ffn_dim, rng);
  f.outer = Linear::init(ffn_dim, model_dim, rng);
  f.norm = LayerNorm::init(model_dim);
  return f;
}

void FeedForward::visit(const std::string& prefix, const ParamVisitor& f) {
  inner.visit(prefix + ".inner", f);
  outer.visit(prefix + ".outer", f);
  norm.visit(prefix + ".norm", f);
}

Tensor feed_forward(const Tensor& x, const FeedForward& params, std::mt19937_64* dropout_rng) {
  if (x.rank() == 0 || x.shape().back() != params.inner.in_dim()) {
    throw ShapeError("feed_forward: input " + shape_str(x.shape()) + " vs model_dim " +
                     std::to_string(params.inner.in_dim()));
  }
  Tensor h = relu(params.inner(x));
  if (dropout_rng != nullptr) h = dropout(h, params.dropout, *dropout_rng);
  return params.norm(add(x, params.outer(h)));
}

GruCell GruCell::init(std::size_t input_dim, std::size_t hidden_dim, std::mt19937_64& rng) {
  GruCell g;
  g.input_dim = input_dim;
  g.hidden_dim = hidden_dim;
  g.input_map = Linear::init(input_dim, 3 * hidden_dim, rng);
  g.hidden_map = Linear::init(hidden_dim, 3 * hidden_dim, rng);
  return g;
}

void GruCell::visit(const std::string& prefix, const ParamVisitor& f) {
  input_map.visit(prefix + ".input_map", f);
  hidden_map.visit(prefix + ".hidden_map", f);
}

Tensor gru_cell(const Tensor& x, const Tensor& h_prev, const GruCell& params) {
  if (x.rank() == 0 || h_prev.rank() == 0 || x.shape().back() != params.input_dim ||
      h_prev.shape().back() != params.hidden_dim) {
    throw ShapeError("gru_cell: input " + shape_str(x.shape()) + " hidden " + shape_str(h_prev.shape()) +
                     " expected dims " + std::to_string(params.input_dim) + "/" + std::to_string(params.hidden_dim));
  }
  const std::size_t H = params.hidden_dim;
  const std::size_t axis = x.rank() - 1;
  Tensor gi = params.input_map(x);
  Tensor gh = params.hidden_map(h_prev);
  Tensor reset = sigmoid(add(slice(gi, axis, 0, H), slice(gh, axis, 0, H)));
  Tensor update = sigmoid(add(slice(gi, axis, H, H), slice(gh, axis, H, H)));
  Tensor candidate = tanh(add(slice(gi, axis, 2 * H, H), mul(reset, slice(gh, axis, 2 * H, H))));
  // h = (1 - z) * n + z * h_prev = n + z * (h_prev - n)
  return add(candidate, mul(update, sub(h_prev, candidate)));
}

TransformerBlock TransformerBlock::init(std::size_t model_dim, std::size_t num_heads, std::size_t ffn_dim,
                                        std::mt19937_64& rng) {
  TransformerBlock b;
  b.attention = MultiHeadAttention::init(model_dim, num_heads, rng);
  b.ff = FeedForward::init(model_dim, ffn_dim, rng);
  return b;
}

void TransformerBlock::visit(const std::string& prefix, const ParamVisitor& f) {
  attention.visit(prefix + ".attention", f);
  ff.visit(prefix + ".ff", f);
}

MultiHeadResult transformer_block(const Tensor& x, const TransformerBlock& params, const AttentionMask* mask) {
  MultiHeadResult att = multi_head_attention(x, x, params.attention, mask);
  return {feed_forward(att.out, params.ff), att.weights};
}

}  // namespace laqt
