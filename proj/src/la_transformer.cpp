#include "laqt/la_transformer.hpp"

#include <cmath>

#include "laqt/errors.hpp"

namespace laqt {

const char* to_string(LevelMode mode) { return mode == LevelMode::kHard ? "hard" : "hybrid"; }

LevelMode parse_level_mode(const std::string& text) {
  if (text == "hard") return LevelMode::kHard;
  if (text == "hybrid") return LevelMode::kHybrid;
  throw ConfigError("level mode: expected 'hard' or 'hybrid', got '" + text + "'");
}

LATransformer LATransformer::init(std::size_t model_dim, std::size_t num_heads, std::size_t ffn_dim,
                                  std::size_t levels, LevelMode mode, std::mt19937_64& rng) {
  if (levels < 1) throw ConfigError("la-transformer: levels must be >= 1");
  if (num_heads == 0 || model_dim % num_heads != 0) {
    throw ConfigError("la-transformer: model_dim " + std::to_string(model_dim) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  LATransformer p;
  p.model_dim = model_dim;
  p.num_heads = num_heads;
  p.levels = levels;
  p.mode = mode;
  p.query = Linear::init(model_dim, model_dim, rng);
  p.key = Linear::init(model_dim, model_dim, rng);
  p.value = Linear::init(model_dim, model_dim, rng);
  p.hard_key = Linear::init(model_dim, model_dim, rng);
  p.fusion = Linear::init(levels * model_dim, model_dim, rng);
  p.ff = FeedForward::init(model_dim, ffn_dim, rng);
  return p;
}

void LATransformer::visit(const std::string& prefix, const ParamVisitor& f) {
  query.visit(prefix + ".query", f);
  key.visit(prefix + ".key", f);
  value.visit(prefix + ".value", f);
  hard_key.visit(prefix + ".hard_key", f);
  fusion.visit(prefix + ".fusion", f);
  ff.visit(prefix + ".ff", f);
}

namespace {

Tensor as_batched(const Tensor& x) { return x.rank() == 2 ? reshape(x, {1, x.dim(0), x.dim(1)}) : x; }

Tensor like_input(const Tensor& x, const Tensor& input) {
  return input.rank() == 2 ? reshape(x, {x.dim(1), x.dim(2)}) : x;
}

}  // namespace

LevelStack level_iterate(const Tensor& embeddings, const LATransformer& params) {
  if (params.levels < 1) throw ConfigError("la-transformer: levels must be >= 1");
  const Tensor x = as_batched(embeddings);
  if (x.rank() != 3 || x.dim(1) < 1 || x.dim(2) != params.model_dim) {
    throw ShapeError("level_iterate: embeddings " + shape_str(embeddings.shape()) + " vs model_dim " +
                     std::to_string(params.model_dim));
  }
  const std::size_t H = params.num_heads;
  const Tensor k = split_heads(params.key(x), H);
  const Tensor v = split_heads(params.value(x), H);
  Tensor query = split_heads(params.query(x), H);
  LevelStack stack;
  for (std::size_t level = 0; level < params.levels; ++level) {
    AttentionResult att = scaled_dot_attention(query, k, v);
    stack.patterns.push_back(like_input(merge_heads(att.out), embeddings));
    stack.attention.push_back(att.weights);
    query = att.out;
  }
  return stack;
}

double level_gap(const LevelStack& stack, std::size_t i, std::size_t j) {
  const std::size_t L = stack.patterns.size();
  if (i < 1 || j < 1 || i > L || j > L) {
    throw ContractError("level_gap: levels " + std::to_string(i) + "," + std::to_string(j) + " outside 1.." +
                        std::to_string(L));
  }
  auto a = stack.patterns[i - 1].data();
  auto b = stack.patterns[j - 1].data();
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

HardSelection select_hard(const LevelStack& stack, const Tensor& embeddings, const LATransformer& params,
                          std::mt19937_64* rng, double temperature) {
  const std::size_t L = stack.patterns.size();
  if (L < 1) throw ContractError("select_hard: empty level stack");
  const std::size_t last = embeddings.rank() - 1;
  Tensor key = params.hard_key(embeddings);
  Shape column = embeddings.shape();
  column.back() = 1;
  std::vector<Tensor> logits;
  for (const Tensor& c : stack.patterns) logits.push_back(sum(mul(key, c), last, true));
  Tensor mask = gumbel_softmax(concat(logits, last), GumbelOptions{temperature, true, rng});

  Tensor selected;
  for (std::size_t l = 0; l < L; ++l) {
    Tensor term = mul(slice(mask, last, l, 1), stack.patterns[l]);
    selected = l == 0 ? term : add(selected, term);
  }
  HardSelection out{selected, {}, mask};
  auto mv = mask.data();
  out.level_choice.reserve(mv.size() / L);
  for (std::size_t r = 0; r < mv.size() / L; ++r) {
    std::size_t pick = 0;
    for (std::size_t l = 0; l < L; ++l)
      if (mv[r * L + l] == 1.0) pick = l;
    out.level_choice.push_back(pick + 1);
  }
  return out;
}

Tensor fuse_hybrid(const LevelStack& stack, const LATransformer& params) {
  if (stack.patterns.empty()) throw ContractError("fuse_hybrid: empty level stack");
  const std::size_t last = stack.patterns.front().rank() - 1;
  return params.fusion(stack.patterns.size() == 1 ? stack.patterns.front() : concat(stack.patterns, last));
}

LATransformerOutput la_transformer_forward(const Tensor& embeddings, const LATransformer& params, std::mt19937_64* rng,
                                           double temperature) {
  LATransformerOutput out;
  out.diagnostics.stack = level_iterate(embeddings, params);
  const LevelStack& stack = out.diagnostics.stack;
  for (std::size_t i = 2; i <= stack.patterns.size(); ++i) out.diagnostics.adjacent_gaps.push_back(level_gap(stack, i, i - 1));
  Tensor mixed;
  if (params.mode == LevelMode::kHard) {
    HardSelection sel = select_hard(stack, embeddings, params, rng, temperature);
    mixed = sel.patterns;
    out.diagnostics.level_choice = std::move(sel.level_choice);
  } else {
    mixed = fuse_hybrid(stack, params);
  }
  out.patterns = feed_forward(mixed, params.ff);
  return out;
}

StackedTransformer StackedTransformer::init(std::size_t model_dim, std::size_t num_heads, std::size_t ffn_dim,
                                            std::size_t depth, std::mt19937_64& rng) {
  if (depth < 1) throw ConfigError("stacked transformer: depth must be >= 1");
  StackedTransformer s;
  for (std::size_t i = 0; i < depth; ++i) s.layers.push_back(TransformerBlock::init(model_dim, num_heads, ffn_dim, rng));
  return s;
}

void StackedTransformer::visit(const std::string& prefix, const ParamVisitor& f) {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + ".layer" + std::to_string(i), f);
}

StackedOutput stacked_transformer_forward(const Tensor& embeddings, const StackedTransformer& params) {
  if (params.layers.empty()) throw ContractError("stacked_transformer_forward: depth must be >= 1");
  StackedOutput out{embeddings, {}};
  for (const TransformerBlock& layer : params.layers) {
    MultiHeadResult r = transformer_block(out.patterns, layer);
    out.patterns = r.out;
    out.attention.push_back(r.weights);
  }
  return out;
}

}  // namespace laqt
