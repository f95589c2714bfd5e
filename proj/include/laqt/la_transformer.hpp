#pragma once

// Level-adaptive Transformer.
//
// Level 1 is ordinary attention over the projected embeddings. Each further
// level re-queries the same keys/values with the previous level's pattern:
//   c_1 = softmax(Q K^T / sqrt(d)) V
//   c_i = softmax(c_{i-1} K^T / sqrt(d)) V,   K and V fixed
// Per entity, either one level is picked with a hard Gumbel mask (hard mode)
// or all levels are fused by a position-wise linear map (hybrid mode). The
// result goes through the feed-forward block.

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "laqt/nn.hpp"
#include "laqt/tensor.hpp"

namespace laqt {

enum class LevelMode { kHard, kHybrid };

const char* to_string(LevelMode mode);
LevelMode parse_level_mode(const std::string& text);

struct LATransformer {
  std::size_t model_dim = 0;
  std::size_t num_heads = 1;
  std::size_t levels = 3;
  LevelMode mode = LevelMode::kHybrid;
  Linear query, key, value;  // shared by every level; only level 1 uses the query
  Linear hard_key;           // per-entity key of the level mask
  Linear fusion;             // levels * model_dim -> model_dim
  FeedForward ff;

  static LATransformer init(std::size_t model_dim, std::size_t num_heads, std::size_t ffn_dim, std::size_t levels,
                            LevelMode mode, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct LevelStack {
  std::vector<Tensor> patterns;   // L x [.., n, model_dim]
  std::vector<Tensor> attention;  // L x [B, H, n, n]
};

LevelStack level_iterate(const Tensor& embeddings, const LATransformer& params);

/// Frobenius norm of c_i - c_j (1-based levels).
double level_gap(const LevelStack& stack, std::size_t i, std::size_t j);

struct HardSelection {
  Tensor patterns;                         // [.., n, model_dim]
  std::vector<std::size_t> level_choice;   // 1-based, one per entity (row-major over batch)
  Tensor mask;                             // [.., n, L]
};

/// `rng == nullptr` gives the noise-free argmax mask.
HardSelection select_hard(const LevelStack& stack, const Tensor& embeddings, const LATransformer& params,
                          std::mt19937_64* rng, double temperature = 1.0);

Tensor fuse_hybrid(const LevelStack& stack, const LATransformer& params);

struct LevelDiagnostics {
  LevelStack stack;
  std::vector<double> adjacent_gaps;      // gap(i, i-1) for i = 2..L
  std::vector<std::size_t> level_choice;  // hard mode only
};

struct LATransformerOutput {
  Tensor patterns;  // c_final
  LevelDiagnostics diagnostics;
};

LATransformerOutput la_transformer_forward(const Tensor& embeddings, const LATransformer& params, std::mt19937_64* rng,
                                           double temperature = 1.0);

/// Conventional stacking where each layer re-projects Q, K and V.
struct StackedTransformer {
  std::vector<TransformerBlock> layers;

  static StackedTransformer init(std::size_t model_dim, std::size_t num_heads, std::size_t ffn_dim, std::size_t depth,
                                 std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct StackedOutput {
  Tensor patterns;
  std::vector<Tensor> attention;  // one per layer
};

StackedOutput stacked_transformer_forward(const Tensor& embeddings, const StackedTransformer& params);

}  // namespace laqt
