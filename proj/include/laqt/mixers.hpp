#pragma once

// Mixing networks: Q_tot from per-agent chosen values and the global state.
// Every mixer here is monotone in each q_i, so the joint argmax decomposes
// into per-agent argmaxes.

#include <cstddef>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "laqt/env.hpp"
#include "laqt/la_transformer.hpp"
#include "laqt/nn.hpp"
#include "laqt/tensor.hpp"

namespace laqt {

/// M global states stacked row-wise (fixed population within a batch).
struct StateBatch {
  std::size_t rows = 0;
  std::size_t n_allies = 0;
  std::size_t n_enemies = 0;
  std::vector<double> allies;   // rows * n_allies * kStateWidth
  std::vector<double> enemies;  // rows * n_enemies * kStateWidth
  std::vector<double> alive;    // rows * n_allies, from the alive flag

  static StateBatch from(std::span<const GlobalState> states);
};

enum class MixerKind { kLaHybrid, kLaHard, kQmix, kVdn, kStacked };
const char* to_string(MixerKind kind);
MixerKind parse_mixer_kind(const std::string& text);
bool population_invariant(MixerKind kind);

struct MixerConfig {
  MixerKind kind = MixerKind::kLaHybrid;
  std::size_t model_dim = 32;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 128;
  double dropout = 0.0;
  std::size_t fc_mul_dim = 32;
  std::size_t fc_add_dim = 32;
  std::size_t levels = 3;
  std::size_t stack_depth = 2;
  double gumbel_temperature = 1.0;
  std::size_t qmix_embed_dim = 32;
};

/// Sampling context. A null rng gives noise-free hard masks.
struct MixContext {
  std::mt19937_64* rng = nullptr;
};

struct MixerOutput {
  Tensor q_tot;    // [M]
  Tensor credits;  // [M, n_agents], masked by alive; undefined for QMIX
  Tensor bias;     // [M]; undefined for VDN
  /// Level-1 (or first-layer) attention, head-averaged: M x [N x N] row-major.
  std::vector<double> pairwise;
  std::size_t n_entities = 0;
  std::vector<std::size_t> level_choice;  // hard mode: per row, per entity
  std::vector<double> adjacent_gaps;
};

class Mixer {
 public:
  virtual ~Mixer() = default;
  virtual MixerKind kind() const = 0;
  /// q: [M, n_agents] chosen action values; dead agents are zeroed internally.
  virtual MixerOutput forward(const StateBatch& states, const Tensor& q, const MixContext& ctx) const = 0;
  virtual void visit(const std::string& prefix, const ParamVisitor& f) = 0;
};

std::unique_ptr<Mixer> make_mixer(const MixerConfig& config, std::size_t n_allies, std::size_t n_enemies,
                                  std::mt19937_64& rng);

// ---- LA-QTransformer (and the stacked ablation) ----

struct CreditHeads {
  Linear ally_encoder;   // kStateWidth -> D
  Linear enemy_encoder;  // kStateWidth -> D
  MultiHeadAttention integration;
  Linear mul_hidden, mul_out;  // D -> fc_mul_dim -> 1
  Linear add_hidden, add_out;  // D -> fc_add_dim -> 1

  static CreditHeads init(const MixerConfig& config, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct LAQTransformerParams {
  CreditHeads heads;
  LATransformer transformer;
  double gumbel_temperature = 1.0;

  static LAQTransformerParams init(const MixerConfig& config, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct StackedMixerParams {
  CreditHeads heads;
  StackedTransformer transformer;

  static StackedMixerParams init(const MixerConfig& config, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

/// Entity embeddings [M, n_allies + n_enemies, D], allies first.
Tensor encode_entities(const StateBatch& states, const CreditHeads& heads);

MixerOutput la_qtransformer_forward(const StateBatch& states, const Tensor& q, const LAQTransformerParams& params,
                                    const MixContext& ctx);
MixerOutput stacked_mixer_forward(const StateBatch& states, const Tensor& q, const StackedMixerParams& params);

// ---- QMIX ----

struct QmixParams {
  std::size_t n_agents = 0;
  std::size_t state_dim = 0;
  std::size_t embed_dim = 32;
  Linear hyper_w1;   // state -> n_agents * embed
  Linear hyper_b1;   // state -> embed
  Linear hyper_w2;   // state -> embed
  Linear hyper_b2a;  // state -> embed
  Linear hyper_b2b;  // embed -> 1

  static QmixParams init(std::size_t n_allies, std::size_t n_enemies, std::size_t embed_dim, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

Tensor flatten_states(const StateBatch& states);
MixerOutput qmix_forward(const StateBatch& states, const Tensor& q, const QmixParams& params);

// ---- VDN ----

MixerOutput vdn_forward(const StateBatch& states, const Tensor& q);

}  // namespace laqt
