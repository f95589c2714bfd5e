#pragma once

// Agent networks. All agents of a team share one parameter set and are
// evaluated together as rows of an AgentBatch.

#include <cstddef>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "laqt/env.hpp"
#include "laqt/nn.hpp"
#include "laqt/tensor.hpp"

namespace laqt {

/// Entity observations of R agents padded into fixed slots. Ally slots hold
/// the visible allies (any order, n_allies - 1 slots); enemy slot j is enemy j
/// so that attack action 6 + j lines up with it.
struct AgentBatch {
  std::size_t rows = 0;
  std::size_t ally_slots = 0;
  std::size_t enemy_slots = 0;
  std::vector<double> self;        // rows * kSelfWidth
  std::vector<double> allies;      // rows * ally_slots * kAllyWidth
  std::vector<double> ally_mask;   // rows * ally_slots, 1 = present
  std::vector<double> enemies;     // rows * enemy_slots * kEnemyWidth
  std::vector<double> enemy_mask;  // rows * enemy_slots
  std::vector<double> available;   // rows * (6 + enemy_slots), 1 = available

  std::size_t n_actions() const { return kNumSelfActions + enemy_slots; }
};

AgentBatch make_agent_batch(std::span<const EntityObservation> observations,
                            std::span<const std::vector<double>> available, std::size_t n_allies,
                            std::size_t n_enemies);
/// Concatenates batches with identical slot counts row-wise.
AgentBatch stack_batches(std::span<const AgentBatch> parts);
/// One padding row: empty observation, only no-op available.
AgentBatch padding_batch(std::size_t rows, std::size_t n_allies, std::size_t n_enemies);

struct AgentOutput {
  Tensor q;                 // [R, 6 + E], unavailable actions at -1e9
  Tensor hidden;            // [R, H]
  Tensor enemy_embeddings;  // [R, E, D] (PIT only)
};

enum class AgentKind { kPit, kGru };
const char* to_string(AgentKind kind);
AgentKind parse_agent_kind(const std::string& text);

struct AgentConfig {
  AgentKind kind = AgentKind::kPit;
  std::size_t model_dim = 16;
  std::size_t num_heads = 2;
  std::size_t ffn_dim = 64;
  double dropout = 0.0;
  std::size_t hidden_dim = 64;
};

/// Sets unavailable action values to -1e9.
Tensor mask_unavailable(const Tensor& q, std::span<const double> available);

/// Everything computed from one observation before the recurrent core.
struct AgentEncoding {
  Tensor core_in;           // [R, F]
  Tensor enemy_embeddings;  // [R, E, D] (PIT only)
};

class AgentNetwork {
 public:
  virtual ~AgentNetwork() = default;
  virtual AgentKind kind() const = 0;
  virtual std::size_t hidden_dim() const = 0;
  virtual AgentEncoding encode(const AgentBatch& batch) const = 0;
  virtual Tensor recur(const Tensor& core_in, const Tensor& h_prev) const = 0;
  /// Masked action values from the new hidden state.
  virtual Tensor action_values(const Tensor& h, const AgentEncoding& enc, const AgentBatch& batch) const = 0;
  virtual void visit(const std::string& prefix, const ParamVisitor& f) = 0;

  AgentOutput forward(const AgentBatch& batch, const Tensor& h_prev) const;
};

/// Unrolls from a zero hidden state over consecutive steps. Row r of step t
/// continues row r of step t - 1, so row counts may only shrink. Encoders and
/// heads run once over all steps; only the core is sequential.
/// Returns action values for every row, steps stacked in order.
Tensor unroll_agent(const AgentNetwork& agent, std::span<const AgentBatch> steps);

/// Builds the configured agent for a scenario. Only the flat GRU agent
/// depends on the population sizes.
std::unique_ptr<AgentNetwork> make_agent(const AgentConfig& config, std::size_t n_allies, std::size_t n_enemies,
                                         std::mt19937_64& rng);

// ---- PIT ----

/// Per-group encoder and Transformer block.
struct PropertyGroup {
  Linear encoder;
  TransformerBlock block;
};

struct PitParams {
  std::size_t model_dim = 16;
  Linear self_encoder;
  PropertyGroup ally_group;
  PropertyGroup enemy_group;
  GruCell core;
  Linear self_head;    // H -> 6
  Linear interaction;  // [H ; D] -> 1, shared across enemies

  static PitParams init(const AgentConfig& config, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct GroupRepresentation {
  Tensor mean;           // e_m  [R, D]
  Tensor relevant;       // e_i  [R, D]
  Tensor entities;       // transformed entity embeddings [R, N, D]
  std::vector<std::size_t> relevant_index;  // slot of e_i per row (0 when the group is empty)
};

/// Encodes a group, runs its Transformer with the self embedding prepended as
/// a query token, and summarises it as (mean, most attended entity).
GroupRepresentation property_group(const Tensor& e_self, std::span<const double> entities,
                                   std::span<const double> mask, std::size_t rows, std::size_t slots,
                                   std::size_t width, const PropertyGroup& params);

AgentEncoding pit_encode(const AgentBatch& batch, const PitParams& params);
Tensor pit_action_values(const Tensor& h, const AgentEncoding& enc, const AgentBatch& batch, const PitParams& params);
AgentOutput pit_forward(const AgentBatch& batch, const Tensor& h_prev, const PitParams& params);

class PitAgent final : public AgentNetwork {
 public:
  explicit PitAgent(PitParams params) : params_(std::move(params)) {}
  AgentKind kind() const override { return AgentKind::kPit; }
  std::size_t hidden_dim() const override { return params_.core.hidden_dim; }
  AgentEncoding encode(const AgentBatch& batch) const override { return pit_encode(batch, params_); }
  Tensor recur(const Tensor& x, const Tensor& h_prev) const override { return gru_cell(x, h_prev, params_.core); }
  Tensor action_values(const Tensor& h, const AgentEncoding& enc, const AgentBatch& batch) const override {
    return pit_action_values(h, enc, batch, params_);
  }
  void visit(const std::string& prefix, const ParamVisitor& f) override { params_.visit(prefix, f); }
  PitParams& params() { return params_; }
  const PitParams& params() const { return params_; }

 private:
  PitParams params_;
};

// ---- flat GRU baseline ----

struct GruAgentParams {
  std::size_t n_allies = 0;
  std::size_t n_enemies = 0;
  Linear input;  // flat obs -> H
  GruCell core;
  Linear head;   // H -> 6 + E

  static GruAgentParams init(const AgentConfig& config, std::size_t n_allies, std::size_t n_enemies,
                             std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

/// Flat observation: self, then every ally slot, then every enemy slot.
std::size_t flat_obs_width(std::size_t n_allies, std::size_t n_enemies);
Tensor flatten_observations(const AgentBatch& batch);

AgentEncoding gru_agent_encode(const AgentBatch& batch, const GruAgentParams& params);
AgentOutput gru_agent_forward(const AgentBatch& batch, const Tensor& h_prev, const GruAgentParams& params);

class GruAgent final : public AgentNetwork {
 public:
  explicit GruAgent(GruAgentParams params) : params_(std::move(params)) {}
  AgentKind kind() const override { return AgentKind::kGru; }
  std::size_t hidden_dim() const override { return params_.core.hidden_dim; }
  AgentEncoding encode(const AgentBatch& batch) const override { return gru_agent_encode(batch, params_); }
  Tensor recur(const Tensor& x, const Tensor& h_prev) const override { return gru_cell(x, h_prev, params_.core); }
  Tensor action_values(const Tensor& h, const AgentEncoding&, const AgentBatch& batch) const override {
    return mask_unavailable(params_.head(h), batch.available);
  }
  void visit(const std::string& prefix, const ParamVisitor& f) override { params_.visit(prefix, f); }

 private:
  GruAgentParams params_;
};


/// epsilon-greedy over available actions; greedy ties go to the lowest index.
std::size_t select_action(std::span<const double> q, std::span<const double> available, double epsilon,
                          std::mt19937_64& rng);

}  // namespace laqt
