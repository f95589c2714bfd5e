#include "laqt/agents.hpp"

#include <algorithm>

#include "laqt/errors.hpp"

namespace laqt {

const char* to_string(AgentKind kind) { return kind == AgentKind::kPit ? "pit" : "gru"; }

AgentKind parse_agent_kind(const std::string& text) {
  if (text == "pit") return AgentKind::kPit;
  if (text == "gru") return AgentKind::kGru;
  throw ConfigError("agent kind: expected 'pit' or 'gru', got '" + text + "'");
}

AgentBatch make_agent_batch(std::span<const EntityObservation> observations,
                            std::span<const std::vector<double>> available, std::size_t n_allies,
                            std::size_t n_enemies) {
  if (observations.size() != available.size()) throw ShapeError("make_agent_batch: observation/mask count mismatch");
  AgentBatch b;
  b.rows = observations.size();
  b.ally_slots = n_allies > 0 ? n_allies - 1 : 0;
  b.enemy_slots = n_enemies;
  b.self.assign(b.rows * kSelfWidth, 0.0);
  b.allies.assign(b.rows * b.ally_slots * kAllyWidth, 0.0);
  b.ally_mask.assign(b.rows * b.ally_slots, 0.0);
  b.enemies.assign(b.rows * b.enemy_slots * kEnemyWidth, 0.0);
  b.enemy_mask.assign(b.rows * b.enemy_slots, 0.0);
  b.available.reserve(b.rows * b.n_actions());
  for (std::size_t r = 0; r < b.rows; ++r) {
    const EntityObservation& o = observations[r];
    if (o.self_attrs.size() != kSelfWidth) throw ShapeError("make_agent_batch: self attribute width mismatch");
    std::copy(o.self_attrs.begin(), o.self_attrs.end(), b.self.begin() + static_cast<std::ptrdiff_t>(r * kSelfWidth));
    if (o.allies.size() > b.ally_slots) throw ShapeError("make_agent_batch: more visible allies than slots");
    for (std::size_t k = 0; k < o.allies.size(); ++k) {
      std::copy(o.allies[k].begin(), o.allies[k].end(),
                b.allies.begin() + static_cast<std::ptrdiff_t>((r * b.ally_slots + k) * kAllyWidth));
      b.ally_mask[r * b.ally_slots + k] = 1.0;
    }
    for (std::size_t k = 0; k < o.enemies.size(); ++k) {
      const std::size_t slot = o.enemy_ids.at(k);
      if (slot >= n_enemies) throw ShapeError("make_agent_batch: enemy id out of range");
      std::copy(o.enemies[k].begin(), o.enemies[k].end(),
                b.enemies.begin() + static_cast<std::ptrdiff_t>((r * b.enemy_slots + slot) * kEnemyWidth));
      b.enemy_mask[r * b.enemy_slots + slot] = 1.0;
    }
    if (available[r].size() != b.n_actions()) throw ShapeError("make_agent_batch: availability width mismatch");
    b.available.insert(b.available.end(), available[r].begin(), available[r].end());
  }
  return b;
}

AgentBatch stack_batches(std::span<const AgentBatch> parts) {
  if (parts.empty()) throw ContractError("stack_batches: nothing to stack");
  AgentBatch out;
  out.ally_slots = parts.front().ally_slots;
  out.enemy_slots = parts.front().enemy_slots;
  for (const AgentBatch& p : parts) {
    if (p.ally_slots != out.ally_slots || p.enemy_slots != out.enemy_slots) {
      throw ShapeError("stack_batches: slot counts differ");
    }
    out.rows += p.rows;
    out.self.insert(out.self.end(), p.self.begin(), p.self.end());
    out.allies.insert(out.allies.end(), p.allies.begin(), p.allies.end());
    out.ally_mask.insert(out.ally_mask.end(), p.ally_mask.begin(), p.ally_mask.end());
    out.enemies.insert(out.enemies.end(), p.enemies.begin(), p.enemies.end());
    out.enemy_mask.insert(out.enemy_mask.end(), p.enemy_mask.begin(), p.enemy_mask.end());
    out.available.insert(out.available.end(), p.available.begin(), p.available.end());
  }
  return out;
}

AgentBatch padding_batch(std::size_t rows, std::size_t n_allies, std::size_t n_enemies) {
  std::vector<EntityObservation> obs(rows);
  for (auto& o : obs) o.self_attrs.assign(kSelfWidth, 0.0);
  std::vector<double> noop(kNumSelfActions + n_enemies, 0.0);
  noop[kActionNoop] = 1.0;
  std::vector<std::vector<double>> avail(rows, noop);
  return make_agent_batch(obs, avail, n_allies, n_enemies);
}

Tensor mask_unavailable(const Tensor& q, std::span<const double> available) {
  std::vector<double> blocked(available.size());
  for (std::size_t i = 0; i < blocked.size(); ++i) blocked[i] = available[i] == 0.0 ? 1.0 : 0.0;
  return masked_fill(q, blocked, kMaskedLogit);
}

std::size_t select_action(std::span<const double> q, std::span<const double> available, double epsilon,
                          std::mt19937_64& rng) {
  if (q.size() != available.size()) throw ShapeError("select_action: value/mask length mismatch");
  std::vector<std::size_t> open;
  for (std::size_t a = 0; a < available.size(); ++a)
    if (available[a] != 0.0) open.push_back(a);
  if (open.empty()) throw ContractError("select_action: no available action");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) < epsilon) {
    std::uniform_int_distribution<std::size_t> pick(0, open.size() - 1);
    return open[pick(rng)];
  }
  std::size_t best = open.front();
  for (std::size_t a : open)
    if (q[a] > q[best]) best = a;
  return best;
}

// ---------------------------------------------------------------- PIT

PitParams PitParams::init(const AgentConfig& config, std::mt19937_64& rng) {
  const std::size_t D = config.model_dim;
  PitParams p;
  p.model_dim = D;
  p.self_encoder = Linear::init(kSelfWidth, D, rng);
  p.ally_group = {Linear::init(kAllyWidth, D, rng), TransformerBlock::init(D, config.num_heads, config.ffn_dim, rng)};
  p.enemy_group = {Linear::init(kEnemyWidth, D, rng), TransformerBlock::init(D, config.num_heads, config.ffn_dim, rng)};
  p.ally_group.block.ff.dropout = config.dropout;
  p.enemy_group.block.ff.dropout = config.dropout;
  p.core = GruCell::init(5 * D, config.hidden_dim, rng);
  p.self_head = Linear::init(config.hidden_dim, kNumSelfActions, rng);
  p.interaction = Linear::init(config.hidden_dim + D, 1, rng);
  return p;
}

void PitParams::visit(const std::string& prefix, const ParamVisitor& f) {
  self_encoder.visit(prefix + ".self_encoder", f);
  ally_group.encoder.visit(prefix + ".ally_group.encoder", f);
  ally_group.block.visit(prefix + ".ally_group.block", f);
  enemy_group.encoder.visit(prefix + ".enemy_group.encoder", f);
  enemy_group.block.visit(prefix + ".enemy_group.block", f);
  core.visit(prefix + ".core", f);
  self_head.visit(prefix + ".self_head", f);
  interaction.visit(prefix + ".interaction", f);
}

GroupRepresentation property_group(const Tensor& e_self, std::span<const double> entities,
                                   std::span<const double> mask, std::size_t rows, std::size_t slots,
                                   std::size_t width, const PropertyGroup& params) {
  const std::size_t D = e_self.dim(1);
  GroupRepresentation g;
  if (slots == 0) {
    g.mean = Tensor::zeros({rows, D});
    g.relevant = Tensor::zeros({rows, D});
    g.relevant_index.assign(rows, 0);
    return g;
  }
  if (entities.size() != rows * slots * width || mask.size() != rows * slots) {
    throw ShapeError("property_group: entity buffer does not match " + std::to_string(rows) + "x" +
                     std::to_string(slots) + "x" + std::to_string(width));
  }
  const Tensor raw = Tensor::from({rows, slots, width}, std::vector<double>(entities.begin(), entities.end()));
  const Tensor encoded = relu(params.encoder(raw));
  const Tensor tokens = concat({reshape(e_self, {rows, 1, D}), encoded}, 1);

  const std::size_t n = slots + 1;
  AttentionMask key_mask(rows * n * n, 0.0);
  std::vector<double> present(rows * slots), count(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < slots; ++k) {
      const bool on = mask[r * slots + k] != 0.0;
      present[r * slots + k] = on ? 1.0 : 0.0;
      count[r] += on ? 1.0 : 0.0;
      if (!on)
        for (std::size_t q = 0; q < n; ++q) key_mask[(r * n + q) * n + k + 1] = 1.0;
    }
  }
  MultiHeadResult att = transformer_block(tokens, params.block, &key_mask);
  g.entities = slice(att.out, 1, 1, slots);

  std::vector<double> inv_count(rows), any(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    inv_count[r] = count[r] > 0.0 ? 1.0 / count[r] : 0.0;
    any[r] = count[r] > 0.0 ? 1.0 : 0.0;
  }
  g.mean = mul(sum(mul(g.entities, Tensor::from({rows, slots, 1}, present)), 1), Tensor::from({rows, 1}, inv_count));

  // Most relevant entity: highest self-token attention averaged over heads.
  const std::size_t H = att.weights.dim(1);
  auto w = att.weights.data();
  g.relevant_index.assign(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    double best = -1.0;
    for (std::size_t k = 0; k < slots; ++k) {
      if (present[r * slots + k] == 0.0) continue;
      double s = 0.0;
      for (std::size_t h = 0; h < H; ++h) s += w[((r * H + h) * n + 0) * n + k + 1];
      if (s > best) {
        best = s;
        g.relevant_index[r] = k;
      }
    }
  }
  g.relevant = mul(pick_rows(g.entities, g.relevant_index), Tensor::from({rows, 1}, any));
  return g;
}

AgentEncoding pit_encode(const AgentBatch& batch, const PitParams& params) {
  const std::size_t R = batch.rows;
  const Tensor e_self = relu(params.self_encoder(Tensor::from({R, kSelfWidth}, batch.self)));
  GroupRepresentation allies =
      property_group(e_self, batch.allies, batch.ally_mask, R, batch.ally_slots, kAllyWidth, params.ally_group);
  GroupRepresentation enemies =
      property_group(e_self, batch.enemies, batch.enemy_mask, R, batch.enemy_slots, kEnemyWidth, params.enemy_group);
  AgentEncoding enc;
  enc.core_in = concat({e_self, allies.mean, allies.relevant, enemies.mean, enemies.relevant}, 1);
  enc.enemy_embeddings = enemies.entities;
  return enc;
}

Tensor pit_action_values(const Tensor& h, const AgentEncoding& enc, const AgentBatch& batch, const PitParams& params) {
  const std::size_t R = batch.rows, D = params.model_dim, H = params.core.hidden_dim;
  const Tensor self_q = params.self_head(h);
  // interaction([h ; e_j]) = w_h.h + w_e.e_j + b, evaluated for every enemy slot.
  const Tensor& w = params.interaction.weight;
  const Tensor from_hidden = linear(h, slice(w, 1, 0, H), params.interaction.bias);
  const Tensor from_enemy = linear(enc.enemy_embeddings, slice(w, 1, H, D), Tensor::zeros({1}));
  const Tensor interact = add(from_hidden, reshape(from_enemy, {R, batch.enemy_slots}));
  return mask_unavailable(concat({self_q, interact}, 1), batch.available);
}

AgentOutput pit_forward(const AgentBatch& batch, const Tensor& h_prev, const PitParams& params) {
  const std::size_t R = batch.rows, H = params.core.hidden_dim;
  if (h_prev.shape() != Shape{R, H}) {
    throw ShapeError("pit_forward: hidden " + shape_str(h_prev.shape()) + " expected " + shape_str({R, H}));
  }
  const AgentEncoding enc = pit_encode(batch, params);
  AgentOutput out;
  out.hidden = gru_cell(enc.core_in, h_prev, params.core);
  out.q = pit_action_values(out.hidden, enc, batch, params);
  out.enemy_embeddings = enc.enemy_embeddings;
  return out;
}

AgentOutput AgentNetwork::forward(const AgentBatch& batch, const Tensor& h_prev) const {
  if (h_prev.shape() != Shape{batch.rows, hidden_dim()}) {
    throw ShapeError("agent forward: hidden " + shape_str(h_prev.shape()) + " expected " +
                     shape_str({batch.rows, hidden_dim()}));
  }
  const AgentEncoding enc = encode(batch);
  AgentOutput out;
  out.hidden = recur(enc.core_in, h_prev);
  out.q = action_values(out.hidden, enc, batch);
  out.enemy_embeddings = enc.enemy_embeddings;
  return out;
}

Tensor unroll_agent(const AgentNetwork& agent, std::span<const AgentBatch> steps) {
  if (steps.empty()) throw ContractError("unroll_agent: no steps");
  for (std::size_t t = 1; t < steps.size(); ++t)
    if (steps[t].rows > steps[t - 1].rows) throw ShapeError("unroll_agent: row count grows at step " + std::to_string(t));
  const AgentBatch all = stack_batches(steps);
  const AgentEncoding enc = agent.encode(all);
  std::vector<Tensor> hidden;
  Tensor h = Tensor::zeros({steps.front().rows, agent.hidden_dim()});
  std::size_t offset = 0;
  for (const AgentBatch& step : steps) {
    const Tensor prev = step.rows == h.dim(0) ? h : slice(h, 0, 0, step.rows);
    h = agent.recur(slice(enc.core_in, 0, offset, step.rows), prev);
    hidden.push_back(h);
    offset += step.rows;
  }
  return agent.action_values(concat(hidden, 0), enc, all);
}

// ---------------------------------------------------------------- GRU baseline

std::size_t flat_obs_width(std::size_t n_allies, std::size_t n_enemies) {
  return kSelfWidth + (n_allies > 0 ? n_allies - 1 : 0) * kAllyWidth + n_enemies * kEnemyWidth;
}

Tensor flatten_observations(const AgentBatch& b) {
  const std::size_t width = kSelfWidth + b.ally_slots * kAllyWidth + b.enemy_slots * kEnemyWidth;
  std::vector<double> flat;
  flat.reserve(b.rows * width);
  for (std::size_t r = 0; r < b.rows; ++r) {
    auto row = [&](const std::vector<double>& v, std::size_t w) {
      flat.insert(flat.end(), v.begin() + static_cast<std::ptrdiff_t>(r * w),
                  v.begin() + static_cast<std::ptrdiff_t>((r + 1) * w));
    };
    row(b.self, kSelfWidth);
    row(b.allies, b.ally_slots * kAllyWidth);
    row(b.enemies, b.enemy_slots * kEnemyWidth);
  }
  return Tensor::from({b.rows, width}, std::move(flat));
}

GruAgentParams GruAgentParams::init(const AgentConfig& config, std::size_t n_allies, std::size_t n_enemies,
                                    std::mt19937_64& rng) {
  GruAgentParams p;
  p.n_allies = n_allies;
  p.n_enemies = n_enemies;
  p.input = Linear::init(flat_obs_width(n_allies, n_enemies), config.hidden_dim, rng);
  p.core = GruCell::init(config.hidden_dim, config.hidden_dim, rng);
  p.head = Linear::init(config.hidden_dim, kNumSelfActions + n_enemies, rng);
  return p;
}

void GruAgentParams::visit(const std::string& prefix, const ParamVisitor& f) {
  input.visit(prefix + ".input", f);
  core.visit(prefix + ".core", f);
  head.visit(prefix + ".head", f);
}

AgentEncoding gru_agent_encode(const AgentBatch& batch, const GruAgentParams& params) {
  if (batch.ally_slots + 1 != params.n_allies || batch.enemy_slots != params.n_enemies) {
    throw ShapeError("gru agent: network built for " + std::to_string(params.n_allies) + " allies/" +
                     std::to_string(params.n_enemies) + " enemies, batch has " + std::to_string(batch.ally_slots + 1) +
                     "/" + std::to_string(batch.enemy_slots));
  }
  return AgentEncoding{relu(params.input(flatten_observations(batch))), Tensor()};
}

AgentOutput gru_agent_forward(const AgentBatch& batch, const Tensor& h_prev, const GruAgentParams& params) {
  const Tensor x = gru_agent_encode(batch, params).core_in;
  const Tensor h = gru_cell(x, h_prev, params.core);
  AgentOutput out;
  out.q = mask_unavailable(params.head(h), batch.available);
  out.hidden = h;
  return out;
}

std::unique_ptr<AgentNetwork> make_agent(const AgentConfig& config, std::size_t n_allies, std::size_t n_enemies,
                                         std::mt19937_64& rng) {
  if (config.kind == AgentKind::kPit) return std::make_unique<PitAgent>(PitParams::init(config, rng));
  return std::make_unique<GruAgent>(GruAgentParams::init(config, n_allies, n_enemies, rng));
}

}  // namespace laqt
