#include "laqt/mixers.hpp"

#include <cmath>

#include "laqt/errors.hpp"

namespace laqt {

StateBatch StateBatch::from(std::span<const GlobalState> states) {
  if (states.empty()) throw ContractError("StateBatch: no states");
  StateBatch b;
  b.rows = states.size();
  b.n_allies = states.front().n_allies;
  b.n_enemies = states.front().n_enemies;
  for (const GlobalState& s : states) {
    if (s.n_allies != b.n_allies || s.n_enemies != b.n_enemies) {
      throw ShapeError("StateBatch: mixed populations in one batch");
    }
    b.allies.insert(b.allies.end(), s.allies.begin(), s.allies.end());
    b.enemies.insert(b.enemies.end(), s.enemies.begin(), s.enemies.end());
    for (std::size_t i = 0; i < s.n_allies; ++i) b.alive.push_back(s.allies[i * kStateWidth]);
  }
  return b;
}

const char* to_string(MixerKind kind) {
  switch (kind) {
    case MixerKind::kLaHybrid:
      return "la-hybrid";
    case MixerKind::kLaHard:
      return "la-hard";
    case MixerKind::kQmix:
      return "qmix";
    case MixerKind::kVdn:
      return "vdn";
    case MixerKind::kStacked:
      return "stacked";
  }
  return "?";
}

MixerKind parse_mixer_kind(const std::string& text) {
  for (MixerKind k : {MixerKind::kLaHybrid, MixerKind::kLaHard, MixerKind::kQmix, MixerKind::kVdn, MixerKind::kStacked})
    if (text == to_string(k)) return k;
  throw ConfigError("mixer kind: expected la-hybrid|la-hard|qmix|vdn|stacked, got '" + text + "'");
}

bool population_invariant(MixerKind kind) { return kind != MixerKind::kQmix; }

namespace {

void check_inputs(const StateBatch& states, const Tensor& q, const char* who) {
  if (q.shape() != Shape{states.rows, states.n_allies}) {
    throw ShapeError(std::string(who) + ": q values " + shape_str(q.shape()) + " do not match " +
                     std::to_string(states.rows) + " states with " + std::to_string(states.n_allies) + " agents");
  }
  for (const auto* buf : {&states.allies, &states.enemies})
    for (double v : *buf)
      if (!std::isfinite(v)) throw ContractError(std::string(who) + ": non-finite value in global state");
}

Tensor alive_tensor(const StateBatch& states) { return Tensor::from({states.rows, states.n_allies}, states.alive); }

std::vector<double> head_average(const Tensor& weights) {
  // [M, H, N, N] -> M x N x N
  const std::size_t M = weights.dim(0), H = weights.dim(1), N = weights.dim(2);
  auto w = weights.data();
  std::vector<double> out(M * N * N, 0.0);
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t k = 0; k < N * N; ++k) out[m * N * N + k] += w[(m * H + h) * N * N + k] / static_cast<double>(H);
  return out;
}

// Credits from the coordination patterns, bias from the pooled embeddings.
MixerOutput assemble(const StateBatch& states, const Tensor& q, const Tensor& embedded, const Tensor& patterns,
                     const CreditHeads& heads) {
  const std::size_t M = states.rows, NA = states.n_allies;
  const Tensor agents = slice(patterns, 1, 0, NA);
  const Tensor integrated = multi_head_attention(agents, patterns, heads.integration).out;
  const Tensor raw = heads.mul_out(relu(heads.mul_hidden(integrated)));
  MixerOutput out;
  out.credits = mul(abs(reshape(raw, {M, NA})), alive_tensor(states));
  out.bias = reshape(heads.add_out(relu(heads.add_hidden(mean(embedded, 1)))), {M});
  out.q_tot = add(sum(mul(out.credits, q), 1), out.bias);
  out.n_entities = patterns.dim(1);
  return out;
}

}  // namespace

// ---------------------------------------------------------------- transformer mixers

CreditHeads CreditHeads::init(const MixerConfig& c, std::mt19937_64& rng) {
  CreditHeads h;
  h.ally_encoder = Linear::init(kStateWidth, c.model_dim, rng);
  h.enemy_encoder = Linear::init(kStateWidth, c.model_dim, rng);
  h.integration = MultiHeadAttention::init(c.model_dim, c.num_heads, rng);
  h.mul_hidden = Linear::init(c.model_dim, c.fc_mul_dim, rng);
  h.mul_out = Linear::init(c.fc_mul_dim, 1, rng);
  h.add_hidden = Linear::init(c.model_dim, c.fc_add_dim, rng);
  h.add_out = Linear::init(c.fc_add_dim, 1, rng);
  return h;
}

void CreditHeads::visit(const std::string& prefix, const ParamVisitor& f) {
  ally_encoder.visit(prefix + ".ally_encoder", f);
  enemy_encoder.visit(prefix + ".enemy_encoder", f);
  integration.visit(prefix + ".integration", f);
  mul_hidden.visit(prefix + ".fc_mul.hidden", f);
  mul_out.visit(prefix + ".fc_mul.out", f);
  add_hidden.visit(prefix + ".fc_add.hidden", f);
  add_out.visit(prefix + ".fc_add.out", f);
}

LAQTransformerParams LAQTransformerParams::init(const MixerConfig& c, std::mt19937_64& rng) {
  LAQTransformerParams p;
  p.heads = CreditHeads::init(c, rng);
  const LevelMode mode = c.kind == MixerKind::kLaHard ? LevelMode::kHard : LevelMode::kHybrid;
  p.transformer = LATransformer::init(c.model_dim, c.num_heads, c.ffn_dim, c.levels, mode, rng);
  p.transformer.ff.dropout = c.dropout;
  p.gumbel_temperature = c.gumbel_temperature;
  return p;
}

void LAQTransformerParams::visit(const std::string& prefix, const ParamVisitor& f) {
  heads.visit(prefix, f);
  transformer.visit(prefix + ".la", f);
}

StackedMixerParams StackedMixerParams::init(const MixerConfig& c, std::mt19937_64& rng) {
  StackedMixerParams p;
  p.heads = CreditHeads::init(c, rng);
  p.transformer = StackedTransformer::init(c.model_dim, c.num_heads, c.ffn_dim, c.stack_depth, rng);
  return p;
}

void StackedMixerParams::visit(const std::string& prefix, const ParamVisitor& f) {
  heads.visit(prefix, f);
  transformer.visit(prefix + ".stack", f);
}

Tensor encode_entities(const StateBatch& states, const CreditHeads& heads) {
  const std::size_t M = states.rows;
  const Tensor allies = heads.ally_encoder(Tensor::from({M, states.n_allies, kStateWidth}, states.allies));
  const Tensor enemies = heads.enemy_encoder(Tensor::from({M, states.n_enemies, kStateWidth}, states.enemies));
  return concat({allies, enemies}, 1);
}

MixerOutput la_qtransformer_forward(const StateBatch& states, const Tensor& q, const LAQTransformerParams& params,
                                    const MixContext& ctx) {
  check_inputs(states, q, "la_qtransformer_forward");
  const Tensor embedded = encode_entities(states, params.heads);
  LATransformerOutput la = la_transformer_forward(embedded, params.transformer, ctx.rng, params.gumbel_temperature);
  MixerOutput out = assemble(states, q, embedded, la.patterns, params.heads);
  out.pairwise = head_average(la.diagnostics.stack.attention.front());
  out.level_choice = std::move(la.diagnostics.level_choice);
  out.adjacent_gaps = std::move(la.diagnostics.adjacent_gaps);
  return out;
}

MixerOutput stacked_mixer_forward(const StateBatch& states, const Tensor& q, const StackedMixerParams& params) {
  check_inputs(states, q, "stacked_mixer_forward");
  const Tensor embedded = encode_entities(states, params.heads);
  StackedOutput st = stacked_transformer_forward(embedded, params.transformer);
  MixerOutput out = assemble(states, q, embedded, st.patterns, params.heads);
  out.pairwise = head_average(st.attention.front());
  return out;
}

// ---------------------------------------------------------------- QMIX

QmixParams QmixParams::init(std::size_t n_allies, std::size_t n_enemies, std::size_t embed_dim, std::mt19937_64& rng) {
  QmixParams p;
  p.n_agents = n_allies;
  p.state_dim = (n_allies + n_enemies) * kStateWidth;
  p.embed_dim = embed_dim;
  p.hyper_w1 = Linear::init(p.state_dim, n_allies * embed_dim, rng);
  p.hyper_b1 = Linear::init(p.state_dim, embed_dim, rng);
  p.hyper_w2 = Linear::init(p.state_dim, embed_dim, rng);
  p.hyper_b2a = Linear::init(p.state_dim, embed_dim, rng);
  p.hyper_b2b = Linear::init(embed_dim, 1, rng);
  return p;
}

void QmixParams::visit(const std::string& prefix, const ParamVisitor& f) {
  hyper_w1.visit(prefix + ".hyper_w1", f);
  hyper_b1.visit(prefix + ".hyper_b1", f);
  hyper_w2.visit(prefix + ".hyper_w2", f);
  hyper_b2a.visit(prefix + ".hyper_b2.hidden", f);
  hyper_b2b.visit(prefix + ".hyper_b2.out", f);
}

Tensor flatten_states(const StateBatch& states) {
  const std::size_t a = states.n_allies * kStateWidth, e = states.n_enemies * kStateWidth;
  std::vector<double> flat;
  flat.reserve(states.rows * (a + e));
  for (std::size_t m = 0; m < states.rows; ++m) {
    flat.insert(flat.end(), states.allies.begin() + static_cast<std::ptrdiff_t>(m * a),
                states.allies.begin() + static_cast<std::ptrdiff_t>((m + 1) * a));
    flat.insert(flat.end(), states.enemies.begin() + static_cast<std::ptrdiff_t>(m * e),
                states.enemies.begin() + static_cast<std::ptrdiff_t>((m + 1) * e));
  }
  return Tensor::from({states.rows, a + e}, std::move(flat));
}

MixerOutput qmix_forward(const StateBatch& states, const Tensor& q, const QmixParams& params) {
  check_inputs(states, q, "qmix_forward");
  if (states.n_allies != params.n_agents || flatten_states(states).dim(1) != params.state_dim) {
    throw ShapeError("qmix_forward: mixer built for " + std::to_string(params.n_agents) + " agents and state width " +
                     std::to_string(params.state_dim));
  }
  const std::size_t M = states.rows, NA = states.n_allies, E = params.embed_dim;
  const Tensor s = flatten_states(states);
  const Tensor q_live = reshape(mul(q, alive_tensor(states)), {M, 1, NA});
  const Tensor w1 = reshape(abs(params.hyper_w1(s)), {M, NA, E});
  const Tensor b1 = reshape(params.hyper_b1(s), {M, 1, E});
  const Tensor hidden = elu(add(matmul(q_live, w1), b1));
  const Tensor w2 = reshape(abs(params.hyper_w2(s)), {M, E, 1});
  const Tensor b2 = params.hyper_b2b(relu(params.hyper_b2a(s)));
  MixerOutput out;
  out.bias = reshape(b2, {M});
  out.q_tot = add(reshape(matmul(hidden, w2), {M}), out.bias);
  out.n_entities = NA + states.n_enemies;
  return out;
}

// ---------------------------------------------------------------- VDN

MixerOutput vdn_forward(const StateBatch& states, const Tensor& q) {
  check_inputs(states, q, "vdn_forward");
  MixerOutput out;
  out.credits = alive_tensor(states);
  out.q_tot = sum(mul(q, out.credits), 1);
  out.n_entities = states.n_allies + states.n_enemies;
  return out;
}

// ---------------------------------------------------------------- polymorphic wrappers

namespace {

class LAMixer final : public Mixer {
 public:
  explicit LAMixer(LAQTransformerParams p, MixerKind k) : params_(std::move(p)), kind_(k) {}
  MixerKind kind() const override { return kind_; }
  MixerOutput forward(const StateBatch& s, const Tensor& q, const MixContext& ctx) const override {
    return la_qtransformer_forward(s, q, params_, ctx);
  }
  void visit(const std::string& prefix, const ParamVisitor& f) override { params_.visit(prefix, f); }

 private:
  LAQTransformerParams params_;
  MixerKind kind_;
};

class StackedMixer final : public Mixer {
 public:
  explicit StackedMixer(StackedMixerParams p) : params_(std::move(p)) {}
  MixerKind kind() const override { return MixerKind::kStacked; }
  MixerOutput forward(const StateBatch& s, const Tensor& q, const MixContext&) const override {
    return stacked_mixer_forward(s, q, params_);
  }
  void visit(const std::string& prefix, const ParamVisitor& f) override { params_.visit(prefix, f); }

 private:
  StackedMixerParams params_;
};

class QmixMixer final : public Mixer {
 public:
  explicit QmixMixer(QmixParams p) : params_(std::move(p)) {}
  MixerKind kind() const override { return MixerKind::kQmix; }
  MixerOutput forward(const StateBatch& s, const Tensor& q, const MixContext&) const override {
    return qmix_forward(s, q, params_);
  }
  void visit(const std::string& prefix, const ParamVisitor& f) override { params_.visit(prefix, f); }

 private:
  QmixParams params_;
};

class VdnMixer final : public Mixer {
 public:
  MixerKind kind() const override { return MixerKind::kVdn; }
  MixerOutput forward(const StateBatch& s, const Tensor& q, const MixContext&) const override {
    return vdn_forward(s, q);
  }
  void visit(const std::string&, const ParamVisitor&) override {}
};

}  // namespace

std::unique_ptr<Mixer> make_mixer(const MixerConfig& config, std::size_t n_allies, std::size_t n_enemies,
                                  std::mt19937_64& rng) {
  switch (config.kind) {
    case MixerKind::kLaHybrid:
    case MixerKind::kLaHard:
      return std::make_unique<LAMixer>(LAQTransformerParams::init(config, rng), config.kind);
    case MixerKind::kStacked:
      return std::make_unique<StackedMixer>(StackedMixerParams::init(config, rng));
    case MixerKind::kQmix:
      return std::make_unique<QmixMixer>(QmixParams::init(n_allies, n_enemies, config.qmix_embed_dim, rng));
    case MixerKind::kVdn:
      return std::make_unique<VdnMixer>();
  }
  throw ConfigError("make_mixer: unknown kind");
}

}  // namespace laqt
