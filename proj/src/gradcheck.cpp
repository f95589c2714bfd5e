#include "laqt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "laqt/agents.hpp"
#include "laqt/la_transformer.hpp"
#include "laqt/mixers.hpp"
#include "laqt/nn.hpp"
#include "laqt/trainer.hpp"

namespace laqt {

GradCheckResult check_gradients(GradCase& gc, std::uint64_t seed, const GradCheckOptions& options) {
  for (Tensor& leaf : gc.leaves) leaf.zero_grad();
  const Tensor loss = gc.loss();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  for (const Tensor& leaf : gc.leaves) {
    if (leaf.has_grad()) {
      auto g = leaf.grad();
      analytic.emplace_back(g.begin(), g.end());
    } else {
      analytic.emplace_back(leaf.numel(), 0.0);
    }
  }
  for (Tensor& leaf : gc.leaves) leaf.zero_grad();

  std::mt19937_64 rng(seed ^ 0x51ed270b27f3c1d9ULL);
  GradCheckResult r;
  NoGradGuard no_grad;
  const auto& probe = gc.fd_loss ? gc.fd_loss : gc.loss;
  for (std::size_t k = 0; k < gc.leaves.size(); ++k) {
    Tensor& leaf = gc.leaves[k];
    const std::size_t n = leaf.numel();
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    if (n > options.coords_per_leaf) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.coords_per_leaf);
    }
    for (std::size_t i : coords) {
      auto data = leaf.mutable_data();
      const double saved = data[i];
      data[i] = saved + options.step;
      const double up = probe().item();
      data[i] = saved - options.step;
      const double down = probe().item();
      data[i] = saved;
      const double fd = (up - down) / (2.0 * options.step);
      const double a = analytic[k][i];
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), options.floor});
      r.worst_rel_error = std::max(r.worst_rel_error, rel);
      ++r.checked;
    }
  }
  return r;
}

GradCheckReport run_gradcheck(const GradCheckEntry& entry, std::uint64_t first_seed, std::size_t n_seeds,
                              const GradCheckOptions& options) {
  GradCheckReport rep;
  rep.name = entry.name;
  for (std::size_t s = 0; s < n_seeds; ++s) {
    GradCase gc = entry.make(first_seed + s);
    const GradCheckResult r = check_gradients(gc, first_seed + s, options);
    rep.worst_rel_error = std::max(rep.worst_rel_error, r.worst_rel_error);
    rep.checked += r.checked;
    ++rep.seeds;
  }
  return rep;
}

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool grad = true) {
  return Tensor::uniform(std::move(shape), 1.0, rng, grad);
}

std::vector<Tensor> leaves_of(const std::function<void(const ParamVisitor&)>& visit) {
  std::vector<Tensor> out;
  visit([&](const std::string&, Tensor& t) { out.push_back(t); });
  return out;
}

// Contracts an output with a fixed random tensor so every element matters.
Tensor project(const Tensor& out, const Tensor& weights) { return sum_all(mul(out, weights)); }

StateBatch random_states(std::size_t rows, std::size_t na, std::size_t ne, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  StateBatch s;
  s.rows = rows;
  s.n_allies = na;
  s.n_enemies = ne;
  s.allies.resize(rows * na * kStateWidth);
  s.enemies.resize(rows * ne * kStateWidth);
  for (double& v : s.allies) v = u(rng);
  for (double& v : s.enemies) v = u(rng);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < na; ++i) {
      const double alive = (r + i) % 4 == 3 ? 0.0 : 1.0;  // a few dead agents
      s.allies[(r * na + i) * kStateWidth] = alive;
      s.alive.push_back(alive);
    }
  return s;
}

MixerConfig small_mixer(MixerKind kind) {
  MixerConfig c;
  c.kind = kind;
  c.model_dim = 8;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.fc_mul_dim = 8;
  c.fc_add_dim = 8;
  c.levels = 3;
  c.qmix_embed_dim = 8;
  return c;
}

AgentConfig small_agent() {
  AgentConfig c;
  c.model_dim = 8;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.hidden_dim = 8;
  return c;
}

GradCase attention_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto p = std::make_shared<MultiHeadAttention>(MultiHeadAttention::init(8, 2, rng));
  Tensor q = random_tensor({2, 3, 8}, rng), kv = random_tensor({2, 4, 8}, rng);
  Tensor w = random_tensor({2, 3, 8}, rng, false);
  GradCase gc;
  gc.leaves = leaves_of([&](const ParamVisitor& f) { p->visit("mha", f); });
  gc.leaves.push_back(q);
  gc.leaves.push_back(kv);
  gc.loss = [p, q, kv, w] { return project(multi_head_attention(q, kv, *p).out, w); };
  return gc;
}

GradCase feed_forward_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto p = std::make_shared<FeedForward>(FeedForward::init(8, 16, rng));
  // give the norm non-trivial gain and shift
  for (double& v : p->norm.gain.mutable_data()) v = 1.0 + 0.3 * std::uniform_real_distribution<double>(-1, 1)(rng);
  for (double& v : p->norm.bias.mutable_data()) v = 0.3 * std::uniform_real_distribution<double>(-1, 1)(rng);
  Tensor x = random_tensor({3, 8}, rng), w = random_tensor({3, 8}, rng, false);
  GradCase gc;
  gc.leaves = leaves_of([&](const ParamVisitor& f) { p->visit("ff", f); });
  gc.leaves.push_back(x);
  gc.loss = [p, x, w] { return project(feed_forward(x, *p), w); };
  return gc;
}

GradCase gru_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto p = std::make_shared<GruCell>(GruCell::init(5, 6, rng));
  Tensor x = random_tensor({4, 5}, rng), h = random_tensor({4, 6}, rng), w = random_tensor({4, 6}, rng, false);
  GradCase gc;
  gc.leaves = leaves_of([&](const ParamVisitor& f) { p->visit("gru", f); });
  gc.leaves.push_back(x);
  gc.leaves.push_back(h);
  gc.loss = [p, x, h, w] { return project(gru_cell(x, h, *p), w); };
  return gc;
}

GradCase la_case(std::uint64_t seed, LevelMode mode) {
  std::mt19937_64 rng(seed);
  auto p = std::make_shared<LATransformer>(LATransformer::init(8, 2, 16, 3, mode, rng));
  Tensor x = random_tensor({2, 4, 8}, rng), w = random_tensor({2, 4, 8}, rng, false);
  GradCase gc;
  gc.leaves = leaves_of([&](const ParamVisitor& f) { p->visit("la", f); });
  gc.leaves.push_back(x);
  gc.loss = [p, x, w] { return project(la_transformer_forward(x, *p, nullptr).patterns, w); };
  if (mode == LevelMode::kHard) {
    // level logits as in the selector, soft mask without noise
    auto soft_mask = [p](const Tensor& emb, const LevelStack& stack) {
      const std::size_t last = emb.rank() - 1;
      Tensor key = p->hard_key(emb);
      std::vector<Tensor> logits;
      for (const Tensor& c : stack.patterns) logits.push_back(sum(mul(key, c), last, true));
      return gumbel_softmax(concat(logits, last), GumbelOptions{1.0, false, nullptr});
    };
    struct Frozen {
      std::vector<Tensor> stack;
      Tensor hard, soft;
    };
    auto frozen = std::make_shared<Frozen>();
    {
      NoGradGuard g;
      const LevelStack stack = level_iterate(x, *p);
      for (const Tensor& c : stack.patterns) frozen->stack.push_back(c.detach());
      frozen->hard = select_hard(stack, x, *p, nullptr).mask.detach();
      frozen->soft = soft_mask(x, stack).detach();
    }
    gc.fd_loss = [p, x, w, frozen, soft_mask] {
      const LevelStack stack = level_iterate(x, *p);
      const Tensor soft = soft_mask(x, stack);
      const std::size_t last = x.rank() - 1;
      Tensor mixed;
      for (std::size_t l = 0; l < stack.patterns.size(); ++l) {
        Tensor term = add(mul(slice(frozen->hard, last, l, 1), stack.patterns[l]),
                          mul(sub(slice(soft, last, l, 1), slice(frozen->soft, last, l, 1)), frozen->stack[l]));
        mixed = l == 0 ? term : add(mixed, term);
      }
      return project(feed_forward(mixed, p->ff), w);
    };
  }
  return gc;
}

GradCase la_qtransformer_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto p = std::make_shared<LAQTransformerParams>(LAQTransformerParams::init(small_mixer(MixerKind::kLaHybrid), rng));
  auto states = std::make_shared<StateBatch>(random_states(3, 3, 2, rng));
  Tensor q = random_tensor({3, 3}, rng), w1 = random_tensor({3}, rng, false), w2 = random_tensor({3, 3}, rng, false);
  GradCase gc;
  gc.leaves = leaves_of([&](const ParamVisitor& f) { p->visit("mixer", f); });
  gc.leaves.push_back(q);
  gc.loss = [p, states, q, w1, w2] {
    const MixerOutput o = la_qtransformer_forward(*states, q, *p, MixContext{});
    return add(project(o.q_tot, w1), project(o.credits, w2));
  };
  return gc;
}

GradCase qmix_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto p = std::make_shared<QmixParams>(QmixParams::init(3, 2, 8, rng));
  auto states = std::make_shared<StateBatch>(random_states(3, 3, 2, rng));
  Tensor q = random_tensor({3, 3}, rng), w = random_tensor({3}, rng, false);
  GradCase gc;
  gc.leaves = leaves_of([&](const ParamVisitor& f) { p->visit("qmix", f); });
  gc.leaves.push_back(q);
  gc.loss = [p, states, q, w] { return project(qmix_forward(*states, q, *p).q_tot, w); };
  return gc;
}

GradCase pit_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto p = std::make_shared<PitParams>(PitParams::init(small_agent(), rng));
  const std::size_t R = 3, na = 3, ne = 2;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto batch = std::make_shared<AgentBatch>();
  batch->rows = R;
  batch->ally_slots = na - 1;
  batch->enemy_slots = ne;
  for (std::size_t i = 0; i < R * kSelfWidth; ++i) batch->self.push_back(u(rng));
  for (std::size_t i = 0; i < R * (na - 1) * kAllyWidth; ++i) batch->allies.push_back(u(rng));
  for (std::size_t i = 0; i < R * ne * kEnemyWidth; ++i) batch->enemies.push_back(u(rng));
  batch->ally_mask = {1, 1, 1, 0, 0, 0};  // one agent sees no allies
  batch->enemy_mask = {1, 1, 0, 1, 1, 1};
  batch->available.assign(R * (kNumSelfActions + ne), 1.0);
  Tensor h = random_tensor({R, small_agent().hidden_dim}, rng);
  Tensor w1 = random_tensor({R, kNumSelfActions + ne}, rng, false), w2 = random_tensor({R, small_agent().hidden_dim}, rng, false);
  GradCase gc;
  gc.leaves = leaves_of([&](const ParamVisitor& f) { p->visit("pit", f); });
  gc.leaves.push_back(h);
  gc.loss = [p, batch, h, w1, w2] {
    const AgentOutput o = pit_forward(*batch, h, *p);
    return add(project(o.q, w1), project(o.hidden, w2));
  };
  return gc;
}

GradCase td_loss_case(std::uint64_t seed) {
  // 2 agents, 2 steps (the step limit ends the episode), full PIT + LA-QTransformer stack
  ScenarioConfig sc;
  sc.name = "2m_vs_1m";
  sc.ally_types = parse_unit_types("mm");
  sc.enemy_types = parse_unit_types("m");
  sc.max_steps = 2;
  std::mt19937_64 rng(seed);
  struct State {
    ScenarioConfig scenario;
    Networks online, target;
    std::vector<EpisodeRecord> episodes;
  };
  auto st = std::make_shared<State>();
  st->scenario = sc;
  st->online = make_networks(small_agent(), small_mixer(MixerKind::kLaHybrid), 2, 1, rng);
  st->target = make_networks(small_agent(), small_mixer(MixerKind::kLaHybrid), 2, 1, rng);
  const std::uint64_t env_seeds[] = {seed, seed + 1};
  st->episodes = run_episodes(sc, *st->online.agent, env_seeds, RolloutOptions{1.0, true}, rng);
  GradCase gc;
  for (auto& p : named_params(st->online)) gc.leaves.push_back(p.tensor);
  gc.loss = [st] {
    std::vector<const EpisodeRecord*> eps;
    for (const auto& e : st->episodes) eps.push_back(&e);
    return td_loss(eps, st->scenario, st->online, st->target, 0.99, MixContext{}).loss;
  };
  return gc;
}

}  // namespace

const std::vector<GradCheckEntry>& gradcheck_registry() {
  static const std::vector<GradCheckEntry> registry = {
      {"attention", attention_case},
      {"feed_forward", feed_forward_case},
      {"gru", gru_case},
      {"la_hard", [](std::uint64_t s) { return la_case(s, LevelMode::kHard); }},
      {"la_hybrid", [](std::uint64_t s) { return la_case(s, LevelMode::kHybrid); }},
      {"la_qtransformer", la_qtransformer_case},
      {"qmix", qmix_case},
      {"pit", pit_case},
      {"td_loss", td_loss_case},
  };
  return registry;
}

}  // namespace laqt
