#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "laqt/agents.hpp"
#include "laqt/errors.hpp"
#include "laqt/gradcheck.hpp"
#include "support.hpp"

using namespace laqt;

namespace {

AgentConfig small(AgentKind kind) {
  AgentConfig c;
  c.kind = kind;
  c.model_dim = 8;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.hidden_dim = 12;
  return c;
}

// Observations of a live episode under random play.
std::vector<AgentBatch> play(const std::string& preset, std::uint64_t seed, std::size_t steps) {
  SkirmishEnv env(scenario_preset(preset));
  env.reset(seed);
  std::mt19937_64 rng(seed);
  std::vector<AgentBatch> out;
  const std::size_t na = env.config().n_allies(), ne = env.config().n_enemies();
  for (std::size_t t = 0; t < steps && !env.done(); ++t) {
    std::vector<std::vector<double>> avail;
    std::vector<std::size_t> joint;
    for (std::size_t i = 0; i < na; ++i) {
      avail.push_back(env.available_actions(i));
      const std::vector<double> zeros(avail.back().size(), 0.0);
      joint.push_back(select_action(zeros, avail.back(), 1.0, rng));
    }
    out.push_back(make_agent_batch(env.observe_all(), avail, na, ne));
    env.step(joint);
  }
  return out;
}

AgentBatch permute_enemy_slots(const AgentBatch& b, const std::vector<std::size_t>& perm) {
  AgentBatch out = b;
  const std::size_t E = b.enemy_slots, A = b.n_actions();
  for (std::size_t r = 0; r < b.rows; ++r)
    for (std::size_t j = 0; j < E; ++j) {
      const std::size_t from = perm[j];
      std::copy_n(b.enemies.begin() + long((r * E + from) * kEnemyWidth), kEnemyWidth,
                  out.enemies.begin() + long((r * E + j) * kEnemyWidth));
      out.enemy_mask[r * E + j] = b.enemy_mask[r * E + from];
      out.available[r * A + kNumSelfActions + j] = b.available[r * A + kNumSelfActions + from];
    }
  return out;
}

AgentBatch first_rows(const AgentBatch& b, std::size_t rows) {
  AgentBatch out = b;
  out.rows = rows;
  out.self.resize(rows * kSelfWidth);
  out.allies.resize(rows * b.ally_slots * kAllyWidth);
  out.ally_mask.resize(rows * b.ally_slots);
  out.enemies.resize(rows * b.enemy_slots * kEnemyWidth);
  out.enemy_mask.resize(rows * b.enemy_slots);
  out.available.resize(rows * b.n_actions());
  return out;
}

}  // namespace

TEST_CASE("last action decouples into move and attack parts and back") {
  for (std::size_t E : {1u, 3u, 9u}) {
    for (std::size_t a = 0; a < kNumSelfActions + E; ++a) {
      const DecoupledAction d = decouple_last_action(a, E);
      double bits = 0;
      for (double m : d.move) bits += m;
      for (double x : d.attacked) bits += x;
      CHECK(bits == 1.0);
      CHECK(d.attacked.size() == E);
      CHECK(recompose_last_action(d) == a);
    }
    CHECK_THROWS_AS(decouple_last_action(kNumSelfActions + E, E), ContractError);
  }
  CHECK(decouple_last_action(7, 3).attacked == std::vector<double>{0.0, 1.0, 0.0});
  CHECK_THROWS_AS(recompose_last_action(DecoupledAction{{}, {0.0, 0.0}}), ContractError);
}

TEST_CASE("agent kinds round-trip through their names") {
  CHECK(parse_agent_kind("pit") == AgentKind::kPit);
  CHECK(parse_agent_kind(to_string(AgentKind::kGru)) == AgentKind::kGru);
  CHECK_THROWS_AS(parse_agent_kind("mlp"), ConfigError);
}

TEST_CASE("agent batches put enemy j in slot j and pad the rest") {
  EntityObservation o;
  o.self_attrs.assign(kSelfWidth, 0.5);
  o.allies = {std::vector<double>(kAllyWidth, 1.0)};
  o.ally_ids = {2};
  o.enemies = {std::vector<double>(kEnemyWidth, 3.0)};
  o.enemy_ids = {2};
  std::vector<double> avail(kNumSelfActions + 3, 1.0);
  const AgentBatch b = make_agent_batch(std::span(&o, 1), std::span(&avail, 1), 3, 3);
  CHECK(b.ally_slots == 2);
  CHECK(b.ally_mask == std::vector<double>{1.0, 0.0});
  CHECK(b.enemy_mask == std::vector<double>{0.0, 0.0, 1.0});
  CHECK(b.enemies[2 * kEnemyWidth] == 3.0);
  CHECK(b.enemies[0] == 0.0);
  o.enemy_ids = {3};
  CHECK_THROWS_AS(make_agent_batch(std::span(&o, 1), std::span(&avail, 1), 3, 3), ShapeError);

  const AgentBatch pad = padding_batch(2, 3, 3);
  CHECK(pad.rows == 2);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t a = 0; a < pad.n_actions(); ++a) CHECK(pad.available[r * pad.n_actions() + a] == (a == 0 ? 1.0 : 0.0));
}

TEST_CASE("property group: empty group gives zeros; mean averages present entities") {
  std::mt19937_64 rng(1);
  const PitParams p = PitParams::init(small(AgentKind::kPit), rng);
  const std::size_t rows = 3, slots = 4, D = p.model_dim;
  const Tensor e_self = Tensor::uniform({rows, D}, 1, rng);

  const GroupRepresentation empty = property_group(e_self, {}, {}, rows, 0, kAllyWidth, p.ally_group);
  for (double v : empty.mean.to_vector()) CHECK(v == 0.0);
  for (double v : empty.relevant.to_vector()) CHECK(v == 0.0);

  std::vector<double> ent(rows * slots * kAllyWidth);
  std::uniform_real_distribution<double> u(-1, 1);
  for (double& v : ent) v = u(rng);
  const std::vector<double> mask = {1, 0, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1};  // row 1 sees nothing
  const GroupRepresentation g = property_group(e_self, ent, mask, rows, slots, kAllyWidth, p.ally_group);
  const auto entities = g.entities.to_vector();
  const auto mean = g.mean.to_vector();
  const auto rel = g.relevant.to_vector();
  for (std::size_t r = 0; r < rows; ++r) {
    double count = 0;
    for (std::size_t k = 0; k < slots; ++k) count += mask[r * slots + k];
    for (std::size_t d = 0; d < D; ++d) {
      double m = 0;
      for (std::size_t k = 0; k < slots; ++k) m += mask[r * slots + k] * entities[(r * slots + k) * D + d];
      CHECK(mean[r * D + d] == doctest::Approx(count > 0 ? m / count : 0.0).epsilon(1e-12));
    }
    if (count == 0) {
      for (std::size_t d = 0; d < D; ++d) CHECK(rel[r * D + d] == 0.0);
    } else {
      const std::size_t k = g.relevant_index[r];
      CHECK(mask[r * slots + k] == 1.0);
      for (std::size_t d = 0; d < D; ++d) CHECK(rel[r * D + d] == entities[(r * slots + k) * D + d]);
    }
  }

  // contents of masked slots are ignored
  std::vector<double> noisy = ent;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < slots; ++k)
      if (mask[r * slots + k] == 0.0)
        for (std::size_t c = 0; c < kAllyWidth; ++c) noisy[(r * slots + k) * kAllyWidth + c] = 99.0;
  const GroupRepresentation g2 = property_group(e_self, noisy, mask, rows, slots, kAllyWidth, p.ally_group);
  CHECK(testing::max_abs_diff(g2.mean.to_vector(), mean) < 1e-12);
  CHECK(testing::max_abs_diff(g2.relevant.to_vector(), rel) < 1e-12);
}

TEST_CASE("property group summaries do not depend on slot order") {
  std::mt19937_64 rng(2);
  const PitParams p = PitParams::init(small(AgentKind::kPit), rng);
  const std::size_t slots = 4;
  const Tensor e_self = Tensor::uniform({1, p.model_dim}, 1, rng);
  std::vector<double> ent(slots * kEnemyWidth);
  std::uniform_real_distribution<double> u(-1, 1);
  for (double& v : ent) v = u(rng);
  const std::vector<double> mask = {1, 1, 0, 1};
  const std::vector<std::size_t> perm = {3, 0, 2, 1};
  std::vector<double> pent(ent.size()), pmask(slots);
  for (std::size_t k = 0; k < slots; ++k) {
    std::copy_n(ent.begin() + long(perm[k] * kEnemyWidth), kEnemyWidth, pent.begin() + long(k * kEnemyWidth));
    pmask[k] = mask[perm[k]];
  }
  const auto a = property_group(e_self, ent, mask, 1, slots, kEnemyWidth, p.enemy_group);
  const auto b = property_group(e_self, pent, pmask, 1, slots, kEnemyWidth, p.enemy_group);
  CHECK(testing::max_abs_diff(a.mean.to_vector(), b.mean.to_vector()) < 1e-12);
  CHECK(testing::max_abs_diff(a.relevant.to_vector(), b.relevant.to_vector()) < 1e-12);
  CHECK(perm[b.relevant_index[0]] == a.relevant_index[0]);
}

TEST_CASE("PIT: permuting enemy slots permutes attack values only") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto agent = make_agent(small(AgentKind::kPit), 5, 6, rng);
    const auto steps = play("5m_vs_6m", seed, 6);
    const AgentBatch& b = steps.back();
    const std::vector<std::size_t> perm = {5, 3, 0, 1, 4, 2};
    const Tensor h = Tensor::uniform({b.rows, agent->hidden_dim()}, 0.5, rng);
    const auto q = agent->forward(b, h).q.to_vector();
    const auto qp = agent->forward(permute_enemy_slots(b, perm), h).q.to_vector();
    const std::size_t A = b.n_actions();
    for (std::size_t r = 0; r < b.rows; ++r) {
      for (std::size_t a = 0; a < kNumSelfActions; ++a) CHECK(std::abs(qp[r * A + a] - q[r * A + a]) < 1e-12);
      for (std::size_t j = 0; j < 6; ++j)
        CHECK(std::abs(qp[r * A + kNumSelfActions + j] - q[r * A + kNumSelfActions + perm[j]]) < 1e-12);
    }
  }
}

TEST_CASE("PIT shares parameters across populations; the flat agent does not") {
  std::mt19937_64 rng(3);
  auto pit = make_agent(small(AgentKind::kPit), 3, 3, rng);
  auto flat = make_agent(small(AgentKind::kGru), 3, 3, rng);
  for (const std::string preset : {"3m", "5m_vs_6m", "2s3z"}) {
    const AgentBatch b = play(preset, 1, 2).back();
    const Tensor h = Tensor::zeros({b.rows, pit->hidden_dim()});
    CHECK(pit->forward(b, h).q.shape() == Shape{b.rows, b.n_actions()});
    if (preset == "3m")
      CHECK(flat->forward(b, h).q.shape() == Shape{b.rows, b.n_actions()});
    else
      CHECK_THROWS_AS(flat->forward(b, h), ShapeError);
  }
  const AgentBatch b = play("3m", 1, 1).back();
  CHECK_THROWS_AS(pit->forward(b, Tensor::zeros({b.rows + 1, pit->hidden_dim()})), ShapeError);
}

TEST_CASE("unavailable actions carry the mask value") {
  for (AgentKind kind : {AgentKind::kPit, AgentKind::kGru}) {
    std::mt19937_64 rng(4);
    auto agent = make_agent(small(kind), 3, 3, rng);
    for (const AgentBatch& b : play("3m", 5, 20)) {
      const auto q = agent->forward(b, Tensor::zeros({b.rows, agent->hidden_dim()})).q.to_vector();
      for (std::size_t i = 0; i < q.size(); ++i) {
        if (b.available[i] == 0.0) CHECK(q[i] == kMaskedLogit);
        else CHECK(q[i] > -1e6);
      }
    }
  }
}

TEST_CASE("unrolling equals step-by-step forward with the hidden state carried") {
  for (AgentKind kind : {AgentKind::kPit, AgentKind::kGru}) {
    CAPTURE(to_string(kind));
    std::mt19937_64 rng(5);
    auto agent = make_agent(small(kind), 3, 3, rng);
    std::vector<AgentBatch> steps = play("3m", 7, 5);
    REQUIRE(steps.size() == 5);
    // rows may shrink: sequences that ended early drop out at the tail
    steps[3] = first_rows(steps[3], 2);
    steps[4] = first_rows(steps[4], 1);
    const auto unrolled = unroll_agent(*agent, steps).to_vector();
    std::vector<double> manual;
    Tensor h = Tensor::zeros({steps[0].rows, agent->hidden_dim()});
    for (const AgentBatch& b : steps) {
      if (h.dim(0) != b.rows) h = slice(h, 0, 0, b.rows);
      const AgentOutput o = agent->forward(b, h);
      h = o.hidden;
      const auto q = o.q.to_vector();
      manual.insert(manual.end(), q.begin(), q.end());
    }
    REQUIRE(unrolled.size() == manual.size());
    CHECK(testing::max_abs_diff(unrolled, manual) < 1e-12);

    std::vector<AgentBatch> growing = {first_rows(steps[0], 1), steps[1]};
    CHECK_THROWS_AS(unroll_agent(*agent, growing), ShapeError);
  }
}

TEST_CASE("epsilon-greedy: uniform over available actions when exploring, masked never chosen") {
  std::mt19937_64 rng(6);
  const std::vector<double> q = {5, 1, 2, 9, 3, 0, 7, 4};
  const std::vector<double> avail = {0, 1, 1, 0, 1, 1, 1, 0};
  const std::size_t draws = 60000;
  std::vector<std::size_t> counts(q.size(), 0);
  for (std::size_t i = 0; i < draws; ++i) ++counts[select_action(q, avail, 1.0, rng)];
  const double p = 1.0 / 5, mean = draws * p, sd = std::sqrt(draws * p * (1 - p));
  for (std::size_t a = 0; a < q.size(); ++a) {
    CAPTURE(a);
    if (avail[a] == 0.0) CHECK(counts[a] == 0);
    else CHECK(std::abs(double(counts[a]) - mean) < 3 * sd);
  }
  CHECK(select_action(q, avail, 0.0, rng) == 6);
  const std::vector<double> tie = {1, 3, 3, 3};
  CHECK(select_action(tie, std::vector<double>{1, 0, 1, 1}, 0.0, rng) == 2);
  CHECK_THROWS_AS(select_action(tie, std::vector<double>(4, 0.0), 0.5, rng), ContractError);
  CHECK_THROWS_AS(select_action(tie, std::vector<double>(3, 1.0), 0.5, rng), ShapeError);

  // partial exploration mixes greedy and uniform
  std::fill(counts.begin(), counts.end(), 0);
  for (std::size_t i = 0; i < draws; ++i) ++counts[select_action(q, avail, 0.5, rng)];
  const double greedy_p = 0.5 + 0.5 / 5;
  CHECK(std::abs(double(counts[6]) - draws * greedy_p) < 3 * std::sqrt(draws * greedy_p * (1 - greedy_p)));
  CHECK(counts[0] + counts[3] + counts[7] == 0);
}

TEST_CASE("agent gradient oracle over 20 seeds") {
  const auto& reg = gradcheck_registry();
  const auto it = std::find_if(reg.begin(), reg.end(), [](const GradCheckEntry& e) { return e.name == "pit"; });
  REQUIRE(it != reg.end());
  CHECK(run_gradcheck(*it, 1, 20).worst_rel_error < 1e-4);
}
