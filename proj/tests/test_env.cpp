#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "laqt/agents.hpp"
#include "laqt/env.hpp"
#include "laqt/errors.hpp"

using namespace laqt;

namespace {

std::vector<std::size_t> random_joint(const SkirmishEnv& env, std::mt19937_64& rng) {
  std::vector<std::size_t> joint;
  for (std::size_t i = 0; i < env.config().n_allies(); ++i) {
    const auto avail = env.available_actions(i);
    joint.push_back(select_action(std::vector<double>(avail.size(), 0.0), avail, 1.0, rng));
  }
  return joint;
}

// Prefers attacks so that episodes actually end in combat.
std::vector<std::size_t> aggressive_joint(const SkirmishEnv& env, std::mt19937_64& rng) {
  std::vector<std::size_t> joint;
  for (std::size_t i = 0; i < env.config().n_allies(); ++i) {
    const auto avail = env.available_actions(i);
    std::vector<double> q(avail.size(), 0.0);
    for (std::size_t a = kNumSelfActions; a < q.size(); ++a) q[a] = 1.0;
    q[4] = 0.5;  // east, toward the enemy side
    joint.push_back(select_action(q, avail, 0.2, rng));
  }
  return joint;
}

double hp(const UnitState& u) { return u.health + u.shield; }

struct Played {
  std::vector<std::vector<std::size_t>> actions;
  std::vector<StepResult> results;
  std::vector<ReplayRecord> replay;
  std::vector<double> initial_enemy_hp;
};

Played play(const ScenarioConfig& cfg, std::uint64_t seed, bool aggressive) {
  SkirmishEnv env(cfg);
  env.reset(seed);
  env.set_logging(true);
  std::mt19937_64 rng(seed ^ 0xabcdef);
  Played p;
  for (const UnitState& e : env.enemies()) p.initial_enemy_hp.push_back(hp(e));
  while (!env.done()) {
    p.actions.push_back(aggressive ? aggressive_joint(env, rng) : random_joint(env, rng));
    p.results.push_back(env.step(p.actions.back()));
  }
  p.replay = env.replay();
  return p;
}

}  // namespace

TEST_CASE("presets and unit codes") {
  for (const std::string& name : scenario_preset_names()) {
    const ScenarioConfig c = scenario_preset(name);
    CHECK_NOTHROW(c.validate());
    CHECK(c.n_actions() == kNumSelfActions + c.n_enemies());
  }
  CHECK(scenario_preset("5m_vs_6m").n_allies() == 5);
  CHECK(scenario_preset("5m_vs_6m").n_enemies() == 6);
  CHECK(unit_type_codes(scenario_preset("2s3z").ally_types) == "sszzz");
  CHECK_THROWS_AS(scenario_preset("27m_vs_30m"), ConfigError);
  CHECK_THROWS_AS(parse_unit_type('x'), ConfigError);
  ScenarioConfig bad = scenario_preset("3m");
  bad.max_steps = 0;
  CHECK_THROWS_AS(SkirmishEnv{bad}, ConfigError);
  bad = scenario_preset("3m");
  bad.enemy_types.clear();
  CHECK_THROWS_AS(SkirmishEnv{bad}, ConfigError);
}

TEST_CASE("reset places full-health teams on opposite sides") {
  SkirmishEnv env(scenario_preset("3m"));
  env.reset(11);
  CHECK(env.steps() == 0);
  CHECK_FALSE(env.done());
  for (const UnitState& u : env.allies()) {
    CHECK(u.alive);
    CHECK(u.health == 45.0);
    CHECK(std::abs(u.x - 4.0) <= 0.5);
  }
  for (const UnitState& u : env.enemies()) CHECK(std::abs(u.x - 12.0) <= 0.5);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto a = env.available_actions(i);
    CHECK(a[kActionNoop] == 0.0);
    CHECK(a[kActionStop] == 1.0);
    for (std::size_t j = 0; j < 3; ++j) CHECK(a[kNumSelfActions + j] == 0.0);  // out of range at the start
  }
  CHECK(env.reward_scale() * (3 * 5.5 + 10) == doctest::Approx(20.0).epsilon(1e-15));
}

TEST_CASE("same seed and actions reproduce the episode exactly") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SkirmishEnv a(scenario_preset("2s3z")), b(scenario_preset("2s3z"));
    a.reset(seed);
    b.reset(seed);
    CHECK(a.state_hash() == b.state_hash());
    std::mt19937_64 rng(seed);
    while (!a.done()) {
      const auto joint = aggressive_joint(a, rng);
      const StepResult ra = a.step(joint), rb = b.step(joint);
      CHECK(ra.reward == rb.reward);
      CHECK(a.state_hash() == b.state_hash());
    }
    CHECK(b.done());
  }
  SkirmishEnv a(scenario_preset("3m")), b(scenario_preset("3m"));
  a.reset(1);
  b.reset(2);
  CHECK(a.state_hash() != b.state_hash());
}

TEST_CASE("replaying the logged action stream recomputes rewards and hashes") {
  for (const std::string preset : {"3m", "2s3z", "5m_vs_6m"}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const ScenarioConfig cfg = scenario_preset(preset);
      const Played p = play(cfg, seed, true);
      REQUIRE(p.replay.size() == p.actions.size());

      SkirmishEnv env(cfg);
      env.reset(seed);
      for (std::size_t t = 0; t < p.replay.size(); ++t) {
        const ReplayRecord& r = p.replay[t];
        CHECK(r.step == int(t));
        CHECK(env.state_hash() == r.state_hash);
        CHECK(r.joint_action == p.actions[t]);
        CHECK(env.step(r.joint_action).reward == r.reward);
      }
      CHECK(env.done());
    }
  }
}

TEST_CASE("reward matches an independent computation from health deltas") {
  std::size_t wins = 0;
  for (const std::string preset : {"3m", "2s3z", "5m_vs_6m", "1s2z"}) {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
      const ScenarioConfig cfg = scenario_preset(preset);
      const Played p = play(cfg, seed, true);
      const double n = double(cfg.n_enemies());
      const double scale = 20.0 / (n * (0.5 + 5.0) + 10.0);
      std::vector<double> before = p.initial_enemy_hp;
      for (std::size_t t = 0; t < p.replay.size(); ++t) {
        const ReplayRecord& r = p.replay[t];
        double raw = r.win ? 10.0 : 0.0;
        for (std::size_t j = 0; j < before.size(); ++j) {
          const UnitTypeSpec& s = unit_spec(cfg.enemy_types[j]);
          raw += 0.5 * (before[j] - r.enemy_hp[j]) / (s.max_health + s.max_shield);
          if (before[j] > 0.0 && r.enemy_hp[j] == 0.0) raw += 5.0;
        }
        CHECK(std::abs(r.reward - raw * scale) < 1e-12);
        before = r.enemy_hp;
      }
      wins += p.replay.back().win ? 1 : 0;
    }
  }
  CHECK(wins > 0);
}

TEST_CASE("a clean sweep returns exactly the maximum episode reward") {
  ScenarioConfig cfg;
  cfg.name = "duel";
  cfg.ally_types = {UnitType::kMarine};
  cfg.enemy_types = {UnitType::kMarine};
  SkirmishEnv env(cfg);
  env.reset(0);
  env.mutable_allies()[0].x = env.enemies()[0].x - 1.0;
  env.mutable_allies()[0].y = env.enemies()[0].y;
  double total = 0;
  bool won = false;
  while (!env.done()) {
    const StepResult r = env.step({kNumSelfActions});
    total += r.reward;
    won = r.info.win;
  }
  CHECK(won);
  CHECK(std::abs(total - 20.0) < 1e-12);
}

TEST_CASE("damage is conserved and health stays in range") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SkirmishEnv env(scenario_preset("2s3z"));
    env.reset(seed);
    std::mt19937_64 rng(seed);
    while (!env.done()) {
      double allies_before = 0, enemies_before = 0;
      for (const UnitState& u : env.allies()) allies_before += hp(u);
      for (const UnitState& u : env.enemies()) enemies_before += hp(u);
      const StepResult r = env.step(aggressive_joint(env, rng));
      double allies_after = 0, enemies_after = 0;
      int dead_enemies = 0;
      for (const UnitState& u : env.allies()) allies_after += hp(u);
      for (const UnitState& u : env.enemies()) {
        enemies_after += hp(u);
        dead_enemies += u.alive ? 0 : 1;
      }
      CHECK(std::abs(enemies_before - enemies_after - r.info.damage_dealt) < 1e-9);
      CHECK(std::abs(allies_before - allies_after - r.info.damage_taken) < 1e-9);
      for (const auto* team : {&env.allies(), &env.enemies()})
        for (const UnitState& u : *team) {
          CHECK(u.health >= 0.0);
          CHECK(u.health <= u.max_health);
          CHECK(u.shield >= 0.0);
          CHECK(u.shield <= u.max_shield);
          CHECK(u.alive == (u.health > 0.0));
          CHECK((u.x >= 0.0 && u.x <= env.config().width));
          CHECK((u.y >= 0.0 && u.y <= env.config().height));
        }
      if (r.info.win) CHECK(dead_enemies == int(env.enemies().size()));
    }
  }
}

TEST_CASE("scripted opponents target the nearest living ally") {
  std::size_t attacks = 0, moves = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SkirmishEnv env(scenario_preset("5m_vs_6m"));
    env.reset(seed);
    std::mt19937_64 rng(seed);
    while (!env.done()) {
      const auto policy = env.enemy_policy();
      for (std::size_t j = 0; j < env.enemies().size(); ++j) {
        const UnitState& e = env.enemies()[j];
        if (!e.alive) {
          CHECK(policy[j] == kActionNoop);
          continue;
        }
        std::size_t target = 0;
        double best = 1e300;
        for (std::size_t i = 0; i < env.allies().size(); ++i) {
          const UnitState& a = env.allies()[i];
          if (!a.alive) continue;
          const double d = std::sqrt((a.x - e.x) * (a.x - e.x) + (a.y - e.y) * (a.y - e.y));
          if (d < best) {
            best = d;
            target = i;
          }
        }
        if (best <= unit_spec(e.type).attack_range) {
          CHECK(policy[j] == (e.cooldown == 0 ? kNumSelfActions + target : kActionStop));
          ++attacks;
        } else {
          const double dx = env.allies()[target].x - e.x, dy = env.allies()[target].y - e.y;
          const std::size_t toward = std::abs(dx) >= std::abs(dy) ? (dx > 0 ? 4 : 5) : (dy > 0 ? 2 : 3);
          CHECK((policy[j] == toward || policy[j] == kActionStop));
          ++moves;
        }
      }
      env.step(aggressive_joint(env, rng));
    }
  }
  CHECK(attacks > 0);
  CHECK(moves > 0);
}

TEST_CASE("action availability follows range, cooldown, bounds and death") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SkirmishEnv env(scenario_preset("2s3z"));
    env.reset(seed);
    std::mt19937_64 rng(seed);
    while (!env.done()) {
      for (std::size_t i = 0; i < env.allies().size(); ++i) {
        const UnitState& u = env.allies()[i];
        const auto a = env.available_actions(i);
        if (!u.alive) {
          CHECK(a[kActionNoop] == 1.0);
          CHECK(std::count(a.begin(), a.end(), 1.0) == 1);
          continue;
        }
        CHECK(a[kActionNoop] == 0.0);
        CHECK(a[kActionStop] == 1.0);
        const double step = env.config().move_step;
        CHECK(a[2] == (u.y + step <= env.config().height ? 1.0 : 0.0));
        CHECK(a[3] == (u.y - step >= 0.0 ? 1.0 : 0.0));
        CHECK(a[4] == (u.x + step <= env.config().width ? 1.0 : 0.0));
        CHECK(a[5] == (u.x - step >= 0.0 ? 1.0 : 0.0));
        for (std::size_t j = 0; j < env.enemies().size(); ++j) {
          const UnitState& e = env.enemies()[j];
          const bool ok = u.cooldown == 0 && e.alive && std::hypot(u.x - e.x, u.y - e.y) <= unit_spec(u.type).attack_range;
          CHECK(a[kNumSelfActions + j] == (ok ? 1.0 : 0.0));
        }
      }
      env.step(aggressive_joint(env, rng));
    }
  }
}

TEST_CASE("observations are relative, normalised and limited to sight") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SkirmishEnv env(scenario_preset("5m_vs_6m"));
    env.reset(seed);
    std::mt19937_64 rng(seed);
    const double sight = env.config().sight_range;
    while (!env.done()) {
      for (std::size_t i = 0; i < env.allies().size(); ++i) {
        const UnitState& self = env.allies()[i];
        const EntityObservation o = env.observe(i);
        REQUIRE(o.self_attrs.size() == kSelfWidth);
        if (!self.alive) {
          CHECK(std::all_of(o.self_attrs.begin(), o.self_attrs.end(), [](double v) { return v == 0.0; }));
          CHECK(o.allies.empty());
          CHECK(o.enemies.empty());
          continue;
        }
        CHECK(o.self_attrs[4] == self.health / self.max_health);
        auto check_entity = [&](const std::vector<double>& f, const UnitState& u) {
          CHECK(f[0] == doctest::Approx((u.x - self.x) / sight).epsilon(1e-12));
          CHECK(f[1] == doctest::Approx((u.y - self.y) / sight).epsilon(1e-12));
          CHECK(f[2] == doctest::Approx(std::hypot(f[0], f[1])).epsilon(1e-12));
          CHECK(f[2] <= 1.0);
          CHECK(f[3] == u.health / u.max_health);
          CHECK((f[3] > 0.0 && f[3] <= 1.0));
        };
        std::size_t visible_allies = 0, visible_enemies = 0;
        for (std::size_t k = 0; k < env.allies().size(); ++k)
          if (k != i && env.allies()[k].alive && distance(self, env.allies()[k]) <= sight) ++visible_allies;
        for (const UnitState& e : env.enemies())
          if (e.alive && distance(self, e) <= sight) ++visible_enemies;
        CHECK(o.allies.size() == visible_allies);
        CHECK(o.enemies.size() == visible_enemies);
        for (std::size_t k = 0; k < o.allies.size(); ++k) {
          REQUIRE(o.allies[k].size() == kAllyWidth);
          check_entity(o.allies[k], env.allies()[o.ally_ids[k]]);
        }
        for (std::size_t k = 0; k < o.enemies.size(); ++k) {
          REQUIRE(o.enemies[k].size() == kEnemyWidth);
          check_entity(o.enemies[k], env.enemies()[o.enemy_ids[k]]);
        }
      }
      const GlobalState g = env.global_state();
      for (std::size_t i = 0; i < g.n_allies; ++i) {
        const double* s = &g.allies[i * kStateWidth];
        CHECK(s[0] == (env.allies()[i].alive ? 1.0 : 0.0));
        for (std::size_t c = 0; c < kStateWidth; ++c) CHECK((s[c] >= 0.0 && s[c] <= 1.0));
      }
      env.step(aggressive_joint(env, rng));
    }
  }
}

TEST_CASE("attacked-last-step bit follows the agent's previous action") {
  SkirmishEnv env(scenario_preset("3m"));
  env.reset(3);
  env.mutable_allies()[0].x = env.enemies()[1].x - 1.0;
  env.mutable_allies()[0].y = env.enemies()[1].y;
  std::vector<std::size_t> joint = {kNumSelfActions + 1, kActionStop, kActionStop};
  env.step(joint);
  const EntityObservation o = env.observe(0);
  for (std::size_t k = 0; k < o.enemies.size(); ++k)
    CHECK(o.enemies[k].back() == (o.enemy_ids[k] == 1 ? 1.0 : 0.0));
  CHECK(o.self_attrs[6 + kNumUnitTypes + kActionStop] == 0.0);
  CHECK(env.observe(1).self_attrs[6 + kNumUnitTypes + kActionStop] == 1.0);
}

TEST_CASE("step limit truncates the episode") {
  ScenarioConfig cfg = scenario_preset("3m");
  cfg.max_steps = 3;
  SkirmishEnv env(cfg);
  env.reset(0);
  const std::vector<std::size_t> stop(3, kActionStop);
  CHECK_FALSE(env.step(stop).terminated);
  CHECK_FALSE(env.step(stop).terminated);
  const StepResult last = env.step(stop);
  CHECK(last.terminated);
  CHECK(last.info.truncated);
  CHECK_FALSE(last.info.win);
  CHECK(env.done());
  CHECK_THROWS_AS(env.step(stop), ContractError);
}

TEST_CASE("invalid joint actions are contract errors") {
  SkirmishEnv env(scenario_preset("3m"));
  CHECK_THROWS_AS(env.step({1, 1, 1}), ContractError);  // before reset
  env.reset(0);
  CHECK_THROWS_AS(env.step({1, 1}), ContractError);
  CHECK_THROWS_AS(env.step({0, 1, 1}), ContractError);                   // no-op while alive
  CHECK_THROWS_AS(env.step({kNumSelfActions, 1, 1}), ContractError);     // target out of range
  CHECK_THROWS_AS(env.step({kNumSelfActions + 3, 1, 1}), ContractError);  // no such enemy
  CHECK_NOTHROW(env.step({1, 1, 1}));
}

TEST_CASE("snapshot and restore resume the same trajectory") {
  SkirmishEnv env(scenario_preset("2s3z"));
  env.reset(9);
  std::mt19937_64 rng(9);
  for (int t = 0; t < 5; ++t) env.step(aggressive_joint(env, rng));
  const EnvSnapshot snap = env.snapshot();
  const std::uint64_t h = env.state_hash();
  std::mt19937_64 r1(1), r2(1);
  std::vector<double> first, second;
  for (int t = 0; t < 5 && !env.done(); ++t) first.push_back(env.step(aggressive_joint(env, r1)).reward);
  env.restore(snap);
  CHECK(env.state_hash() == h);
  for (int t = 0; t < 5 && !env.done(); ++t) second.push_back(env.step(aggressive_joint(env, r2)).reward);
  CHECK(first == second);
  SkirmishEnv other(scenario_preset("3m"));
  CHECK_THROWS_AS(other.restore(snap), ContractError);
}

TEST_CASE("replay lines round-trip and reject garbage") {
  ReplayRecord r;
  r.step = 7;
  r.state_hash = 0xfedcba9876543210ULL;
  r.joint_action = {1, 6, 0};
  r.reward = 0.1 + 0.2;
  r.enemy_hp = {45.0, 1.0 / 3.0};
  r.win = true;
  std::ostringstream os;
  write_replay(os, r);
  const auto back = read_replay(os.str());
  REQUIRE(back.has_value());
  CHECK(back->step == 7);
  CHECK(back->state_hash == r.state_hash);
  CHECK(back->joint_action == r.joint_action);
  CHECK(back->reward == r.reward);
  CHECK(back->enemy_hp == r.enemy_hp);
  CHECK(back->win);
  CHECK_FALSE(read_replay("step x hash").has_value());
  CHECK_FALSE(read_replay("").has_value());
}
