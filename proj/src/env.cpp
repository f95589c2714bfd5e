#include "laqt/env.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <ostream>
#include <sstream>

#include "laqt/errors.hpp"

namespace laqt {
namespace {

constexpr std::array<UnitTypeSpec, kNumUnitTypes> kSpecs{{
    // hp, shield, damage, range, cooldown, speed
    {45.0, 0.0, 6.0, 2.0, 0, 1.0},    // marine-like
    {50.0, 30.0, 10.0, 3.0, 1, 1.0},  // stalker-like
    {60.0, 40.0, 12.0, 1.0, 1, 1.0},  // zealot-like
}};

constexpr double kDamageWeight = 0.5;
constexpr double kKillBonus = 5.0;
constexpr double kWinBonus = 10.0;
constexpr double kMaxEpisodeReward = 20.0;

UnitState spawn(UnitType type, double x, double y) {
  const UnitTypeSpec& s = unit_spec(type);
  UnitState u;
  u.x = x;
  u.y = y;
  u.health = u.max_health = s.max_health;
  u.shield = u.max_shield = s.max_shield;
  u.type = type;
  u.alive = true;
  return u;
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

void push_type(std::vector<double>& v, UnitType t) {
  for (std::size_t k = 0; k < kNumUnitTypes; ++k) v.push_back(static_cast<std::size_t>(t) == k ? 1.0 : 0.0);
}

double shield_fraction(const UnitState& u) { return u.max_shield > 0.0 ? u.shield / u.max_shield : 0.0; }

}  // namespace

char type_code(UnitType type) {
  switch (type) {
    case UnitType::kMarine:
      return 'm';
    case UnitType::kStalker:
      return 's';
    case UnitType::kZealot:
      return 'z';
  }
  return '?';
}

UnitType parse_unit_type(char code) {
  switch (code) {
    case 'm':
      return UnitType::kMarine;
    case 's':
      return UnitType::kStalker;
    case 'z':
      return UnitType::kZealot;
    default:
      throw ConfigError(std::string("unit type: expected one of m/s/z, got '") + code + "'");
  }
}

std::vector<UnitType> parse_unit_types(const std::string& codes) {
  std::vector<UnitType> out;
  for (char c : codes) out.push_back(parse_unit_type(c));
  return out;
}

std::string unit_type_codes(const std::vector<UnitType>& types) {
  std::string s;
  for (UnitType t : types) s += type_code(t);
  return s;
}

const UnitTypeSpec& unit_spec(UnitType type) { return kSpecs[static_cast<std::size_t>(type)]; }

void ScenarioConfig::validate() const {
  if (ally_types.empty() || enemy_types.empty()) throw ConfigError("scenario '" + name + "': unit counts must be >= 1");
  if (!(width > 0.0) || !(height > 0.0)) throw ConfigError("scenario '" + name + "': map size must be positive");
  if (max_steps < 1) throw ConfigError("scenario '" + name + "': max_steps must be >= 1");
  if (!(enemy_damage_scale > 0.0)) throw ConfigError("scenario '" + name + "': enemy_damage_scale must be positive");
  if (!(sight_range > 0.0) || !(move_step > 0.0)) {
    throw ConfigError("scenario '" + name + "': sight_range and move_step must be positive");
  }
}

ScenarioConfig scenario_preset(const std::string& name) {
  auto make = [&](const std::string& allies, const std::string& enemies) {
    ScenarioConfig c;
    c.name = name;
    c.ally_types = parse_unit_types(allies);
    c.enemy_types = parse_unit_types(enemies);
    return c;
  };
  if (name == "3m") return make("mmm", "mmm");
  if (name == "5m") return make("mmmmm", "mmmmm");
  if (name == "5m_vs_6m") return make("mmmmm", "mmmmmm");
  if (name == "8m_vs_9m") return make("mmmmmmmm", "mmmmmmmmm");
  if (name == "10m_vs_11m") return make("mmmmmmmmmm", "mmmmmmmmmmm");
  if (name == "2s3z") return make("sszzz", "sszzz");
  if (name == "1s2z") return make("szz", "szz");
  throw ConfigError("unknown scenario preset '" + name + "'");
}

std::vector<std::string> scenario_preset_names() {
  return {"3m", "5m", "5m_vs_6m", "8m_vs_9m", "10m_vs_11m", "2s3z", "1s2z"};
}

double distance(const UnitState& a, const UnitState& b) { return std::hypot(a.x - b.x, a.y - b.y); }

DecoupledAction decouple_last_action(std::size_t action, std::size_t n_enemies) {
  if (action >= kNumSelfActions + n_enemies) {
    throw ContractError("decouple_last_action: action " + std::to_string(action) + " outside 0.." +
                        std::to_string(kNumSelfActions + n_enemies - 1));
  }
  DecoupledAction d;
  d.attacked.assign(n_enemies, 0.0);
  if (action < kNumSelfActions) {
    d.move[action] = 1.0;
  } else {
    d.attacked[action - kNumSelfActions] = 1.0;
  }
  return d;
}

std::size_t recompose_last_action(const DecoupledAction& parts) {
  for (std::size_t i = 0; i < kNumSelfActions; ++i)
    if (parts.move[i] != 0.0) return i;
  for (std::size_t j = 0; j < parts.attacked.size(); ++j)
    if (parts.attacked[j] != 0.0) return kNumSelfActions + j;
  throw ContractError("recompose_last_action: no bit set");
}

void write_replay(std::ostream& os, const ReplayRecord& r) {
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(r.state_hash));
  os << "step " << r.step << " hash " << hash << " actions ";
  for (std::size_t i = 0; i < r.joint_action.size(); ++i) os << (i ? "," : "") << r.joint_action[i];
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", r.reward);
  os << " reward " << buf << " enemy_hp ";
  for (std::size_t i = 0; i < r.enemy_hp.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", r.enemy_hp[i]);
    os << (i ? "," : "") << buf;
  }
  os << " win " << (r.win ? 1 : 0) << '\n';
}

std::optional<ReplayRecord> read_replay(const std::string& line) {
  std::istringstream in(line);
  std::string key, hash, actions, reward, hp, win_key;
  ReplayRecord r;
  int win = 0;
  if (!(in >> key >> r.step) || key != "step") return std::nullopt;
  if (!(in >> key >> hash) || key != "hash") return std::nullopt;
  if (!(in >> key >> actions) || key != "actions") return std::nullopt;
  if (!(in >> key >> reward) || key != "reward") return std::nullopt;
  if (!(in >> key >> hp) || key != "enemy_hp") return std::nullopt;
  if (!(in >> win_key >> win) || win_key != "win") return std::nullopt;
  try {
    r.state_hash = std::stoull(hash, nullptr, 16);
    r.reward = std::stod(reward);
    std::istringstream as(actions);
    for (std::string tok; std::getline(as, tok, ',');) r.joint_action.push_back(std::stoul(tok));
    std::istringstream hs(hp);
    for (std::string tok; std::getline(hs, tok, ',');) r.enemy_hp.push_back(std::stod(tok));
  } catch (const std::exception&) {
    return std::nullopt;
  }
  r.win = win != 0;
  return r;
}

// ---------------------------------------------------------------- SkirmishEnv

SkirmishEnv::SkirmishEnv(ScenarioConfig config) : config_(std::move(config)) { config_.validate(); }

double SkirmishEnv::reward_scale() const {
  const double n = static_cast<double>(config_.n_enemies());
  return kMaxEpisodeReward / (n * (kDamageWeight + kKillBonus) + kWinBonus);
}

void SkirmishEnv::reset(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-0.5, 0.5);
  auto place = [&](const std::vector<UnitType>& types, double x_center) {
    std::vector<UnitState> units;
    const double n = static_cast<double>(types.size());
    for (std::size_t i = 0; i < types.size(); ++i) {
      const double x = std::clamp(x_center + jitter(rng), 0.0, config_.width);
      const double y = std::clamp(config_.height / 2 + (static_cast<double>(i) - (n - 1) / 2) + jitter(rng), 0.0,
                                  config_.height);
      units.push_back(spawn(types[i], x, y));
    }
    return units;
  };
  allies_ = place(config_.ally_types, config_.width * 0.25);
  enemies_ = place(config_.enemy_types, config_.width * 0.75);
  last_actions_.assign(allies_.size(), kActionNoop);
  steps_ = 0;
  done_ = false;
  replay_.clear();
}

bool SkirmishEnv::move_in_bounds(const UnitState& u, std::size_t action) const {
  const double step = config_.move_step * unit_spec(u.type).speed;
  switch (action) {
    case 2:
      return u.y + step <= config_.height;
    case 3:
      return u.y - step >= 0.0;
    case 4:
      return u.x + step <= config_.width;
    case 5:
      return u.x - step >= 0.0;
    default:
      return false;
  }
}

void SkirmishEnv::apply_move(UnitState& u, std::size_t action) const {
  const double step = config_.move_step * unit_spec(u.type).speed;
  switch (action) {
    case 2:
      u.y += step;
      break;
    case 3:
      u.y -= step;
      break;
    case 4:
      u.x += step;
      break;
    case 5:
      u.x -= step;
      break;
    default:
      break;
  }
}

std::vector<double> SkirmishEnv::available_actions(std::size_t agent) const {
  const UnitState& u = allies_.at(agent);
  std::vector<double> mask(config_.n_actions(), 0.0);
  if (!u.alive) {
    mask[kActionNoop] = 1.0;
    return mask;
  }
  mask[kActionStop] = 1.0;
  for (std::size_t a = 2; a < kNumSelfActions; ++a) mask[a] = move_in_bounds(u, a) ? 1.0 : 0.0;
  if (u.cooldown == 0) {
    const double range = unit_spec(u.type).attack_range;
    for (std::size_t j = 0; j < enemies_.size(); ++j)
      if (enemies_[j].alive && distance(u, enemies_[j]) <= range) mask[kNumSelfActions + j] = 1.0;
  }
  return mask;
}

std::vector<std::size_t> SkirmishEnv::enemy_policy() const {
  std::vector<std::size_t> actions(enemies_.size(), kActionNoop);
  for (std::size_t j = 0; j < enemies_.size(); ++j) {
    const UnitState& e = enemies_[j];
    if (!e.alive) continue;
    std::size_t target = allies_.size();
    double best = 0.0;
    for (std::size_t i = 0; i < allies_.size(); ++i) {
      if (!allies_[i].alive) continue;
      const double d = distance(e, allies_[i]);
      if (target == allies_.size() || d < best) {
        target = i;
        best = d;
      }
    }
    if (target == allies_.size()) {
      actions[j] = kActionStop;
      continue;
    }
    if (best <= unit_spec(e.type).attack_range) {
      actions[j] = e.cooldown == 0 ? kNumSelfActions + target : kActionStop;
      continue;
    }
    const double dx = allies_[target].x - e.x;
    const double dy = allies_[target].y - e.y;
    std::size_t move = std::fabs(dx) >= std::fabs(dy) ? (dx > 0 ? 4 : 5) : (dy > 0 ? 2 : 3);
    actions[j] = move_in_bounds(e, move) ? move : kActionStop;
  }
  return actions;
}

StepResult SkirmishEnv::step(const std::vector<std::size_t>& joint_action) {
  if (done_) throw ContractError("step: episode is over, call reset");
  if (joint_action.size() != allies_.size()) {
    throw ContractError("step: expected " + std::to_string(allies_.size()) + " actions, got " +
                        std::to_string(joint_action.size()));
  }
  for (std::size_t i = 0; i < joint_action.size(); ++i) {
    const auto mask = available_actions(i);
    if (joint_action[i] >= mask.size() || mask[joint_action[i]] == 0.0) {
      throw ContractError("step: action " + std::to_string(joint_action[i]) + " unavailable for agent " +
                          std::to_string(i));
    }
  }
  ReplayRecord record;
  if (logging_) {
    record.step = steps_;
    record.state_hash = state_hash();
    record.joint_action = joint_action;
  }

  const std::vector<std::size_t> enemy_actions = enemy_policy();
  struct Hit {
    bool on_enemy;
    std::size_t target;
    double damage;
  };
  std::vector<Hit> hits;
  std::vector<bool> ally_attacked(allies_.size(), false), enemy_attacked(enemies_.size(), false);
  for (std::size_t i = 0; i < allies_.size(); ++i) {
    if (joint_action[i] >= kNumSelfActions) {
      hits.push_back({true, joint_action[i] - kNumSelfActions, unit_spec(allies_[i].type).damage});
      ally_attacked[i] = true;
    }
  }
  for (std::size_t j = 0; j < enemies_.size(); ++j) {
    if (enemy_actions[j] >= kNumSelfActions) {
      hits.push_back({false, enemy_actions[j] - kNumSelfActions,
                      unit_spec(enemies_[j].type).damage * config_.enemy_damage_scale});
      enemy_attacked[j] = true;
    }
  }
  for (std::size_t i = 0; i < allies_.size(); ++i) apply_move(allies_[i], joint_action[i]);
  for (std::size_t j = 0; j < enemies_.size(); ++j) apply_move(enemies_[j], enemy_actions[j]);

  StepResult result;
  std::vector<double> dealt(enemies_.size(), 0.0);
  for (const Hit& h : hits) {
    UnitState& u = h.on_enemy ? enemies_[h.target] : allies_[h.target];
    const double absorbed = std::min(u.shield, h.damage);
    u.shield -= absorbed;
    const double through = std::min(u.health, h.damage - absorbed);
    u.health -= through;
    if (h.on_enemy) {
      dealt[h.target] += absorbed + through;
      result.info.damage_dealt += absorbed + through;
    } else {
      result.info.damage_taken += absorbed + through;
    }
  }
  auto settle = [](std::vector<UnitState>& units, const std::vector<bool>& attacked, int& deaths) {
    for (std::size_t i = 0; i < units.size(); ++i) {
      UnitState& u = units[i];
      u.cooldown = attacked[i] ? unit_spec(u.type).cooldown : std::max(0, u.cooldown - 1);
      if (u.alive && u.health <= 0.0) {
        u.alive = false;
        u.health = 0.0;
        u.shield = 0.0;
        u.cooldown = 0;
        ++deaths;
      }
    }
  };
  settle(enemies_, enemy_attacked, result.info.kills);
  settle(allies_, ally_attacked, result.info.deaths);
  for (std::size_t i = 0; i < allies_.size(); ++i) last_actions_[i] = allies_[i].alive ? joint_action[i] : kActionNoop;
  ++steps_;

  const bool allies_left = std::any_of(allies_.begin(), allies_.end(), [](const UnitState& u) { return u.alive; });
  const bool enemies_left = std::any_of(enemies_.begin(), enemies_.end(), [](const UnitState& u) { return u.alive; });
  result.info.win = allies_left && !enemies_left;
  double raw = kKillBonus * result.info.kills + (result.info.win ? kWinBonus : 0.0);
  for (std::size_t j = 0; j < enemies_.size(); ++j) {
    raw += kDamageWeight * dealt[j] / (enemies_[j].max_health + enemies_[j].max_shield);
  }
  result.reward = raw * reward_scale();
  result.terminated = !allies_left || !enemies_left;
  if (!result.terminated && steps_ >= config_.max_steps) {
    result.terminated = true;
    result.info.truncated = true;
  }
  done_ = result.terminated;

  if (logging_) {
    record.reward = result.reward;
    record.win = result.info.win;
    for (const UnitState& e : enemies_) record.enemy_hp.push_back(e.health + e.shield);
    replay_.push_back(std::move(record));
  }
  return result;
}

EntityObservation SkirmishEnv::observe(std::size_t agent) const {
  const UnitState& self = allies_.at(agent);
  EntityObservation obs;
  obs.self_attrs.assign(kSelfWidth, 0.0);
  if (!self.alive) return obs;
  for (std::size_t a = 2; a < kNumSelfActions; ++a) obs.self_attrs[a - 2] = move_in_bounds(self, a) ? 1.0 : 0.0;
  obs.self_attrs[4] = self.health / self.max_health;
  obs.self_attrs[5] = shield_fraction(self);
  obs.self_attrs[6 + static_cast<std::size_t>(self.type)] = 1.0;
  const DecoupledAction last = decouple_last_action(last_actions_[agent], enemies_.size());
  for (std::size_t a = 0; a < kNumSelfActions; ++a) obs.self_attrs[6 + kNumUnitTypes + a] = last.move[a];

  const double sight = config_.sight_range;
  auto features = [&](const UnitState& u) {
    std::vector<double> f;
    const double d = distance(self, u);
    f.push_back((u.x - self.x) / sight);
    f.push_back((u.y - self.y) / sight);
    f.push_back(d / sight);
    f.push_back(u.health / u.max_health);
    f.push_back(shield_fraction(u));
    push_type(f, u.type);
    return f;
  };
  for (std::size_t i = 0; i < allies_.size(); ++i) {
    if (i == agent || !allies_[i].alive || distance(self, allies_[i]) > sight) continue;
    obs.allies.push_back(features(allies_[i]));
    obs.ally_ids.push_back(i);
  }
  for (std::size_t j = 0; j < enemies_.size(); ++j) {
    if (!enemies_[j].alive || distance(self, enemies_[j]) > sight) continue;
    auto f = features(enemies_[j]);
    f.push_back(last.attacked[j]);
    obs.enemies.push_back(std::move(f));
    obs.enemy_ids.push_back(j);
  }
  return obs;
}

std::vector<EntityObservation> SkirmishEnv::observe_all() const {
  std::vector<EntityObservation> out;
  out.reserve(allies_.size());
  for (std::size_t i = 0; i < allies_.size(); ++i) out.push_back(observe(i));
  return out;
}

GlobalState SkirmishEnv::global_state() const {
  GlobalState s;
  s.n_allies = allies_.size();
  s.n_enemies = enemies_.size();
  auto block = [&](std::vector<double>& out, const UnitState& u) {
    const std::size_t base = out.size();
    out.resize(base + kStateWidth, 0.0);
    if (!u.alive) return;
    out[base] = 1.0;
    out[base + 1] = u.x / config_.width;
    out[base + 2] = u.y / config_.height;
    out[base + 3] = u.health / u.max_health;
    out[base + 4] = shield_fraction(u);
    out[base + 5 + static_cast<std::size_t>(u.type)] = 1.0;
    const int cd = unit_spec(u.type).cooldown;
    out[base + 5 + kNumUnitTypes] = cd > 0 ? static_cast<double>(u.cooldown) / cd : 0.0;
  };
  for (const UnitState& u : allies_) block(s.allies, u);
  for (const UnitState& u : enemies_) block(s.enemies, u);
  return s;
}

EnvSnapshot SkirmishEnv::snapshot() const { return {allies_, enemies_, last_actions_, steps_, done_}; }

void SkirmishEnv::restore(const EnvSnapshot& snapshot) {
  if (snapshot.allies.size() != config_.n_allies() || snapshot.enemies.size() != config_.n_enemies()) {
    throw ContractError("restore: snapshot population does not match scenario '" + config_.name + "'");
  }
  allies_ = snapshot.allies;
  enemies_ = snapshot.enemies;
  last_actions_ = snapshot.last_actions;
  steps_ = snapshot.steps;
  done_ = snapshot.done;
}

std::uint64_t SkirmishEnv::state_hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix_unit = [&](const UnitState& u) {
    const double vals[] = {u.x, u.y, u.health, u.shield};
    h = fnv1a(h, vals, sizeof vals);
    const int ints[] = {static_cast<int>(u.type), u.cooldown, u.alive ? 1 : 0};
    h = fnv1a(h, ints, sizeof ints);
  };
  for (const UnitState& u : allies_) mix_unit(u);
  for (const UnitState& u : enemies_) mix_unit(u);
  h = fnv1a(h, last_actions_.data(), last_actions_.size() * sizeof(std::size_t));
  h = fnv1a(h, &steps_, sizeof steps_);
  return h;
}

}  // namespace laqt
