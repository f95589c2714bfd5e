#include "laqt/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "laqt/errors.hpp"

namespace laqt {

namespace {

struct Field {
  const char* type;  // for messages
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

using Section = std::vector<std::pair<std::string, Field>>;

[[noreturn]] void bad(const std::string& section, const std::string& key, const char* type, const std::string& v) {
  throw ConfigError("[" + section + "] " + key + ": expected " + type + ", got '" + v + "'");
}

std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

// Parsers throw a bare ConfigError; the caller adds section and key.
struct ParseFailure {};

double to_double(const std::string& s) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ParseFailure{};
  return v;
}

std::uint64_t to_u64(const std::string& s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ParseFailure{};
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ParseFailure{};
}

template <class T>
Field num_field(T TrainConfig::*outer, double T::*member) {
  return {"a number", [=](TrainConfig& c, const std::string& v) { c.*outer.*member = to_double(v); },
          [=](const TrainConfig& c) { return fmt_double(c.*outer.*member); }};
}
template <class T, class U>
Field int_field(T TrainConfig::*outer, U T::*member) {
  return {"a non-negative integer",
          [=](TrainConfig& c, const std::string& v) { c.*outer.*member = static_cast<U>(to_u64(v)); },
          [=](const TrainConfig& c) { return std::to_string(c.*outer.*member); }};
}
Field train_num(double TrainConfig::*member) {
  return {"a number", [=](TrainConfig& c, const std::string& v) { c.*member = to_double(v); },
          [=](const TrainConfig& c) { return fmt_double(c.*member); }};
}
template <class U>
Field train_int(U TrainConfig::*member) {
  return {"a non-negative integer", [=](TrainConfig& c, const std::string& v) { c.*member = static_cast<U>(to_u64(v)); },
          [=](const TrainConfig& c) { return std::to_string(c.*member); }};
}

const std::map<std::string, Section>& schema() {
  static const std::map<std::string, Section> s = [] {
    std::map<std::string, Section> m;
    using S = ScenarioConfig;
    m["scenario"] = {
        {"preset", {"a preset name", [](TrainConfig&, const std::string&) {}, [](const TrainConfig& c) {
                      return c.scenario.name;
                    }}},
        {"name", {"a string", [](TrainConfig& c, const std::string& v) { c.scenario.name = v; },
                  [](const TrainConfig& c) { return c.scenario.name; }}},
        {"allies", {"unit codes (m, s, z)",
                    [](TrainConfig& c, const std::string& v) {
                      try {
                        c.scenario.ally_types = parse_unit_types(v);
                      } catch (const std::exception&) {
                        throw ParseFailure{};
                      }
                    },
                    [](const TrainConfig& c) { return unit_type_codes(c.scenario.ally_types); }}},
        {"enemies", {"unit codes (m, s, z)",
                     [](TrainConfig& c, const std::string& v) {
                       try {
                         c.scenario.enemy_types = parse_unit_types(v);
                       } catch (const std::exception&) {
                         throw ParseFailure{};
                       }
                     },
                     [](const TrainConfig& c) { return unit_type_codes(c.scenario.enemy_types); }}},
        {"width", num_field(&TrainConfig::scenario, &S::width)},
        {"height", num_field(&TrainConfig::scenario, &S::height)},
        {"max_steps", {"a positive integer",
                       [](TrainConfig& c, const std::string& v) { c.scenario.max_steps = static_cast<int>(to_u64(v)); },
                       [](const TrainConfig& c) { return std::to_string(c.scenario.max_steps); }}},
        {"sight_range", num_field(&TrainConfig::scenario, &S::sight_range)},
        {"move_step", num_field(&TrainConfig::scenario, &S::move_step)},
        {"enemy_damage_scale", num_field(&TrainConfig::scenario, &S::enemy_damage_scale)},
    };
    using A = AgentConfig;
    m["agent"] = {
        {"kind", {"pit|gru", [](TrainConfig& c, const std::string& v) {
                    try {
                      c.agent.kind = parse_agent_kind(v);
                    } catch (const std::exception&) {
                      throw ParseFailure{};
                    }
                  },
                  [](const TrainConfig& c) { return std::string(to_string(c.agent.kind)); }}},
        {"model_dim", int_field(&TrainConfig::agent, &A::model_dim)},
        {"num_heads", int_field(&TrainConfig::agent, &A::num_heads)},
        {"ffn_dim", int_field(&TrainConfig::agent, &A::ffn_dim)},
        {"dropout", num_field(&TrainConfig::agent, &A::dropout)},
        {"hidden_dim", int_field(&TrainConfig::agent, &A::hidden_dim)},
    };
    using M = MixerConfig;
    m["mixer"] = {
        {"kind", {"la-hybrid|la-hard|qmix|vdn|stacked",
                  [](TrainConfig& c, const std::string& v) {
                    try {
                      c.mixer.kind = parse_mixer_kind(v);
                    } catch (const std::exception&) {
                      throw ParseFailure{};
                    }
                  },
                  [](const TrainConfig& c) { return std::string(to_string(c.mixer.kind)); }}},
        {"model_dim", int_field(&TrainConfig::mixer, &M::model_dim)},
        {"num_heads", int_field(&TrainConfig::mixer, &M::num_heads)},
        {"ffn_dim", int_field(&TrainConfig::mixer, &M::ffn_dim)},
        {"dropout", num_field(&TrainConfig::mixer, &M::dropout)},
        {"fc_mul_dim", int_field(&TrainConfig::mixer, &M::fc_mul_dim)},
        {"fc_add_dim", int_field(&TrainConfig::mixer, &M::fc_add_dim)},
        {"levels", int_field(&TrainConfig::mixer, &M::levels)},
        {"stack_depth", int_field(&TrainConfig::mixer, &M::stack_depth)},
        {"gumbel_temperature", num_field(&TrainConfig::mixer, &M::gumbel_temperature)},
        {"qmix_embed_dim", int_field(&TrainConfig::mixer, &M::qmix_embed_dim)},
    };
    using T = TrainConfig;
    m["train"] = {
        {"gamma", train_num(&T::gamma)},
        {"lr", train_num(&T::lr)},
        {"transfer_lr", train_num(&T::transfer_lr)},
        {"epsilon_start", train_num(&T::epsilon_start)},
        {"epsilon_end", train_num(&T::epsilon_end)},
        {"epsilon_anneal_steps", train_int(&T::epsilon_anneal_steps)},
        {"target_update_interval", train_int(&T::target_update_interval)},
        {"buffer_capacity", train_int(&T::buffer_capacity)},
        {"batch_size", train_int(&T::batch_size)},
        {"train_interval", train_int(&T::train_interval)},
        {"rollout_envs", train_int(&T::rollout_envs)},
        {"total_env_steps", train_int(&T::total_env_steps)},
        {"seed", train_int(&T::seed)},
        {"eval_interval", train_int(&T::eval_interval)},
        {"eval_episodes", train_int(&T::eval_episodes)},
        {"checkpoint_interval", train_int(&T::checkpoint_interval)},
        {"grad_clip", train_num(&T::grad_clip)},
        {"transfer_eval_fraction", train_num(&T::transfer_eval_fraction)},
        {"stop_win_rate", train_num(&T::stop_win_rate)},
        {"wall_clock", {"a boolean", [](TrainConfig& c, const std::string& v) { c.wall_clock = to_bool(v); },
                        [](const TrainConfig& c) { return std::string(c.wall_clock ? "true" : "false"); }}},
    };
    return m;
  }();
  return s;
}

const Field* find_field(const std::string& section, const std::string& key) {
  auto it = schema().find(section);
  if (it == schema().end()) return nullptr;
  for (const auto& [name, field] : it->second)
    if (name == key) return &field;
  return nullptr;
}

const char* kSectionOrder[] = {"scenario", "agent", "mixer", "train"};

}  // namespace

TrainConfig parse_run_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config: line " + std::to_string(e.line()) + ": " + e.message());
  }
  for (const auto& [section, body] : tree) {
    if (!body.data().empty()) throw ConfigError("config: key '" + section + "' outside a section");
    if (!schema().count(section)) {
      throw ConfigError("config: unknown section [" + section + "] (expected scenario, agent, mixer, train)");
    }
    for (const auto& [key, value] : body) {
      if (!find_field(section, key)) throw ConfigError("[" + section + "] " + key + ": unknown key");
    }
  }
  TrainConfig c;
  // the preset supplies the base scenario, other keys refine it
  if (auto sc = tree.get_child_optional("scenario")) {
    if (auto preset = sc->get_optional<std::string>("preset")) {
      try {
        c.scenario = scenario_preset(*preset);
      } catch (const ConfigError&) {
        bad("scenario", "preset", "a preset name", *preset);
      }
    }
  }
  for (const char* section : kSectionOrder) {
    auto body = tree.get_child_optional(section);
    if (!body) continue;
    for (const auto& [key, value] : *body) {
      const Field* f = find_field(section, key);
      const std::string v = value.get_value<std::string>();
      try {
        f->set(c, v);
      } catch (const ParseFailure&) {
        bad(section, key, f->type, v);
      }
    }
  }
  c.validate();
  return c;
}

TrainConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string to_ini(const TrainConfig& config) {
  std::ostringstream os;
  bool first = true;
  for (const char* section : kSectionOrder) {
    if (!first) os << "\n";
    first = false;
    os << "[" << section << "]\n";
    for (const auto& [key, field] : schema().at(section)) {
      if (key == "preset") continue;  // name/allies/enemies carry the scenario
      os << key << " = " << field.get(config) << "\n";
    }
  }
  return os.str();
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t config_hash(const TrainConfig& config) { return fnv1a64(to_ini(config)); }

}  // namespace laqt
