#pragma once

// Deterministic desk-scale combat simulator with SMAC-style interfaces.
//
// Action layout per agent: 0 no-op (dead units only), 1 stop, 2 north,
// 3 south, 4 east, 5 west, then 6 + j attacks enemy j.

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace laqt {

inline constexpr std::size_t kNumSelfActions = 6;
inline constexpr std::size_t kActionNoop = 0;
inline constexpr std::size_t kActionStop = 1;

enum class UnitType : std::uint8_t { kMarine = 0, kStalker = 1, kZealot = 2 };
inline constexpr std::size_t kNumUnitTypes = 3;

char type_code(UnitType type);
UnitType parse_unit_type(char code);
std::vector<UnitType> parse_unit_types(const std::string& codes);
std::string unit_type_codes(const std::vector<UnitType>& types);

struct UnitTypeSpec {
  double max_health;
  double max_shield;
  double damage;
  double attack_range;
  int cooldown;  // steps to wait after an attack
  double speed;  // multiplier on the scenario move step
};

const UnitTypeSpec& unit_spec(UnitType type);

struct ScenarioConfig {
  std::string name = "custom";
  std::vector<UnitType> ally_types;
  std::vector<UnitType> enemy_types;
  double width = 16.0;
  double height = 16.0;
  int max_steps = 60;
  double sight_range = 6.0;
  double move_step = 1.0;
  /// Multiplier on scripted-opponent damage (opponent difficulty).
  double enemy_damage_scale = 0.7;

  std::size_t n_allies() const { return ally_types.size(); }
  std::size_t n_enemies() const { return enemy_types.size(); }
  std::size_t n_actions() const { return kNumSelfActions + n_enemies(); }
  void validate() const;
};

/// Shipped presets: 3m, 5m, 5m_vs_6m, 8m_vs_9m, 10m_vs_11m, 2s3z, 1s2z.
ScenarioConfig scenario_preset(const std::string& name);
std::vector<std::string> scenario_preset_names();

struct UnitState {
  double x = 0.0;
  double y = 0.0;
  double health = 0.0;
  double max_health = 0.0;
  double shield = 0.0;
  double max_shield = 0.0;
  UnitType type = UnitType::kMarine;
  int cooldown = 0;
  bool alive = false;
};

// Feature widths. Fixed per class so parameters transfer across scenarios.
inline constexpr std::size_t kSelfWidth = 4 + 2 + kNumUnitTypes + kNumSelfActions;  // moves, hp, sh, type, last move
inline constexpr std::size_t kAllyWidth = 5 + kNumUnitTypes;                         // dx, dy, dist, hp, sh, type
inline constexpr std::size_t kEnemyWidth = kAllyWidth + 1;                           // + attacked last step
inline constexpr std::size_t kStateWidth = 1 + 2 + 2 + kNumUnitTypes + 1;            // alive, x, y, hp, sh, type, cd

struct EntityObservation {
  std::vector<double> self_attrs;                 // kSelfWidth
  std::vector<std::vector<double>> allies;        // visible living allies, kAllyWidth each
  std::vector<std::size_t> ally_ids;              // ally index of each entry
  std::vector<std::vector<double>> enemies;       // visible living enemies, kEnemyWidth each
  std::vector<std::size_t> enemy_ids;             // enemy index of each entry (attack action 6 + id)
};

struct GlobalState {
  std::size_t n_allies = 0;
  std::size_t n_enemies = 0;
  std::vector<double> allies;   // n_allies * kStateWidth
  std::vector<double> enemies;  // n_enemies * kStateWidth
};

struct StepInfo {
  bool win = false;
  bool truncated = false;          // ended by the step limit
  double damage_dealt = 0.0;       // by allies, health + shield removed
  double damage_taken = 0.0;       // by enemies
  int kills = 0;
  int deaths = 0;
};

struct StepResult {
  double reward = 0.0;
  bool terminated = false;
  StepInfo info;
};

/// Splits a last action into its move one-hot and per-enemy attack bits.
struct DecoupledAction {
  std::array<double, kNumSelfActions> move{};
  std::vector<double> attacked;
};
DecoupledAction decouple_last_action(std::size_t action, std::size_t n_enemies);
std::size_t recompose_last_action(const DecoupledAction& parts);

/// One replay-log line: state hash before the step, joint action, reward,
/// and the enemy health+shield totals after the step.
struct ReplayRecord {
  int step = 0;
  std::uint64_t state_hash = 0;
  std::vector<std::size_t> joint_action;
  double reward = 0.0;
  std::vector<double> enemy_hp;
  bool win = false;
};

void write_replay(std::ostream& os, const ReplayRecord& record);
std::optional<ReplayRecord> read_replay(const std::string& line);

/// Full dynamic state; observations and global state are functions of it.
struct EnvSnapshot {
  std::vector<UnitState> allies;
  std::vector<UnitState> enemies;
  std::vector<std::size_t> last_actions;
  int steps = 0;
  bool done = false;
};

class SkirmishEnv {
 public:
  explicit SkirmishEnv(ScenarioConfig config);

  void reset(std::uint64_t seed);
  StepResult step(const std::vector<std::size_t>& joint_action);

  EntityObservation observe(std::size_t agent) const;
  std::vector<EntityObservation> observe_all() const;
  GlobalState global_state() const;
  /// 1.0 for available actions, length 6 + n_enemies.
  std::vector<double> available_actions(std::size_t agent) const;
  /// Scripted opponent: attack nearest living ally when in range, else approach.
  std::vector<std::size_t> enemy_policy() const;

  const ScenarioConfig& config() const { return config_; }
  const std::vector<UnitState>& allies() const { return allies_; }
  const std::vector<UnitState>& enemies() const { return enemies_; }
  std::vector<UnitState>& mutable_allies() { return allies_; }
  std::vector<UnitState>& mutable_enemies() { return enemies_; }
  int steps() const { return steps_; }
  bool done() const { return done_; }
  std::uint64_t state_hash() const;
  EnvSnapshot snapshot() const;
  void restore(const EnvSnapshot& snapshot);
  /// Per-step records since reset; only filled when logging is enabled.
  void set_logging(bool on) { logging_ = on; }
  const std::vector<ReplayRecord>& replay() const { return replay_; }

  /// Reward scale mapping the maximal episode return to 20.
  double reward_scale() const;

 private:
  bool move_in_bounds(const UnitState& u, std::size_t action) const;
  void apply_move(UnitState& u, std::size_t action) const;

  ScenarioConfig config_;
  std::vector<UnitState> allies_;
  std::vector<UnitState> enemies_;
  std::vector<std::size_t> last_actions_;
  int steps_ = 0;
  bool done_ = true;
  bool logging_ = false;
  std::vector<ReplayRecord> replay_;
};

double distance(const UnitState& a, const UnitState& b);

}  // namespace laqt
