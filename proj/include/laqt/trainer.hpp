#pragma once

// Episodic TD learning with shared agent parameters, a mixing network,
// target copies, Adam, and the transfer / curriculum drivers.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "laqt/agents.hpp"
#include "laqt/env.hpp"
#include "laqt/mixers.hpp"
#include "laqt/tensor.hpp"

namespace laqt {

struct TrainConfig {
  ScenarioConfig scenario = scenario_preset("3m");
  AgentConfig agent;
  MixerConfig mixer;
  double gamma = 0.99;
  double lr = 5e-4;
  double transfer_lr = 3e-4;
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  std::uint64_t epsilon_anneal_steps = 50000;
  std::uint64_t target_update_interval = 200;  // optimizer steps
  std::size_t buffer_capacity = 5000;          // episodes
  std::size_t batch_size = 32;                 // episodes per update
  std::size_t train_interval = 1;              // episodes per update
  std::size_t rollout_envs = 1;                // episodes collected together
  std::uint64_t total_env_steps = 100000;
  std::uint64_t seed = 1;
  std::uint64_t eval_interval = 2000;  // env steps
  std::size_t eval_episodes = 32;
  std::uint64_t checkpoint_interval = 0;  // env steps, 0 = final only
  double grad_clip = 10.0;
  double transfer_eval_fraction = 0.05;
  /// Stop once an evaluation reaches this win rate (0 disables).
  double stop_win_rate = 0.0;
  /// Fill the wall_s metrics column; off keeps metrics files reproducible.
  bool wall_clock = false;

  void validate() const;
};

// ---- networks ----

struct Networks {
  std::unique_ptr<AgentNetwork> agent;
  std::unique_ptr<Mixer> mixer;

  void visit(const ParamVisitor& f);
};

Networks make_networks(const AgentConfig& agent, const MixerConfig& mixer, std::size_t n_allies,
                       std::size_t n_enemies, std::mt19937_64& rng);

struct NamedParam {
  std::string name;
  Tensor tensor;
};
std::vector<NamedParam> named_params(Networks& nets);
/// Copies values by name; shapes must match.
void copy_params(Networks& from, Networks& to);

// ---- optimizer ----

class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Tensor> params, double lr, double clip = 10.0, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  /// Clips the global gradient norm, applies one update, zeroes gradients.
  /// Returns the norm before clipping.
  double step();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  std::uint64_t steps() const { return t_; }
  /// Norm of the most recent update's gradient after clipping.
  double last_clipped_norm() const { return last_clipped_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_ = 1e-3, clip_ = 10.0, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::uint64_t t_ = 0;
  double last_clipped_ = 0.0;
};

// ---- episodes ----

struct EpisodeRecord {
  std::vector<EnvSnapshot> snapshots;  // length T + 1
  std::vector<std::vector<std::size_t>> actions;
  std::vector<double> rewards;
  bool terminated = false;  // ended by win or wipe-out (not the step limit)
  bool win = false;
  double episode_return = 0.0;

  std::size_t length() const { return actions.size(); }
};

struct RolloutOptions {
  double epsilon = 0.0;
  bool record = true;
};

/// Plays one episode per seed, all in lockstep through one batched forward.
std::vector<EpisodeRecord> run_episodes(const ScenarioConfig& scenario, const AgentNetwork& agent,
                                        std::span<const std::uint64_t> env_seeds, const RolloutOptions& options,
                                        std::mt19937_64& rng);

class EpisodeBuffer {
 public:
  explicit EpisodeBuffer(std::size_t capacity) : capacity_(capacity) {}
  void add(EpisodeRecord episode);
  std::size_t size() const { return episodes_.size(); }
  std::vector<const EpisodeRecord*> sample(std::size_t count, std::mt19937_64& rng) const;
  void clear() {
    episodes_.clear();
    next_ = 0;
  }

 private:
  std::size_t capacity_;
  std::size_t next_ = 0;
  std::vector<EpisodeRecord> episodes_;
};

// ---- loss ----

/// Training rows, one per filled (step, episode) pair in time-major order.
/// Padding never reaches the mixer; `filled` weights rows in the loss.
struct TdBatch {
  std::size_t steps = 0;     // T (max length)
  std::size_t episodes = 0;  // B
  std::size_t n_agents = 0;
  Tensor chosen_q;          // [R, n]
  Tensor next_max_q;        // [R, n], from the target agent, no graph
  StateBatch states;        // R
  StateBatch next_states;   // R
  std::vector<double> rewards;
  std::vector<double> terminated;
  std::vector<double> filled;
};

struct TdLoss {
  Tensor loss;
  double td_abs_error = 0.0;
  std::vector<double> targets;  // y per row (0 on padding)
  std::size_t filled = 0;
};

/// Masked mean squared TD error against y = r + gamma (1 - term) Qtot^-(s').
TdLoss td_loss_from_batch(const TdBatch& batch, const Mixer& online, const Mixer& target, double gamma,
                          const MixContext& ctx);

TdBatch build_td_batch(std::span<const EpisodeRecord* const> episodes, const ScenarioConfig& scenario,
                       const AgentNetwork& online, const AgentNetwork& target);

TdLoss td_loss(std::span<const EpisodeRecord* const> episodes, const ScenarioConfig& scenario, Networks& online,
               Networks& target, double gamma, const MixContext& ctx);

// ---- evaluation ----

struct EvalResult {
  double win_rate = 0.0;
  double mean_return = 0.0;
  std::size_t episodes = 0;
};

/// Greedy play; episode i uses environment seed eval_seed(seed, i).
EvalResult evaluate(const AgentNetwork& agent, const ScenarioConfig& scenario, std::size_t n_episodes,
                    std::uint64_t seed);
std::uint64_t eval_seed(std::uint64_t seed, std::size_t index);
/// Uniformly random available actions; the reference baseline.
EvalResult evaluate_random(const ScenarioConfig& scenario, std::size_t n_episodes, std::uint64_t seed);

// ---- training ----

struct MetricsRow {
  std::uint64_t env_steps = 0;
  std::uint64_t episodes = 0;
  double epsilon = 0.0;
  double loss = 0.0;
  double td_abs_error = 0.0;
  double eval_win_rate = 0.0;
  double eval_return = 0.0;
  double wall_s = 0.0;
};

void write_metrics_header(std::ostream& os);
void write_metrics_row(std::ostream& os, const MetricsRow& row);

struct Learner {
  Networks online;
  Networks target;
  Adam optimizer;
  std::uint64_t env_steps = 0;
  std::uint64_t episodes = 0;
  std::size_t n_allies = 0;   // population the networks were built for
  std::size_t n_enemies = 0;

  static Learner create(const TrainConfig& config, std::mt19937_64& rng);
  void sync_target() { copy_params(online, target); }
};

struct RunHooks {
  std::ostream* metrics = nullptr;
  std::function<void(const std::string&)> log;
  /// Called with the learner at each checkpoint point and at the end.
  std::function<void(Learner&, const std::string& tag)> checkpoint;
};

struct PhaseResult {
  std::vector<MetricsRow> rows;
  double final_win_rate = 0.0;
  double best_win_rate = 0.0;
  std::uint64_t env_steps = 0;          // steps consumed by this phase
  std::uint64_t first_step_at_stop = 0;  // env steps when stop_win_rate was hit (0 = never)
  std::uint64_t optimizer_steps = 0;
};

/// Runs the training loop on `learner` for `budget` env steps.
PhaseResult train_phase(Learner& learner, const TrainConfig& config, std::uint64_t budget, const RunHooks& hooks);

struct TrainResult {
  PhaseResult phase;
  std::unique_ptr<Learner> learner;
};

TrainResult train(const TrainConfig& config, const RunHooks& hooks = {});

struct TransferResult {
  EvalResult jumpstart;
  PhaseResult fine_tune;
};

/// Eval-only phase on the new scenario (no buffer writes, no updates), then
/// fine-tuning at the transfer learning rate for the remaining budget.
TransferResult transfer(Learner& learner, const TrainConfig& config, const RunHooks& hooks = {});
/// Throws IncompatibleError when the networks cannot run on `scenario`.
void check_transferable(const Learner& learner, const ScenarioConfig& scenario);

struct CurriculumStage {
  std::string scenario;
  std::uint64_t budget = 0;  // 0 = evaluation only
};

struct StageReport {
  std::string scenario;
  EvalResult jumpstart;
  PhaseResult phase;
  bool eval_only = false;
};

std::vector<StageReport> curriculum(Learner& learner, const TrainConfig& config,
                                    std::span<const CurriculumStage> stages, const RunHooks& hooks = {});

/// Independent generator for a (seed, purpose tag) pair.
std::mt19937_64 stream(std::uint64_t seed, std::uint64_t tag);

double epsilon_at(const TrainConfig& config, std::uint64_t env_steps);

}  // namespace laqt
