#include "laqt/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>

#include "laqt/errors.hpp"

namespace laqt {

void TrainConfig::validate() const {
  scenario.validate();
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("train.gamma: expected a number in (0, 1]");
  if (!(lr > 0.0)) throw ConfigError("train.lr: expected a positive number");
  if (!(transfer_lr > 0.0)) throw ConfigError("train.transfer_lr: expected a positive number");
  if (epsilon_start < 0.0 || epsilon_start > 1.0 || epsilon_end < 0.0 || epsilon_end > 1.0)
    throw ConfigError("train.epsilon_start/epsilon_end: expected numbers in [0, 1]");
  if (batch_size == 0) throw ConfigError("train.batch_size: expected a positive integer");
  if (buffer_capacity < batch_size) throw ConfigError("train.buffer_capacity: expected an integer >= batch_size");
  if (train_interval == 0) throw ConfigError("train.train_interval: expected a positive integer");
  if (rollout_envs == 0) throw ConfigError("train.rollout_envs: expected a positive integer");
  if (target_update_interval == 0) throw ConfigError("train.target_update_interval: expected a positive integer");
  if (eval_interval == 0) throw ConfigError("train.eval_interval: expected a positive integer");
  if (eval_episodes == 0) throw ConfigError("train.eval_episodes: expected a positive integer");
  if (!(grad_clip > 0.0)) throw ConfigError("train.grad_clip: expected a positive number");
  if (transfer_eval_fraction < 0.0 || transfer_eval_fraction >= 1.0)
    throw ConfigError("train.transfer_eval_fraction: expected a number in [0, 1)");
  if (agent.model_dim % agent.num_heads != 0)
    throw ConfigError("agent.num_heads: expected an integer dividing agent.model_dim");
  if (mixer.model_dim % mixer.num_heads != 0)
    throw ConfigError("mixer.num_heads: expected an integer dividing mixer.model_dim");
  if (mixer.levels == 0) throw ConfigError("mixer.levels: expected a positive integer");
  if (!(mixer.gumbel_temperature > 0.0)) throw ConfigError("mixer.gumbel_temperature: expected a positive number");
}

// ---------------------------------------------------------------- networks

void Networks::visit(const ParamVisitor& f) {
  agent->visit("agent", f);
  mixer->visit("mixer", f);
}

Networks make_networks(const AgentConfig& agent, const MixerConfig& mixer, std::size_t n_allies,
                       std::size_t n_enemies, std::mt19937_64& rng) {
  Networks nets;
  nets.agent = make_agent(agent, n_allies, n_enemies, rng);
  nets.mixer = make_mixer(mixer, n_allies, n_enemies, rng);
  return nets;
}

std::vector<NamedParam> named_params(Networks& nets) {
  std::vector<NamedParam> out;
  nets.visit([&](const std::string& name, Tensor& t) { out.push_back({name, t}); });
  return out;
}

void copy_params(Networks& from, Networks& to) {
  std::map<std::string, Tensor> source;
  for (auto& p : named_params(from)) source.emplace(p.name, p.tensor);
  for (auto& p : named_params(to)) {
    auto it = source.find(p.name);
    if (it == source.end()) throw ContractError("copy_params: no source for " + p.name);
    if (it->second.shape() != p.tensor.shape()) throw ShapeError("copy_params: shape mismatch for " + p.name);
    auto src = it->second.data();
    std::copy(src.begin(), src.end(), p.tensor.mutable_data().begin());
  }
}

// ---------------------------------------------------------------- Adam

Adam::Adam(std::vector<Tensor> params, double lr, double clip, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), clip_(clip), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const Tensor& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

double Adam::step() {
  double sq = 0.0;
  for (const Tensor& p : params_)
    if (p.has_grad())
      for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericalError("Adam: non-finite gradient norm");
  const double factor = norm > clip_ ? clip_ / (norm + 1e-6) : 1.0;
  last_clipped_ = norm * factor;
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    auto value = p.mutable_data();
    std::span<const double> grad = p.has_grad() ? p.grad() : std::span<const double>{};
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad.empty() ? 0.0 : grad[i] * factor;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
    p.zero_grad();
  }
  return norm;
}

// ---------------------------------------------------------------- rollouts

namespace {

std::span<const double> row(std::span<const double> data, std::size_t r, std::size_t width) {
  return data.subspan(r * width, width);
}

}  // namespace

std::vector<EpisodeRecord> run_episodes(const ScenarioConfig& scenario, const AgentNetwork& agent,
                                        std::span<const std::uint64_t> env_seeds, const RolloutOptions& options,
                                        std::mt19937_64& rng) {
  NoGradGuard no_grad;
  const std::size_t E = env_seeds.size(), n = scenario.n_allies(), ne = scenario.n_enemies();
  std::vector<SkirmishEnv> envs;
  envs.reserve(E);
  std::vector<EpisodeRecord> episodes(E);
  for (std::size_t e = 0; e < E; ++e) {
    envs.emplace_back(scenario);
    envs[e].reset(env_seeds[e]);
  }
  Tensor hidden = Tensor::zeros({E * n, agent.hidden_dim()});
  const AgentBatch pad = padding_batch(n, n, ne);
  std::size_t live = E;
  while (live > 0) {
    std::vector<AgentBatch> parts;
    parts.reserve(E);
    for (std::size_t e = 0; e < E; ++e) {
      if (envs[e].done()) {
        parts.push_back(pad);
        continue;
      }
      std::vector<std::vector<double>> avail;
      for (std::size_t i = 0; i < n; ++i) avail.push_back(envs[e].available_actions(i));
      const auto obs = envs[e].observe_all();
      parts.push_back(make_agent_batch(obs, avail, n, ne));
    }
    const AgentBatch batch = stack_batches(parts);
    const AgentOutput out = agent.forward(batch, hidden);
    hidden = out.hidden;
    const std::size_t A = batch.n_actions();
    auto q = out.q.data();
    for (std::size_t e = 0; e < E; ++e) {
      if (envs[e].done()) continue;
      std::vector<std::size_t> joint(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t r = e * n + i;
        joint[i] = select_action(row(q, r, A), row(batch.available, r, A), options.epsilon, rng);
      }
      EpisodeRecord& ep = episodes[e];
      if (options.record) ep.snapshots.push_back(envs[e].snapshot());
      const StepResult res = envs[e].step(joint);
      ep.actions.push_back(std::move(joint));
      ep.rewards.push_back(res.reward);
      ep.episode_return += res.reward;
      if (res.terminated) {
        ep.terminated = !res.info.truncated;
        ep.win = res.info.win;
        if (options.record) ep.snapshots.push_back(envs[e].snapshot());
        --live;
      }
    }
  }
  return episodes;
}

void EpisodeBuffer::add(EpisodeRecord episode) {
  if (episodes_.size() < capacity_) {
    episodes_.push_back(std::move(episode));
  } else {
    episodes_[next_] = std::move(episode);
  }
  next_ = (next_ + 1) % capacity_;
}

std::vector<const EpisodeRecord*> EpisodeBuffer::sample(std::size_t count, std::mt19937_64& rng) const {
  if (count > episodes_.size()) throw ContractError("EpisodeBuffer::sample: not enough episodes");
  // partial Fisher-Yates over indices
  std::vector<std::size_t> idx(episodes_.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::vector<const EpisodeRecord*> out;
  for (std::size_t k = 0; k < count; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, idx.size() - 1);
    std::swap(idx[k], idx[pick(rng)]);
    out.push_back(&episodes_[idx[k]]);
  }
  return out;
}

// ---------------------------------------------------------------- loss

namespace {

AgentBatch head_rows(const AgentBatch& b, std::size_t rows) {
  if (rows == b.rows) return b;
  AgentBatch out;
  out.rows = rows;
  out.ally_slots = b.ally_slots;
  out.enemy_slots = b.enemy_slots;
  auto take = [rows](const std::vector<double>& v, std::size_t width) {
    return std::vector<double>(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(rows * width));
  };
  out.self = take(b.self, kSelfWidth);
  out.allies = take(b.allies, b.ally_slots * kAllyWidth);
  out.ally_mask = take(b.ally_mask, b.ally_slots);
  out.enemies = take(b.enemies, b.enemy_slots * kEnemyWidth);
  out.enemy_mask = take(b.enemy_mask, b.enemy_slots);
  out.available = take(b.available, b.n_actions());
  return out;
}

}  // namespace

// Episodes are unrolled longest first so the live rows at step t form a
// prefix; only filled steps reach the mixer.
TdBatch build_td_batch(std::span<const EpisodeRecord* const> episodes, const ScenarioConfig& scenario,
                       const AgentNetwork& online, const AgentNetwork& target) {
  if (episodes.empty()) throw ContractError("td batch: no episodes");
  const std::size_t B = episodes.size(), n = scenario.n_allies(), ne = scenario.n_enemies();
  for (const EpisodeRecord* ep : episodes) {
    if (ep->length() == 0 || ep->snapshots.size() != ep->length() + 1)
      throw ContractError("td batch: episode without recorded snapshots");
  }
  std::vector<const EpisodeRecord*> eps(episodes.begin(), episodes.end());
  std::stable_sort(eps.begin(), eps.end(),
                   [](const EpisodeRecord* a, const EpisodeRecord* b) { return a->length() > b->length(); });
  const std::size_t T = eps.front()->length();
  // live[t]: episodes with a filled step t; seen[t]: episodes with a snapshot at t
  std::vector<std::size_t> live(T + 1, 0), seen(T + 1, 0);
  for (std::size_t t = 0; t <= T; ++t)
    for (const EpisodeRecord* ep : eps) {
      live[t] += t < ep->length() ? 1 : 0;
      seen[t] += t <= ep->length() ? 1 : 0;
    }

  TdBatch out;
  out.steps = T;
  out.episodes = B;
  out.n_agents = n;
  SkirmishEnv env(scenario);
  std::vector<GlobalState> states, next_states;
  std::vector<AgentBatch> online_steps, target_steps;
  std::vector<std::size_t> actions;
  for (std::size_t t = 0; t <= T; ++t) {
    std::vector<AgentBatch> parts;
    std::vector<GlobalState> step_states;
    for (std::size_t b = 0; b < seen[t]; ++b) {
      env.restore(eps[b]->snapshots[t]);
      std::vector<std::vector<double>> avail;
      for (std::size_t i = 0; i < n; ++i) avail.push_back(env.available_actions(i));
      parts.push_back(make_agent_batch(env.observe_all(), avail, n, ne));
      step_states.push_back(env.global_state());
    }
    target_steps.push_back(stack_batches(parts));
    if (t > 0) next_states.insert(next_states.end(), step_states.begin(), step_states.end());
    if (live[t] == 0) continue;
    states.insert(states.end(), step_states.begin(), step_states.begin() + static_cast<std::ptrdiff_t>(live[t]));
    online_steps.push_back(head_rows(target_steps.back(), live[t] * n));
    for (std::size_t b = 0; b < live[t]; ++b) {
      const EpisodeRecord& ep = *eps[b];
      actions.insert(actions.end(), ep.actions[t].begin(), ep.actions[t].end());
      out.rewards.push_back(ep.rewards[t]);
      out.terminated.push_back(t + 1 == ep.length() && ep.terminated ? 1.0 : 0.0);
      out.filled.push_back(1.0);
    }
  }
  std::vector<double> next_max;
  {
    NoGradGuard no_grad;
    const Tensor best = max_last(unroll_agent(target, target_steps));
    auto m = best.data();
    next_max.assign(m.begin() + static_cast<std::ptrdiff_t>(B * n), m.end());
  }
  const std::size_t R = out.filled.size();
  out.chosen_q = reshape(gather_last(unroll_agent(online, online_steps), actions), {R, n});
  out.next_max_q = Tensor::from({R, n}, std::move(next_max));
  out.states = StateBatch::from(states);
  out.next_states = StateBatch::from(next_states);
  return out;
}

TdLoss td_loss_from_batch(const TdBatch& batch, const Mixer& online, const Mixer& target, double gamma,
                          const MixContext& ctx) {
  const std::size_t rows = batch.filled.size();
  if (rows == 0) throw ContractError("td_loss: empty batch");
  const MixerOutput mixed = online.forward(batch.states, batch.chosen_q, ctx);
  TdLoss out;
  out.targets.assign(rows, 0.0);
  {
    NoGradGuard no_grad;
    const MixerOutput next = target.forward(batch.next_states, batch.next_max_q, MixContext{});
    auto q_next = next.q_tot.data();
    for (std::size_t r = 0; r < rows; ++r) {
      if (batch.filled[r] == 0.0) continue;
      out.targets[r] = batch.rewards[r] + gamma * (1.0 - batch.terminated[r]) * q_next[r];
    }
  }
  double filled = 0.0;
  for (double f : batch.filled) filled += f;
  if (filled == 0.0) throw ContractError("td_loss: batch has no filled steps");
  const Tensor diff = sub(mixed.q_tot, Tensor::from({rows}, out.targets));
  out.loss = scale(sum_all(mul(square(diff), Tensor::from({rows}, batch.filled))), 1.0 / filled);
  auto d = diff.data();
  for (std::size_t r = 0; r < rows; ++r) out.td_abs_error += batch.filled[r] * std::abs(d[r]);
  out.td_abs_error /= filled;
  out.filled = static_cast<std::size_t>(filled);
  if (!std::isfinite(out.loss.item())) {
    char msg[160];
    std::snprintf(msg, sizeof msg, "td_loss: non-finite loss (rows %zu, filled %zu, mean |td| %g)", rows,
                  out.filled, out.td_abs_error);
    throw NumericalError(msg);
  }
  return out;
}

TdLoss td_loss(std::span<const EpisodeRecord* const> episodes, const ScenarioConfig& scenario, Networks& online,
               Networks& target, double gamma, const MixContext& ctx) {
  const TdBatch batch = build_td_batch(episodes, scenario, *online.agent, *target.agent);
  return td_loss_from_batch(batch, *online.mixer, *target.mixer, gamma, ctx);
}

// ---------------------------------------------------------------- evaluation

std::uint64_t eval_seed(std::uint64_t seed, std::size_t index) {
  // splitmix64 of the pair
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + index + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

EvalResult evaluate(const AgentNetwork& agent, const ScenarioConfig& scenario, std::size_t n_episodes,
                    std::uint64_t seed) {
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < n_episodes; ++i) seeds.push_back(eval_seed(seed, i));
  std::mt19937_64 rng(seed);
  const auto eps = run_episodes(scenario, agent, seeds, RolloutOptions{0.0, false}, rng);
  EvalResult r;
  r.episodes = eps.size();
  for (const auto& e : eps) {
    r.win_rate += e.win ? 1.0 : 0.0;
    r.mean_return += e.episode_return;
  }
  if (r.episodes > 0) {
    r.win_rate /= static_cast<double>(r.episodes);
    r.mean_return /= static_cast<double>(r.episodes);
  }
  return r;
}

EvalResult evaluate_random(const ScenarioConfig& scenario, std::size_t n_episodes, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0xA5A5A5A5ULL);
  EvalResult r;
  r.episodes = n_episodes;
  SkirmishEnv env(scenario);
  for (std::size_t k = 0; k < n_episodes; ++k) {
    env.reset(eval_seed(seed, k));
    while (!env.done()) {
      std::vector<std::size_t> joint;
      for (std::size_t i = 0; i < scenario.n_allies(); ++i) {
        const auto avail = env.available_actions(i);
        joint.push_back(select_action(avail, avail, 1.0, rng));
      }
      const StepResult res = env.step(joint);
      r.mean_return += res.reward;
      if (res.terminated && res.info.win) r.win_rate += 1.0;
    }
  }
  if (n_episodes > 0) {
    r.win_rate /= static_cast<double>(n_episodes);
    r.mean_return /= static_cast<double>(n_episodes);
  }
  return r;
}

// ---------------------------------------------------------------- training

void write_metrics_header(std::ostream& os) {
  os << "env_steps,episodes,epsilon,loss,td_abs_error,eval_win_rate,eval_return,wall_s\n";
}

void write_metrics_row(std::ostream& os, const MetricsRow& r) {
  char line[512];
  std::snprintf(line, sizeof line, "%llu,%llu,%.6f,%.10g,%.10g,%.6f,%.10g,%.3f\n",
                static_cast<unsigned long long>(r.env_steps), static_cast<unsigned long long>(r.episodes), r.epsilon,
                r.loss, r.td_abs_error, r.eval_win_rate, r.eval_return, r.wall_s);
  os << line;
  os.flush();
}

double epsilon_at(const TrainConfig& c, std::uint64_t env_steps) {
  if (c.epsilon_anneal_steps == 0 || env_steps >= c.epsilon_anneal_steps) return c.epsilon_end;
  const double f = static_cast<double>(env_steps) / static_cast<double>(c.epsilon_anneal_steps);
  return c.epsilon_start + f * (c.epsilon_end - c.epsilon_start);
}

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag)};
  return std::mt19937_64(seq);
}

namespace {

std::vector<Tensor> param_tensors(Networks& nets) {
  std::vector<Tensor> out;
  for (auto& p : named_params(nets)) out.push_back(p.tensor);
  return out;
}


std::uint64_t eval_base(const TrainConfig& c) { return c.seed + 7919; }

void log_line(const RunHooks& hooks, const std::string& s) {
  if (hooks.log) hooks.log(s);
}

}  // namespace

Learner Learner::create(const TrainConfig& config, std::mt19937_64& rng) {
  config.validate();
  Learner l;
  l.n_allies = config.scenario.n_allies();
  l.n_enemies = config.scenario.n_enemies();
  l.online = make_networks(config.agent, config.mixer, l.n_allies, l.n_enemies, rng);
  std::mt19937_64 dummy(0);
  l.target = make_networks(config.agent, config.mixer, l.n_allies, l.n_enemies, dummy);
  l.sync_target();
  l.optimizer = Adam(param_tensors(l.online), config.lr, config.grad_clip);
  return l;
}

PhaseResult train_phase(Learner& learner, const TrainConfig& config, std::uint64_t budget, const RunHooks& hooks) {
  config.validate();
  check_transferable(learner, config.scenario);
  learner.n_allies = config.scenario.n_allies();
  learner.n_enemies = config.scenario.n_enemies();
  const auto t0 = std::chrono::steady_clock::now();
  // streams depend on the step counter so a resumed phase does not replay the same noise
  std::mt19937_64 explore = stream(config.seed, 11 + learner.env_steps);
  std::mt19937_64 sampler = stream(config.seed, 12 + learner.env_steps);
  std::mt19937_64 gumbel = stream(config.seed, 13 + learner.env_steps);
  std::mt19937_64 env_seeds = stream(config.seed, 14 + learner.env_steps);
  EpisodeBuffer buffer(config.buffer_capacity);

  PhaseResult result;
  const std::uint64_t start = learner.env_steps;
  std::uint64_t next_eval = learner.env_steps;  // evaluate at the start too
  std::uint64_t next_ckpt = config.checkpoint_interval > 0 ? learner.env_steps + config.checkpoint_interval : 0;
  std::uint64_t since_sync = 0;
  std::size_t pending = 0;
  double loss_sum = 0.0, td_sum = 0.0;
  std::size_t loss_count = 0;
  bool stop = false;

  auto run_eval = [&]() {
    const EvalResult ev = evaluate(*learner.online.agent, config.scenario, config.eval_episodes, eval_base(config));
    MetricsRow row;
    row.env_steps = learner.env_steps;
    row.episodes = learner.episodes;
    row.epsilon = epsilon_at(config, learner.env_steps);
    row.loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
    row.td_abs_error = loss_count ? td_sum / static_cast<double>(loss_count) : 0.0;
    row.eval_win_rate = ev.win_rate;
    row.eval_return = ev.mean_return;
    if (config.wall_clock)
      row.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    loss_sum = td_sum = 0.0;
    loss_count = 0;
    result.rows.push_back(row);
    result.final_win_rate = ev.win_rate;
    result.best_win_rate = std::max(result.best_win_rate, ev.win_rate);
    if (hooks.metrics) write_metrics_row(*hooks.metrics, row);
    char msg[200];
    std::snprintf(msg, sizeof msg, "step %llu eval win %.3f return %.3f loss %.4g",
                  static_cast<unsigned long long>(row.env_steps), row.eval_win_rate, row.eval_return, row.loss);
    log_line(hooks, msg);
    if (config.stop_win_rate > 0.0 && ev.win_rate >= config.stop_win_rate) {
      if (result.first_step_at_stop == 0) result.first_step_at_stop = std::max<std::uint64_t>(learner.env_steps, 1);
      stop = true;
    }
    next_eval = learner.env_steps + config.eval_interval;
  };

  while (!stop) {
    if (learner.env_steps >= next_eval) run_eval();
    if (stop || learner.env_steps - start >= budget) break;

    std::vector<std::uint64_t> seeds(config.rollout_envs);
    for (auto& s : seeds) s = env_seeds();
    const double eps = epsilon_at(config, learner.env_steps);
    auto episodes = run_episodes(config.scenario, *learner.online.agent, seeds, RolloutOptions{eps, true}, explore);
    for (auto& ep : episodes) {
      learner.env_steps += ep.length();
      ++learner.episodes;
      buffer.add(std::move(ep));
    }
    pending += episodes.size();
    if (buffer.size() < config.batch_size) {
      pending = 0;
    }
    while (pending >= config.train_interval) {
      pending -= config.train_interval;
      const auto sample = buffer.sample(config.batch_size, sampler);
      TdLoss loss = td_loss(sample, config.scenario, learner.online, learner.target, config.gamma,
                            MixContext{&gumbel});
      loss.loss.backward();
      learner.optimizer.step();
      ++result.optimizer_steps;
      loss_sum += loss.loss.item();
      td_sum += loss.td_abs_error;
      ++loss_count;
      if (++since_sync >= config.target_update_interval) {
        learner.sync_target();
        since_sync = 0;
      }
    }
    if (next_ckpt > 0 && learner.env_steps >= next_ckpt) {
      if (hooks.checkpoint) hooks.checkpoint(learner, "step_" + std::to_string(learner.env_steps));
      next_ckpt += config.checkpoint_interval;
    }
  }
  if (result.rows.empty() || result.rows.back().env_steps != learner.env_steps) run_eval();
  result.env_steps = learner.env_steps - start;
  if (hooks.checkpoint) hooks.checkpoint(learner, "final");
  return result;
}

TrainResult train(const TrainConfig& config, const RunHooks& hooks) {
  config.validate();
  std::mt19937_64 init = stream(config.seed, 1);
  TrainResult out;
  out.learner = std::make_unique<Learner>(Learner::create(config, init));
  if (hooks.metrics) write_metrics_header(*hooks.metrics);
  out.phase = train_phase(*out.learner, config, config.total_env_steps, hooks);
  return out;
}

void check_transferable(const Learner& learner, const ScenarioConfig& scenario) {
  const std::size_t na = scenario.n_allies(), ne = scenario.n_enemies();
  if (na == learner.n_allies && ne == learner.n_enemies) return;
  const std::string to = std::to_string(na) + " allies / " + std::to_string(ne) + " enemies";
  const std::string from = std::to_string(learner.n_allies) + " allies / " + std::to_string(learner.n_enemies) +
                           " enemies";
  if (learner.online.agent->kind() == AgentKind::kGru) {
    throw IncompatibleError("gru agent: input width " + std::to_string(flat_obs_width(learner.n_allies, learner.n_enemies)) +
                            " and head width " + std::to_string(kNumSelfActions + learner.n_enemies) + " fixed for " +
                            from + "; target needs " + std::to_string(flat_obs_width(na, ne)) + " and " +
                            std::to_string(kNumSelfActions + ne) + " for " + to);
  }
  if (!population_invariant(learner.online.mixer->kind())) {
    throw IncompatibleError("qmix mixer: state width " +
                            std::to_string((learner.n_allies + learner.n_enemies) * kStateWidth) + " fixed for " +
                            from + "; target state width " + std::to_string((na + ne) * kStateWidth) + " for " + to);
  }
}

namespace {

EvalResult jumpstart_eval(const Learner& learner, const TrainConfig& config, std::uint64_t step_budget) {
  // greedy episodes until the eval-only share of the budget is spent
  EvalResult total;
  std::uint64_t steps = 0;
  std::size_t round = 0;
  do {
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < config.eval_episodes; ++i)
      seeds.push_back(eval_seed(config.seed + 104729, round * config.eval_episodes + i));
    std::mt19937_64 rng(config.seed + round);
    const auto eps = run_episodes(config.scenario, *learner.online.agent, seeds, RolloutOptions{0.0, false}, rng);
    for (const auto& e : eps) {
      steps += e.length();
      total.win_rate += e.win ? 1.0 : 0.0;
      total.mean_return += e.episode_return;
      ++total.episodes;
    }
    ++round;
  } while (steps < step_budget);
  total.win_rate /= static_cast<double>(total.episodes);
  total.mean_return /= static_cast<double>(total.episodes);
  return total;
}

}  // namespace

TransferResult transfer(Learner& learner, const TrainConfig& config, const RunHooks& hooks) {
  config.validate();
  check_transferable(learner, config.scenario);
  TransferResult out;
  const auto eval_steps =
      static_cast<std::uint64_t>(config.transfer_eval_fraction * static_cast<double>(config.total_env_steps));
  out.jumpstart = jumpstart_eval(learner, config, eval_steps);
  char msg[160];
  std::snprintf(msg, sizeof msg, "jumpstart %s win %.3f over %zu episodes", config.scenario.name.c_str(),
                out.jumpstart.win_rate, out.jumpstart.episodes);
  log_line(hooks, msg);
  learner.optimizer = Adam(param_tensors(learner.online), config.transfer_lr, config.grad_clip);
  learner.sync_target();
  learner.n_allies = config.scenario.n_allies();
  learner.n_enemies = config.scenario.n_enemies();
  const std::uint64_t remaining = config.total_env_steps > eval_steps ? config.total_env_steps - eval_steps : 0;
  if (remaining > 0) out.fine_tune = train_phase(learner, config, remaining, hooks);
  return out;
}

std::vector<StageReport> curriculum(Learner& learner, const TrainConfig& config,
                                    std::span<const CurriculumStage> stages, const RunHooks& hooks) {
  std::vector<StageReport> reports;
  for (std::size_t k = 0; k < stages.size(); ++k) {
    TrainConfig cfg = config;
    cfg.scenario = scenario_preset(stages[k].scenario);
    cfg.total_env_steps = stages[k].budget;
    StageReport rep;
    rep.scenario = stages[k].scenario;
    log_line(hooks, "stage " + std::to_string(k) + " " + rep.scenario + " budget " + std::to_string(stages[k].budget));
    check_transferable(learner, cfg.scenario);
    if (stages[k].budget == 0) {
      rep.eval_only = true;
      rep.jumpstart = evaluate(*learner.online.agent, cfg.scenario, cfg.eval_episodes, eval_base(cfg));
      rep.phase.final_win_rate = rep.phase.best_win_rate = rep.jumpstart.win_rate;
    } else if (k == 0) {
      rep.jumpstart = evaluate(*learner.online.agent, cfg.scenario, cfg.eval_episodes, eval_base(cfg));
      rep.phase = train_phase(learner, cfg, cfg.total_env_steps, hooks);
    } else {
      TransferResult t = transfer(learner, cfg, hooks);
      rep.jumpstart = t.jumpstart;
      rep.phase = std::move(t.fine_tune);
    }
    learner.n_allies = cfg.scenario.n_allies();
    learner.n_enemies = cfg.scenario.n_enemies();
    reports.push_back(std::move(rep));
  }
  return reports;
}

}  // namespace laqt
