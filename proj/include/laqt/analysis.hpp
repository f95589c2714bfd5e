#pragma once

// Credit and attention traces from one greedy episode, plus SVG curves.

#include <cstdint>
#include <string>
#include <vector>

#include "laqt/trainer.hpp"

namespace laqt {

struct AnalysisTrace {
  std::size_t steps = 0;
  std::size_t n_allies = 0;
  std::size_t n_entities = 0;  // allies then enemies, as seen by the mixer
  std::vector<double> credits;  // steps x n_allies
  std::vector<double> alive;    // steps x n_allies
  std::vector<double> q_tot;    // steps
  /// steps x [n_entities x n_entities]; empty for mixers without attention.
  std::vector<std::vector<double>> pairwise;
  /// steps x n_entities, 1-based levels; hard mode only.
  std::vector<std::vector<std::size_t>> level_choice;
  std::size_t levels = 0;
  bool win = false;
  double episode_return = 0.0;
};

/// Plays eval episode 0 of `seed` greedily and replays it through the mixer
/// without noise. QMIX credits are dQ_tot/dq_i. `levels` sizes the histogram.
AnalysisTrace analyze_episode(Networks& nets, const ScenarioConfig& scenario, std::uint64_t seed,
                              std::size_t levels);

/// Mean attention weight between distinct entities over the episode.
double mean_offdiagonal_weight(const AnalysisTrace& trace);

/// Per agent, how often each level was chosen: n_allies x levels.
std::vector<std::vector<std::size_t>> level_histogram(const AnalysisTrace& trace);

/// t,credit_0..,alive_0..
void write_credits_csv(std::ostream& os, const AnalysisTrace& trace);
/// One N x N matrix, rows are query entities.
void write_matrix_csv(std::ostream& os, const std::vector<double>& matrix, std::size_t n);
/// agent,level_1..level_L
void write_level_histogram_csv(std::ostream& os, const AnalysisTrace& trace);

struct MetricsSeries {
  std::vector<double> env_steps;
  std::vector<double> win_rate;
  std::vector<double> loss;
};

MetricsSeries read_metrics_csv(const std::string& path);

/// Two panels (eval win rate, loss): mean line with a min-max band across
/// runs, every run resampled onto the first run's step grid.
std::string plot_svg(const std::vector<MetricsSeries>& runs, const std::string& title);

}  // namespace laqt
