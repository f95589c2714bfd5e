#include "laqt/analysis.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "laqt/errors.hpp"

namespace laqt {

AnalysisTrace analyze_episode(Networks& nets, const ScenarioConfig& scenario, std::uint64_t seed,
                              std::size_t levels) {
  std::mt19937_64 rng(seed);
  const std::uint64_t env_seed[] = {eval_seed(seed, 0)};
  const EpisodeRecord ep = run_episodes(scenario, *nets.agent, env_seed, RolloutOptions{0.0, true}, rng).front();
  const std::size_t T = ep.length(), n = scenario.n_allies(), ne = scenario.n_enemies();

  SkirmishEnv env(scenario);
  std::vector<AgentBatch> steps;
  std::vector<GlobalState> states;
  std::vector<std::size_t> actions;
  for (std::size_t t = 0; t < T; ++t) {
    env.restore(ep.snapshots[t]);
    std::vector<std::vector<double>> avail;
    for (std::size_t i = 0; i < n; ++i) avail.push_back(env.available_actions(i));
    steps.push_back(make_agent_batch(env.observe_all(), avail, n, ne));
    states.push_back(env.global_state());
    actions.insert(actions.end(), ep.actions[t].begin(), ep.actions[t].end());
  }

  AnalysisTrace tr;
  tr.steps = T;
  tr.n_allies = n;
  tr.levels = levels;
  tr.win = ep.win;
  tr.episode_return = ep.episode_return;
  const StateBatch sb = StateBatch::from(states);
  tr.alive = sb.alive;

  Tensor q;
  {
    NoGradGuard no_grad;
    q = reshape(gather_last(unroll_agent(*nets.agent, steps), actions), {T, n}).detach();
  }
  if (nets.mixer->kind() == MixerKind::kQmix) {
    Tensor probe = Tensor::from(q.shape(), std::vector<double>(q.data().begin(), q.data().end()), true);
    const MixerOutput o = nets.mixer->forward(sb, probe, MixContext{});
    sum_all(o.q_tot).backward();
    auto g = probe.grad();
    tr.credits.assign(g.begin(), g.end());
    for (std::size_t k = 0; k < tr.credits.size(); ++k) tr.credits[k] *= tr.alive[k];
    auto qt = o.q_tot.data();
    tr.q_tot.assign(qt.begin(), qt.end());
    nets.visit([](const std::string&, Tensor& p) { p.zero_grad(); });
    return tr;
  }
  NoGradGuard no_grad;
  const MixerOutput o = nets.mixer->forward(sb, q, MixContext{});
  auto c = o.credits.data();
  tr.credits.assign(c.begin(), c.end());
  auto qt = o.q_tot.data();
  tr.q_tot.assign(qt.begin(), qt.end());
  tr.n_entities = o.n_entities;
  const std::size_t N2 = o.n_entities * o.n_entities;
  if (N2 > 0 && o.pairwise.size() == T * N2) {
    for (std::size_t t = 0; t < T; ++t)
      tr.pairwise.emplace_back(o.pairwise.begin() + static_cast<std::ptrdiff_t>(t * N2),
                               o.pairwise.begin() + static_cast<std::ptrdiff_t>((t + 1) * N2));
  }
  if (!o.level_choice.empty() && o.n_entities > 0) {
    for (std::size_t t = 0; t < T; ++t)
      tr.level_choice.emplace_back(o.level_choice.begin() + static_cast<std::ptrdiff_t>(t * o.n_entities),
                                   o.level_choice.begin() + static_cast<std::ptrdiff_t>((t + 1) * o.n_entities));
  }
  return tr;
}

double mean_offdiagonal_weight(const AnalysisTrace& trace) {
  const std::size_t N = trace.n_entities;
  double s = 0.0;
  std::size_t count = 0;
  for (const auto& m : trace.pairwise)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j)
        if (i != j) {
          s += m[i * N + j];
          ++count;
        }
  return count ? s / static_cast<double>(count) : 0.0;
}

std::vector<std::vector<std::size_t>> level_histogram(const AnalysisTrace& trace) {
  std::vector<std::vector<std::size_t>> h(trace.n_allies, std::vector<std::size_t>(trace.levels, 0));
  for (std::size_t t = 0; t < trace.level_choice.size(); ++t) {
    for (std::size_t i = 0; i < trace.n_allies; ++i) {
      if (trace.alive[t * trace.n_allies + i] == 0.0) continue;
      const std::size_t level = trace.level_choice[t][i];
      if (level < 1 || level > trace.levels) throw ContractError("level histogram: level out of range");
      ++h[i][level - 1];
    }
  }
  return h;
}

namespace {
std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}
}  // namespace

void write_credits_csv(std::ostream& os, const AnalysisTrace& trace) {
  const std::size_t n = trace.n_allies;
  os << "t";
  for (std::size_t i = 0; i < n; ++i) os << ",credit_" << i;
  for (std::size_t i = 0; i < n; ++i) os << ",alive_" << i;
  os << "\n";
  for (std::size_t t = 0; t < trace.steps; ++t) {
    os << t;
    for (std::size_t i = 0; i < n; ++i) os << "," << num(trace.credits[t * n + i]);
    for (std::size_t i = 0; i < n; ++i) os << "," << num(trace.alive[t * n + i]);
    os << "\n";
  }
}

void write_matrix_csv(std::ostream& os, const std::vector<double>& matrix, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) os << (j ? "," : "") << num(matrix[i * n + j]);
    os << "\n";
  }
}

void write_level_histogram_csv(std::ostream& os, const AnalysisTrace& trace) {
  os << "agent";
  for (std::size_t l = 1; l <= trace.levels; ++l) os << ",level_" << l;
  os << "\n";
  const auto h = level_histogram(trace);
  for (std::size_t i = 0; i < h.size(); ++i) {
    os << i;
    for (std::size_t c : h[i]) os << "," << c;
    os << "\n";
  }
}

MetricsSeries read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("metrics: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw FormatError("metrics: '" + path + "' is empty");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw FormatError("metrics: '" + path + "' lacks column " + name);
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t cs = column("env_steps"), cw = column("eval_win_rate"), cl = column("loss");
  MetricsSeries s;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        cells.push_back(std::stod(cell));
      } catch (const std::logic_error&) {
        throw FormatError("metrics: bad number '" + cell + "' in '" + path + "'");
      }
    }
    if (cells.size() != header.size()) throw FormatError("metrics: ragged row in '" + path + "'");
    s.env_steps.push_back(cells[cs]);
    s.win_rate.push_back(cells[cw]);
    s.loss.push_back(cells[cl]);
  }
  return s;
}

namespace {

double interpolate(const std::vector<double>& xs, const std::vector<double>& ys, double x) {
  if (xs.empty()) return 0.0;
  if (x <= xs.front()) return ys.front();
  if (x >= xs.back()) return ys.back();
  const auto hi = static_cast<std::size_t>(std::upper_bound(xs.begin(), xs.end(), x) - xs.begin());
  const double x0 = xs[hi - 1], x1 = xs[hi];
  const double a = x1 > x0 ? (x - x0) / (x1 - x0) : 0.0;
  return ys[hi - 1] + a * (ys[hi] - ys[hi - 1]);
}

void panel(std::ostringstream& svg, const std::vector<double>& grid, const std::vector<std::vector<double>>& runs,
           double top, const std::string& label) {
  const double left = 60, width = 560, height = 220;
  std::vector<double> lo(grid.size()), hi(grid.size()), mean(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k) {
    lo[k] = hi[k] = runs[0][k];
    double s = 0.0;
    for (const auto& r : runs) {
      lo[k] = std::min(lo[k], r[k]);
      hi[k] = std::max(hi[k], r[k]);
      s += r[k];
    }
    mean[k] = s / static_cast<double>(runs.size());
  }
  double ymin = *std::min_element(lo.begin(), lo.end()), ymax = *std::max_element(hi.begin(), hi.end());
  if (ymax - ymin < 1e-12) ymax = ymin + 1.0;
  const double xmin = grid.front(), xmax = grid.back() > grid.front() ? grid.back() : grid.front() + 1.0;
  auto X = [&](double x) { return left + width * (x - xmin) / (xmax - xmin); };
  auto Y = [&](double y) { return top + height * (1.0 - (y - ymin) / (ymax - ymin)); };

  svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << width << "\" height=\"" << height
      << "\" fill=\"none\" stroke=\"#888\"/>\n";
  svg << "<text x=\"" << left << "\" y=\"" << top - 6 << "\" font-size=\"12\">" << label << "</text>\n";
  svg << "<text x=\"" << left - 4 << "\" y=\"" << top + 10 << "\" font-size=\"10\" text-anchor=\"end\">" << num(ymax)
      << "</text>\n";
  svg << "<text x=\"" << left - 4 << "\" y=\"" << top + height << "\" font-size=\"10\" text-anchor=\"end\">"
      << num(ymin) << "</text>\n";
  svg << "<text x=\"" << left + width << "\" y=\"" << top + height + 14
      << "\" font-size=\"10\" text-anchor=\"end\">env steps " << num(xmax) << "</text>\n";
  svg << "<polygon fill=\"#4a7fbf\" fill-opacity=\"0.25\" stroke=\"none\" points=\"";
  for (std::size_t k = 0; k < grid.size(); ++k) svg << num(X(grid[k])) << "," << num(Y(hi[k])) << " ";
  for (std::size_t k = grid.size(); k-- > 0;) svg << num(X(grid[k])) << "," << num(Y(lo[k])) << " ";
  svg << "\"/>\n<polyline fill=\"none\" stroke=\"#1f4e8c\" stroke-width=\"1.5\" points=\"";
  for (std::size_t k = 0; k < grid.size(); ++k) svg << num(X(grid[k])) << "," << num(Y(mean[k])) << " ";
  svg << "\"/>\n";
}

}  // namespace

std::string plot_svg(const std::vector<MetricsSeries>& runs, const std::string& title) {
  if (runs.empty() || runs.front().env_steps.empty()) throw ContractError("plot: no data");
  const std::vector<double>& grid = runs.front().env_steps;
  std::vector<std::vector<double>> win, loss;
  for (const MetricsSeries& r : runs) {
    if (r.env_steps.empty()) throw ContractError("plot: empty metrics series");
    std::vector<double> w, l;
    for (double x : grid) {
      w.push_back(interpolate(r.env_steps, r.win_rate, x));
      l.push_back(interpolate(r.env_steps, r.loss, x));
    }
    win.push_back(std::move(w));
    loss.push_back(std::move(l));
  }
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"660\" height=\"560\" font-family=\"sans-serif\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"330\" y=\"18\" font-size=\"14\" text-anchor=\"middle\">" << title << " (" << runs.size()
      << " runs)</text>\n";
  panel(svg, grid, win, 40, "eval win rate");
  panel(svg, grid, loss, 310, "TD loss");
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace laqt
