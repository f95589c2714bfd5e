// laqt: train, transfer, evaluate and inspect multi-agent value-decomposition models.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "laqt/analysis.hpp"
#include "laqt/checkpoint.hpp"
#include "laqt/config.hpp"
#include "laqt/errors.hpp"
#include "laqt/gradcheck.hpp"
#include "laqt/trainer.hpp"

namespace fs = std::filesystem;
using namespace laqt;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIncompatible = 3;
constexpr int kExitNumerical = 4;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

/// A preset name, or an INI file whose [scenario] section is read.
ScenarioConfig resolve_scenario(const std::string& name) {
  if (fs::path(name).extension() == ".ini") return load_run_config(name).scenario;
  return scenario_preset(name);
}

fs::path prepare_out_dir(const std::string& dir) {
  fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw ConfigError("out-dir '" + dir + "': " + ec.message());
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  return out;
}

RunHooks make_hooks(std::ostream* metrics, const fs::path& out_dir, const TrainConfig& config, bool quiet) {
  RunHooks h;
  h.metrics = metrics;
  if (!quiet) h.log = [](const std::string& s) { std::cerr << s << "\n"; };
  h.checkpoint = [out_dir, config](Learner& l, const std::string& tag) {
    save_checkpoint((out_dir / (tag + ".laqt")).string(), capture_checkpoint(l, config));
  };
  return h;
}

struct Common {
  std::string config_path;
  std::string out_dir = "run";
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::uint64_t steps = 0;
  bool quiet = false;
};

TrainConfig load_with_overrides(const Common& c) {
  TrainConfig config = load_run_config(c.config_path);
  if (c.seed_set) config.seed = c.seed;
  if (c.steps > 0) config.total_env_steps = c.steps;
  config.validate();
  return config;
}

int cmd_train(const Common& c) {
  const TrainConfig config = load_with_overrides(c);
  const fs::path out = prepare_out_dir(c.out_dir);
  write_text(out / "config.ini", to_ini(config));
  std::ofstream metrics = open_out(out / "metrics.csv");
  const TrainResult r = train(config, make_hooks(&metrics, out, config, c.quiet));
  std::cout << "RESULT win_rate=" << fmt(r.phase.final_win_rate) << " steps=" << r.learner->env_steps << "\n";
  return kExitOk;
}

int cmd_transfer(const Common& c, const std::string& checkpoint, const std::string& scenario, double lr) {
  TrainConfig config = load_with_overrides(c);
  if (!scenario.empty()) config.scenario = resolve_scenario(scenario);
  if (lr > 0.0) config.transfer_lr = lr;
  config.validate();
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  auto learner = restore_learner(ckpt, config);
  check_transferable(*learner, config.scenario);
  const fs::path out = prepare_out_dir(c.out_dir);
  write_text(out / "config.ini", to_ini(config));
  std::ofstream metrics = open_out(out / "metrics.csv");
  write_metrics_header(metrics);
  const TransferResult r = transfer(*learner, config, make_hooks(&metrics, out, config, c.quiet));
  std::cout << "JUMPSTART win_rate=" << fmt(r.jumpstart.win_rate) << "\n";
  std::cout << "RESULT win_rate=" << fmt(r.fine_tune.final_win_rate) << " steps=" << learner->env_steps << "\n";
  return kExitOk;
}

std::vector<CurriculumStage> read_stages(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("stages: cannot open '" + path + "'");
  std::vector<CurriculumStage> stages;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    CurriculumStage s;
    std::string budget;
    if (!(ss >> s.scenario)) continue;
    if (!(ss >> budget)) throw ConfigError("stages line " + std::to_string(lineno) + ": expected '<scenario> <budget>'");
    try {
      std::size_t used = 0;
      s.budget = std::stoull(budget, &used);
      if (used != budget.size() || budget.front() == '-') throw std::invalid_argument("");
    } catch (const std::logic_error&) {
      throw ConfigError("stages line " + std::to_string(lineno) + " budget: expected non-negative integer, got '" +
                        budget + "'");
    }
    scenario_preset(s.scenario);
    stages.push_back(s);
  }
  if (stages.empty()) throw ConfigError("stages: '" + path + "' lists no stages");
  return stages;
}

int cmd_curriculum(const Common& c, const std::string& stages_path) {
  const TrainConfig config = load_with_overrides(c);
  const std::vector<CurriculumStage> stages = read_stages(stages_path);
  const fs::path out = prepare_out_dir(c.out_dir);
  write_text(out / "config.ini", to_ini(config));
  std::ofstream metrics = open_out(out / "metrics.csv");
  write_metrics_header(metrics);
  TrainConfig first = config;
  first.scenario = scenario_preset(stages.front().scenario);
  std::mt19937_64 init = stream(config.seed, 1);
  Learner learner = Learner::create(first, init);
  const auto reports = curriculum(learner, config, stages, make_hooks(&metrics, out, config, c.quiet));
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const StageReport& s = reports[i];
    std::cout << "STAGE " << i << " scenario=" << s.scenario << " jumpstart=" << fmt(s.jumpstart.win_rate)
              << " final=" << fmt(s.phase.final_win_rate) << " optimizer_steps=" << s.phase.optimizer_steps
              << (s.eval_only ? " eval_only" : "") << "\n";
  }
  std::cout << "RESULT win_rate=" << fmt(reports.back().phase.final_win_rate) << " steps=" << learner.env_steps
            << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& scenario, std::size_t episodes, std::uint64_t seed,
             bool random) {
  const ScenarioConfig sc = resolve_scenario(scenario);
  EvalResult r;
  if (random) {
    r = evaluate_random(sc, episodes, seed);
  } else {
    auto learner = restore_learner(load_checkpoint(checkpoint), TrainConfig{});
    check_transferable(*learner, sc);
    r = evaluate(*learner->online.agent, sc, episodes, seed);
  }
  std::cout << "EVAL win_rate=" << fmt(r.win_rate) << " mean_return=" << fmt(r.mean_return)
            << " episodes=" << r.episodes << "\n";
  return kExitOk;
}

int cmd_analyze(const std::string& checkpoint, const std::string& scenario, std::uint64_t seed,
                const std::string& out_dir, bool credits, bool pairwise, bool levels) {
  if (!credits && !pairwise && !levels) credits = pairwise = levels = true;
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const Architecture arch = decode_architecture(ckpt.meta.architecture);
  auto learner = restore_learner(ckpt, TrainConfig{});
  const ScenarioConfig sc = resolve_scenario(scenario);
  check_transferable(*learner, sc);
  const AnalysisTrace tr = analyze_episode(learner->online, sc, seed, arch.mixer.levels);
  const fs::path out = prepare_out_dir(out_dir);
  if (credits) {
    std::ofstream f = open_out(out / "credits.csv");
    write_credits_csv(f, tr);
  }
  if (pairwise && !tr.pairwise.empty()) {
    for (std::size_t t = 0; t < tr.pairwise.size(); ++t) {
      char name[48];
      std::snprintf(name, sizeof name, "attention_t%04zu.csv", t);
      std::ofstream f = open_out(out / name);
      write_matrix_csv(f, tr.pairwise[t], tr.n_entities);
    }
  }
  if (levels && !tr.level_choice.empty()) {
    std::ofstream f = open_out(out / "levels.csv");
    write_level_histogram_csv(f, tr);
  }
  std::cout << "ANALYZE steps=" << tr.steps << " win=" << (tr.win ? 1 : 0) << " return=" << fmt(tr.episode_return);
  if (!tr.pairwise.empty()) std::cout << " mean_pairwise=" << fmt(mean_offdiagonal_weight(tr));
  std::cout << "\n";
  return kExitOk;
}

int cmd_gradcheck(const std::string& module, std::uint64_t seed, std::size_t seeds, double tolerance) {
  bool any = false, ok = true;
  for (const GradCheckEntry& e : gradcheck_registry()) {
    if (module != "all" && module != e.name) continue;
    any = true;
    const GradCheckReport r = run_gradcheck(e, seed, seeds);
    const bool pass = r.worst_rel_error < tolerance;
    ok = ok && pass;
    char buf[160];
    std::snprintf(buf, sizeof buf, "GRADCHECK %-16s worst_rel_error=%.3e checked=%zu seeds=%zu %s", r.name.c_str(),
                  r.worst_rel_error, r.checked, r.seeds, pass ? "PASS" : "FAIL");
    std::cout << buf << "\n";
  }
  if (!any) throw ConfigError("gradcheck --module: unknown block '" + module + "'");
  return ok ? kExitOk : kExitNumerical;
}

int cmd_plot(const std::vector<std::string>& inputs, const std::string& output, const std::string& title) {
  std::vector<MetricsSeries> runs;
  for (const std::string& p : inputs) runs.push_back(read_metrics_csv(p));
  write_text(output, plot_svg(runs, title));
  std::cout << "PLOT " << output << " runs=" << runs.size() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"laqt: level-adaptive value decomposition for multi-agent skirmishes"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("config", common.config_path, "run config (INI)")->required();
    sub->add_option("--seed", common.seed, "override [train] seed")->each([&](const std::string&) {
      common.seed_set = true;
    });
    sub->add_option("--out-dir", common.out_dir, "output directory (created if absent)");
    sub->add_option("--steps", common.steps, "override [train] total_env_steps");
    sub->add_flag("--quiet", common.quiet, "no progress log on stderr");
  };

  auto* train = app.add_subcommand("train", "train from scratch");
  add_common(train);

  std::string checkpoint, scenario, stages;
  double lr = 0.0;
  auto* transfer = app.add_subcommand("transfer", "evaluate a checkpoint on a new scenario, then fine-tune");
  add_common(transfer);
  transfer->add_option("--checkpoint", checkpoint, "source checkpoint")->required();
  transfer->add_option("--scenario", scenario, "target preset or INI (default: the config's scenario)");
  transfer->add_option("--lr", lr, "override [train] transfer_lr");

  auto* curric = app.add_subcommand("curriculum", "train through a list of scenarios");
  add_common(curric);
  curric->add_option("--stages", stages, "file of '<preset> <budget>' lines; budget 0 = eval only")->required();

  std::size_t episodes = 32;
  std::uint64_t seed = 1;
  bool random = false;
  auto* eval = app.add_subcommand("eval", "greedy evaluation");
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate");
  eval->add_option("--scenario", scenario, "preset or INI")->required();
  eval->add_option("--episodes", episodes, "episodes")->check(CLI::PositiveNumber);
  eval->add_option("--seed", seed, "evaluation seed");
  eval->add_flag("--random", random, "uniform random policy baseline");

  std::string out_dir = "analysis";
  bool credits = false, pairwise = false, levels = false;
  auto* analyze = app.add_subcommand("analyze", "credit and attention traces of one greedy episode");
  analyze->add_option("--checkpoint", checkpoint, "checkpoint")->required();
  analyze->add_option("--scenario", scenario, "preset or INI")->required();
  analyze->add_option("--seed", seed, "episode seed");
  analyze->add_option("--out-dir", out_dir, "output directory");
  analyze->add_flag("--credits", credits, "write credits.csv");
  analyze->add_flag("--pairwise", pairwise, "write attention_tNNNN.csv");
  analyze->add_flag("--levels", levels, "write levels.csv (hard mode)");

  std::string module = "all";
  std::size_t seeds = 20;
  double tolerance = 1e-4;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient oracles");
  gradcheck->add_option("--module", module, "block name or all");
  gradcheck->add_option("--seed", seed, "first seed");
  gradcheck->add_option("--seeds", seeds, "number of seeds")->check(CLI::PositiveNumber);
  gradcheck->add_option("--tolerance", tolerance, "max relative error");

  std::vector<std::string> inputs;
  std::string output = "curves.svg", title = "training curves";
  auto* plot = app.add_subcommand("plot", "SVG win-rate and loss curves");
  plot->add_option("metrics", inputs, "metrics CSV files")->required();
  plot->add_option("-o,--output", output, "SVG path");
  plot->add_option("--title", title, "chart title");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train) return cmd_train(common);
    if (*transfer) return cmd_transfer(common, checkpoint, scenario, lr);
    if (*curric) return cmd_curriculum(common, stages);
    if (*eval) {
      if (!random && checkpoint.empty()) throw ConfigError("eval: --checkpoint or --random required");
      return cmd_eval(checkpoint, scenario, episodes, seed, random);
    }
    if (*analyze) return cmd_analyze(checkpoint, scenario, seed, out_dir, credits, pairwise, levels);
    if (*gradcheck) return cmd_gradcheck(module, seed, seeds, tolerance);
    if (*plot) return cmd_plot(inputs, output, title);
  } catch (const IncompatibleError& e) {
    std::cerr << "incompatible: " << e.what() << "\n";
    return kExitIncompatible;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitUsage;
}
