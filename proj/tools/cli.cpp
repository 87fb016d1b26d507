#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "dagmesh/dag_ir.hpp"
#include "dagmesh/executor.hpp"
#include "dagmesh/perf_model.hpp"
#include "dagmesh/pipeline.hpp"
#include "dagmesh/scheduler.hpp"
#include "dagmesh/sim.hpp"

namespace dagmesh::cli {
namespace {

namespace fs = std::filesystem;

constexpr std::string_view kBuiltin = "builtin:";

struct RunConfig {
  std::string job;
  std::string fleet;
  std::string scenario;
  std::string model = "bert-large";
  std::string bandwidth_grid;
  std::string alpha_grid;
  std::string column;
  std::int64_t n_b = 512;
  std::uint64_t seed = 0;
  double bandwidth_gbps = 10.0;  // link of builtin fleets
  double alpha_ms = 1.0;
  std::string out = ".";
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Graph load_job(const std::string& spec) {
  if (spec.empty()) throw UsageError("--job is required");
  if (spec.starts_with(kBuiltin)) return builtin_model(std::string_view(spec).substr(kBuiltin.size()));
  if (!fs::exists(spec)) throw std::runtime_error("cannot open job file '" + spec + "': no such file");
  return load_job_file(spec);
}

Fleet load_fleet(const RunConfig& cfg) {
  if (cfg.fleet.empty()) throw UsageError("--fleet is required");
  Fleet f;
  if (cfg.fleet.starts_with(kBuiltin)) {
    const auto name = std::string_view(cfg.fleet).substr(kBuiltin.size());
    const Link link = Link::from_bandwidth_gbps(cfg.alpha_ms * 1e-3, cfg.bandwidth_gbps);
    if (name == "50x3080" || name == "rtx3080")
      f = rtx3080_fleet(link);
    else if (name == "4xh100" || name == "h100")
      f = h100_fleet(link);
    else
      throw UsageError("unknown builtin fleet '" + std::string(name) + "' (50x3080, 4xh100)");
  } else {
    if (!fs::exists(cfg.fleet)) throw std::runtime_error("cannot open fleet file '" + cfg.fleet + "': no such file");
    f = load_fleet_file(cfg.fleet);
  }
  if (!cfg.column.empty()) f.column = parse_compute_column(cfg.column);
  return f;
}

std::vector<double> parse_grid(const std::string& text, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) continue;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || !std::isfinite(v))
      throw UsageError(std::string("bad value '") + item + "' in " + what);
    out.push_back(v);
  }
  if (out.empty()) throw UsageError(std::string("empty ") + what);
  return out;
}

void write_file(const RunConfig& cfg, const std::string& name, const std::string& content, std::ostream& out) {
  fs::create_directories(cfg.out);
  const fs::path path = fs::path(cfg.out) / name;
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
  f << content;
  if (!f) throw std::runtime_error("write failed for '" + path.string() + "'");
  out << "wrote " << path.string() << '\n';
}

std::string schedule_text(const ScheduleReport& r) {
  std::ostringstream os;
  os << std::setprecision(9);
  os << "feasible: " << (r.feasible ? "yes" : "no") << '\n';
  if (!r.feasible) os << "violation: " << r.violation << '\n';
  os << "stages: " << r.assignment.size() << '\n';
  os << "makespan_s: " << r.makespan << '\n';
  std::size_t used = 0;
  for (const auto& l : r.loads) {
    if (l.stages.empty()) continue;
    ++used;
    os << "peer " << l.peer << ": stages " << l.stages.front() + 1;
    if (l.stages.size() > 1) os << '-' << l.stages.back() + 1;
    os << "  C=" << l.compute_s << " R=" << l.read_s << " load=" << l.load_s << '\n';
  }
  os << "peers_used: " << used << '\n';
  return os.str();
}

int cmd_validate(const RunConfig& cfg, std::ostream& out) {
  const Graph g = load_job(cfg.job);
  out << g.size() << " nodes, 0 errors\n";
  return 0;
}

int cmd_schedule(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const Graph g = load_job(cfg.job);
  const Fleet f = load_fleet(cfg);
  const StagePlan plan = plan_stages(g);
  const ScheduleReport r = schedule(plan.stages, f);
  const std::string text = schedule_text(r);
  out << text;
  write_file(cfg, "schedule.csv", schedule_csv(r), out);
  write_file(cfg, "report.txt", text, out);
  if (!r.feasible) {
    err << "error: infeasible schedule: " << r.violation << '\n';
    return 1;
  }
  return 0;
}

int cmd_analyze(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.n_b < 1) throw UsageError("--nb must be >= 1");
  const Graph g = load_job(cfg.job);
  const Fleet f = load_fleet(cfg);
  const ScheduleReport r = schedule(plan_stages(g).stages, f);
  std::ostringstream os;
  os << schedule_text(r);
  if (r.feasible) {
    const auto prof = profiles_from_schedule(r);
    const double samples = static_cast<double>(g.meta().batch_size);
    os << std::setprecision(9);
    os << "n_b: " << cfg.n_b << '\n';
    os << "fp_latency_s: " << fp_latency(prof) << '\n';
    os << "bottleneck_s: " << bottleneck(prof) << '\n';
    os << "pipeline_time_s: " << pipeline_time(prof, cfg.n_b) << '\n';
    os << "throughput_samples_per_s: " << throughput(prof, cfg.n_b, samples) << '\n';
    os << "asymptotic_throughput: " << asymptotic_throughput(prof, samples) << '\n';
  }
  out << os.str();
  write_file(cfg, "schedule.csv", schedule_csv(r), out);
  write_file(cfg, "report.txt", os.str(), out);
  if (!r.feasible) {
    err << "error: infeasible schedule: " << r.violation << '\n';
    return 1;
  }
  return 0;
}

double max_abs_diff(const ModelParams& a, const ModelParams& b) {
  double worst = 0.0;
  for (const auto& [node, params] : a) {
    auto it = b.find(node);
    if (it == b.end()) return INFINITY;
    for (const auto& [name, t] : params) {
      auto jt = it->second.find(name);
      if (jt == it->second.end() || jt->second.data.size() != t.data.size()) return INFINITY;
      for (std::size_t i = 0; i < t.data.size(); ++i) worst = std::max(worst, std::abs(t.data[i] - jt->second.data[i]));
    }
  }
  return a.size() == b.size() ? worst : INFINITY;
}

int cmd_simulate(const RunConfig& cfg, bool nb_given, std::ostream& out, std::ostream& err) {
  const Graph g = load_job(cfg.job);
  const Fleet f = load_fleet(cfg);
  Scenario s;
  if (!cfg.scenario.empty()) {
    if (!fs::exists(cfg.scenario))
      throw std::runtime_error("cannot open scenario file '" + cfg.scenario + "': no such file");
    s = load_scenario_file(cfg.scenario);
  }
  if (nb_given) s.batches = cfg.n_b;
  const ScheduleReport sched = initial_schedule(g, f, s);
  if (!sched.feasible) {
    err << "error: infeasible schedule: " << sched.violation << '\n';
    return 1;
  }
  SimOptions opts;
  opts.seed = cfg.seed;
  const SimReport r = run_simulation(g, f, sched, s, opts);

  std::ostringstream os;
  os << r.summary() << std::setprecision(17);
  if (r.completed()) {
    if (s.mode == SimMode::Train) {
      const auto oracle = train_centralized(g, init_model(g, cfg.seed), s.batches, cfg.seed);
      os << "oracle_max_abs_diff: " << max_abs_diff(r.params, oracle.params) << '\n';
      os << "oracle_losses_equal: " << (r.losses == oracle.losses ? "yes" : "no") << '\n';
    } else {
      const auto oracle = infer_centralized(g, init_model(g, cfg.seed), s.batches, cfg.seed);
      os << "oracle_losses_equal: " << (r.losses == oracle ? "yes" : "no") << '\n';
    }
  }
  out << os.str();
  write_file(cfg, "events.csv", r.events_csv(), out);
  write_file(cfg, "report.txt", os.str(), out);
  if (!r.completed()) {
    err << "error: simulation " << to_string(r.status) << ": " << r.error << '\n';
    return 1;
  }
  return 0;
}

int cmd_sweep(const RunConfig& cfg, bool bandwidth_given, bool alpha_given, std::ostream& out) {
  SweepGrid grid;
  if (bandwidth_given) grid.bandwidth_gbps = parse_grid(cfg.bandwidth_grid, "bandwidth grid");
  if (alpha_given) grid.alpha_ms = parse_grid(cfg.alpha_grid, "alpha grid");
  if (cfg.n_b < 1) throw UsageError("--nb must be >= 1");
  grid.n_b = cfg.n_b;
  if (!cfg.column.empty() && cfg.column != "both") grid.columns = {parse_compute_column(cfg.column)};

  std::vector<std::string> models;
  if (cfg.model == "all")
    models = {"bert-large", "gpt3"};
  else
    models = {cfg.model};
  const Link placeholder = Link::from_bandwidth_gbps(0.0, 1.0);
  const std::vector<Fleet> fleets{rtx3080_fleet(placeholder), h100_fleet(placeholder)};

  SweepResult all;
  for (const auto& m : models) {
    const auto part = sweep(builtin_model(m), fleets, grid);
    all.rows.insert(all.rows.end(), part.rows.begin(), part.rows.end());
  }
  const std::size_t feasible = std::count_if(all.rows.begin(), all.rows.end(), [](const SweepRow& r) {
    return r.feasible;
  });
  out << all.rows.size() << " grid points, " << feasible << " feasible\n";
  write_file(cfg, "sweep.csv", all.csv(), out);
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"dagmesh: plan, analyze and simulate decentralized DAG training"};
  app.require_subcommand(1);
  RunConfig cfg;

  auto* validate = app.add_subcommand("validate", "Parse and validate a job definition");
  validate->add_option("--job", cfg.job, "Job file or builtin:<model>")->required();

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--job", cfg.job, "Job file or builtin:bert-large|gpt3")->required();
    sub->add_option("--fleet", cfg.fleet, "Fleet file or builtin:50x3080|4xh100")->required();
    sub->add_option("--compute-column", cfg.column, "fp32 or tensor (default: fleet file)");
    sub->add_option("--bandwidth", cfg.bandwidth_gbps, "Link bandwidth of builtin fleets, Gbit/s");
    sub->add_option("--alpha", cfg.alpha_ms, "Link latency of builtin fleets, ms");
    sub->add_option("--out", cfg.out, "Output directory");
  };
  auto* sched = app.add_subcommand("schedule", "Assign pipeline stages to peers");
  add_common(sched);
  auto* analyze = app.add_subcommand("analyze", "Schedule, then report latency and pipelined cost");
  add_common(analyze);
  analyze->add_option("--nb", cfg.n_b, "Number of batches")->capture_default_str();
  auto* simulate = app.add_subcommand("simulate", "Run the discrete-event simulation");
  add_common(simulate);
  simulate->add_option("--scenario", cfg.scenario, "Scenario file");
  auto* nb_sim = simulate->add_option("--nb", cfg.n_b, "Override the scenario batch count");
  simulate->add_option("--seed", cfg.seed, "Seed for parameters and data")->capture_default_str();
  auto* sw = app.add_subcommand("sweep", "Bandwidth x latency sweep over the reference fleets");
  sw->add_option("--model", cfg.model, "bert-large, gpt3 or all")->capture_default_str();
  auto* bw_grid = sw->add_option("--bandwidth-grid", cfg.bandwidth_grid, "Comma-separated Gbit/s values");
  auto* alpha_grid = sw->add_option("--alpha-grid", cfg.alpha_grid, "Comma-separated latency values in ms");
  sw->add_option("--nb", cfg.n_b, "Number of batches")->capture_default_str();
  sw->add_option("--compute-column", cfg.column, "fp32, tensor or both");
  sw->add_option("--out", cfg.out, "Output directory");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (validate->parsed()) return cmd_validate(cfg, out);
    if (sched->parsed()) return cmd_schedule(cfg, out, err);
    if (analyze->parsed()) return cmd_analyze(cfg, out, err);
    if (simulate->parsed()) return cmd_simulate(cfg, nb_sim->count() > 0, out, err);
    if (sw->parsed()) return cmd_sweep(cfg, bw_grid->count() > 0, alpha_grid->count() > 0, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace dagmesh::cli
