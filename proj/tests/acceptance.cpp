// Acceptance run: one PASS/FAIL line per criterion, tolerances and runtime
// limits pinned below. Exit status is nonzero when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "dagmesh/executor.hpp"
#include "dagmesh/perf_model.hpp"
#include "dagmesh/pipeline.hpp"
#include "dagmesh/scheduler.hpp"
#include "dagmesh/sim.hpp"
#include "gradcheck.hpp"

using namespace dagmesh;

namespace {

// Pinned tolerances.
constexpr double kParityTolerance = 0.10;          // |H100 / 3080 - 1|
constexpr double kParityMinBandwidthGbps = 1.0;
constexpr double kEqualSplitRatio = (4.0 * 756.0) / (50.0 * 59.5);
constexpr double kEqualSplitTolerance = 1e-9;
constexpr double kGradTolerance = 1e-4;
constexpr double kFiniteDifferenceStep = 1e-4;
constexpr double kSchedulerSlack = 1.10;
constexpr double kLambdaTrue = 0.45;
constexpr double kLambdaNoise = 0.01;
constexpr double kLambdaTolerance = 0.05;
constexpr double kSimFormulaTolerance = 0.01;

// Pinned runtime limits, seconds.
constexpr double kLimit[10] = {0, 5, 5, 1, 10, 10, 30, 10, 1, 10};

std::string data_path(const std::string& name) { return std::string(DAGMESH_DATA_DIR) + "/" + name; }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// -- criterion 1 ------------------------------------------------------------

Outcome parity() {
  // Zero-communication limit with an equal FLOP split over each fleet.
  const Link none{};
  const Fleet a = rtx3080_fleet(none), b = h100_fleet(none);
  const double flops = 1e15;
  auto equal_split = [&](const Fleet& f) {
    std::vector<StageProfile> prof;
    for (const auto& p : f.peers)
      prof.push_back({p.id, flops / f.peers.size() / effective_speed(p, ComputeColumn::Tensor), 0.0});
    return asymptotic_throughput(prof, 1.0);
  };
  const double limit_ratio = equal_split(b) / equal_split(a);
  const bool limit_ok = std::abs(limit_ratio - kEqualSplitRatio) <= kEqualSplitTolerance;

  SweepGrid grid;
  grid.n_b = 512;
  grid.columns = {ComputeColumn::Tensor};
  grid.bandwidth_gbps.clear();
  for (double bw : default_bandwidth_grid())
    if (bw >= kParityMinBandwidthGbps) grid.bandwidth_gbps.push_back(bw);
  const std::vector<Fleet> fleets{a, b};

  int points = 0, outside = 0;
  double worst = 1.0;
  std::string worst_at;
  for (const char* model : {"bert-large", "gpt3"}) {
    const auto result = sweep(builtin_model(model), fleets, grid);
    std::map<std::pair<double, double>, std::map<std::string, double>> by_point;
    for (const auto& r : result.rows)
      by_point[{r.bandwidth_gbps, r.alpha_ms}][r.fleet] = r.feasible ? r.throughput : NAN;
    for (const auto& [pt, t] : by_point) {
      ++points;
      const double ratio = t.at(b.name) / t.at(a.name);
      const bool ok = std::isfinite(ratio) && std::abs(ratio - 1.0) <= kParityTolerance;
      if (!ok) ++outside;
      if (!std::isfinite(ratio) || std::abs(ratio - 1.0) > std::abs(worst - 1.0)) {
        worst = ratio;
        worst_at = std::string(model) + " @ " + fmt("%g", pt.first) + " Gbit/s, alpha " + fmt("%g", pt.second) + " ms";
      }
    }
  }
  std::ostringstream d;
  d << "equal-split limit ratio " << fmt("%.6f", limit_ratio) << " (expected " << fmt("%.6f", kEqualSplitRatio)
    << "); sweep n_b=512 tensor: " << outside << "/" << points << " points outside +/-10%, worst H100/3080 "
    << fmt("%.4f", worst) << " at " << worst_at;
  return {limit_ok && outside == 0, d.str()};
}

// -- criterion 2 ------------------------------------------------------------

Outcome latency_ordering() {
  SweepGrid grid;  // the 10 x 10 default grid
  grid.n_b = 512;
  const Link none{};
  const std::vector<Fleet> fleets{rtx3080_fleet(none), h100_fleet(none)};
  int points = 0, bad = 0;
  for (const char* model : {"bert-large", "gpt3"}) {
    const auto result = sweep(builtin_model(model), fleets, grid);
    std::map<std::tuple<int, double, double>, std::map<std::string, const SweepRow*>> by_point;
    for (const auto& r : result.rows) by_point[{int(r.column), r.bandwidth_gbps, r.alpha_ms}][r.fleet] = &r;
    for (const auto& [_, rows] : by_point) {
      ++points;
      const SweepRow* big = rows.at(fleets[0].name);
      const SweepRow* small = rows.at(fleets[1].name);
      if (!big->feasible || !small->feasible || !(big->latency_s > small->latency_s)) ++bad;
    }
  }
  return {bad == 0 && points == 2 * 2 * 100,
          std::to_string(points) + " grid points (2 models x 2 columns x 10 x 10), " + std::to_string(bad) +
              " with 50-peer latency <= 4-peer latency"};
}

// -- criterion 3 ------------------------------------------------------------

Outcome eq4_identity() {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> len(1, 60);
  std::uniform_real_distribution<double> t(0.0, 5.0);
  int mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    std::vector<StageProfile> prof(len(rng));
    for (auto& p : prof) p = {PeerId(1), t(rng), t(rng)};
    if (pipeline_time(prof, 1) != fp_latency(prof)) ++mismatches;
  }
  return {mismatches == 0, "1000 seeded profiles, " + std::to_string(mismatches) + " inexact"};
}

// -- criterion 4 ------------------------------------------------------------

double max_abs_diff(const ModelParams& a, const ModelParams& b) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0.0;
  for (const auto& [node, params] : a) {
    if (!b.contains(node)) return INFINITY;
    const auto& other = b.at(node);
    for (const auto& [name, t] : params) {
      if (!other.contains(name) || other.at(name).data.size() != t.data.size()) return INFINITY;
      for (std::size_t i = 0; i < t.data.size(); ++i) worst = std::max(worst, std::abs(t.data[i] - other.at(name).data[i]));
    }
  }
  return worst;
}

Outcome distributed_equals_centralized() {
  const Graph g = load_job_file(data_path("figure3_job.json"));
  const Fleet f = load_fleet_file(data_path("fleet_figure3.json"));
  const Scenario s = load_scenario_file(data_path("scenarios/no_failure.json"));
  const std::uint64_t seed = 2024;
  SimOptions opts;
  opts.seed = seed;
  const auto sched = initial_schedule(g, f, s);
  const auto r = run_simulation(g, f, sched, s, opts);
  const auto oracle = train_centralized(g, init_model(g, seed), s.batches, seed);
  std::set<PeerId> used(sched.assignment.begin(), sched.assignment.end());
  const double diff = r.completed() ? max_abs_diff(r.params, oracle.params) : INFINITY;
  return {r.completed() && used.size() == 3 && s.batches == 10 && diff == 0.0 && r.losses == oracle.losses,
          std::to_string(used.size()) + " peers, " + std::to_string(s.batches) + " batches, max abs diff " +
              fmt("%g", diff)};
}

// -- criterion 5 ------------------------------------------------------------

Outcome gradients() {
  double worst = 0.0;
  std::string where;
  std::set<OpClass> covered;
  const auto cases = testing::catalog_cases();
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto res = testing::check_gradients(cases[i], 100 + i, kFiniteDifferenceStep);
    covered.insert(cases[i].cls);
    if (!(res.worst_rel <= worst)) {
      worst = res.worst_rel;
      where = res.label + " " + res.worst_where;
    }
  }
  std::vector<std::string> missing;
  for (OpClass c : {OpClass::Conv, OpClass::Add, OpClass::Multiply, OpClass::Pool, OpClass::Concat, OpClass::Linear,
                    OpClass::Matmul, OpClass::Softmax, OpClass::Gelu, OpClass::CrossEntropy, OpClass::Embedding,
                    OpClass::AttentionBlock, OpClass::FfnBlock})
    if (!covered.contains(c)) missing.emplace_back(to_string(c));
  std::string d = std::to_string(cases.size()) + " cases, worst relative error " + fmt("%.3g", worst) + " (" + where + ")";
  for (const auto& m : missing) d += ", missing " + m;
  return {missing.empty() && worst <= kGradTolerance, d};
}

// -- criterion 6 ------------------------------------------------------------

// Re-derives feasibility from the raw instance: every stage placed once on a
// pipeline peer, each peer's stages contiguous and in pipeline order, and the
// summed memory within each peer's capacity.
bool independently_feasible(const std::vector<StageCost>& stages, const Fleet& fleet, const ScheduleReport& r) {
  if (r.assignment.size() != stages.size()) return false;
  const auto pipeline = fleet.pipeline_peers();
  std::map<PeerId, std::size_t> position;
  for (std::size_t i = 0; i < pipeline.size(); ++i) position[pipeline[i]] = i;
  // Positions must be nondecreasing along the stages; since positions are
  // distinct per peer, that makes every run contiguous and in pipeline order.
  std::size_t last = 0;
  std::map<PeerId, Footprint> used;
  for (std::size_t k = 0; k < stages.size(); ++k) {
    auto it = position.find(r.assignment[k]);
    if (it == position.end() || it->second < last) return false;
    last = it->second;
    used[r.assignment[k]] += stages[k].memory;
  }
  for (const auto& [peer, mem] : used) {
    const Peer& p = fleet.peer(peer);
    if (mem.gpu_bytes > p.gpu_bytes || mem.cpu_bytes > p.cpu_bytes || mem.disk_bytes > p.disk_bytes) return false;
  }
  return true;
}

Outcome scheduler_oracle() {
  std::mt19937_64 rng(606);
  int feasible = 0, infeasible = 0, gap = 0, agree = 0, invalid = 0;
  double worst = 1.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 12), p = 1 + static_cast<int>(rng() % 4);
    std::uniform_real_distribution<double> flops(0.1, 10.0), mem(1.0, 10.0), bytes(0.0, 5.0);
    std::vector<StageCost> stages;
    for (int i = 0; i < n; ++i) {
      StageCost s;
      s.label = "s" + std::to_string(i);
      s.flops = flops(rng);
      s.memory.gpu_bytes = mem(rng);
      if (i > 0) s.inputs.push_back({static_cast<std::size_t>(i - 1), bytes(rng)});
      stages.push_back(s);
    }
    Fleet fleet;
    fleet.name = "random";
    for (int i = 1; i <= p; ++i) {
      Peer peer;
      peer.id = PeerId(i);
      peer.peak_flops_fp32 = peer.peak_flops_tensor = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
      peer.lambda = std::uniform_real_distribution<double>(0.3, 1.0)(rng);
      peer.gpu_bytes = std::uniform_real_distribution<double>(8.0, 40.0)(rng);
      peer.cpu_bytes = peer.disk_bytes = 1e18;
      fleet.peers.push_back(peer);
    }
    fleet.default_link = {std::uniform_real_distribution<double>(0.0, 0.2)(rng),
                          std::uniform_real_distribution<double>(0.0, 0.05)(rng)};
    const auto bf = brute_force_schedule(stages, fleet);
    for (SolverMode mode : {SolverMode::Auto, SolverMode::LocalSearch}) {
      ScheduleOptions opts;
      opts.mode = mode;
      const auto h = schedule(stages, fleet, opts);
      if (h.feasible != bf.feasible) {
        ++invalid;
        continue;
      }
      if (!bf.feasible) {
        ++agree;
        continue;
      }
      if (!independently_feasible(stages, fleet, h)) ++invalid;
      const double ratio = h.makespan / bf.makespan;
      worst = std::max(worst, ratio);
      if (ratio > kSchedulerSlack) ++gap;
    }
    (bf.feasible ? feasible : infeasible)++;
  }
  std::ostringstream d;
  d << "200 instances (" << feasible << " feasible, " << infeasible << " infeasible), DP and local search: worst "
    << "makespan / brute force " << fmt("%.4f", worst) << ", " << gap << " over 1.10, " << invalid
    << " infeasible or disagreeing";
  return {gap == 0 && invalid == 0, d.str()};
}

// -- criterion 7 ------------------------------------------------------------

Outcome fault_tolerance() {
  const Graph g = load_job_file(data_path("figure3_job.json"));
  const Fleet f = load_fleet_file(data_path("fleet_figure3.json"));
  const Scenario clean = load_scenario_file(data_path("scenarios/no_failure.json"));
  const Scenario quit = load_scenario_file(data_path("scenarios/quit_with_backup.json"));
  const auto a = run_simulation(g, f, initial_schedule(g, f, clean), clean);
  const auto b = run_simulation(g, f, initial_schedule(g, f, quit), quit);
  const auto replacements = b.count(SimEventKind::Dispatch, "replacement");
  const double diff = a.completed() && b.completed() ? max_abs_diff(a.params, b.params) : INFINITY;
  const bool antnode = quit.events.size() == 1 && f.peer(quit.events[0].peer).role == PeerRole::Antnode;
  return {antnode && quit.checkpoint_interval == 1 && f.backup_pool.size() == 1 && b.completed() && diff == 0.0 &&
              replacements == 1,
          "status " + std::string(to_string(b.status)) + ", max abs diff vs failure-free " + fmt("%g", diff) + ", " +
              std::to_string(replacements) + " replacement dispatch"};
}

// -- criterion 8 ------------------------------------------------------------

Outcome lambda_recovery() {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> flops(1e9, 1e13);
  std::normal_distribution<double> noise(0.0, kLambdaNoise);
  Peer p;
  p.id = PeerId(1);
  p.peak_flops_fp32 = 29.8e12;
  p.peak_flops_tensor = 59.5e12;
  p.gpu_bytes = p.cpu_bytes = p.disk_bytes = 1e12;
  double worst = 0.0;
  for (ComputeColumn column : {ComputeColumn::Fp32, ComputeColumn::Tensor}) {
    std::vector<ProfileSample> samples;
    for (int i = 0; i < 200; ++i) {
      const double f = flops(rng);
      samples.push_back({f, f / (p.peak_flops(column) * kLambdaTrue) * (1.0 + noise(rng))});
    }
    const double fit = fit_lambda(samples, p, column);
    worst = std::max(worst, std::abs(fit - kLambdaTrue) / kLambdaTrue);
  }
  return {worst <= kLambdaTolerance, "200 samples per column, 1% noise, worst relative error " + fmt("%.4f", worst)};
}

// -- criterion 9 ------------------------------------------------------------

// Chain job of Linear ops split into `peers` stage-annotated cells.
Graph random_chain(std::mt19937_64& rng, int peers) {
  std::uniform_int_distribution<int> width(4, 16), per_stage(1, 3);
  std::vector<OpNode> nodes;
  OpNode x{.name = "x", .kind = OpKind::Placeholder, .op_class = OpClass::Placeholder};
  x.output_shape = {4, width(rng)};
  x.stage = 1;
  nodes.push_back(x);
  std::string prev = "x";
  int index = 0;
  for (int s = 1; s <= peers; ++s) {
    for (int k = per_stage(rng); k > 0; --k) {
      OpNode l{.name = "l" + std::to_string(++index), .kind = OpKind::ParametricOp, .op_class = OpClass::Linear,
               .args = {prev}, .kwargs = {{"out_features", double(width(rng))}}};
      l.stage = s;
      nodes.back().users.push_back(l.name);
      nodes.push_back(l);
      prev = l.name;
    }
  }
  GraphMeta meta;
  meta.name = "chain";
  meta.outputs = {prev};
  return Graph::build(nodes, meta);
}

Outcome simulation_vs_formula() {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> peers(2, 6), batches(1, 48);
  std::uniform_real_distribution<double> speed(2e5, 2e6), alpha(0.0, 4e-3), beta(1e-6, 1e-5);
  double worst = 0.0;
  int failed_runs = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const int p = peers(rng);
    const Graph g = random_chain(rng, p);
    Fleet fleet;
    fleet.name = "chain";
    for (int i = 1; i <= p; ++i) {
      Peer peer;
      peer.id = PeerId(i);
      peer.peak_flops_fp32 = peer.peak_flops_tensor = speed(rng);
      peer.gpu_bytes = peer.cpu_bytes = peer.disk_bytes = 1e12;
      fleet.peers.push_back(peer);
    }
    fleet.default_link = {alpha(rng), beta(rng)};
    for (int i = 1; i < p; ++i) fleet.set_link(PeerId(i), PeerId(i + 1), {alpha(rng), beta(rng)});

    Scenario s;
    s.mode = SimMode::Infer;
    s.batches = batches(rng);
    for (int i = 1; i <= p; ++i) s.assignment.push_back(PeerId(i));
    const auto sched = initial_schedule(g, fleet, s);
    const auto r = run_simulation(g, fleet, sched, s);
    if (!r.completed() || r.batch_completion_s.size() != static_cast<std::size_t>(s.batches)) {
      ++failed_runs;
      continue;
    }
    const auto prof = profiles_from_schedule(sched);
    const double simulated = *std::max_element(r.batch_completion_s.begin(), r.batch_completion_s.end());
    const double formula = pipeline_time(prof, s.batches);
    worst = std::max(worst, std::abs(simulated - formula) / formula);
  }
  return {failed_runs == 0 && worst <= kSimFormulaTolerance,
          "20 random chain jobs (2-6 peers, 1-48 batches), worst relative gap " + fmt("%.3g", worst) +
              (failed_runs ? ", " + std::to_string(failed_runs) + " runs did not complete" : "")};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"throughput parity 50xRTX3080 vs 4xH100", parity},
      {"latency ordering 50-peer > 4-peer", latency_ordering},
      {"pipeline_time(n_b=1) == fp_latency", eq4_identity},
      {"distributed == centralized", distributed_equals_centralized},
      {"gradient correctness", gradients},
      {"scheduler vs brute force", scheduler_oracle},
      {"fault tolerance", fault_tolerance},
      {"lambda recovery", lambda_recovery},
      {"simulation vs pipelined batch cost", simulation_vs_formula},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs < kLimit[i + 1];
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::printf("criterion %zu: %s  %s: %s; %.3f s (limit %.0f s%s)\n", i + 1, pass ? "PASS" : "FAIL",
                criteria[i].first.c_str(), o.detail.c_str(), secs, kLimit[i + 1], in_time ? "" : ", exceeded");
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
