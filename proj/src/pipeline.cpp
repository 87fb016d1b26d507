#include "dagmesh/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <sstream>
#include <stdexcept>

namespace dagmesh {

double fp_latency(std::span<const StageProfile> profiles) {
  double t = 0.0;
  for (const auto& p : profiles) t += p.compute_s + p.read_s;
  return t;
}

double bottleneck(std::span<const StageProfile> profiles) {
  double m = 0.0;
  for (const auto& p : profiles) m = std::max(m, std::max(p.compute_s, p.read_s));
  return m;
}

double pipeline_time(std::span<const StageProfile> profiles, std::int64_t n_b) {
  if (n_b < 1) throw std::invalid_argument("n_b must be at least 1, got " + std::to_string(n_b));
  return fp_latency(profiles) + static_cast<double>(n_b - 1) * bottleneck(profiles);
}

double throughput(std::span<const StageProfile> profiles, std::int64_t n_b, double samples_per_batch) {
  const double t = pipeline_time(profiles, n_b);
  if (!(t > 0.0)) throw std::invalid_argument("pipeline time is zero");
  return static_cast<double>(n_b) * samples_per_batch / t;
}

double asymptotic_throughput(std::span<const StageProfile> profiles, double samples_per_batch) {
  const double b = bottleneck(profiles);
  if (!(b > 0.0)) throw std::invalid_argument("pipeline time is zero");
  return samples_per_batch / b;
}

std::vector<StageProfile> profiles_from_schedule(const ScheduleReport& report) {
  std::vector<StageProfile> out;
  for (const auto& l : report.loads)
    if (!l.stages.empty()) out.push_back({l.peer, l.compute_s, l.read_s});
  return out;
}

// ---------------------------------------------------------------------------
// Reference models

ReferenceModelConfig bert_large_config() { return {"bert-large", 1024, 16, 24, 30522, 8, 512}; }

ReferenceModelConfig gpt3_config() { return {"gpt3", 4096, 32, 24, 50257, 8, 512}; }

Graph build_reference_model(const ReferenceModelConfig& cfg) {
  const Shape tokens{cfg.batch, cfg.seq};
  const Shape logits{cfg.batch, cfg.seq, cfg.vocab};
  std::vector<OpNode> nodes;
  auto add = [&](OpNode n) -> OpNode& { return nodes.emplace_back(std::move(n)); };
  auto layer_name = [](const char* what, std::int64_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%02lld", what, static_cast<long long>(i));
    return std::string(buf);
  };

  std::string prev = "embedding";
  int stage = 1;
  add({.name = "tokens", .kind = OpKind::Placeholder, .op_class = OpClass::Placeholder, .users = {"embedding"},
       .output_shape = tokens, .stage = stage});
  add({.name = "embedding", .kind = OpKind::ParametricOp, .op_class = OpClass::Embedding, .args = {"tokens"},
       .kwargs = {{"vocab", double(cfg.vocab)}, {"hidden", double(cfg.hidden)}}, .stage = stage});
  for (std::int64_t i = 1; i <= cfg.layers; ++i) {
    const std::string attn = layer_name("attention", i), ffn = layer_name("ffn", i);
    nodes.back().users.push_back(attn);
    add({.name = attn, .kind = OpKind::ParametricOp, .op_class = OpClass::AttentionBlock, .users = {ffn},
         .args = {prev}, .kwargs = {{"heads", double(cfg.heads)}}, .stage = ++stage});
    add({.name = ffn, .kind = OpKind::ParametricOp, .op_class = OpClass::FfnBlock, .args = {attn},
         .kwargs = {{"ffn_mult", 4.0}}, .stage = ++stage});
    prev = ffn;
  }
  nodes.back().users.push_back("head");
  ++stage;
  add({.name = "head", .kind = OpKind::ParametricOp, .op_class = OpClass::Linear, .users = {"loss"},
       .args = {prev}, .kwargs = {{"out_features", double(cfg.vocab)}}, .stage = stage});
  add({.name = "labels", .kind = OpKind::Placeholder, .op_class = OpClass::Placeholder, .users = {"loss"},
       .output_shape = logits, .stage = stage});
  add({.name = "loss", .kind = OpKind::LossFunction, .op_class = OpClass::CrossEntropy, .args = {"labels", "head"},
       .kwargs = {{"weight", 1.0}}, .stage = stage});

  GraphMeta meta;
  meta.name = cfg.name;
  meta.batch_size = cfg.batch;
  meta.seq_len = cfg.seq;
  meta.optimizer = OptimizerConfig{"sgd", 1e-4};
  return Graph::build(std::move(nodes), std::move(meta));
}

ReferenceModels build_reference_models() {
  return {build_reference_model(bert_large_config()), build_reference_model(gpt3_config())};
}

Graph builtin_model(std::string_view name) {
  if (name == "bert-large" || name == "bert") return build_reference_model(bert_large_config());
  if (name == "gpt3" || name == "gpt-3") return build_reference_model(gpt3_config());
  throw std::invalid_argument("unknown built-in model '" + std::string(name) + "' (expected bert-large or gpt3)");
}

Fleet rtx3080_fleet(Link link) { return make_gpu_fleet("50xRTX3080", "RTX3080", 50, link, PeerRole::Antnode); }

Fleet h100_fleet(Link link) {
  Fleet f = make_gpu_fleet("4xH100", "H100", 4, link, PeerRole::Supernode);
  f.pins = {{1, PeerId(1), true}, {50, PeerId(4), true}};
  return f;
}

std::vector<double> default_bandwidth_grid() { return {0.1, 0.2, 0.5, 1, 2, 3, 5, 8, 10, 20}; }

std::vector<double> default_alpha_grid() { return {0, 0.1, 0.5, 1, 2, 5, 10, 20, 50, 100}; }

// ---------------------------------------------------------------------------
// Sweep

namespace {

SweepRow evaluate_point(const Graph& model, std::span<const StageCost> stages, Fleet fleet, ComputeColumn column,
                        double bw, double alpha_ms, std::int64_t n_b, const ScheduleOptions& opts) {
  SweepRow row;
  row.model = model.meta().name;
  row.fleet = fleet.name;
  row.column = column;
  row.bandwidth_gbps = bw;
  row.alpha_ms = alpha_ms;
  row.n_b = n_b;
  fleet.column = column;
  fleet.default_link = Link::from_bandwidth_gbps(alpha_ms * 1e-3, bw);
  fleet.overrides.clear();
  try {
    const auto report = schedule(stages, fleet, opts);
    if (!report.feasible) {
      row.note = report.violation;
      return row;
    }
    const auto profiles = profiles_from_schedule(report);
    row.feasible = true;
    row.stages_used = profiles.size();
    row.latency_s = fp_latency(profiles);
    row.pipe_time_s = pipeline_time(profiles, n_b);
    row.throughput = throughput(profiles, n_b, static_cast<double>(model.meta().batch_size));
  } catch (const ScheduleError& e) {
    row.note = e.what();
  }
  return row;
}

}  // namespace

SweepResult sweep(const Graph& model, std::span<const Fleet> fleets, const SweepGrid& grid,
                  const ScheduleOptions& opts) {
  if (grid.bandwidth_gbps.empty()) throw std::invalid_argument("bandwidth grid is empty");
  if (grid.alpha_ms.empty()) throw std::invalid_argument("alpha grid is empty");
  if (grid.columns.empty()) throw std::invalid_argument("no compute column selected");
  if (fleets.empty()) throw std::invalid_argument("no fleets to compare");
  if (grid.n_b < 1) throw std::invalid_argument("n_b must be at least 1");
  for (double bw : grid.bandwidth_gbps)
    if (!(bw > 0.0)) throw std::invalid_argument("bandwidth grid values must be positive");
  for (double a : grid.alpha_ms)
    if (!(a >= 0.0)) throw std::invalid_argument("alpha grid values must be non-negative");

  const StagePlan plan = plan_stages(model);
  std::vector<std::future<SweepRow>> pending;
  for (const auto& fleet : fleets)
    for (auto column : grid.columns)
      for (double bw : grid.bandwidth_gbps)
        for (double alpha : grid.alpha_ms)
          pending.push_back(std::async(std::launch::deferred, evaluate_point, std::cref(model),
                                       std::span<const StageCost>(plan.stages), fleet, column, bw, alpha, grid.n_b,
                                       opts));
  SweepResult result;
  result.rows.reserve(pending.size());
  for (auto& f : pending) result.rows.push_back(f.get());
  return result;
}

std::string SweepResult::csv() const {
  std::ostringstream os;
  os.precision(10);
  os << "model,fleet,bandwidth_gbps,alpha_ms,n_b,latency_s,pipe_time_s,throughput,compute\n";
  for (const auto& r : rows) {
    os << r.model << ',' << r.fleet << ',' << r.bandwidth_gbps << ',' << r.alpha_ms << ',' << r.n_b << ',';
    if (r.feasible)
      os << r.latency_s << ',' << r.pipe_time_s << ',' << r.throughput;
    else
      os << "nan,nan,nan";
    os << ',' << to_string(r.column) << '\n';
  }
  return os.str();
}

}  // namespace dagmesh
