#pragma once

// Closed-form pipeline analysis: FP latency, pipelined batch cost, throughput,
// the reference transformer models and bandwidth/latency sweeps.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dagmesh/dag_ir.hpp"
#include "dagmesh/perf_model.hpp"
#include "dagmesh/scheduler.hpp"

namespace dagmesh {

struct StageProfile {
  PeerId peer;
  double compute_s = 0.0;  // C_p per batch
  double read_s = 0.0;     // R_p per batch
};

/// Sum over stages of C_p + R_p.
double fp_latency(std::span<const StageProfile> profiles);
/// max over stages of max(C_p, R_p): the steady-state bottleneck.
double bottleneck(std::span<const StageProfile> profiles);
/// fp_latency + (n_b - 1) * bottleneck. Throws std::invalid_argument for n_b < 1.
double pipeline_time(std::span<const StageProfile> profiles, std::int64_t n_b);
/// n_b * samples_per_batch / pipeline_time.
double throughput(std::span<const StageProfile> profiles, std::int64_t n_b, double samples_per_batch);
/// Limit of throughput as n_b grows.
double asymptotic_throughput(std::span<const StageProfile> profiles, double samples_per_batch);

/// Non-empty runs of a schedule in pipeline order.
std::vector<StageProfile> profiles_from_schedule(const ScheduleReport& report);

struct ReferenceModelConfig {
  std::string name;
  std::int64_t hidden = 1024;
  std::int64_t heads = 16;
  std::int64_t layers = 24;
  std::int64_t vocab = 30522;
  std::int64_t batch = 8;
  std::int64_t seq = 512;
};

ReferenceModelConfig bert_large_config();
ReferenceModelConfig gpt3_config();

/// Embedding cell, one attention cell and one FFN cell per layer, and a head
/// cell (projection, labels, loss): 2 * layers + 2 stage-annotated cells.
Graph build_reference_model(const ReferenceModelConfig& cfg);

struct ReferenceModels {
  Graph bert_large;
  Graph gpt3;
};
ReferenceModels build_reference_models();

/// "bert-large" or "gpt3".
Graph builtin_model(std::string_view name);

/// 50 x RTX 3080 antnodes.
Fleet rtx3080_fleet(Link link);
/// 4 x H100 supernodes; the first and last cells are pinned to the first and
/// last peer, which host the data and the loss.
Fleet h100_fleet(Link link);

std::vector<double> default_bandwidth_grid();  // Gbit/s
std::vector<double> default_alpha_grid();      // ms

struct SweepGrid {
  std::vector<double> bandwidth_gbps = default_bandwidth_grid();
  std::vector<double> alpha_ms = default_alpha_grid();
  std::int64_t n_b = 512;
  std::vector<ComputeColumn> columns{ComputeColumn::Fp32, ComputeColumn::Tensor};
};

struct SweepRow {
  std::string model;
  std::string fleet;
  ComputeColumn column = ComputeColumn::Tensor;
  double bandwidth_gbps = 0.0;
  double alpha_ms = 0.0;
  std::int64_t n_b = 1;
  bool feasible = false;
  std::string note;  // violated constraint when infeasible
  double latency_s = 0.0;
  double pipe_time_s = 0.0;
  double throughput = 0.0;
  std::size_t stages_used = 0;
};

struct SweepResult {
  std::vector<SweepRow> rows;

  /// Columns model, fleet, bandwidth_gbps, alpha_ms, n_b, latency_s,
  /// pipe_time_s, throughput, compute. Infeasible points carry "nan".
  std::string csv() const;
};

/// Schedules every fleet at every grid point and compute column. Rows are
/// ordered by fleet, column, bandwidth, alpha. Throws std::invalid_argument on
/// an empty grid.
SweepResult sweep(const Graph& model, std::span<const Fleet> fleets, const SweepGrid& grid,
                  const ScheduleOptions& opts = {});

}  // namespace dagmesh
