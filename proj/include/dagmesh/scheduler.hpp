#pragma once

// Min-max assignment of pipeline stages to peers under GPU/CPU/disk capacity.
//
// Stages are placed as contiguous runs along the pipeline order of the fleet
// (fleet order, backups excluded); a peer may receive an empty run. A peer's
// load is the compute time of its run plus the alpha-beta time of every
// message entering the run from another peer.

#include <cstddef>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dagmesh/dag_ir.hpp"
#include "dagmesh/perf_model.hpp"

namespace dagmesh {

class ScheduleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RecoveryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StageInput {
  std::size_t from_stage;  // 0-based, < consuming stage
  double bytes;
};

struct StageCost {
  std::string label;
  double flops = 0.0;
  Footprint memory;
  std::vector<StageInput> inputs;
};

/// Stage list derived from a graph plus the op names behind each stage.
struct StagePlan {
  std::vector<StageCost> stages;
  std::vector<std::vector<std::string>> nodes;
};

/// Uses the `stage` annotations when present; otherwise every non-leaf op is
/// its own stage in topological order and leaves join their first consumer.
StagePlan plan_stages(const Graph& g);

enum class SolverMode { Auto, ExactDp, LocalSearch };

struct ScheduleOptions {
  SolverMode mode = SolverMode::Auto;
  bool include_communication = true;  // false: objective is compute only
  std::size_t dp_limit = 5000;        // |stages| * |peers| bound for the DP
};

struct PeerLoad {
  PeerId peer;
  std::vector<std::size_t> stages;  // 0-based
  double compute_s = 0.0;
  double read_s = 0.0;
  double load_s = 0.0;
  Footprint memory;
};

struct ScheduleReport {
  std::vector<PeerId> pipeline;    // pipeline order of participating peers
  std::vector<PeerId> assignment;  // stage -> peer
  std::vector<PeerLoad> loads;     // one row per pipeline peer
  double makespan = 0.0;
  bool feasible = false;
  std::string violation;  // named constraint when infeasible
  std::vector<std::string> trace;

  const PeerLoad& load_of(PeerId p) const;
};

ScheduleReport schedule(std::span<const StageCost> stages, const Fleet& fleet, const ScheduleOptions& opts = {});

/// Exhaustive search over every contiguous assignment; the oracle for schedule().
ScheduleReport brute_force_schedule(std::span<const StageCost> stages, const Fleet& fleet,
                                    const ScheduleOptions& opts = {}, std::size_t limit = 1'000'000);

/// Exact loads of a given stage -> peer assignment along `pipeline`.
ScheduleReport evaluate_assignment(std::span<const StageCost> stages, const Fleet& fleet,
                                   const std::vector<PeerId>& pipeline, const std::vector<PeerId>& assignment,
                                   const ScheduleOptions& opts = {});

/// Re-checks coverage, contiguity, pins and the three capacity constraints
/// from scratch. Returns the violations found (empty when valid).
std::vector<std::string> check_feasibility(std::span<const StageCost> stages, const Fleet& fleet,
                                           const ScheduleReport& report);

/// Moves the failed peer's stages onto the best available backup, or re-solves
/// over the surviving peers when no backup is available. Throws RecoveryError.
ScheduleReport reschedule_on_failure(const ScheduleReport& report, PeerId failed, std::span<const StageCost> stages,
                                     const Fleet& fleet, const std::set<PeerId>& unavailable = {},
                                     const ScheduleOptions& opts = {});

Placement placement_from(const StagePlan& plan, const ScheduleReport& report);

/// CSV with columns peer_id, stage_ids, C_p_s, R_p_s, load_s, gpu_bytes_used.
std::string schedule_csv(const ScheduleReport& report);
std::string schedule_json(const ScheduleReport& report);

}  // namespace dagmesh
