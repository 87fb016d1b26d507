#pragma once

// Deterministic discrete-event simulation of the broker/compnode protocol:
// registration, ping-pong liveness, dispatch, message passing, DHT
// checkpoints and failure replacement, around the numeric reference executor.
//
// Time is simulated. Compute takes flops / effective speed (BP is scaled by
// bp_factor), each peer has one serial compute resource and one serial
// inbound link, and a message arrives after the alpha-beta time of its bytes
// once the receiving link is free.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dagmesh/executor.hpp"
#include "dagmesh/perf_model.hpp"
#include "dagmesh/pipeline.hpp"
#include "dagmesh/scheduler.hpp"

namespace dagmesh {

/// Declaration order is the tie-break rank for events at equal times.
enum class SimEventKind { Join, Quit, Ping, Pong, Dispatch, MsgSend, MsgArrive, ComputeDone, CheckpointSync };
std::string_view to_string(SimEventKind kind);

enum class SimMode { Train, Infer };

enum class ScenarioAction { Join, Quit };

struct ScenarioEvent {
  double time_s = 0.0;
  ScenarioAction action = ScenarioAction::Join;
  PeerId peer;
};

struct Scenario {
  bool auto_join = true;  // every fleet peer joins at t = 0
  std::vector<ScenarioEvent> events;
  SimMode mode = SimMode::Train;
  std::int64_t batches = 10;
  int checkpoint_interval = 1;  // update steps between DHT syncs
  int replication = 2;
  double ping_interval_s = 1.0;
  double timeout_s = 3.0;
  std::vector<PeerId> assignment;  // optional stage -> peer override of the scheduler
};

/// JSON: {auto_join, mode, batches, checkpoint_interval, replication,
/// ping_interval_s, timeout_s, assignment, events: [{time_s, action, peer_id}]}.
Scenario parse_scenario(std::string_view text);
Scenario load_scenario_file(const std::filesystem::path& path);

/// scenario.assignment evaluated as given when present, else schedule().
ScheduleReport initial_schedule(const Graph& job, const Fleet& fleet, const Scenario& scenario,
                                const ScheduleOptions& opts = {});

struct LogEntry {
  double time_s = 0.0;
  SimEventKind kind = SimEventKind::Join;
  std::string src;
  std::string dst;
  std::string detail;
};

enum class SimStatus { Completed, Unrecoverable, DataLoss, Deadlock };
std::string_view to_string(SimStatus status);

struct SimCounters {
  std::int64_t joins = 0;
  std::int64_t quits = 0;
  std::int64_t pings = 0;
  std::int64_t pongs = 0;
  std::int64_t dispatches = 0;
  std::int64_t replacements = 0;
  std::int64_t sends = 0;
  std::int64_t arrivals = 0;
  std::int64_t dropped = 0;  // arrivals discarded by a restart or a dead receiver
  std::int64_t computes = 0;
  std::int64_t checkpoints = 0;
};

struct SimReport {
  SimStatus status = SimStatus::Completed;
  std::string error;
  std::vector<LogEntry> log;
  std::vector<double> batch_completion_s;  // in completion order
  std::vector<double> losses;              // per batch, when the job has a loss
  ModelParams params;                      // final committed parameters
  ModelParams checkpoint;                  // parameters held by the DHT at the end
  ScheduleReport schedule;                 // schedule in force at the end
  SimCounters counters;
  double end_time_s = 0.0;

  bool completed() const { return status == SimStatus::Completed; }
  /// Log entries of `kind` whose detail starts with `detail_prefix`.
  std::int64_t count(SimEventKind kind, std::string_view detail_prefix = {}) const;
  /// time_s,kind,src,dst,detail with nine decimals.
  std::string events_csv() const;
  std::string summary() const;
};

struct SimOptions {
  std::uint64_t seed = 0;
  double bp_factor = 2.0;
  ScheduleOptions schedule;
  std::int64_t max_events = 50'000'000;
};

/// Throws std::invalid_argument for an infeasible schedule or a malformed
/// scenario; runtime failures are reported through SimReport::status.
SimReport run_simulation(const Graph& job, const Fleet& fleet, const ScheduleReport& schedule,
                         const Scenario& scenario, const SimOptions& opts = {});

/// Flow-shop replay of n_b batches through fixed stage profiles: each stage
/// reads the batch over its inbound link for R_p, then computes for C_p.
SimReport simulate_pipeline(std::span<const StageProfile> profiles, std::int64_t n_b);

/// DHT key of a node's checkpointed parameters.
std::string checkpoint_key(const Graph& g, std::string_view node);
std::string encode_params(const ops::Params& params);
ops::Params decode_params(std::string_view bytes);

}  // namespace dagmesh
