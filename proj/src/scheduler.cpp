#include "dagmesh/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "json.hpp"

namespace dagmesh {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::string join_stage_ids(const std::vector<std::size_t>& stages, char sep) {
  std::string out;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (i) out += sep;
    out += std::to_string(stages[i] + 1);
  }
  return out;
}

/// Precomputed run tables over the contiguous-partition lattice.
class Lattice {
 public:
  Lattice(std::span<const StageCost> stages, const Fleet& fleet, std::vector<PeerId> pipeline,
          const ScheduleOptions& opts)
      : stages_(stages), fleet_(fleet), pipeline_(std::move(pipeline)), opts_(opts), n_(stages.size()) {
    const std::size_t p = pipeline_.size();
    for (PeerId id : pipeline_) {
      peers_.push_back(&fleet_.peer(id));
      speed_.push_back(effective_speed(*peers_.back(), fleet_.column));
    }
    pin_peer_.assign(n_, -1);
    pin_lo_.assign(p, -1);
    pin_hi_.assign(p, -1);
    exclusive_.assign(p, false);
    for (const auto& pin : fleet_.pins) {
      const auto stage = static_cast<std::size_t>(pin.stage - 1);
      if (stage >= n_) continue;
      auto it = std::find(pipeline_.begin(), pipeline_.end(), pin.peer);
      if (it == pipeline_.end()) continue;
      const int j = static_cast<int>(it - pipeline_.begin());
      if (pin_peer_[stage] != -1 && pin_peer_[stage] != j)
        throw ScheduleError("stage " + std::to_string(pin.stage) + " is pinned to two peers");
      pin_peer_[stage] = j;
      const int s = static_cast<int>(stage);
      pin_lo_[j] = pin_lo_[j] == -1 ? s : std::min(pin_lo_[j], s);
      pin_hi_[j] = std::max(pin_hi_[j], s);
      exclusive_[j] = exclusive_[j] || pin.exclusive;
    }
    const std::size_t w = n_ + 1;
    pinned_any_.assign(w, 0);
    pinned_to_.assign(p * w, 0);
    for (std::size_t k = 0; k < n_; ++k) {
      pinned_any_[k + 1] = pinned_any_[k] + (pin_peer_[k] != -1);
      for (std::size_t j = 0; j < p; ++j)
        pinned_to_[j * w + k + 1] = pinned_to_[j * w + k] + (pin_peer_[k] == static_cast<int>(j));
    }
    for (std::size_t j = 0; j < p; ++j) inbound_.push_back(fleet_.link(pipeline_[j == 0 ? 0 : j - 1], pipeline_[j]));
    flops_.assign(w * w, 0.0);
    count_.assign(w * w, 0.0);
    bytes_.assign(w * w, 0.0);
    mem_.assign(w * w, Footprint{});
    for (std::size_t l = 0; l < n_; ++l) {
      for (std::size_t r = l; r < n_; ++r) {
        flops_[l * w + r + 1] = flops_[l * w + r] + stages_[r].flops;
        mem_[l * w + r + 1] = mem_[l * w + r] + stages_[r].memory;
        double c = count_[l * w + r], b = bytes_[l * w + r];
        for (const auto& in : stages_[r].inputs) {
          if (in.from_stage < l) {
            c += 1.0;
            b += in.bytes;
          }
        }
        count_[l * w + r + 1] = c;
        bytes_[l * w + r + 1] = b;
      }
    }
  }

  std::size_t stages() const { return n_; }
  std::size_t peers() const { return pipeline_.size(); }
  const std::vector<PeerId>& pipeline() const { return pipeline_; }

  bool valid(std::size_t j, std::size_t l, std::size_t r) const {
    if (pin_lo_[j] != -1 && (static_cast<int>(l) > pin_lo_[j] || static_cast<int>(r) <= pin_hi_[j])) return false;
    if (l == r) return true;
    const int pinned_here = pinned_to_[j * (n_ + 1) + r] - pinned_to_[j * (n_ + 1) + l];
    const int pinned_any = pinned_any_[r] - pinned_any_[l];
    if (pinned_any != pinned_here) return false;
    if (exclusive_[j] && pinned_here != static_cast<int>(r - l)) return false;
    return mem_[l * (n_ + 1) + r].fits(*peers_[j]);
  }

  double cost(std::size_t j, std::size_t l, std::size_t r) const {
    if (l == r) return 0.0;
    const std::size_t w = n_ + 1;
    double t = flops_[l * w + r] / speed_[j];
    if (opts_.include_communication && count_[l * w + r] > 0.0)
      t += count_[l * w + r] * inbound_[j].alpha_s + inbound_[j].beta_s_per_byte * bytes_[l * w + r];
    return t;
  }

  std::vector<PeerId> assignment_from(const std::vector<std::size_t>& bounds) const {
    std::vector<PeerId> a(n_);
    for (std::size_t j = 0; j < peers(); ++j)
      for (std::size_t k = bounds[j]; k < bounds[j + 1]; ++k) a[k] = pipeline_[j];
    return a;
  }

  /// Best guess at which constraint makes the instance infeasible.
  std::string diagnose() const {
    const char* dims[] = {"gpu", "cpu", "disk"};
    for (int d = 0; d < 3; ++d) {
      auto pick = [d](const Footprint& f) { return d == 0 ? f.gpu_bytes : d == 1 ? f.cpu_bytes : f.disk_bytes; };
      auto cap = [d](const Peer& p) { return d == 0 ? p.gpu_bytes : d == 1 ? p.cpu_bytes : p.disk_bytes; };
      double demand = 0.0, supply = 0.0, biggest_cap = 0.0;
      for (const auto& s : stages_) demand += pick(s.memory);
      for (const auto* p : peers_) {
        supply += cap(*p);
        biggest_cap = std::max(biggest_cap, cap(*p));
      }
      for (std::size_t k = 0; k < n_; ++k)
        if (pick(stages_[k].memory) > biggest_cap)
          return std::string(dims[d]) + " capacity: stage " + std::to_string(k + 1) + " exceeds every peer";
      if (demand > supply) return std::string(dims[d]) + " capacity: total demand exceeds the fleet";
    }
    return "memory capacity or pins: no contiguous split satisfies all constraints";
  }

 private:
  std::span<const StageCost> stages_;
  const Fleet& fleet_;
  std::vector<PeerId> pipeline_;
  ScheduleOptions opts_;
  std::size_t n_;
  std::vector<const Peer*> peers_;
  std::vector<double> speed_;
  std::vector<int> pin_peer_, pin_lo_, pin_hi_;
  std::vector<bool> exclusive_;
  std::vector<int> pinned_any_, pinned_to_;
  std::vector<Link> inbound_;
  std::vector<double> flops_, count_, bytes_;
  std::vector<Footprint> mem_;
};

ScheduleReport infeasible_report(const Lattice& lat, std::string why) {
  ScheduleReport r;
  r.pipeline = lat.pipeline();
  r.feasible = false;
  r.makespan = kInf;
  r.violation = std::move(why);
  return r;
}

std::size_t used_runs(const std::vector<std::size_t>& bounds) {
  std::size_t used = 0;
  for (std::size_t j = 0; j + 1 < bounds.size(); ++j) used += bounds[j + 1] > bounds[j];
  return used;
}

ScheduleReport solve_dp(std::span<const StageCost> stages, const Fleet& fleet, const Lattice& lat,
                        const ScheduleOptions& opts) {
  const std::size_t n = lat.stages(), p = lat.peers(), w = n + 1;
  // Phase 1: minimal makespan.
  std::vector<double> best((p + 1) * w, kInf);
  best[0] = 0.0;
  for (std::size_t j = 1; j <= p; ++j) {
    for (std::size_t i = 0; i <= n; ++i) {
      double b = kInf;
      for (std::size_t l = 0; l <= i; ++l) {
        const double prev = best[(j - 1) * w + l];
        if (prev == kInf || !lat.valid(j - 1, l, i)) continue;
        b = std::min(b, std::max(prev, lat.cost(j - 1, l, i)));
      }
      best[j * w + i] = b;
    }
  }
  const double target = best[p * w + n];
  if (target == kInf) return infeasible_report(lat, lat.diagnose());

  // Phase 2: among makespan-optimal splits, use as many peers as possible.
  const double cap = target * (1.0 + 1e-12);
  std::vector<long> used((p + 1) * w, -1);
  used[0] = 0;
  for (std::size_t j = 1; j <= p; ++j) {
    for (std::size_t i = 0; i <= n; ++i) {
      long u = -1;
      for (std::size_t l = 0; l <= i; ++l) {
        const long prev = used[(j - 1) * w + l];
        if (prev < 0 || !lat.valid(j - 1, l, i) || lat.cost(j - 1, l, i) > cap) continue;
        u = std::max(u, prev + (l < i ? 1 : 0));
      }
      used[j * w + i] = u;
    }
  }
  std::vector<std::size_t> bounds(p + 1, 0);
  bounds[p] = n;
  for (std::size_t j = p, i = n; j >= 1; --j) {
    // Shortest admissible final run keeps earlier (lower-id) peers loaded first.
    for (std::size_t l = i + 1; l-- > 0;) {
      const long prev = used[(j - 1) * w + l];
      if (prev < 0 || !lat.valid(j - 1, l, i) || lat.cost(j - 1, l, i) > cap) continue;
      if (prev + (l < i ? 1 : 0) == used[j * w + i]) {
        bounds[j - 1] = l;
        i = l;
        break;
      }
    }
  }
  auto report = evaluate_assignment(stages, fleet, lat.pipeline(), lat.assignment_from(bounds), opts);
  std::ostringstream os;
  os << "exact DP over " << n << " stages x " << p << " peers: makespan " << target << ", " << used_runs(bounds)
     << " peers used";
  report.trace.push_back(os.str());
  return report;
}

// Lexicographic score: invalid runs first, then loads sorted descending.
struct Score {
  std::size_t invalid = 0;
  std::vector<double> loads;
  bool operator<(const Score& o) const {
    if (invalid != o.invalid) return invalid < o.invalid;
    return std::lexicographical_compare(loads.begin(), loads.end(), o.loads.begin(), o.loads.end());
  }
};

Score score(const Lattice& lat, const std::vector<std::size_t>& b) {
  Score s;
  for (std::size_t j = 0; j < lat.peers(); ++j) {
    if (!lat.valid(j, b[j], b[j + 1])) ++s.invalid;
    s.loads.push_back(lat.cost(j, b[j], b[j + 1]));
  }
  std::sort(s.loads.begin(), s.loads.end(), std::greater<>());
  return s;
}

ScheduleReport solve_local_search(std::span<const StageCost> stages, const Fleet& fleet, const Lattice& lat,
                                  const ScheduleOptions& opts) {
  const std::size_t n = lat.stages(), p = lat.peers();
  // Proportional-prefix start: peer j ends where cumulative FLOPs reach its
  // cumulative share of fleet speed.
  std::vector<double> speed(p);
  double total_speed = 0.0, total_flops = 0.0;
  for (std::size_t j = 0; j < p; ++j) {
    speed[j] = effective_speed(fleet.peer(lat.pipeline()[j]), fleet.column);
    total_speed += speed[j];
  }
  for (const auto& s : stages) total_flops += s.flops;
  std::vector<std::size_t> b(p + 1, 0);
  b[p] = n;
  double share = 0.0, acc = 0.0;
  std::size_t k = 0;
  for (std::size_t j = 0; j + 1 < p; ++j) {
    share += speed[j] / total_speed;
    while (k < n && acc + 0.5 * stages[k].flops <= share * total_flops) acc += stages[k++].flops;
    b[j + 1] = k;
  }
  // Greedy packing under a bottleneck target: each peer in order takes the
  // longest valid run whose cost stays within the target.
  auto pack = [&](double target) {
    std::vector<std::size_t> g(p + 1, 0);
    g[p] = n;
    std::size_t l = 0;
    for (std::size_t j = 0; j + 1 < p; ++j) {
      std::size_t r = l;
      for (std::size_t v = l + 1; v <= n; ++v) {
        if (!lat.valid(j, l, v)) break;
        if (lat.cost(j, l, v) <= target) r = v;
      }
      g[j + 1] = l = r;
    }
    return g;
  };
  auto climb = [&](std::vector<std::size_t>& b, std::size_t& rounds) {
    Score current = score(lat, b);
    for (;; ++rounds) {
      Score best_score = current;
      std::vector<std::size_t> best_b;
      for (std::size_t t = 1; t < p; ++t) {
        const std::size_t orig = b[t];
        for (std::size_t v = b[t - 1]; v <= b[t + 1]; ++v) {
          if (v == orig) continue;
          b[t] = v;
          Score s = score(lat, b);
          if (s < best_score) {
            best_score = std::move(s);
            best_b = b;
          }
        }
        b[t] = orig;
      }
      if (best_b.empty()) return current;
      b = std::move(best_b);
      current = std::move(best_score);
    }
  };
  std::vector<std::vector<std::size_t>> starts{b, pack(kInf)};
  {
    // Bisect on the target using the packer as a feasibility test.
    double lo = 0.0, hi = 0.0;
    for (std::size_t j = 0; j < p; ++j) hi = std::max(hi, lat.cost(j, 0, n));
    for (int it = 0; it < 100 && hi > 0.0; ++it) {
      const double mid = 0.5 * (lo + hi);
      const Score sc = score(lat, pack(mid));
      if (sc.invalid == 0 && sc.loads.front() <= mid)
        hi = mid;
      else
        lo = mid;
    }
    starts.push_back(pack(hi));
  }
  std::size_t rounds = 0;
  Score current;
  bool have = false;
  for (auto& s : starts) {
    Score sc = climb(s, rounds);
    if (!have || sc < current) {
      current = std::move(sc);
      b = s;
      have = true;
    }
  }
  if (current.invalid > 0) return infeasible_report(lat, lat.diagnose());
  auto report = evaluate_assignment(stages, fleet, lat.pipeline(), lat.assignment_from(b), opts);
  report.trace.push_back("proportional, packed and bisected starts + boundary hill climbing: " + std::to_string(rounds) +
                         " improving moves");
  return report;
}

std::vector<PeerId> require_pipeline(const Fleet& fleet) {
  auto pipeline = fleet.pipeline_peers();
  if (pipeline.empty()) throw ScheduleError("empty fleet: no peers available for scheduling");
  return pipeline;
}

}  // namespace

const PeerLoad& ScheduleReport::load_of(PeerId p) const {
  for (const auto& l : loads)
    if (l.peer == p) return l;
  throw std::invalid_argument("peer " + to_string(p) + " is not part of the schedule");
}

ScheduleReport schedule(std::span<const StageCost> stages, const Fleet& fleet, const ScheduleOptions& opts) {
  if (stages.empty()) throw ScheduleError("nothing to schedule: no stages");
  Lattice lat(stages, fleet, require_pipeline(fleet), opts);
  SolverMode mode = opts.mode;
  if (mode == SolverMode::Auto)
    mode = stages.size() * lat.peers() <= opts.dp_limit ? SolverMode::ExactDp : SolverMode::LocalSearch;
  return mode == SolverMode::ExactDp ? solve_dp(stages, fleet, lat, opts) : solve_local_search(stages, fleet, lat, opts);
}

ScheduleReport brute_force_schedule(std::span<const StageCost> stages, const Fleet& fleet,
                                    const ScheduleOptions& opts, std::size_t limit) {
  if (stages.empty()) throw ScheduleError("nothing to schedule: no stages");
  Lattice lat(stages, fleet, require_pipeline(fleet), opts);
  const std::size_t n = lat.stages(), p = lat.peers();
  // C(n + p - 1, p - 1) contiguous splits with empty runs allowed.
  double combos = 1.0;
  for (std::size_t i = 1; i < p; ++i) combos = combos * static_cast<double>(n + i) / static_cast<double>(i);
  if (combos > static_cast<double>(limit))
    throw ScheduleError("instance too large for brute force: " + std::to_string(static_cast<long long>(combos)) +
                        " contiguous assignments");

  std::vector<std::size_t> b(p + 1, 0), best_b;
  b[p] = n;
  double best = kInf;
  std::size_t best_used = 0;
  auto visit = [&](auto&& self, std::size_t j) -> void {
    if (j == p) {
      for (std::size_t q = 0; q < p; ++q)
        if (!lat.valid(q, b[q], b[q + 1])) return;
      const auto r = evaluate_assignment(stages, fleet, lat.pipeline(), lat.assignment_from(b), opts);
      const std::size_t u = used_runs(b);
      if (r.makespan < best || (r.makespan == best && u > best_used)) {
        best = r.makespan;
        best_used = u;
        best_b = b;
      }
      return;
    }
    if (j == p - 1) {
      self(self, p);
      return;
    }
    for (std::size_t v = b[j]; v <= n; ++v) {
      b[j + 1] = v;
      self(self, j + 1);
    }
  };
  visit(visit, 0);
  if (best_b.empty()) return infeasible_report(lat, lat.diagnose());
  auto report = evaluate_assignment(stages, fleet, lat.pipeline(), lat.assignment_from(best_b), opts);
  report.trace.push_back("brute force over " + std::to_string(static_cast<long long>(combos)) +
                         " contiguous assignments");
  return report;
}

ScheduleReport evaluate_assignment(std::span<const StageCost> stages, const Fleet& fleet,
                                   const std::vector<PeerId>& pipeline, const std::vector<PeerId>& assignment,
                                   const ScheduleOptions& opts) {
  if (assignment.size() != stages.size()) throw ScheduleError("assignment does not cover every stage exactly once");
  ScheduleReport r;
  r.pipeline = pipeline;
  r.assignment = assignment;
  r.feasible = true;
  for (PeerId id : pipeline) {
    const Peer& peer = fleet.peer(id);
    PeerLoad load;
    load.peer = id;
    double flops = 0.0;
    for (std::size_t k = 0; k < stages.size(); ++k) {
      if (assignment[k] != id) continue;
      load.stages.push_back(k);
      flops += stages[k].flops;
      load.memory += stages[k].memory;
      for (const auto& in : stages[k].inputs) {
        const PeerId src = assignment.at(in.from_stage);
        if (src != id) load.read_s += comm_time(fleet.link(src, id), in.bytes);
      }
    }
    load.compute_s = flops / effective_speed(peer, fleet.column);
    load.load_s = load.compute_s + (opts.include_communication ? load.read_s : 0.0);
    if (r.feasible) {
      const std::string v = load.memory.violated_by(peer);
      if (!v.empty()) {
        r.feasible = false;
        r.violation = v + " capacity exceeded on peer " + to_string(id);
      }
    }
    r.makespan = std::max(r.makespan, load.load_s);
    r.loads.push_back(std::move(load));
  }
  for (std::size_t k = 0; k < stages.size(); ++k)
    if (std::find(pipeline.begin(), pipeline.end(), assignment[k]) == pipeline.end())
      throw ScheduleError("stage " + std::to_string(k + 1) + " assigned to a peer outside the pipeline");
  return r;
}

std::vector<std::string> check_feasibility(std::span<const StageCost> stages, const Fleet& fleet,
                                           const ScheduleReport& report) {
  std::vector<std::string> problems;
  if (report.assignment.size() != stages.size()) {
    problems.push_back("assignment covers " + std::to_string(report.assignment.size()) + " of " +
                       std::to_string(stages.size()) + " stages");
    return problems;
  }
  std::map<PeerId, std::size_t> position;
  for (std::size_t j = 0; j < report.pipeline.size(); ++j) position[report.pipeline[j]] = j;
  std::size_t last_pos = 0;
  std::map<PeerId, Footprint> used;
  for (std::size_t k = 0; k < stages.size(); ++k) {
    const PeerId p = report.assignment[k];
    auto it = position.find(p);
    if (it == position.end() || !fleet.has_peer(p)) {
      problems.push_back("stage " + std::to_string(k + 1) + " assigned to unknown peer " + to_string(p));
      continue;
    }
    if (it->second < last_pos) problems.push_back("stage " + std::to_string(k + 1) + " breaks pipeline contiguity");
    last_pos = it->second;
    used[p] += stages[k].memory;
  }
  for (const auto& [p, f] : used) {
    if (!fleet.has_peer(p)) continue;
    const Peer& peer = fleet.peer(p);
    if (f.gpu_bytes > peer.gpu_bytes) problems.push_back("gpu capacity exceeded on peer " + to_string(p));
    if (f.cpu_bytes > peer.cpu_bytes) problems.push_back("cpu capacity exceeded on peer " + to_string(p));
    if (f.disk_bytes > peer.disk_bytes) problems.push_back("disk capacity exceeded on peer " + to_string(p));
  }
  for (const auto& pin : fleet.pins) {
    const auto k = static_cast<std::size_t>(pin.stage - 1);
    if (k >= stages.size() || !position.contains(pin.peer)) continue;
    if (report.assignment[k] != pin.peer)
      problems.push_back("stage " + std::to_string(pin.stage) + " is not on its pinned peer");
    if (pin.exclusive)
      for (std::size_t q = 0; q < stages.size(); ++q) {
        if (report.assignment[q] != pin.peer) continue;
        const bool pinned_here = std::any_of(fleet.pins.begin(), fleet.pins.end(), [&](const Pin& o) {
          return o.peer == pin.peer && static_cast<std::size_t>(o.stage - 1) == q;
        });
        if (!pinned_here) problems.push_back("exclusive peer " + to_string(pin.peer) + " hosts unpinned stage " +
                                             std::to_string(q + 1));
      }
  }
  return problems;
}

ScheduleReport reschedule_on_failure(const ScheduleReport& report, PeerId failed, std::span<const StageCost> stages,
                                     const Fleet& fleet, const std::set<PeerId>& unavailable,
                                     const ScheduleOptions& opts) {
  auto pos = std::find(report.pipeline.begin(), report.pipeline.end(), failed);
  if (pos == report.pipeline.end())
    throw std::invalid_argument("peer " + to_string(failed) + " is not part of the schedule");

  std::vector<PeerId> backups;
  for (PeerId b : fleet.backup_pool)
    if (b != failed && !unavailable.contains(b) &&
        std::find(report.pipeline.begin(), report.pipeline.end(), b) == report.pipeline.end())
      backups.push_back(b);

  if (!backups.empty()) {
    std::optional<ScheduleReport> best;
    std::vector<std::string> rejected;
    for (PeerId b : backups) {  // ascending id; strict improvement keeps the lowest id on ties
      auto pipeline = report.pipeline;
      pipeline[static_cast<std::size_t>(pos - report.pipeline.begin())] = b;
      auto assignment = report.assignment;
      std::replace(assignment.begin(), assignment.end(), failed, b);
      auto candidate = evaluate_assignment(stages, fleet, pipeline, assignment, opts);
      if (!candidate.feasible) {
        rejected.push_back("backup " + to_string(b) + ": " + candidate.violation);
        continue;
      }
      if (!best || candidate.makespan < best->makespan) best = std::move(candidate);
    }
    if (!best) {
      std::string why = "no feasible recovery for peer " + to_string(failed) + ":";
      for (const auto& r : rejected) why += " " + r + ";";
      throw RecoveryError(why);
    }
    best->trace = report.trace;
    best->trace.push_back("peer " + to_string(failed) + " failed; backup " +
                          to_string(best->pipeline[static_cast<std::size_t>(pos - report.pipeline.begin())]) +
                          " inherits its stages");
    return *best;
  }

  Fleet survivors = fleet;
  survivors.peers.clear();
  for (const auto& p : fleet.peers)
    if (p.id != failed && !unavailable.contains(p.id) &&
        std::find(report.pipeline.begin(), report.pipeline.end(), p.id) != report.pipeline.end())
      survivors.peers.push_back(p);
  survivors.backup_pool.clear();
  std::erase_if(survivors.pins, [&](const Pin& pin) { return pin.peer == failed || !survivors.has_peer(pin.peer); });
  if (survivors.peers.empty()) throw RecoveryError("no feasible recovery: no surviving peers");
  auto resolved = schedule(stages, survivors, opts);
  if (!resolved.feasible) throw RecoveryError("no feasible recovery over surviving peers: " + resolved.violation);
  resolved.trace.insert(resolved.trace.begin(), "peer " + to_string(failed) + " failed; no backup available, re-solved");
  return resolved;
}

Placement placement_from(const StagePlan& plan, const ScheduleReport& report) {
  Placement placement;
  for (std::size_t k = 0; k < plan.nodes.size(); ++k)
    for (const auto& name : plan.nodes[k]) placement[name] = report.assignment.at(k);
  return placement;
}

StagePlan plan_stages(const Graph& g) {
  std::map<std::string, int, std::less<>> stage_of;
  const bool annotated = std::any_of(g.nodes().begin(), g.nodes().end(), [](const auto& kv) {
    return kv.second.stage.has_value();
  });
  int next = 0;
  for (const auto& name : g.topo_order()) {
    const OpNode& n = g.node(name);
    if (annotated) {
      if (n.stage) {
        if (*n.stage < 1) throw ScheduleError(name + ": stage numbers start at 1");
        stage_of[name] = *n.stage - 1;
      } else if (!n.is_leaf()) {
        throw ScheduleError(name + ": missing stage annotation");
      }
    } else if (!n.is_leaf()) {
      stage_of[name] = next++;
    }
  }
  // Leaves without a stage join their earliest consumer.
  for (const auto& name : g.topo_order()) {
    const OpNode& n = g.node(name);
    if (stage_of.contains(name)) continue;
    int s = -1;
    for (const auto& u : n.users) {
      auto it = stage_of.find(u);
      if (it != stage_of.end()) s = s == -1 ? it->second : std::min(s, it->second);
    }
    stage_of[name] = s == -1 ? 0 : s;
  }
  int count = 0;
  for (const auto& [_, s] : stage_of) count = std::max(count, s + 1);
  StagePlan plan;
  plan.stages.resize(static_cast<std::size_t>(count));
  plan.nodes.resize(static_cast<std::size_t>(count));
  for (const auto& name : g.topo_order()) {
    const auto k = static_cast<std::size_t>(stage_of[name]);
    const OpNode& n = g.node(name);
    plan.nodes[k].push_back(name);
    plan.stages[k].flops += op_flops(n);
    plan.stages[k].memory += node_footprint(n);
  }
  for (std::size_t k = 0; k < plan.stages.size(); ++k) {
    if (plan.nodes[k].empty()) throw ScheduleError("stage " + std::to_string(k + 1) + " has no nodes");
    plan.stages[k].label = plan.nodes[k].size() == 1 ? plan.nodes[k][0]
                                                     : plan.nodes[k].front() + ".." + plan.nodes[k].back();
    std::set<std::string> received;
    for (const auto& name : plan.nodes[k]) {
      for (const auto& a : g.node(name).args) {
        const auto from = static_cast<std::size_t>(stage_of[a]);
        if (from == k || !received.insert(a).second) continue;
        if (from > k) throw ScheduleError("stage order contradicts data flow: " + a + " feeds an earlier stage");
        plan.stages[k].inputs.push_back({from, output_bytes(g.node(a))});
      }
    }
  }
  return plan;
}

std::string schedule_csv(const ScheduleReport& report) {
  std::ostringstream os;
  os.precision(17);
  os << "peer_id,stage_ids,C_p_s,R_p_s,load_s,gpu_bytes_used\n";
  for (const auto& l : report.loads)
    os << l.peer << ',' << join_stage_ids(l.stages, ';') << ',' << l.compute_s << ',' << l.read_s << ','
       << l.load_s << ',' << l.memory.gpu_bytes << '\n';
  return os.str();
}

std::string schedule_json(const ScheduleReport& report) {
  using nlohmann::json;
  json peers = json::array();
  for (const auto& l : report.loads) {
    std::vector<std::size_t> ids;
    for (auto s : l.stages) ids.push_back(s + 1);
    peers.push_back({{"peer_id", l.peer.value},
                     {"stage_ids", ids},
                     {"C_p_s", l.compute_s},
                     {"R_p_s", l.read_s},
                     {"load_s", l.load_s},
                     {"gpu_bytes_used", l.memory.gpu_bytes},
                     {"cpu_bytes_used", l.memory.cpu_bytes},
                     {"disk_bytes_used", l.memory.disk_bytes}});
  }
  std::vector<int> assignment;
  for (auto p : report.assignment) assignment.push_back(p.value);
  json doc = {{"feasible", report.feasible},
              {"makespan_s", report.feasible ? json(report.makespan) : json(nullptr)},
              {"violation", report.violation},
              {"assignment", assignment},
              {"peers", peers},
              {"trace", report.trace}};
  return doc.dump(2) + "\n";
}

}  // namespace dagmesh
