#include "dagmesh/sim.hpp"

#include <algorithm>
#include <cstring>
#include <deque>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <sstream>
#include <stdexcept>
#include <variant>

#include "dagmesh/dht.hpp"
#include "json.hpp"

namespace dagmesh {

std::string_view to_string(SimEventKind kind) {
  switch (kind) {
    case SimEventKind::Join: return "Join";
    case SimEventKind::Quit: return "Quit";
    case SimEventKind::Ping: return "Ping";
    case SimEventKind::Pong: return "Pong";
    case SimEventKind::Dispatch: return "Dispatch";
    case SimEventKind::MsgSend: return "MsgSend";
    case SimEventKind::MsgArrive: return "MsgArrive";
    case SimEventKind::ComputeDone: return "ComputeDone";
    case SimEventKind::CheckpointSync: return "CheckpointSync";
  }
  return "?";
}

std::string_view to_string(SimStatus status) {
  switch (status) {
    case SimStatus::Completed: return "completed";
    case SimStatus::Unrecoverable: return "unrecoverable";
    case SimStatus::DataLoss: return "data-loss";
    case SimStatus::Deadlock: return "deadlock";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Scenario files

Scenario parse_scenario(std::string_view text) {
  using nlohmann::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("scenario: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("scenario: top level must be an object");
  Scenario s;
  try {
    s.auto_join = j.value("auto_join", s.auto_join);
    const std::string mode = j.value("mode", std::string("train"));
    if (mode == "train")
      s.mode = SimMode::Train;
    else if (mode == "infer")
      s.mode = SimMode::Infer;
    else
      throw std::invalid_argument("scenario: mode must be 'train' or 'infer'");
    s.batches = j.value("batches", s.batches);
    s.checkpoint_interval = j.value("checkpoint_interval", s.checkpoint_interval);
    s.replication = j.value("replication", s.replication);
    s.ping_interval_s = j.value("ping_interval_s", s.ping_interval_s);
    s.timeout_s = j.value("timeout_s", s.timeout_s);
    if (j.contains("assignment"))
      for (const auto& p : j.at("assignment")) s.assignment.emplace_back(p.get<std::int32_t>());
    if (j.contains("events"))
      for (const auto& e : j.at("events")) {
        ScenarioEvent ev;
        ev.time_s = e.at("time_s").get<double>();
        const std::string action = e.at("action").get<std::string>();
        if (action == "join")
          ev.action = ScenarioAction::Join;
        else if (action == "quit")
          ev.action = ScenarioAction::Quit;
        else
          throw std::invalid_argument("scenario: unknown action '" + action + "'");
        ev.peer = PeerId(e.at("peer_id").get<std::int32_t>());
        s.events.push_back(ev);
      }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("scenario: ") + e.what());
  }
  if (s.batches < 1) throw std::invalid_argument("scenario: batches must be >= 1");
  if (s.checkpoint_interval < 1) throw std::invalid_argument("scenario: checkpoint_interval must be >= 1");
  if (s.replication < 1) throw std::invalid_argument("scenario: replication must be >= 1");
  if (!(s.ping_interval_s > 0.0) || !(s.timeout_s > 0.0))
    throw std::invalid_argument("scenario: ping interval and timeout must be positive");
  for (std::size_t i = 1; i < s.events.size(); ++i)
    if (s.events[i].time_s < s.events[i - 1].time_s)
      throw std::invalid_argument("scenario: event times must be sorted");
  for (const auto& e : s.events)
    if (e.time_s < 0.0) throw std::invalid_argument("scenario: event times must be >= 0");
  return s;
}

Scenario load_scenario_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open scenario file '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_scenario(buf.str());
}

ScheduleReport initial_schedule(const Graph& job, const Fleet& fleet, const Scenario& scenario,
                                const ScheduleOptions& opts) {
  const StagePlan plan = plan_stages(job);
  if (scenario.assignment.empty()) return schedule(plan.stages, fleet, opts);
  ScheduleReport r = evaluate_assignment(plan.stages, fleet, fleet.pipeline_peers(), scenario.assignment, opts);
  const auto problems = check_feasibility(plan.stages, fleet, r);
  if (!problems.empty()) {
    r.feasible = false;
    r.violation = problems.front();
  }
  return r;
}

// ---------------------------------------------------------------------------
// Parameter checkpoints

std::string checkpoint_key(const Graph& g, std::string_view node) {
  return (g.meta().name.empty() ? std::string("job") : g.meta().name) + "/" + std::string(node);
}

namespace {

template <class T>
void put_raw(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T get_raw(std::string_view& in) {
  if (in.size() < sizeof(T)) throw std::invalid_argument("truncated parameter checkpoint");
  T v;
  std::memcpy(&v, in.data(), sizeof(T));
  in.remove_prefix(sizeof(T));
  return v;
}

}  // namespace

std::string encode_params(const ops::Params& params) {
  std::string out;
  put_raw<std::uint64_t>(out, params.size());
  for (const auto& [name, t] : params) {
    put_raw<std::uint64_t>(out, name.size());
    out += name;
    put_raw<std::uint64_t>(out, t.shape.size());
    for (auto d : t.shape) put_raw<std::int64_t>(out, d);
    put_raw<std::uint64_t>(out, t.data.size());
    for (double v : t.data) put_raw<double>(out, v);
  }
  return out;
}

ops::Params decode_params(std::string_view in) {
  ops::Params out;
  const auto count = get_raw<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get_raw<std::uint64_t>(in);
    if (in.size() < len) throw std::invalid_argument("truncated parameter checkpoint");
    std::string name(in.substr(0, len));
    in.remove_prefix(len);
    Shape shape(get_raw<std::uint64_t>(in));
    for (auto& d : shape) d = get_raw<std::int64_t>(in);
    std::vector<double> values(get_raw<std::uint64_t>(in));
    for (auto& v : values) v = get_raw<double>(in);
    out.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!in.empty()) throw std::invalid_argument("trailing bytes in parameter checkpoint");
  return out;
}

// ---------------------------------------------------------------------------
// Report

std::int64_t SimReport::count(SimEventKind kind, std::string_view detail_prefix) const {
  return std::count_if(log.begin(), log.end(),
                       [&](const LogEntry& e) { return e.kind == kind && e.detail.starts_with(detail_prefix); });
}

std::string SimReport::events_csv() const {
  std::ostringstream os;
  os << "time_s,kind,src,dst,detail\n" << std::fixed << std::setprecision(9);
  for (const auto& e : log) os << e.time_s << ',' << to_string(e.kind) << ',' << e.src << ',' << e.dst << ',' << e.detail << '\n';
  return os.str();
}

std::string SimReport::summary() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "status: " << to_string(status) << '\n';
  if (!error.empty()) os << "error: " << error << '\n';
  os << "end_time_s: " << end_time_s << '\n';
  os << "batches_completed: " << batch_completion_s.size() << '\n';
  if (!batch_completion_s.empty()) os << "last_batch_completion_s: " << batch_completion_s.back() << '\n';
  if (!losses.empty()) os << "final_loss: " << losses.back() << '\n';
  os << "events: " << log.size() << '\n';
  os << "joins: " << counters.joins << '\n';
  os << "quits: " << counters.quits << '\n';
  os << "pings: " << counters.pings << '\n';
  os << "pongs: " << counters.pongs << '\n';
  os << "dispatches: " << counters.dispatches << '\n';
  os << "replacements: " << counters.replacements << '\n';
  os << "messages_sent: " << counters.sends << '\n';
  os << "messages_arrived: " << counters.arrivals << '\n';
  os << "messages_dropped: " << counters.dropped << '\n';
  os << "compute_tasks: " << counters.computes << '\n';
  os << "checkpoints: " << counters.checkpoints << '\n';
  os << "pipeline_peers_used:";
  for (const auto& l : schedule.loads)
    if (!l.stages.empty()) os << ' ' << l.peer;
  os << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Event core

namespace {

const std::string kBroker = "broker";

std::string peer_name(PeerId p) { return "peer" + to_string(p); }

struct ComputePayload {
  TaskResult result;
  std::int64_t batch = 0;
  bool backward = false;
};

using Payload = std::variant<std::monostate, ValueMessage, GradMessage, ComputePayload>;

struct Event {
  double time = 0.0;
  SimEventKind kind = SimEventKind::Join;
  std::uint64_t seq = 0;
  PeerId src;
  PeerId dst;
  std::uint64_t epoch = 0;
  Payload payload;
};

struct Later {
  bool operator()(const Event& a, const Event& b) const {
    if (a.time != b.time) return a.time > b.time;
    if (a.kind != b.kind) return a.kind > b.kind;
    return a.seq > b.seq;
  }
};

/// Priority queue keyed by (time, kind rank, insertion sequence).
class EventQueue {
 public:
  void push(Event e) {
    e.seq = next_seq_++;
    q_.push(std::move(e));
  }
  Event pop() {
    Event e = q_.top();
    q_.pop();
    return e;
  }
  bool empty() const { return q_.empty(); }

 private:
  std::priority_queue<Event, std::vector<Event>, Later> q_;
  std::uint64_t next_seq_ = 0;
};

std::string stage_range(const PeerLoad& l) {
  if (l.stages.empty()) return "none";
  const auto a = l.stages.front() + 1, b = l.stages.back() + 1;
  return a == b ? std::to_string(a) : std::to_string(a) + "-" + std::to_string(b);
}

class Simulation {
 public:
  Simulation(const Graph& job, const Fleet& fleet, const ScheduleReport& schedule, const Scenario& scenario,
             const SimOptions& opts)
      : job_(job), fleet_(fleet), scenario_(scenario), opts_(opts), plan_(plan_stages(job)), dht_(scenario.replication) {
    if (!schedule.feasible) throw std::invalid_argument("simulation needs a feasible schedule: " + schedule.violation);
    if (schedule.assignment.size() != plan_.stages.size())
      throw std::invalid_argument("schedule does not match the job's stages");
    for (std::size_t i = 1; i < scenario.events.size(); ++i)
      if (scenario.events[i].time_s < scenario.events[i - 1].time_s)
        throw std::invalid_argument("scenario: event times must be sorted");
    for (const auto& e : scenario.events)
      if (!fleet.has_peer(e.peer)) throw std::invalid_argument("scenario names unknown peer " + to_string(e.peer));
    report_.schedule = schedule;
    committed_ = init_model(job, opts.seed);
  }

  SimReport run() {
    if (scenario_.auto_join)
      for (const auto& p : fleet_.peers) push({.time = 0.0, .kind = SimEventKind::Join, .src = p.id});
    for (const auto& e : scenario_.events)
      push({.time = e.time_s,
            .kind = e.action == ScenarioAction::Join ? SimEventKind::Join : SimEventKind::Quit,
            .src = e.peer});
    if (pending_scripted_ == 0 || !has_join()) {
      fail(SimStatus::Unrecoverable, "no compnode joined the job");
      return std::move(report_);
    }
    push({.time = 0.0, .kind = SimEventKind::Ping});

    std::int64_t processed = 0;
    while (!done_ && !queue_.empty()) {
      if (++processed > opts_.max_events) throw std::runtime_error("simulation exceeded the event budget");
      Event e = queue_.pop();
      now_ = e.time;
      if (progress_kind(e.kind)) --pending_progress_;
      if (e.kind == SimEventKind::Join || e.kind == SimEventKind::Quit) --pending_scripted_;
      handle(e);
      if (!done_) check_stall();
    }
    if (!done_) fail(SimStatus::Deadlock, "event queue drained before the job finished");
    report_.end_time_s = now_;
    return std::move(report_);
  }

 private:
  static bool progress_kind(SimEventKind k) {
    return k == SimEventKind::Join || k == SimEventKind::Quit || k == SimEventKind::MsgArrive ||
           k == SimEventKind::ComputeDone;
  }

  bool has_join() const {
    if (scenario_.auto_join && !fleet_.peers.empty()) return true;
    return std::any_of(scenario_.events.begin(), scenario_.events.end(),
                       [](const ScenarioEvent& e) { return e.action == ScenarioAction::Join; });
  }

  void push(Event e) {
    if (progress_kind(e.kind)) ++pending_progress_;
    if (e.kind == SimEventKind::Join || e.kind == SimEventKind::Quit) ++pending_scripted_;
    queue_.push(std::move(e));
  }

  void log(SimEventKind kind, std::string src, std::string dst, std::string detail) {
    report_.log.push_back({now_, kind, std::move(src), std::move(dst), std::move(detail)});
  }

  void fail(SimStatus status, std::string message) {
    report_.status = status;
    report_.error = std::move(message);
    done_ = true;
  }

  void finish() {
    report_.status = SimStatus::Completed;
    report_.params = committed_;
    for (const auto& [node, _] : committed_) {
      const auto key = checkpoint_key(job_, node);
      if (dht_.contains(key)) report_.checkpoint[node] = decode_params(dht_.get(key));
    }
    done_ = true;
  }

  void handle(const Event& e) {
    switch (e.kind) {
      case SimEventKind::Join: return on_join(e.src);
      case SimEventKind::Quit: return on_quit(e.src);
      case SimEventKind::Ping: return on_tick();
      case SimEventKind::Pong: return on_pong(e.src);
      case SimEventKind::MsgArrive: return on_arrive(e);
      case SimEventKind::ComputeDone: return on_compute_done(e);
      default: throw std::logic_error("unexpected queued event kind");
    }
  }

  // -- membership -----------------------------------------------------------

  void on_join(PeerId p) {
    ++report_.counters.joins;
    log(SimEventKind::Join, peer_name(p), kBroker, std::string(to_string(fleet_.peer(p).role)));
    alive_.insert(p);
    online_.insert(p);
    quit_pending_.erase(p);
    last_pong_[p] = now_;
    dht_.add_peer(p);
    maybe_dispatch();
  }

  void on_quit(PeerId p) {
    ++report_.counters.quits;
    log(SimEventKind::Quit, peer_name(p), kBroker, "");
    if (!alive_.erase(p)) return;
    dht_.mark_unreachable(p);
    if (online_.contains(p)) quit_pending_.insert(p);
  }

  void on_tick() {
    const std::vector<PeerId> registered(online_.begin(), online_.end());
    for (PeerId p : registered) {
      if (done_) return;
      if (now_ - last_pong_.at(p) > scenario_.timeout_s) {
        log(SimEventKind::Ping, kBroker, peer_name(p), "timeout");
        on_failure_detected(p);
        continue;
      }
      ++report_.counters.pings;
      log(SimEventKind::Ping, kBroker, peer_name(p), "");
      if (alive_.contains(p))
        push({.time = now_ + 2.0 * fleet_.default_link.alpha_s, .kind = SimEventKind::Pong, .src = p});
    }
    if (!done_) push({.time = now_ + scenario_.ping_interval_s, .kind = SimEventKind::Ping});
  }

  void on_pong(PeerId p) {
    if (!online_.contains(p)) return;
    ++report_.counters.pongs;
    log(SimEventKind::Pong, peer_name(p), kBroker, "");
    last_pong_[p] = now_;
  }

  std::set<PeerId> unavailable() const {
    std::set<PeerId> out;
    for (const auto& p : fleet_.peers)
      if (!online_.contains(p.id) || quit_pending_.contains(p.id)) out.insert(p.id);
    return out;
  }

  void on_failure_detected(PeerId p) {
    online_.erase(p);
    quit_pending_.erase(p);
    const auto lost = dht_.remove_peer(p);
    if (!lost.empty()) {
      std::string keys;
      for (const auto& k : lost) keys += (keys.empty() ? "" : " ") + k;
      return fail(SimStatus::DataLoss, "peer " + to_string(p) + " held the only replica of: " + keys);
    }
    if (!dispatched_) return;
    const auto& old = report_.schedule;
    const bool hosts_work = std::find(old.assignment.begin(), old.assignment.end(), p) != old.assignment.end();
    if (!hosts_work) return;

    ScheduleReport next;
    try {
      next = reschedule_on_failure(old, p, plan_.stages, fleet_, unavailable(), opts_.schedule);
    } catch (const std::exception& ex) {
      return fail(SimStatus::Unrecoverable, ex.what());
    }
    ++report_.counters.replacements;
    std::set<PeerId> before;
    for (PeerId q : old.assignment) before.insert(q);
    for (const auto& l : next.loads) {
      if (l.stages.empty()) continue;
      const bool fresh = !before.contains(l.peer);
      if (!fresh && old.load_of(l.peer).stages == l.stages) continue;
      ++report_.counters.dispatches;
      log(SimEventKind::Dispatch, kBroker, peer_name(l.peer),
          (fresh ? "replacement for peer" : "reassigned after peer") + std::string(" ") + to_string(p) +
              " stages " + stage_range(l));
    }
    report_.schedule = std::move(next);

    ModelParams restored;
    try {
      for (const auto& [node, _] : committed_) restored[node] = decode_params(dht_.get(checkpoint_key(job_, node)));
    } catch (const DhtDataLoss& ex) {
      return fail(SimStatus::DataLoss, ex.what());
    } catch (const std::exception& ex) {
      return fail(SimStatus::Unrecoverable, std::string("checkpoint restore failed: ") + ex.what());
    }
    committed_ = std::move(restored);
    if (scenario_.mode == SimMode::Train) {
      step_ = checkpoint_step_;
      report_.losses.resize(static_cast<std::size_t>(step_));
      report_.batch_completion_s.resize(static_cast<std::size_t>(step_));
    }
    build_executors();
    start_work();
  }

  // -- dispatch -------------------------------------------------------------

  void maybe_dispatch() {
    if (dispatched_) return;
    for (PeerId p : report_.schedule.assignment)
      if (!online_.contains(p) || !alive_.contains(p)) return;
    dispatched_ = true;
    for (const auto& l : report_.schedule.loads) {
      if (l.stages.empty()) continue;
      ++report_.counters.dispatches;
      log(SimEventKind::Dispatch, kBroker, peer_name(l.peer), "initial stages " + stage_range(l));
    }
    build_executors();
    checkpoint();
    start_work();
  }

  void build_executors() {
    ++epoch_;
    executors_.clear();
    busy_.clear();
    inbound_free_.clear();
    active_.clear();
    placement_ = placement_from(plan_, report_.schedule);
    for (auto& cell : decompose(job_, placement_)) {
      const PeerId id = cell.assigned_peer;
      auto [it, _] = executors_.emplace(id, PeerExecutor(job_, std::move(cell), placement_));
      it->second.load_params(committed_);
    }
  }

  void checkpoint() {
    for (const auto& [node, params] : committed_) dht_.put(checkpoint_key(job_, node), encode_params(params));
    checkpoint_step_ = step_;
    ++report_.counters.checkpoints;
    log(SimEventKind::CheckpointSync, kBroker, "dht",
        "step " + std::to_string(step_) + " keys " + std::to_string(committed_.size()));
  }

  void start_work() {
    if (scenario_.mode == SimMode::Train) {
      if (step_ >= scenario_.batches) return finish();
      begin(step_);
    } else {
      for (std::int64_t b = 0; b < scenario_.batches; ++b)
        if (!finished_batches_.contains(b)) begin(b);
    }
    for (auto& [p, _] : executors_) try_compute(p);
  }

  void begin(std::int64_t batch) {
    const ValueMap feeds = make_batch(job_, opts_.seed, batch);
    for (auto& [_, ex] : executors_) ex.begin_batch(batch, feeds);
    active_.insert(batch);
  }

  // -- compute and messages -------------------------------------------------

  void try_compute(PeerId p) {
    if (busy_[p] || !alive_.contains(p)) return;
    auto& ex = executors_.at(p);
    for (std::int64_t b : active_) {
      TaskResult r = ex.fp_execute(b);
      bool backward = false;
      if (r.fired.empty() && scenario_.mode == SimMode::Train) {
        r = ex.bp_execute(b);
        backward = true;
      }
      if (r.fired.empty()) continue;
      const double speed = effective_speed(fleet_.peer(p), fleet_.column);
      const double duration = r.flops * (backward ? opts_.bp_factor : 1.0) / speed;
      busy_[p] = true;
      push({.time = now_ + duration,
            .kind = SimEventKind::ComputeDone,
            .src = p,
            .epoch = epoch_,
            .payload = ComputePayload{std::move(r), b, backward}});
      return;
    }
  }

  void on_compute_done(const Event& e) {
    if (e.epoch != epoch_ || !alive_.contains(e.src)) return;
    const auto& work = std::get<ComputePayload>(e.payload);
    busy_[e.src] = false;
    ++report_.counters.computes;
    log(SimEventKind::ComputeDone, peer_name(e.src), "",
        std::string(work.backward ? "BP" : "FP") + " batch " + std::to_string(work.batch) + " ops " +
            std::to_string(work.result.fired.size()));
    for (const auto& m : work.result.values) send(e.src, m.to, m.node, work.batch, "value", Payload(m));
    for (const auto& m : work.result.grads) send(e.src, m.to, m.node, work.batch, "grad", Payload(m));
    check_batch(work.batch);
    if (!done_ && executors_.contains(e.src)) try_compute(e.src);
  }

  void send(PeerId src, PeerId dst, const std::string& node, std::int64_t batch, const char* what, Payload payload) {
    ++report_.counters.sends;
    log(SimEventKind::MsgSend, peer_name(src), peer_name(dst),
        std::string(what) + " " + node + " batch " + std::to_string(batch));
    const double bytes = output_bytes(job_.node(node));
    const double start = std::max(now_, inbound_free_[dst]);
    const double arrival = start + comm_time(fleet_.link(src, dst), bytes);
    inbound_free_[dst] = arrival;
    push({.time = arrival, .kind = SimEventKind::MsgArrive, .src = src, .dst = dst, .epoch = epoch_,
          .payload = std::move(payload)});
  }

  void on_arrive(const Event& e) {
    if (e.epoch != epoch_ || !alive_.contains(e.dst) || !executors_.contains(e.dst)) {
      ++report_.counters.dropped;
      return;
    }
    ++report_.counters.arrivals;
    auto& ex = executors_.at(e.dst);
    if (const auto* v = std::get_if<ValueMessage>(&e.payload)) {
      log(SimEventKind::MsgArrive, peer_name(e.src), peer_name(e.dst),
          "value " + v->node + " batch " + std::to_string(v->batch));
      ex.receive_value(v->batch, v->node, v->value);
    } else {
      const auto& g = std::get<GradMessage>(e.payload);
      log(SimEventKind::MsgArrive, peer_name(e.src), peer_name(e.dst),
          "grad " + g.node + " batch " + std::to_string(g.batch));
      ex.receive_grad(g.batch, g.node, g.user, g.grad);
    }
    try_compute(e.dst);
  }

  std::map<std::string, double> batch_losses(std::int64_t batch) const {
    std::map<std::string, double> losses;
    for (const auto& [_, ex] : executors_) losses.merge(ex.losses(batch));
    return losses;
  }

  void check_batch(std::int64_t batch) {
    const bool train = scenario_.mode == SimMode::Train;
    for (const auto& [_, ex] : executors_)
      if (!(train ? ex.bp_complete(batch) : ex.fp_complete(batch))) return;
    const auto losses = batch_losses(batch);
    active_.erase(batch);
    report_.batch_completion_s.push_back(now_);
    if (!losses.empty()) report_.losses.push_back(total_loss(losses));
    if (!train) {
      for (auto& [_, ex] : executors_) ex.drop_batch(batch);
      finished_batches_.insert(batch);
      if (static_cast<std::int64_t>(finished_batches_.size()) == scenario_.batches) finish();
      return;
    }
    // Atomic commit: every peer applies the update, then the barrier releases
    // the next batch.
    committed_.clear();
    for (auto& [_, ex] : executors_) {
      ex.update_execute(batch);
      committed_.merge(ex.local_params());
    }
    ++step_;
    if (step_ % scenario_.checkpoint_interval == 0) checkpoint();
    if (step_ >= scenario_.batches) return finish();
    begin(step_);
    for (auto& [p, _] : executors_) try_compute(p);
  }

  void check_stall() {
    if (pending_progress_ > 0 || !quit_pending_.empty()) return;
    if (!dispatched_)
      return fail(SimStatus::Unrecoverable, "the scheduled peers never all joined");
    fail(SimStatus::Deadlock, "no fireable node and no message in flight");
  }

  const Graph& job_;
  const Fleet& fleet_;
  const Scenario& scenario_;
  const SimOptions& opts_;
  StagePlan plan_;
  DhtStore dht_;
  SimReport report_;
  EventQueue queue_;
  double now_ = 0.0;
  bool done_ = false;
  bool dispatched_ = false;
  std::int64_t pending_progress_ = 0;
  std::int64_t pending_scripted_ = 0;
  std::uint64_t epoch_ = 0;

  std::set<PeerId> alive_;         // processes that are running
  std::set<PeerId> online_;        // peers the broker believes are online
  std::set<PeerId> quit_pending_;  // quit but not yet detected
  std::map<PeerId, double> last_pong_;

  Placement placement_;
  std::map<PeerId, PeerExecutor> executors_;
  std::map<PeerId, bool> busy_;
  std::map<PeerId, double> inbound_free_;
  std::set<std::int64_t> active_;
  std::set<std::int64_t> finished_batches_;
  ModelParams committed_;
  std::int64_t step_ = 0;
  std::int64_t checkpoint_step_ = 0;
};

}  // namespace

SimReport run_simulation(const Graph& job, const Fleet& fleet, const ScheduleReport& schedule,
                         const Scenario& scenario, const SimOptions& opts) {
  return Simulation(job, fleet, schedule, scenario, opts).run();
}

// ---------------------------------------------------------------------------
// Stage-profile pipeline replay

SimReport simulate_pipeline(std::span<const StageProfile> profiles, std::int64_t n_b) {
  if (profiles.empty()) throw std::invalid_argument("simulate_pipeline needs at least one stage");
  if (n_b < 1) throw std::invalid_argument("simulate_pipeline needs n_b >= 1");
  for (const auto& p : profiles)
    if (p.compute_s < 0.0 || p.read_s < 0.0) throw std::invalid_argument("stage times must be >= 0");

  SimReport report;
  const std::size_t n = profiles.size();
  std::vector<double> link_free(n, 0.0), compute_free(n, 0.0);
  std::vector<std::deque<std::int64_t>> ready(n);  // batches read in, waiting for compute
  std::vector<bool> computing(n, false);
  EventQueue queue;
  double now = 0.0;

  auto name = [&](std::size_t s) { return peer_name(profiles[s].peer); };
  auto log = [&](SimEventKind k, std::string src, std::string dst, std::string detail) {
    report.log.push_back({now, k, std::move(src), std::move(dst), std::move(detail)});
  };
  auto transfer = [&](std::size_t stage, std::int64_t b) {
    ++report.counters.sends;
    log(SimEventKind::MsgSend, stage == 0 ? "source" : name(stage - 1), name(stage), "batch " + std::to_string(b));
    const double done = std::max(now, link_free[stage]) + profiles[stage].read_s;
    link_free[stage] = done;
    queue.push({.time = done, .kind = SimEventKind::MsgArrive, .dst = PeerId(static_cast<std::int32_t>(stage)),
                .payload = ComputePayload{{}, b, false}});
  };
  auto start_compute = [&](std::size_t stage) {
    if (computing[stage] || ready[stage].empty()) return;
    const std::int64_t b = ready[stage].front();
    ready[stage].pop_front();
    computing[stage] = true;
    queue.push({.time = now + profiles[stage].compute_s, .kind = SimEventKind::ComputeDone,
                .src = PeerId(static_cast<std::int32_t>(stage)), .payload = ComputePayload{{}, b, false}});
  };

  for (std::int64_t b = 0; b < n_b; ++b) transfer(0, b);
  while (!queue.empty()) {
    Event e = queue.pop();
    now = e.time;
    const std::int64_t b = std::get<ComputePayload>(e.payload).batch;
    if (e.kind == SimEventKind::MsgArrive) {
      const auto stage = static_cast<std::size_t>(e.dst.value);
      ++report.counters.arrivals;
      log(SimEventKind::MsgArrive, stage == 0 ? "source" : name(stage - 1), name(stage), "batch " + std::to_string(b));
      ready[stage].push_back(b);
      start_compute(stage);
    } else {
      const auto stage = static_cast<std::size_t>(e.src.value);
      ++report.counters.computes;
      log(SimEventKind::ComputeDone, name(stage), "", "batch " + std::to_string(b));
      computing[stage] = false;
      if (stage + 1 < n)
        transfer(stage + 1, b);
      else
        report.batch_completion_s.push_back(now);
      start_compute(stage);
    }
  }
  report.end_time_s = now;
  report.status = SimStatus::Completed;
  return report;
}

}  // namespace dagmesh
