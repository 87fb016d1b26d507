#include <doctest.h>

#include <random>

#include "dagmesh/dht.hpp"
#include "dagmesh/sim.hpp"
#include "test_util.hpp"

using namespace dagmesh;
using dagmesh::testing::data_path;

namespace {

Graph figure3() { return load_job_file(data_path("figure3_job.json")); }
Fleet figure3_fleet() { return load_fleet_file(data_path("fleet_figure3.json")); }
Scenario scenario(const std::string& name) { return load_scenario_file(data_path("scenarios/" + name + ".json")); }

SimReport simulate(const Graph& g, const Fleet& f, const Scenario& s, std::uint64_t seed = 0) {
  SimOptions opts;
  opts.seed = seed;
  return run_simulation(g, f, initial_schedule(g, f, s), s, opts);
}

bool same_params(const ModelParams& a, const ModelParams& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [node, p] : a) {
    auto it = b.find(node);
    if (it == b.end() || it->second.size() != p.size()) return false;
    for (const auto& [name, t] : p) {
      auto jt = it->second.find(name);
      if (jt == it->second.end() || jt->second.shape != t.shape || jt->second.data != t.data) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("failure-free Figure 3 run equals the centralized oracle") {
  const Graph g = figure3();
  const Scenario s = scenario("no_failure");
  const auto r = simulate(g, figure3_fleet(), s, 5);
  REQUIRE(r.completed());
  const auto oracle = train_centralized(g, init_model(g, 5), s.batches, 5);
  CHECK(same_params(r.params, oracle.params));
  CHECK(r.losses == oracle.losses);
  CHECK(r.batch_completion_s.size() == 10);
  CHECK(std::is_sorted(r.batch_completion_s.begin(), r.batch_completion_s.end()));
  CHECK(r.counters.sends == r.counters.arrivals);
  CHECK(r.counters.dropped == 0);
  CHECK(r.count(SimEventKind::Dispatch, "initial") == 3);
  CHECK(r.count(SimEventKind::Dispatch, "replacement") == 0);
  // Figure 3 exchanges Add, Pool, Multiply forward and their gradients back.
  CHECK(r.counters.sends == 6 * 10);
}

TEST_CASE("zero joining compnodes is immediately unrecoverable") {
  const Graph g = figure3();
  const auto r = simulate(g, figure3_fleet(), scenario("zero_joins"));
  CHECK(r.status == SimStatus::Unrecoverable);
  CHECK(r.end_time_s == 0.0);
  CHECK(r.log.empty());
  CHECK(r.batch_completion_s.empty());
}

TEST_CASE("antnode quit with a backup completes with one replacement and identical parameters") {
  const Graph g = figure3();
  const Fleet f = figure3_fleet();
  const auto clean = simulate(g, f, scenario("no_failure"));
  const auto r = simulate(g, f, scenario("quit_with_backup"));
  REQUIRE(r.completed());
  CHECK(r.count(SimEventKind::Dispatch, "replacement") == 1);
  CHECK(r.counters.replacements == 1);
  CHECK(r.count(SimEventKind::Quit) == 1);
  CHECK(r.count(SimEventKind::Ping, "timeout") == 1);
  CHECK(same_params(r.params, clean.params));
  CHECK(r.losses == clean.losses);
  CHECK(r.schedule.assignment == std::vector<PeerId>{PeerId(1), PeerId(4), PeerId(3)});
  CHECK(r.counters.sends == r.counters.arrivals + r.counters.dropped);
  CHECK(r.end_time_s > clean.end_time_s);
}

TEST_CASE("quit without a backup re-solves over the survivors") {
  const Graph g = figure3();
  Fleet f = figure3_fleet();
  f.backup_pool.clear();
  Scenario s = scenario("quit_with_backup");
  const auto clean = simulate(g, f, scenario("no_failure"));
  const auto r = simulate(g, f, s);
  REQUIRE(r.completed());
  CHECK(r.counters.replacements == 1);
  CHECK(std::find(r.schedule.assignment.begin(), r.schedule.assignment.end(), PeerId(2)) ==
        r.schedule.assignment.end());
  CHECK(same_params(r.params, clean.params));
}

TEST_CASE("quit of an idle peer needs no replacement") {
  const Graph g = figure3();
  Scenario s = scenario("no_failure");
  s.events.push_back({0.05, ScenarioAction::Quit, PeerId(4)});
  s.batches = 300;  // long enough for the timeout to fire mid-job
  const auto r = simulate(g, figure3_fleet(), s);
  REQUIRE(r.completed());
  CHECK(r.count(SimEventKind::Ping, "timeout") == 1);
  CHECK(r.counters.replacements == 0);
}

TEST_CASE("losing the sole replica of a checkpoint aborts the run") {
  const Graph g = figure3();
  const Scenario s = scenario("data_loss");
  // The scenario quits the peer holding every checkpoint key at r = 1.
  DhtStore ring(1);
  for (int i = 1; i <= 4; ++i) ring.add_peer(PeerId(i));
  for (const char* node : {"Conv", "Linear", "TensorA"}) {
    ring.put(checkpoint_key(g, node), "x");
    REQUIRE(ring.replicas(checkpoint_key(g, node)) == std::vector<PeerId>{s.events.at(0).peer});
  }
  const auto r = simulate(g, figure3_fleet(), s);
  CHECK(r.status == SimStatus::DataLoss);
  CHECK(r.error.find("figure3/") != std::string::npos);
}

TEST_CASE("checkpoint interval one leaves the latest weights in the DHT") {
  const Graph g = figure3();
  const auto r = simulate(g, figure3_fleet(), scenario("no_failure"));
  REQUIRE(r.completed());
  CHECK(r.count(SimEventKind::CheckpointSync) == 11);  // initial plus one per step
  CHECK(same_params(r.checkpoint, r.params));
  CHECK(r.checkpoint.contains("Linear"));
}

TEST_CASE("sparser checkpoints roll back and replay to the same result") {
  const Graph g = figure3();
  const Fleet f = figure3_fleet();
  Scenario s = scenario("quit_with_backup");
  s.checkpoint_interval = 3;
  const auto r = simulate(g, f, s);
  REQUIRE(r.completed());
  const auto oracle = train_centralized(g, init_model(g, 0), 10, 0);
  CHECK(same_params(r.params, oracle.params));
  CHECK(r.losses == oracle.losses);
  // Steps 3, 6 and 9 are synced; the DHT holds the state after step 9.
  const auto nine = train_centralized(g, init_model(g, 0), 9, 0);
  CHECK(same_params(r.checkpoint, nine.params));
}

TEST_CASE("event logs are byte-identical across reruns") {
  const Graph g = figure3();
  const Fleet f = figure3_fleet();
  const auto a = simulate(g, f, scenario("quit_with_backup"), 3);
  const auto b = simulate(g, f, scenario("quit_with_backup"), 3);
  CHECK(a.events_csv() == b.events_csv());
  CHECK(a.summary() == b.summary());
  CHECK(a.events_csv().starts_with("time_s,kind,src,dst,detail\n"));
}

TEST_CASE("inference pipelines batches and matches the oracle losses") {
  const Graph g = figure3();
  const Scenario s = scenario("infer_pipeline");
  const auto r = simulate(g, figure3_fleet(), s);
  REQUIRE(r.completed());
  CHECK(r.losses == infer_centralized(g, init_model(g, 0), s.batches, 0));
  REQUIRE(r.batch_completion_s.size() == 16);
  // Pipelining overlaps batches: the run is far shorter than 16 serial passes.
  CHECK(r.end_time_s < 16.0 * r.batch_completion_s.front() * 0.5);
}

TEST_CASE("scenario parsing") {
  CHECK_THROWS_AS(parse_scenario("[]"), std::invalid_argument);
  CHECK_THROWS_AS(parse_scenario(R"({"events": [{"time_s": 2, "action": "quit", "peer_id": 1},
                                                 {"time_s": 1, "action": "quit", "peer_id": 2}]})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_scenario(R"({"events": [{"time_s": 1, "action": "reboot", "peer_id": 1}]})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_scenario(R"({"batches": 0})"), std::invalid_argument);
  const Scenario s = parse_scenario("{}");
  CHECK(s.auto_join);
  CHECK(s.ping_interval_s == 1.0);
  CHECK(s.timeout_s == 3.0);
  CHECK(s.replication == 2);
}

TEST_CASE("parameter checkpoints round-trip bit for bit") {
  const Graph g = figure3();
  for (const auto& [node, p] : init_model(g, 9)) {
    const auto back = decode_params(encode_params(p));
    REQUIRE(back.size() == p.size());
    for (const auto& [name, t] : p) CHECK(back.at(name).data == t.data);
  }
  CHECK_THROWS_AS(decode_params("abc"), std::invalid_argument);
}

TEST_CASE("stage-profile replay reproduces the pipelined batch cost") {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> t(0.01, 2.0);
  std::uniform_int_distribution<int> stages(1, 12), batches(1, 300);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<StageProfile> prof(stages(rng));
    for (std::size_t i = 0; i < prof.size(); ++i) prof[i] = {PeerId(int(i) + 1), t(rng), t(rng)};
    const std::int64_t n_b = batches(rng);
    const auto r = simulate_pipeline(prof, n_b);
    REQUIRE(r.batch_completion_s.size() == static_cast<std::size_t>(n_b));
    CHECK(r.end_time_s == doctest::Approx(pipeline_time(prof, n_b)).epsilon(1e-9));
    CHECK(r.batch_completion_s.front() == doctest::Approx(fp_latency(prof)).epsilon(1e-9));
  }
  CHECK_THROWS_AS(simulate_pipeline({}, 1), std::invalid_argument);
}
