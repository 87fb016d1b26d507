#include <doctest.h>

#include <deque>
#include <map>

#include "dagmesh/executor.hpp"
#include "test_util.hpp"

using namespace dagmesh;
using dagmesh::testing::data_path;

namespace {

Graph figure3() { return load_job_file(data_path("figure3_job.json")); }

Placement figure3_placement() {
  Placement p;
  for (const char* n : {"Input", "Conv", "Add", "Pool"}) p[n] = PeerId(1);
  for (const char* n : {"TensorA", "Multiply"}) p[n] = PeerId(2);
  for (const char* n : {"Concat", "Linear", "Label", "CrossEntropy"}) p[n] = PeerId(3);
  return p;
}

struct Traffic {
  std::vector<std::pair<PeerId, ValueMessage>> values;  // (sender, message)
  std::vector<std::pair<PeerId, GradMessage>> grads;
};

struct DistributedRun {
  ModelParams params;
  std::vector<double> losses;
  Traffic first_batch;
};

// Message-passing driver: peers exchange values and gradients until every
// cell finishes FP and BP, then all of them update together.
DistributedRun train_distributed(const Graph& g, const Placement& placement, ModelParams params,
                                 std::int64_t batches, std::uint64_t seed) {
  std::map<PeerId, PeerExecutor> peers;
  for (auto& cell : decompose(g, placement)) {
    PeerId id = cell.assigned_peer;
    peers.emplace(id, PeerExecutor(g, std::move(cell), placement));
  }
  for (auto& [_, p] : peers) p.load_params(params);

  DistributedRun run;
  for (std::int64_t b = 0; b < batches; ++b) {
    const ValueMap feeds = make_batch(g, seed, b);
    for (auto& [_, p] : peers) p.begin_batch(b, feeds);
    for (bool bp : {false, true}) {
      for (int round = 0;; ++round) {
        REQUIRE(round < 100);
        bool done = true;
        for (auto& [id, p] : peers) {
          TaskResult r = bp ? p.bp_execute(b) : p.fp_execute(b);
          for (auto& m : r.values) {
            if (b == 0) run.first_batch.values.emplace_back(id, m);
            peers.at(m.to).receive_value(b, m.node, m.value);
          }
          for (auto& m : r.grads) {
            if (b == 0) run.first_batch.grads.emplace_back(id, m);
            peers.at(m.to).receive_grad(b, m.node, m.user, m.grad);
          }
        }
        for (auto& [_, p] : peers) done = done && (bp ? p.bp_complete(b) : p.fp_complete(b));
        if (done) break;
      }
    }
    std::map<std::string, double> losses;
    for (auto& [_, p] : peers) losses.merge(p.losses(b));
    run.losses.push_back(total_loss(losses));
    for (auto& [_, p] : peers) p.update_execute(b);
  }
  for (auto& [_, p] : peers) run.params.merge(p.local_params());
  return run;
}

double max_abs_diff(const ModelParams& a, const ModelParams& b) {
  REQUIRE(a.size() == b.size());
  double worst = 0.0;
  for (const auto& [node, params] : a) {
    const auto& other = b.at(node);
    REQUIRE(params.size() == other.size());
    for (const auto& [name, t] : params) {
      const auto& u = other.at(name);
      REQUIRE(t.shape == u.shape);
      for (std::size_t i = 0; i < t.data.size(); ++i) worst = std::max(worst, std::abs(t.data[i] - u.data[i]));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("distributed Figure 3 training matches the centralized oracle bit for bit") {
  const Graph g = figure3();
  const ModelParams init = init_model(g, 7);
  const auto central = train_centralized(g, init, 10, 11);
  const auto dist = train_distributed(g, figure3_placement(), init, 10, 11);
  CHECK(max_abs_diff(central.params, dist.params) == 0.0);
  REQUIRE(central.losses.size() == 10);
  CHECK(central.losses == dist.losses);
  CHECK(max_abs_diff(central.params, init) > 0.0);  // training moved the parameters
}

TEST_CASE("Figure 3 traffic follows the decomposition") {
  const Graph g = figure3();
  const auto dist = train_distributed(g, figure3_placement(), init_model(g, 1), 1, 2);
  std::set<std::tuple<int, std::string, int>> values, grads;
  for (const auto& [from, m] : dist.first_batch.values) values.insert({from.value, m.node, m.to.value});
  for (const auto& [from, m] : dist.first_batch.grads) grads.insert({from.value, m.node, m.to.value});
  const std::set<std::tuple<int, std::string, int>> want_values{{1, "Add", 2}, {1, "Pool", 3}, {2, "Multiply", 3}};
  CHECK(values == want_values);
  CHECK(dist.first_batch.values.size() == 3);  // each output sent once per destination
  const std::set<std::tuple<int, std::string, int>> want_grads{{2, "Add", 1}, {3, "Pool", 1}, {3, "Multiply", 2}};
  CHECK(grads == want_grads);
}

TEST_CASE("single-peer placement sends nothing and equals the oracle") {
  const Graph g = figure3();
  Placement all;
  for (const auto& [name, _] : g.nodes()) all[name] = PeerId(1);
  const ModelParams init = init_model(g, 3);
  const auto dist = train_distributed(g, all, init, 3, 5);
  CHECK(dist.first_batch.values.empty());
  CHECK(dist.first_batch.grads.empty());
  CHECK(max_abs_diff(train_centralized(g, init, 3, 5).params, dist.params) == 0.0);
}

TEST_CASE("identity chain passes the input through") {
  OpNode in{.name = "x", .kind = OpKind::Placeholder, .op_class = OpClass::Placeholder, .users = {"id"}};
  in.output_shape = {2, 3};
  OpNode add{.name = "id", .kind = OpKind::NonParametricOp, .op_class = OpClass::Add, .args = {"x"},
             .kwargs = {{"value", 0.0}}};
  const Graph g = Graph::build({in, add}, GraphMeta{.outputs = {"id"}});
  Placement p{{"x", PeerId(1)}, {"id", PeerId(2)}};
  auto cells = decompose(g, p);
  PeerExecutor a(g, cells[0], p), b(g, cells[1], p);
  const ValueMap feeds = make_batch(g, 9, 0);
  a.begin_batch(0, feeds);
  b.begin_batch(0, feeds);
  auto r = a.fp_execute(0);
  REQUIRE(r.values.size() == 1);
  CHECK(r.values[0].to == PeerId(2));
  b.receive_value(0, r.values[0].node, r.values[0].value);
  b.fp_execute(0);
  REQUIRE(b.value(0, "id") != nullptr);
  CHECK(b.value(0, "id")->data == feeds.at("x").data);
}

TEST_CASE("receive_value rejects unexpected nodes and shapes") {
  const Graph g = figure3();
  const Placement p = figure3_placement();
  auto cells = decompose(g, p);
  PeerExecutor cn2(g, cells[1], p);
  cn2.begin_batch(0, make_batch(g, 0, 0));
  CHECK_THROWS_AS(cn2.receive_value(0, "Pool", Tensor({2, 2, 2, 2})), ExecutionError);
  CHECK_THROWS_AS(cn2.receive_value(0, "Add", Tensor({3})), ExecutionError);
}

TEST_CASE("sgd step") {
  ops::Params p{{"w", Tensor({1}, {1.0})}};
  ops::Params grad{{"w", Tensor({1}, {0.5})}};
  sgd_update(p, grad, 0.1);
  CHECK(p.at("w").data[0] == doctest::Approx(0.95).epsilon(1e-15));
}

TEST_CASE("missing optimizer is reported") {
  OpNode in{.name = "x", .kind = OpKind::Placeholder, .op_class = OpClass::Placeholder, .users = {"fc"}};
  in.output_shape = {2, 3};
  OpNode fc{.name = "fc", .kind = OpKind::ParametricOp, .op_class = OpClass::Linear, .args = {"x"},
            .kwargs = {{"out_features", 2.0}}};
  const Graph g = Graph::build({in, fc}, GraphMeta{.outputs = {"fc"}});
  CHECK_THROWS_AS(learning_rate(g, g.node("fc")), ExecutionError);
  CHECK_THROWS_AS(train_centralized(g, init_model(g, 0), 1, 0), ExecutionError);
}
