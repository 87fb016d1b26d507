#include <random>

#include "dagmesh/pipeline.hpp"
#include "doctest.h"

using namespace dagmesh;

namespace {

std::vector<StageProfile> profiles(const std::vector<double>& c, const std::vector<double>& r) {
  std::vector<StageProfile> out;
  for (std::size_t i = 0; i < c.size(); ++i) out.push_back({PeerId(static_cast<int>(i) + 1), c[i], r[i]});
  return out;
}

}  // namespace

TEST_CASE("FP latency") {
  CHECK(fp_latency(profiles({2}, {0})) == 2.0);
  CHECK(fp_latency(profiles({2, 3, 2}, {0, 1, 1})) == 9.0);
  CHECK(fp_latency(profiles({0, 0}, {0, 0})) == 0.0);
}

TEST_CASE("pipelined batch cost") {
  const auto p = profiles({2, 3, 2}, {0, 1, 1});
  CHECK(pipeline_time(p, 1) == fp_latency(p));
  CHECK(pipeline_time(p, 4) == 18.0);
  CHECK(pipeline_time(profiles({1}, {0}), 512) == 512.0);
  CHECK_THROWS(pipeline_time(p, 0));
  // Affine in n_b with slope max_p max(C_p, R_p).
  CHECK(pipeline_time(p, 11) - pipeline_time(p, 10) == bottleneck(p));
  // R can be the bottleneck.
  CHECK(bottleneck(profiles({1, 1}, {0, 5})) == 5.0);
}

TEST_CASE("throughput") {
  const auto one = profiles({1}, {0});
  CHECK(asymptotic_throughput(one, 32) == 32.0);
  CHECK(throughput(one, 512, 32) == 32.0);
  CHECK_THROWS(throughput(profiles({0}, {0}), 4, 32));
  // Halving bandwidth with R dominant halves the asymptotic throughput.
  const double a = asymptotic_throughput(profiles({1, 1}, {0, 4}), 8);
  const double b = asymptotic_throughput(profiles({1, 1}, {0, 8}), 8);
  CHECK(b == doctest::Approx(a / 2));
}

TEST_CASE("reference models") {
  const auto models = build_reference_models();
  CHECK(plan_stages(models.bert_large).stages.size() == 50);
  CHECK(plan_stages(models.gpt3).stages.size() == 50);
  CHECK(models.gpt3.node("attention_01").output_shape.back() == 4096);
  CHECK(models.bert_large.node("attention_24").output_shape == Shape{8, 512, 1024});
  CHECK(models.bert_large.node("head").output_shape == Shape{8, 512, 30522});
  CHECK_THROWS(builtin_model("resnet"));
}

TEST_CASE("compute is conserved across equal splits") {
  const auto plan = plan_stages(build_reference_model(bert_large_config()));
  double total = 0.0;
  for (const auto& s : plan.stages) total += s.flops;
  for (int n : {10, 16, 25, 50}) {
    Fleet f = make_gpu_fleet("x", "RTX3080", n, Link{});
    ScheduleOptions opts;
    opts.include_communication = false;
    const auto r = schedule(plan.stages, f, opts);
    REQUIRE(r.feasible);
    double sum_c = 0.0;
    for (const auto& p : profiles_from_schedule(r)) sum_c += p.compute_s;
    CHECK(sum_c == doctest::Approx(total / 59.5e12).epsilon(1e-12));
  }
}

TEST_CASE("infinite bandwidth and zero alpha leave only compute") {
  const Graph bert = build_reference_model(bert_large_config());
  const std::vector<Fleet> fleets{rtx3080_fleet(Link{})};
  SweepGrid grid;
  grid.bandwidth_gbps = {INFINITY};
  grid.alpha_ms = {0.0};
  grid.columns = {ComputeColumn::Tensor};
  const auto res = sweep(bert, fleets, grid);
  REQUIRE(res.rows.size() == 1);
  double total = 0.0;
  for (const auto& s : plan_stages(bert).stages) total += s.flops;
  CHECK(res.rows[0].latency_s == doctest::Approx(total / 59.5e12).epsilon(1e-12));
}

TEST_CASE("sweep structure and monotonicity") {
  const Graph bert = build_reference_model(bert_large_config());
  const Link any = Link::from_bandwidth_gbps(0.0, 1.0);
  const std::vector<Fleet> fleets{rtx3080_fleet(any), h100_fleet(any)};
  SweepGrid grid;
  grid.bandwidth_gbps = {0.5, 1, 5};
  grid.alpha_ms = {0, 1, 10};
  const auto res = sweep(bert, fleets, grid);
  CHECK(res.rows.size() == 2 * 2 * 3 * 3);
  for (const auto& r : res.rows) {
    CHECK(r.feasible);
    CHECK(r.n_b == 512);
  }
  // Rows are ordered fleet, column, bandwidth, alpha.
  for (std::size_t i = 0; i < res.rows.size(); i += 9) {
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t a = 0; a + 1 < 3; ++a)
        CHECK(res.rows[i + b * 3 + a].throughput >= res.rows[i + b * 3 + a + 1].throughput);
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = 0; b + 1 < 3; ++b)
        CHECK(res.rows[i + b * 3 + a].throughput <= res.rows[i + (b + 1) * 3 + a].throughput);
  }
  const auto csv = res.csv();
  CHECK(csv.rfind("model,fleet,bandwidth_gbps,alpha_ms,n_b,latency_s,pipe_time_s,throughput", 0) == 0);

  SweepGrid empty = grid;
  empty.alpha_ms.clear();
  CHECK_THROWS(sweep(bert, fleets, empty));
}

TEST_CASE("n_b = 1 collapses to FP latency in the sweep") {
  const Graph bert = build_reference_model(bert_large_config());
  const std::vector<Fleet> fleets{h100_fleet(Link{})};
  SweepGrid grid;
  grid.bandwidth_gbps = {2};
  grid.alpha_ms = {5};
  grid.n_b = 1;
  for (const auto& r : sweep(bert, fleets, grid).rows) CHECK(r.pipe_time_s == r.latency_s);
}
