#include "dagmesh/perf_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "dagmesh/catalog.hpp"
#include "json.hpp"

namespace dagmesh {

using nlohmann::json;

std::string_view to_string(PeerRole role) { return role == PeerRole::Supernode ? "supernode" : "antnode"; }

std::string_view to_string(ComputeColumn column) { return column == ComputeColumn::Tensor ? "tensor" : "fp32"; }

ComputeColumn parse_compute_column(std::string_view text) {
  if (text == "tensor") return ComputeColumn::Tensor;
  if (text == "fp32") return ComputeColumn::Fp32;
  throw std::invalid_argument("compute column must be 'fp32' or 'tensor', got '" + std::string(text) + "'");
}

void Peer::validate() const {
  const std::string who = "peer " + to_string(id);
  if (!(peak_flops_fp32 > 0.0) || !(peak_flops_tensor > 0.0))
    throw std::invalid_argument(who + ": peak FLOPS must be positive");
  if (!(lambda > 0.0) || lambda > 1.0) throw std::invalid_argument(who + ": lambda must lie in (0, 1]");
  if (gpu_bytes < 0.0 || cpu_bytes < 0.0 || disk_bytes < 0.0)
    throw std::invalid_argument(who + ": memory capacities must be >= 0");
  if (!(write_bandwidth > 0.0)) throw std::invalid_argument(who + ": write bandwidth must be positive");
}

namespace {

constexpr GpuSpec kGpus[] = {
    {"RTX4090", 82.58, 82.58, 24.0},
    {"RTX4080", 48.74, 97.5, 16.0},
    {"RTX3080", 29.77, 59.5, 10.0},
    {"H100", 51.22, 756.0, 80.0},
    {"A100", 19.49, 155.92, 80.0},
};

}  // namespace

std::span<const GpuSpec> gpu_catalog() { return kGpus; }

const GpuSpec& gpu_spec(std::string_view name) {
  for (const auto& g : kGpus)
    if (g.name == name) return g;
  throw std::invalid_argument("unknown GPU '" + std::string(name) + "'");
}

Link Link::from_bandwidth_gbps(double alpha_s, double gbps) {
  if (!(gbps > 0.0)) throw std::invalid_argument("bandwidth must be positive");
  return {alpha_s, std::isinf(gbps) ? 0.0 : 8.0 / (gbps * 1e9)};
}

// ---------------------------------------------------------------------------
// Fleet

const Peer& Fleet::peer(PeerId id) const {
  for (const auto& p : peers)
    if (p.id == id) return p;
  throw std::invalid_argument("unknown peer " + to_string(id));
}

bool Fleet::has_peer(PeerId id) const {
  return std::any_of(peers.begin(), peers.end(), [&](const Peer& p) { return p.id == id; });
}

Link Fleet::link(PeerId a, PeerId b) const {
  if (a == b) return {};
  auto it = overrides.find(std::minmax(a, b));
  return it == overrides.end() ? default_link : it->second;
}

void Fleet::set_link(PeerId a, PeerId b, Link l) { overrides[std::minmax(a, b)] = l; }

std::vector<PeerId> Fleet::pipeline_peers() const {
  std::vector<PeerId> ids;
  for (const auto& p : peers)
    if (!backup_pool.contains(p.id)) ids.push_back(p.id);
  return ids;
}

void Fleet::validate() const {
  std::set<PeerId> seen;
  for (const auto& p : peers) {
    p.validate();
    if (!seen.insert(p.id).second) throw std::invalid_argument("duplicate peer id " + to_string(p.id));
  }
  if (default_link.alpha_s < 0.0 || default_link.beta_s_per_byte < 0.0)
    throw std::invalid_argument("link alpha and beta must be >= 0");
  for (const auto& [ends, l] : overrides) {
    if (!seen.contains(ends.first) || !seen.contains(ends.second))
      throw std::invalid_argument("link override references an unknown peer");
    if (l.alpha_s < 0.0 || l.beta_s_per_byte < 0.0) throw std::invalid_argument("link alpha and beta must be >= 0");
  }
  for (auto id : backup_pool)
    if (!seen.contains(id)) throw std::invalid_argument("backup pool references unknown peer " + to_string(id));
  for (const auto& pin : pins) {
    if (!seen.contains(pin.peer)) throw std::invalid_argument("pin references unknown peer " + to_string(pin.peer));
    if (backup_pool.contains(pin.peer)) throw std::invalid_argument("pinned peer cannot be a backup");
    if (pin.stage < 1) throw std::invalid_argument("pin stage numbers start at 1");
  }
}

namespace {

double gib(const json& j, const char* key, double fallback) {
  return j.contains(key) ? j.at(key).get<double>() * kGiB : fallback;
}

Link parse_link(const json& j, const char* alpha_key, const char* beta_key) {
  Link l;
  l.alpha_s = j.value(alpha_key, 0.0);
  if (j.contains("bandwidth_gbps")) {
    l = Link::from_bandwidth_gbps(l.alpha_s, j.at("bandwidth_gbps").get<double>());
  } else if (j.contains(beta_key)) {
    const double bytes_per_s = j.at(beta_key).get<double>();
    if (!(bytes_per_s > 0.0)) throw std::invalid_argument(std::string(beta_key) + " must be positive");
    l.beta_s_per_byte = 1.0 / bytes_per_s;
  }
  return l;
}

}  // namespace

Fleet parse_fleet(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("fleet file is not valid JSON: ") + e.what());
  }
  Fleet fleet;
  try {
    fleet.name = doc.value("name", std::string());
    if (doc.contains("compute_column")) fleet.column = parse_compute_column(doc["compute_column"].get<std::string>());
    if (!doc.contains("peers") || !doc["peers"].is_array()) throw std::invalid_argument("fleet needs a 'peers' array");
    for (const json& e : doc["peers"]) {
      Peer base;
      base.id = PeerId(e.at("id").get<int>());
      base.role = e.value("role", std::string("antnode")) == "supernode" ? PeerRole::Supernode : PeerRole::Antnode;
      double mem_default = 0.0;
      if (e.contains("gpu")) {
        const auto& spec = gpu_spec(e["gpu"].get<std::string>());
        base.peak_flops_fp32 = spec.tflops_fp32 * 1e12;
        base.peak_flops_tensor = spec.tflops_tensor * 1e12;
        mem_default = spec.memory_gib * kGiB;
      }
      if (e.contains("tflops_fp32")) base.peak_flops_fp32 = e["tflops_fp32"].get<double>() * 1e12;
      if (e.contains("tflops_tensor")) base.peak_flops_tensor = e["tflops_tensor"].get<double>() * 1e12;
      // Without tensor cores both columns run at the FP32 rate.
      if (!e.contains("gpu") && !e.contains("tflops_tensor")) base.peak_flops_tensor = base.peak_flops_fp32;
      base.lambda = e.value("lambda", 1.0);
      base.gpu_bytes = gib(e, "gpu_gb", mem_default);
      base.cpu_bytes = gib(e, "cpu_gb", 64.0 * kGiB);
      base.disk_bytes = gib(e, "disk_gb", 1024.0 * kGiB);
      if (e.contains("write_bandwidth_gbps"))
        base.write_bandwidth = e["write_bandwidth_gbps"].get<double>() * 1e9 / 8.0;
      const int count = e.value("count", 1);
      if (count < 1) throw std::invalid_argument("peer count must be >= 1");
      for (int i = 0; i < count; ++i) {
        Peer p = base;
        p.id = PeerId(base.id.value + i);
        fleet.peers.push_back(p);
      }
    }
    if (doc.contains("links")) {
      const json& l = doc["links"];
      fleet.default_link = parse_link(l, "default_alpha_s", "default_beta_bytes_per_s");
      if (l.contains("overrides")) {
        for (const json& o : l["overrides"]) {
          Link link = parse_link(o, "alpha_s", "beta_bytes_per_s");
          fleet.set_link(PeerId(o.at("a").get<int>()), PeerId(o.at("b").get<int>()), link);
        }
      }
    }
    if (doc.contains("backup_pool"))
      for (int id : doc["backup_pool"].get<std::vector<int>>()) fleet.backup_pool.insert(PeerId(id));
    if (doc.contains("pins"))
      for (const json& p : doc["pins"])
        fleet.pins.push_back({p.at("stage").get<int>(), PeerId(p.at("peer").get<int>()), p.value("exclusive", true)});
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed fleet file: ") + e.what());
  }
  fleet.validate();
  return fleet;
}

Fleet load_fleet_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open fleet file '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_fleet(buf.str());
}

Fleet make_gpu_fleet(std::string name, std::string_view gpu, int count, Link link, PeerRole role) {
  const auto& spec = gpu_spec(gpu);
  Fleet f;
  f.name = std::move(name);
  f.default_link = link;
  for (int i = 1; i <= count; ++i) {
    Peer p;
    p.id = PeerId(i);
    p.role = role;
    p.peak_flops_fp32 = spec.tflops_fp32 * 1e12;
    p.peak_flops_tensor = spec.tflops_tensor * 1e12;
    p.gpu_bytes = spec.memory_gib * kGiB;
    p.cpu_bytes = 64.0 * kGiB;
    p.disk_bytes = 1024.0 * kGiB;
    f.peers.push_back(p);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Time model

double comm_time(const Link& link, double bytes) {
  if (bytes < 0.0) throw std::invalid_argument("message size must be >= 0");
  return link.alpha_s + link.beta_s_per_byte * bytes;
}

double effective_speed(const Peer& peer, ComputeColumn column) { return peer.peak_flops(column) * peer.lambda; }

double fit_lambda(std::span<const ProfileSample> samples, const Peer& peer, ComputeColumn column) {
  if (samples.empty()) throw std::invalid_argument("fit_lambda needs at least one sample");
  double sum_ft = 0.0, sum_ff = 0.0;
  for (const auto& s : samples) {
    if (!(s.seconds > 0.0)) throw std::invalid_argument("profiling times must be positive");
    if (s.flops < 0.0) throw std::invalid_argument("FLOP counts must be >= 0");
    sum_ft += s.flops * s.seconds;
    sum_ff += s.flops * s.flops;
  }
  if (sum_ff == 0.0) throw std::invalid_argument("degenerate profile: all samples have zero FLOPs");
  // T = k F with k = 1 / (S* lambda)
  const double k = sum_ft / sum_ff;
  const double lambda = 1.0 / (peer.peak_flops(column) * k);
  return std::clamp(lambda, std::numeric_limits<double>::min(), 1.0);
}

double output_bytes(const OpNode& n) { return kElementBytes * static_cast<double>(numel(n.output_shape)); }

OpCost op_time(const OpNode& f, const Peer& p, const PlacementContext& ctx) {
  OpCost cost;
  cost.compute_s = op_flops(f) / effective_speed(p, ctx.fleet.column);
  auto where = [&](const std::string& name) {
    auto it = ctx.placement.find(name);
    if (it == ctx.placement.end()) throw std::invalid_argument("node '" + name + "' is not placed");
    return it->second;
  };
  for (const auto& a : f.args) {
    const PeerId src = where(a);
    if (src == p.id) continue;
    if (!ctx.fleet.has_peer(src)) throw std::invalid_argument("no link to unknown peer " + to_string(src));
    cost.read_s += comm_time(ctx.fleet.link(src, p.id), output_bytes(ctx.graph.node(a)));
  }
  const bool remote_user = std::any_of(f.users.begin(), f.users.end(), [&](const std::string& u) { return where(u) != p.id; });
  if (remote_user && std::isfinite(p.write_bandwidth)) cost.write_s = output_bytes(f) / p.write_bandwidth;
  return cost;
}

TimeBounds time_bounds(std::span<const double> op_times) {
  TimeBounds b;
  for (double t : op_times) {
    b.lower = std::max(b.lower, t);
    b.upper += t;
  }
  b.sequential = b.upper;
  return b;
}

TimeBounds subgraph_time(const SubGraph& sg, const Peer& p, const PlacementContext& ctx) {
  std::vector<double> times;
  for (const auto& name : sg.nodes) times.push_back(op_time(ctx.graph.node(name), p, ctx).total());
  return time_bounds(times);
}

// ---------------------------------------------------------------------------
// Memory

std::string Footprint::violated_by(const Peer& p) const {
  if (gpu_bytes > p.gpu_bytes) return "gpu";
  if (cpu_bytes > p.cpu_bytes) return "cpu";
  if (disk_bytes > p.disk_bytes) return "disk";
  return {};
}

Footprint node_footprint(const OpNode& n) {
  double activations = 0.0;
  std::int64_t params = 0;
  for (const auto& c : catalog::expand(n)) {
    for (const auto& s : c.input_shapes) activations += static_cast<double>(numel(s));
    activations += static_cast<double>(numel(c.output_shape));
    params += c.param_elements;
  }
  if (n.is_leaf()) {
    activations = static_cast<double>(numel(n.output_shape));
    params = catalog::param_elements(n);
  }
  const double param_bytes = kElementBytes * static_cast<double>(params);
  Footprint f;
  f.gpu_bytes = param_bytes + kElementBytes * activations;
  f.cpu_bytes = static_cast<double>(serialize_node(n).size()) + param_bytes;
  f.disk_bytes = param_bytes;
  return f;
}

Footprint memory_footprint(const Graph& g, const std::set<std::string>& nodes) {
  Footprint total;
  for (const auto& name : nodes) total += node_footprint(g.node(name));
  return total;
}

}  // namespace dagmesh
