#pragma once

// Analytic hardware model: peers, alpha-beta links, per-op R + C + W time and
// sub-graph memory footprints.

#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dagmesh/dag_ir.hpp"

namespace dagmesh {

enum class PeerRole { Supernode, Antnode };
enum class ComputeColumn { Fp32, Tensor };

std::string_view to_string(PeerRole role);
std::string_view to_string(ComputeColumn column);
ComputeColumn parse_compute_column(std::string_view text);

/// Bytes per element used for message sizes and memory accounting.
inline constexpr double kElementBytes = 4.0;
inline constexpr double kGiB = 1024.0 * 1024.0 * 1024.0;

struct Peer {
  PeerId id;
  PeerRole role = PeerRole::Antnode;
  double peak_flops_fp32 = 0.0;    // FLOP/s
  double peak_flops_tensor = 0.0;  // FLOP/s
  double lambda = 1.0;             // achieved / peak, in (0, 1]
  double gpu_bytes = 0.0;
  double cpu_bytes = 0.0;
  double disk_bytes = 0.0;
  double write_bandwidth = std::numeric_limits<double>::infinity();  // bytes/s

  double peak_flops(ComputeColumn column) const {
    return column == ComputeColumn::Tensor ? peak_flops_tensor : peak_flops_fp32;
  }
  /// Throws std::invalid_argument when an invariant is violated.
  void validate() const;
};

/// One row of the GPU comparison table (TFLOPS, memory in GiB).
struct GpuSpec {
  std::string_view name;
  double tflops_fp32;
  double tflops_tensor;
  double memory_gib;
};
std::span<const GpuSpec> gpu_catalog();
const GpuSpec& gpu_spec(std::string_view name);

struct Link {
  double alpha_s = 0.0;
  double beta_s_per_byte = 0.0;

  static Link from_bandwidth_gbps(double alpha_s, double gbps);
  friend bool operator==(const Link&, const Link&) = default;
};

/// Hard placement constraint: `stage` (1-based) must run on `peer`. An
/// exclusive pin keeps every other stage off that peer.
struct Pin {
  int stage = 1;
  PeerId peer;
  bool exclusive = true;
};

struct Fleet {
  std::string name;
  std::vector<Peer> peers;
  Link default_link;
  std::map<std::pair<PeerId, PeerId>, Link> overrides;  // keyed (min, max)
  std::set<PeerId> backup_pool;
  std::vector<Pin> pins;
  ComputeColumn column = ComputeColumn::Tensor;

  const Peer& peer(PeerId id) const;
  bool has_peer(PeerId id) const;
  /// Zero-cost link for a == b.
  Link link(PeerId a, PeerId b) const;
  void set_link(PeerId a, PeerId b, Link l);
  /// Peers eligible for the initial schedule, in pipeline (fleet) order.
  std::vector<PeerId> pipeline_peers() const;
  void validate() const;
};

Fleet parse_fleet(std::string_view text);
Fleet load_fleet_file(const std::filesystem::path& path);

/// `count` identical peers with ids 1..count built from a catalog GPU.
Fleet make_gpu_fleet(std::string name, std::string_view gpu, int count, Link link,
                     PeerRole role = PeerRole::Antnode);

struct OpCost {
  double read_s = 0.0;
  double compute_s = 0.0;
  double write_s = 0.0;
  double total() const { return read_s + compute_s + write_s; }
};

double comm_time(const Link& link, double bytes);
double effective_speed(const Peer& peer, ComputeColumn column);

struct ProfileSample {
  double flops;
  double seconds;
};

/// Least-squares fit of lambda in T = FLOPs / (S* lambda), clamped to (0, 1].
double fit_lambda(std::span<const ProfileSample> samples, const Peer& peer, ComputeColumn column);

double output_bytes(const OpNode& n);

struct PlacementContext {
  const Graph& graph;
  const Placement& placement;
  const Fleet& fleet;
};

/// T(f, p) = R + C + W. Local parents cost nothing to read; W is charged only
/// when some consumer of f lives on another peer.
OpCost op_time(const OpNode& f, const Peer& p, const PlacementContext& ctx);

struct TimeBounds {
  double lower = 0.0;       // max_i T(f_i)
  double upper = 0.0;       // sum_i T(f_i)
  double sequential = 0.0;  // what pipelined stages actually take

  friend bool operator==(const TimeBounds&, const TimeBounds&) = default;
};

TimeBounds time_bounds(std::span<const double> op_times);
TimeBounds subgraph_time(const SubGraph& sg, const Peer& p, const PlacementContext& ctx);

struct Footprint {
  double gpu_bytes = 0.0;
  double cpu_bytes = 0.0;
  double disk_bytes = 0.0;

  Footprint& operator+=(const Footprint& o) {
    gpu_bytes += o.gpu_bytes;
    cpu_bytes += o.cpu_bytes;
    disk_bytes += o.disk_bytes;
    return *this;
  }
  friend Footprint operator+(Footprint a, const Footprint& b) { return a += b; }
  friend bool operator==(const Footprint&, const Footprint&) = default;

  bool fits(const Peer& p) const {
    return gpu_bytes <= p.gpu_bytes && cpu_bytes <= p.cpu_bytes && disk_bytes <= p.disk_bytes;
  }
  /// Name of the first exceeded dimension, or empty.
  std::string violated_by(const Peer& p) const;
};

Footprint node_footprint(const OpNode& n);
Footprint memory_footprint(const Graph& g, const std::set<std::string>& nodes);
inline Footprint memory_footprint(const Graph& g, const SubGraph& sg) { return memory_footprint(g, sg.nodes); }

}  // namespace dagmesh
