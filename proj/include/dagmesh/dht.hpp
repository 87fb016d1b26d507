#pragma once

// Simulated consistent-hash key-value store spread over the online peers.
// Each key lives on the first r distinct ring peers clockwise from its hash.

#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dagmesh/ids.hpp"

namespace dagmesh {

class DhtKeyError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Every replica of a key became unreachable before it could be re-replicated.
class DhtDataLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DhtStore {
 public:
  explicit DhtStore(int replication = 2);

  int replication() const { return replication_; }

  /// Joins the ring and takes over the keys it is now responsible for.
  void add_peer(PeerId p);
  /// The peer stopped answering; its replicas stay in place until removal.
  void mark_unreachable(PeerId p);
  /// Drops the peer from the ring and restores min(r, live) replicas from the
  /// surviving copies. Returns the keys that had no surviving copy.
  std::vector<std::string> remove_peer(PeerId p);

  /// Throws std::runtime_error when no peer is online.
  void put(std::string_view key, std::string value);
  /// Throws DhtKeyError for unknown keys and DhtDataLoss when no replica is
  /// reachable.
  const std::string& get(std::string_view key) const;
  bool contains(std::string_view key) const { return known_.contains(std::string(key)); }

  /// Peers currently holding a copy, in clockwise order from the key hash.
  std::vector<PeerId> replicas(std::string_view key) const;
  /// Ring members in hash order.
  std::vector<PeerId> ring() const;
  std::vector<std::string> keys() const;
  bool reachable(PeerId p) const { return ring_members_.contains(p) && !unreachable_.contains(p); }

  static std::uint64_t key_hash(std::string_view key);
  static std::uint64_t peer_hash(PeerId p);

 private:
  /// First min(r, live) reachable ring peers clockwise from the key hash.
  std::vector<PeerId> targets(std::string_view key) const;
  void rebalance(std::vector<std::string>* lost);

  int replication_;
  std::map<std::uint64_t, PeerId> positions_;
  std::set<PeerId> ring_members_;
  std::set<PeerId> unreachable_;
  std::map<PeerId, std::map<std::string, std::string, std::less<>>> shelves_;
  std::set<std::string, std::less<>> known_;
  std::set<std::string, std::less<>> lost_;
};

}  // namespace dagmesh
