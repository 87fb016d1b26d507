#include "dagmesh/dht.hpp"

#include <algorithm>

#include "dagmesh/ops.hpp"

namespace dagmesh {

DhtStore::DhtStore(int replication) : replication_(replication) {
  if (replication < 1) throw std::invalid_argument("replication factor must be >= 1");
}

std::uint64_t DhtStore::key_hash(std::string_view key) { return ops::fnv1a(key); }

std::uint64_t DhtStore::peer_hash(PeerId p) { return ops::fnv1a("peer-" + to_string(p)); }

void DhtStore::add_peer(PeerId p) {
  unreachable_.erase(p);
  if (ring_members_.insert(p).second) {
    std::uint64_t h = peer_hash(p);
    while (positions_.contains(h)) ++h;  // hash collision: probe forward
    positions_[h] = p;
  }
  rebalance(nullptr);
}

void DhtStore::mark_unreachable(PeerId p) {
  if (ring_members_.contains(p)) unreachable_.insert(p);
}

std::vector<std::string> DhtStore::remove_peer(PeerId p) {
  if (!ring_members_.erase(p)) return {};
  std::erase_if(positions_, [&](const auto& kv) { return kv.second == p; });
  unreachable_.insert(p);  // its shelf can no longer serve copies
  std::vector<std::string> lost;
  rebalance(&lost);
  shelves_.erase(p);
  unreachable_.erase(p);
  return lost;
}

std::vector<PeerId> DhtStore::targets(std::string_view key) const {
  std::vector<PeerId> out;
  if (positions_.empty()) return out;
  const std::size_t live = std::count_if(ring_members_.begin(), ring_members_.end(),
                                         [&](PeerId p) { return !unreachable_.contains(p); });
  const std::size_t want = std::min<std::size_t>(static_cast<std::size_t>(replication_), live);
  auto it = positions_.lower_bound(key_hash(key));
  for (std::size_t step = 0; step < positions_.size() && out.size() < want; ++step, ++it) {
    if (it == positions_.end()) it = positions_.begin();
    if (!unreachable_.contains(it->second)) out.push_back(it->second);
  }
  return out;
}

void DhtStore::rebalance(std::vector<std::string>* lost) {
  for (const auto& key : known_) {
    if (lost_.contains(key)) continue;
    const std::string* source = nullptr;
    for (const auto& [peer, shelf] : shelves_) {
      if (unreachable_.contains(peer)) continue;
      auto it = shelf.find(key);
      if (it != shelf.end()) {
        source = &it->second;
        break;
      }
    }
    if (!source) {
      // Copies on unreachable-but-not-removed peers may still come back.
      const bool parked = std::any_of(shelves_.begin(), shelves_.end(), [&](const auto& kv) {
        return unreachable_.contains(kv.first) && ring_members_.contains(kv.first) && kv.second.contains(key);
      });
      if (!parked) {
        lost_.insert(key);
        if (lost) lost->push_back(key);
      }
      continue;
    }
    const std::string value = *source;
    const auto want = targets(key);
    for (auto& [peer, shelf] : shelves_)
      if (!unreachable_.contains(peer) && std::find(want.begin(), want.end(), peer) == want.end()) {
        auto it = shelf.find(key);
        if (it != shelf.end()) shelf.erase(it);
      }
    for (PeerId p : want) shelves_[p].insert_or_assign(key, value);
  }
}

void DhtStore::put(std::string_view key, std::string value) {
  const auto want = targets(key);
  if (want.empty()) throw std::runtime_error("DHT put with no online peer");
  const std::string k(key);
  for (auto& [peer, shelf] : shelves_)
    if (std::find(want.begin(), want.end(), peer) == want.end()) shelf.erase(k);
  for (PeerId p : want) shelves_[p].insert_or_assign(k, value);
  known_.insert(k);
  lost_.erase(k);
}

const std::string& DhtStore::get(std::string_view key) const {
  if (!known_.contains(key)) throw DhtKeyError("DHT key '" + std::string(key) + "' is absent");
  for (PeerId p : replicas(key)) {
    if (unreachable_.contains(p)) continue;
    return shelves_.at(p).find(key)->second;
  }
  throw DhtDataLoss("DHT key '" + std::string(key) + "': every replica is offline");
}

std::vector<PeerId> DhtStore::replicas(std::string_view key) const {
  std::vector<PeerId> out;
  if (positions_.empty()) return out;
  auto it = positions_.lower_bound(key_hash(key));
  for (std::size_t step = 0; step < positions_.size(); ++step, ++it) {
    if (it == positions_.end()) it = positions_.begin();
    auto shelf = shelves_.find(it->second);
    if (shelf != shelves_.end() && shelf->second.find(key) != shelf->second.end()) out.push_back(it->second);
  }
  return out;
}

std::vector<PeerId> DhtStore::ring() const {
  std::vector<PeerId> out;
  for (const auto& [_, p] : positions_) out.push_back(p);
  return out;
}

std::vector<std::string> DhtStore::keys() const { return {known_.begin(), known_.end()}; }

}  // namespace dagmesh
