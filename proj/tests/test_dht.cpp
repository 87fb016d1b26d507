#include <doctest.h>

#include <algorithm>

#include "dagmesh/dht.hpp"

using namespace dagmesh;

namespace {

DhtStore ring_of(int peers, int r) {
  DhtStore d(r);
  for (int i = 1; i <= peers; ++i) d.add_peer(PeerId(i));
  return d;
}

// Independent placement rule: walk peers sorted by hash, starting at the
// first one at or after the key hash, and take the first r.
std::vector<PeerId> expected_owners(const DhtStore& d, const std::string& key) {
  std::vector<std::pair<std::uint64_t, PeerId>> ring;
  for (PeerId p : d.ring()) ring.emplace_back(DhtStore::peer_hash(p), p);
  std::sort(ring.begin(), ring.end());
  const auto h = DhtStore::key_hash(key);
  std::size_t start = 0;
  while (start < ring.size() && ring[start].first < h) ++start;
  std::vector<PeerId> out;
  for (std::size_t i = 0; i < ring.size() && out.size() < static_cast<std::size_t>(d.replication()); ++i)
    out.push_back(ring[(start + i) % ring.size()].second);
  return out;
}

}  // namespace

TEST_CASE("put places r replicas clockwise from the key hash") {
  DhtStore d = ring_of(6, 2);
  for (int i = 0; i < 20; ++i) {
    const std::string key = "ckpt/node" + std::to_string(i);
    d.put(key, "v" + std::to_string(i));
    CHECK(d.replicas(key) == expected_owners(d, key));
    CHECK(d.get(key) == "v" + std::to_string(i));
  }
}

TEST_CASE("overwrite keeps a single value") {
  DhtStore d = ring_of(4, 2);
  d.put("k", "a");
  d.put("k", "b");
  CHECK(d.get("k") == "b");
  CHECK(d.replicas("k").size() == 2);
}

TEST_CASE("absent key and empty ring") {
  DhtStore d(2);
  CHECK_THROWS_AS(d.put("k", "v"), std::runtime_error);
  d.add_peer(PeerId(1));
  CHECK_THROWS_AS(d.get("missing"), DhtKeyError);
  CHECK_THROWS_AS(DhtStore(0), std::invalid_argument);
}

TEST_CASE("a quit peer is served by its replica and re-replicated on removal") {
  DhtStore d = ring_of(5, 2);
  d.put("k", "payload");
  const auto owners = d.replicas("k");
  REQUIRE(owners.size() == 2);
  d.mark_unreachable(owners[0]);
  CHECK(d.get("k") == "payload");
  const auto lost = d.remove_peer(owners[0]);
  CHECK(lost.empty());
  CHECK(d.replicas("k").size() == 2);
  CHECK(d.replicas("k") == expected_owners(d, "k"));
  CHECK(d.get("k") == "payload");
}

TEST_CASE("losing every replica is data loss") {
  DhtStore d = ring_of(4, 1);
  d.put("k", "payload");
  const PeerId owner = d.replicas("k").at(0);
  d.mark_unreachable(owner);
  CHECK_THROWS_AS(d.get("k"), DhtDataLoss);
  const auto lost = d.remove_peer(owner);
  CHECK(lost == std::vector<std::string>{"k"});
  CHECK_THROWS_AS(d.get("k"), DhtDataLoss);
}

TEST_CASE("a joining peer takes over keys it now owns") {
  DhtStore d = ring_of(3, 2);
  for (int i = 0; i < 30; ++i) d.put("key" + std::to_string(i), std::to_string(i));
  d.add_peer(PeerId(4));
  for (int i = 0; i < 30; ++i) {
    const std::string key = "key" + std::to_string(i);
    CHECK(d.replicas(key) == expected_owners(d, key));
    CHECK(d.get(key) == std::to_string(i));
  }
}

TEST_CASE("binary values round-trip") {
  DhtStore d = ring_of(2, 2);
  std::string blob("\0\x01\xff\0", 4);
  d.put("bin", blob);
  CHECK(d.get("bin") == blob);
  CHECK(d.get("bin").size() == 4);
}
