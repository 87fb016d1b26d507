#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <ostream>
#include <string>

namespace dagmesh {

/// Identifier of a registered compnode.
struct PeerId {
  std::int32_t value = 0;

  constexpr PeerId() = default;
  constexpr explicit PeerId(std::int32_t v) : value(v) {}

  friend constexpr auto operator<=>(const PeerId&, const PeerId&) = default;
};

inline std::string to_string(PeerId id) { return std::to_string(id.value); }
inline std::ostream& operator<<(std::ostream& os, PeerId id) { return os << id.value; }

}  // namespace dagmesh

template <>
struct std::hash<dagmesh::PeerId> {
  std::size_t operator()(dagmesh::PeerId id) const noexcept { return std::hash<std::int32_t>{}(id.value); }
};
