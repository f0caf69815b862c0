#pragma once

#include <compare>
#include <cstdint>
#include <string>

namespace icl {

// Semantic role of a prompt position. x/t/y/n carry a 1-based shot index;
// the query is x(N+1), the final separator t(N+1), the generated answer y(N+1).
enum class RoleKind : std::uint8_t { bos, x, t, y, n, pad };

struct PositionRole {
  RoleKind kind = RoleKind::bos;
  int index = 0;

  auto operator<=>(const PositionRole&) const = default;
};

inline PositionRole role_bos() { return {RoleKind::bos, 0}; }
inline PositionRole role_x(int i) { return {RoleKind::x, i}; }
inline PositionRole role_t(int i) { return {RoleKind::t, i}; }
inline PositionRole role_y(int i) { return {RoleKind::y, i}; }
inline PositionRole role_n(int i) { return {RoleKind::n, i}; }

std::string role_to_string(const PositionRole& r);
PositionRole role_from_string(const std::string& s);

inline bool is_control_role(const PositionRole& r) {
  return r.kind == RoleKind::bos || r.kind == RoleKind::pad;
}

}  // namespace icl
