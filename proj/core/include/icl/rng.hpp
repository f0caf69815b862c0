#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace icl {

// 64-bit FNV-1a, used for config hashing and stream keying.
std::uint64_t hash64(std::string_view s);

// Counter-based random stream keyed by (seed, purpose tag, index). Streams
// are independent of scheduling order, so parallel workers draw the same
// numbers regardless of thread count.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0);

  std::uint64_t next_u64();
  double uniform();               // [0, 1)
  double normal();                // standard normal
  // Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace icl
