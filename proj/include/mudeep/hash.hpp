#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace mudeep {

// 64-bit FNV-1a; stable across platforms, used for config and parameter digests.
class Fnv1a {
 public:
  void update(const void* bytes, std::size_t n) {
    auto p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  template <class V>
  void update_value(const V& v) {
    update(&v, sizeof(V));
  }
  std::uint64_t value() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a(std::string_view s) {
  Fnv1a h;
  h.update(s);
  return h.value();
}

}  // namespace mudeep
