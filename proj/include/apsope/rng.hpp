#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace apsope {

/// 64-bit FNV-1a, used to turn human-readable purpose tags into stream keys.
constexpr std::uint64_t purpose_tag(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

using Engine = std::mt19937_64;

/// Seeding discipline shared by every randomized routine.
///
/// A substream is keyed by (master seed, record index, purpose tag) only, so a
/// record's draws never depend on which worker handles it or in what order.
/// `child` derives a nested plan, e.g. one per Monte-Carlo replication.
class RngPlan {
 public:
  explicit RngPlan(std::uint64_t master_seed) : master_seed_(master_seed) {}

  std::uint64_t master_seed() const noexcept { return master_seed_; }

  std::uint64_t stream_seed(std::uint64_t index, std::uint64_t tag) const {
    return mix64(mix64(mix64(master_seed_) ^ tag) + index);
  }

  Engine stream_for(std::uint64_t index, std::uint64_t tag) const {
    const std::uint64_t s = stream_seed(index, tag);
    std::seed_seq seq{static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32)};
    return Engine(seq);
  }

  Engine stream_for(std::uint64_t index, std::string_view tag) const {
    return stream_for(index, purpose_tag(tag));
  }

  RngPlan child(std::uint64_t index, std::string_view tag) const {
    return RngPlan(stream_seed(index, purpose_tag(tag)));
  }

 private:
  std::uint64_t master_seed_;
};

}  // namespace apsope
