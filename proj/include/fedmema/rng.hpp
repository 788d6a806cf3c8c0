#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace fedmema {

// Independent, reproducible seed streams derived from one base seed.
// derive_seed(base, "client/3") never collides with other tags in practice
// and does not depend on call order.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag);
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index);

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t base, std::string_view tag) {
  return Rng(derive_seed(base, tag));
}

}  // namespace fedmema
