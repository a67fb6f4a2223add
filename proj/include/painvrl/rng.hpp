#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace painvrl {

using Rng = std::mt19937_64;

// Derives an independent stream seed from a root seed, a stream name and an
// index. Stages that are resumed from a checkpoint recreate their generator
// from the same (root, name, index) triple.
std::uint64_t sub_seed(std::uint64_t root, std::string_view name,
                       std::uint64_t index = 0);

inline Rng make_rng(std::uint64_t root, std::string_view name,
                    std::uint64_t index = 0) {
  return Rng(sub_seed(root, name, index));
}

// Uniform integer in [0, n). Avoids std::uniform_int_distribution so the
// stream is identical across standard library implementations.
std::uint64_t uniform_index(Rng& rng, std::uint64_t n);

// Uniform real in [0, 1) built from the top 53 bits.
double uniform_unit(Rng& rng);

// Standard normal via Box-Muller on uniform_unit.
double standard_normal(Rng& rng);

// In-place Fisher-Yates shuffle using uniform_index.
template <typename Container>
void shuffle(Container& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_index(rng, i));
    using std::swap;
    swap(items[i - 1], items[j]);
  }
}

}  // namespace painvrl
