#pragma once

#include <cstdint>
#include <string_view>

#include <torch/torch.h>

namespace zeco {

/// SplitMix64 finalizer. Bijective on 64-bit words.
std::uint64_t splitmix64(std::uint64_t x);

/// FNV-1a over the bytes of `tag`.
std::uint64_t hash_tag(std::string_view tag);

/// Derives an independent seed for stream `tag`, item `index` from a master
/// seed:
///
///   derive_seed(m, tag, i) = splitmix64(splitmix64(m ^ fnv1a(tag)) + (i + 1) * 0x9E3779B97F4A7C15)
///
/// Item seeds depend only on (m, tag, i), so growing a dataset or adding a
/// stage never reshuffles existing seeds.
std::uint64_t derive_seed(std::uint64_t master, std::string_view tag, std::uint64_t index = 0);

/// CPU generator seeded deterministically; all tensor randomness in the
/// library goes through explicit generators, never the global one.
torch::Generator make_generator(std::uint64_t seed);

}  // namespace zeco
