#include "zeco/seed.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include "zeco/error.hpp"

namespace zeco {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid argument";
    case ErrorCode::NonFinite: return "non-finite input";
    case ErrorCode::ShapeMismatch: return "shape mismatch";
    case ErrorCode::HeaderError: return "header error";
    case ErrorCode::MetadataError: return "metadata error";
    case ErrorCode::TruncatedPayload: return "truncated payload";
    case ErrorCode::PlacementFailure: return "placement failure";
    case ErrorCode::PathCollision: return "path collision";
    case ErrorCode::ChecksumMismatch: return "checksum mismatch";
    case ErrorCode::ConfigHashMismatch: return "config hash mismatch";
    case ErrorCode::BackboneMismatch: return "backbone mismatch";
    case ErrorCode::MissingCheckpoint: return "missing checkpoint";
    case ErrorCode::NonFiniteLoss: return "non-finite loss";
    case ErrorCode::FrozenWeightMutation: return "frozen weight mutation";
    case ErrorCode::UnpairedEntries: return "unpaired entries";
    case ErrorCode::UnequalBudgets: return "unequal budgets";
    case ErrorCode::IoError: return "io error";
  }
  return "unknown error";
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_tag(std::string_view tag) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view tag, std::uint64_t index) {
  const std::uint64_t stream = splitmix64(master ^ hash_tag(tag));
  return splitmix64(stream + (index + 1) * 0x9E3779B97F4A7C15ULL);
}

torch::Generator make_generator(std::uint64_t seed) {
  return at::make_generator<at::CPUGeneratorImpl>(seed);
}

}  // namespace zeco
