#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace tte {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; used to decorrelate derived seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t hash_tag(std::string_view tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Seed for one (run, model, replicate) job. Each replicate is reproducible in
// isolation and independent of scheduling order.
constexpr std::uint64_t derive_seed(std::uint64_t run_seed, std::string_view tag, std::uint64_t replicate) {
    return mix64(mix64(run_seed ^ hash_tag(tag)) + replicate);
}

}  // namespace tte
