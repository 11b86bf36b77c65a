#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>
#include <vector>

namespace hitl {

// mt19937_64 engine with distribution helpers whose output is defined here
// rather than by the standard library, so streams are identical across
// toolchains.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 bits of resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n); n > 0. Rejection sampling, no modulo bias.
    std::uint64_t below(std::uint64_t n);

    // Standard normal via Box-Muller.
    double normal();

    template <typename T>
    void shuffle(std::vector<T> &v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    std::mt19937_64 engine_;
};

// Derives an independent seed from a parent seed and a namespace path, e.g.
// derive_seed(session_seed, {"sample", sample_id, prompt_id}).
std::uint64_t derive_seed(std::uint64_t parent, std::initializer_list<std::string_view> path);
std::uint64_t derive_seed(std::uint64_t parent, std::string_view label, std::uint64_t index);

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

} // namespace hitl
