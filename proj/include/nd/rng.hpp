#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nd/tensor.hpp"

namespace nd {

// Counter-based random stream: every value is a pure function of
// (seed, draw_index, element_index), so any draw can be replayed bitwise
// from its (seed, index) coordinates. Streams never share state.
class CounterRng {
public:
    CounterRng() : seed_(0), counter_(0) {}
    explicit CounterRng(std::uint64_t seed) : seed_(seed), counter_(0) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

    // Consumes one draw index and returns it.
    std::uint64_t next_index() { return counter_++; }

    // Scalar draws (each consumes one index).
    double uniform01();
    double normal();
    std::uint64_t bounded(std::uint64_t n);  // uniform in [0, n)

    // Static, replayable element generators.
    static double element_uniform01(std::uint64_t seed, std::uint64_t index, std::uint64_t elem);
    static double element_normal(std::uint64_t seed, std::uint64_t index, std::uint64_t elem);

    // Tensor fills (one draw index per tensor).
    Tensor normal_tensor(const std::vector<int>& shape, double mean, double stddev);
    Tensor uniform_tensor(const std::vector<int>& shape, double lo, double hi);

    // In-place Fisher-Yates over indices [0, n). One draw index per swap.
    void shuffle(std::vector<int>& idx);

private:
    std::uint64_t seed_;
    std::uint64_t counter_;
};

// Stable 64-bit mixing primitives.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t mix3(std::uint64_t a, std::uint64_t b, std::uint64_t c);

// Derives an independent stream seed from a base seed and a label
// ("init", "data", "noise.w", ...).
std::uint64_t derive_seed(std::uint64_t base, const std::string& label);

}  // namespace nd
