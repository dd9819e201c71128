#include "nd/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace nd {

std::uint64_t mix64(std::uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

std::uint64_t mix3(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix64(mix64(mix64(a) ^ b) ^ c);
}

std::uint64_t derive_seed(std::uint64_t base, const std::string& label) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : label) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return mix3(base, h, 0x5eed5eed5eed5eedull);
}

static double to_unit(std::uint64_t bits) {
    // (0,1): top 53 bits, offset by half an ulp so 0 is excluded.
    return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

double CounterRng::element_uniform01(std::uint64_t seed, std::uint64_t index, std::uint64_t elem) {
    return to_unit(mix3(seed, index, elem));
}

double CounterRng::element_normal(std::uint64_t seed, std::uint64_t index, std::uint64_t elem) {
    // Box-Muller on two counter-derived uniforms.
    const double u1 = to_unit(mix3(seed, index, 2 * elem));
    const double u2 = to_unit(mix3(seed, index, 2 * elem + 1));
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double CounterRng::uniform01() { return element_uniform01(seed_, next_index(), 0); }

double CounterRng::normal() { return element_normal(seed_, next_index(), 0); }

std::uint64_t CounterRng::bounded(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("rng: bounded(0)");
    // Rejection sampling on the top bits; bias-free and platform-stable.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    const std::uint64_t idx = next_index();
    std::uint64_t elem = 0;
    for (;;) {
        const std::uint64_t r = mix3(seed_, idx, elem++);
        if (r < limit) return r % n;
    }
}

Tensor CounterRng::normal_tensor(const std::vector<int>& shape, double mean, double stddev) {
    Tensor t(shape);
    const std::uint64_t idx = next_index();
    for (std::int64_t e = 0; e < t.numel(); ++e)
        t.at(e) = mean + stddev * element_normal(seed_, idx, static_cast<std::uint64_t>(e));
    return t;
}

Tensor CounterRng::uniform_tensor(const std::vector<int>& shape, double lo, double hi) {
    Tensor t(shape);
    const std::uint64_t idx = next_index();
    for (std::int64_t e = 0; e < t.numel(); ++e)
        t.at(e) = lo + (hi - lo) * element_uniform01(seed_, idx, static_cast<std::uint64_t>(e));
    return t;
}

void CounterRng::shuffle(std::vector<int>& idx) {
    for (size_t i = idx.size(); i > 1; --i) {
        const std::uint64_t j = bounded(i);
        std::swap(idx[i - 1], idx[static_cast<size_t>(j)]);
    }
}

}  // namespace nd
