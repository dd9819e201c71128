#include "doctest.h"

#include <cmath>
#include <stdexcept>

#include "nd/noise.hpp"
#include "nd/rng.hpp"

using namespace nd;

TEST_CASE("sigma=0 draws equal mu everywhere") {
    NoisePolicy p = NoisePolicy::unbiased(NoisePlacement::OFS, NoiseMode::Additive, 0.0);
    CounterRng rng(1);
    NoiseSample s = sample(p, {4, 4}, 0, rng);
    for (double v : s.values.data) CHECK(v == 0.0);

    NoisePolicy m = NoisePolicy::unbiased(NoisePlacement::OFS, NoiseMode::Multiplicative, 0.0);
    s = sample(m, {4, 4}, 0, rng);
    for (double v : s.values.data) CHECK(v == 1.0);
}

TEST_CASE("gaussian law-of-large-numbers at sigma=0.2") {
    NoisePolicy p = NoisePolicy::unbiased(NoisePlacement::OFS, NoiseMode::Additive, 0.2);
    CounterRng rng(12345);
    const std::int64_t n = 1000000;
    NoiseSample s = sample(p, {1000, 1000}, 0, rng);
    double mean = 0.0;
    for (double v : s.values.data) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : s.values.data) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    CHECK(std::abs(mean) <= 3.0 * 0.2 / std::sqrt(static_cast<double>(n)));
    CHECK(std::sqrt(var) == doctest::Approx(0.2).epsilon(0.01));
}

TEST_CASE("uniform parameterized by mean and std") {
    NoisePolicy p = NoisePolicy::unbiased(NoisePlacement::NFA, NoiseMode::Additive, 0.5);
    p.distribution = NoiseDistribution::Uniform;
    CounterRng rng(7);
    NoiseSample s = sample(p, {400, 400}, 0, rng);
    const double half = std::sqrt(3.0) * 0.5;
    double mean = 0.0, var = 0.0;
    for (double v : s.values.data) {
        CHECK(v >= -half);
        CHECK(v <= half);
        mean += v;
    }
    mean /= static_cast<double>(s.values.numel());
    for (double v : s.values.data) var += (v - mean) * (v - mean);
    var /= static_cast<double>(s.values.numel());
    CHECK(std::abs(mean) <= 3.0 * 0.5 / std::sqrt(static_cast<double>(s.values.numel())));
    CHECK(std::sqrt(var) == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("replay reproduces a draw bitwise") {
    NoisePolicy p = NoisePolicy::unbiased(NoisePlacement::NFA, NoiseMode::Additive, 0.3);
    CounterRng rng(99);
    rng.next_index();  // advance
    NoiseSample a = sample(p, {3, 7}, 0, rng);
    NoiseSample b = replay(p, {3, 7}, 0, a.seed, a.draw_index);
    CHECK(a.values.data == b.values.data);
}

TEST_CASE("scheduled sigma follows fixed and linear-decay rules") {
    NoisePolicy fixed = NoisePolicy::unbiased(NoisePlacement::OFS, NoiseMode::Additive, 0.8);
    CHECK(scheduled_sigma(fixed, 0, 100) == 0.8);
    CHECK(scheduled_sigma(fixed, 73, 100) == 0.8);

    NoisePolicy decay = fixed;
    decay.schedule = {SigmaSchedule::Kind::LinearDecay, 50};
    CHECK(scheduled_sigma(decay, 0, 100) == 0.8);
    CHECK(scheduled_sigma(decay, 25, 100) == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(scheduled_sigma(decay, 75, 100) == 0.0);
    CHECK_THROWS_AS(scheduled_sigma(decay, -1, 100), std::invalid_argument);
    CHECK_THROWS_AS(scheduled_sigma(decay, 100, 100), std::invalid_argument);
}

TEST_CASE("apply respects placement rules") {
    CounterRng rng(5);
    Tensor out = rng.uniform_tensor({2, 3, 4, 4}, -1.0, 1.0);
    NoisePolicy ofs = NoisePolicy::unbiased(NoisePlacement::OFS, NoiseMode::Additive, 0.5);
    NoiseSample s = sample(ofs, out.shape, 0, rng);

    // OFS leaves non-skip ops bitwise unchanged
    Tensor same = apply(ofs, "sep_conv_3x3", out, s);
    CHECK(same.data == out.data);
    Tensor changed = apply(ofs, "skip_connect", out, s);
    for (std::int64_t i = 0; i < out.numel(); ++i)
        CHECK(changed.at(i) == out.at(i) + s.values.at(i));

    NoisePolicy es = NoisePolicy::unbiased(NoisePlacement::ES, NoiseMode::Additive, 0.5);
    CHECK(apply(es, "skip_connect", out, s).data == out.data);

    NoisePolicy mult = NoisePolicy::unbiased(NoisePlacement::NFA, NoiseMode::Multiplicative, 0.5);
    NoiseSample ones;
    ones.values = Tensor::full(out.shape, 1.0);
    CHECK(apply(mult, "avg_pool_3x3", out, ones).data == out.data);
}

TEST_CASE("drop-path rescaling keeps the mean near one") {
    NoisePolicy dp;
    dp.placement = NoisePlacement::DropPath;
    dp.drop_rate = 0.1;
    CounterRng rng(17);
    const int trials = 100000;
    Tensor unit = Tensor::full({trials, 1}, 1.0);
    NoiseSample s = sample(dp, unit.shape, 0, rng);
    Tensor out = apply(dp, "skip_connect", unit, s);
    double mean = 0.0;
    for (double v : out.data) mean += v;
    mean /= trials;
    // Bernoulli(1-p) scaled by 1/(1-p): mean 1, var p/(1-p)
    const double se = std::sqrt(0.1 / 0.9 / trials);
    CHECK(std::abs(mean - 1.0) <= 3.0 * se);
}

TEST_CASE("unbiased-mean convergence rate over draw count") {
    NoisePolicy p = NoisePolicy::unbiased(NoisePlacement::OFS, NoiseMode::Additive, 0.4);
    CounterRng rng(23);
    for (int n : {100, 1000, 10000}) {
        NoiseSample s = sample(p, {n}, 0, rng);
        double mean = 0.0;
        for (double v : s.values.data) mean += v;
        mean /= n;
        CHECK(std::abs(mean) <= 4.0 * 0.4 / std::sqrt(static_cast<double>(n)));
    }
}

TEST_CASE("policy validation rejects bad settings") {
    NoisePolicy p = NoisePolicy::unbiased(NoisePlacement::OFS, NoiseMode::Additive, 0.2);
    p.sigma = -0.1;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);

    NoisePolicy biased = NoisePolicy::unbiased(NoisePlacement::OFS, NoiseMode::Additive, 0.2);
    biased.mu = 0.5;
    CHECK_THROWS_AS(biased.validate(), std::invalid_argument);
    biased.allow_biased = true;
    CHECK_NOTHROW(biased.validate());

    NoisePolicy mult = NoisePolicy::unbiased(NoisePlacement::OFS, NoiseMode::Multiplicative, 0.2);
    CHECK(mult.mu == 1.0);
    CHECK_NOTHROW(mult.validate());

    CounterRng rng(1);
    CHECK_THROWS_AS(sample(p, {}, 0, rng), std::invalid_argument);
}

TEST_CASE("enum parsing round-trips") {
    for (auto pl : {NoisePlacement::OFS, NoisePlacement::NFA, NoisePlacement::ES, NoisePlacement::DropPath,
                    NoisePlacement::None})
        CHECK(parse_placement(placement_name(pl)) == pl);
    CHECK_THROWS_AS(parse_placement("bogus"), std::invalid_argument);
    CHECK_THROWS_AS(parse_distribution("bogus"), std::invalid_argument);
    CHECK_THROWS_AS(parse_mode("bogus"), std::invalid_argument);
}
