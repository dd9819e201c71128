#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nd/rng.hpp"
#include "nd/tensor.hpp"

namespace nd {

enum class NoiseDistribution { Gaussian, Uniform };
enum class NoiseMode { Additive, Multiplicative };
enum class NoisePlacement { OFS, NFA, ES, DropPath, None };

const char* distribution_name(NoiseDistribution d);
const char* mode_name(NoiseMode m);
const char* placement_name(NoisePlacement p);
NoiseDistribution parse_distribution(const std::string& s);
NoiseMode parse_mode(const std::string& s);
NoisePlacement parse_placement(const std::string& s);

struct SigmaSchedule {
    enum class Kind { Fixed, LinearDecay };
    Kind kind = Kind::Fixed;
    int end_epoch = 0;  // LinearDecay only
};

// Distribution, mixing mode, placement and scale of the injected noise.
// Unbiased means mu = 0 for additive and mu = 1 for multiplicative noise;
// other centers are ablation settings and must be explicitly flagged.
struct NoisePolicy {
    NoiseDistribution distribution = NoiseDistribution::Gaussian;
    NoiseMode mode = NoiseMode::Additive;
    NoisePlacement placement = NoisePlacement::None;
    double mu = 0.0;
    double sigma = 0.0;
    SigmaSchedule schedule;
    double drop_rate = 0.0;
    bool allow_biased = false;

    void validate() const;  // throws std::invalid_argument on violations
    static NoisePolicy unbiased(NoisePlacement placement, NoiseMode mode, double sigma);
};

// A materialized draw plus the coordinates needed to replay it bitwise.
struct NoiseSample {
    Tensor values;
    std::uint64_t seed = 0;
    std::uint64_t draw_index = 0;
};

// sigma at `epoch` under the policy's schedule.
double scheduled_sigma(const NoisePolicy& policy, int epoch, int total_epochs);

// I.i.d. element draws with the scheduled sigma. Consumes one draw index of
// `rng`. For DropPath placements the values are raw uniforms in [0,1); the
// Bernoulli decision is made in apply().
NoiseSample sample(const NoisePolicy& policy, const std::vector<int>& shape, int epoch, CounterRng& rng);

// Recomputes the sample for (seed, draw_index); bitwise equal to the original.
NoiseSample replay(const NoisePolicy& policy, const std::vector<int>& shape, int epoch,
                   std::uint64_t seed, std::uint64_t draw_index);

// Whether the placement touches an op. `is_skip` marks the skip candidate.
bool placement_applies(NoisePlacement placement, bool is_skip);

// Pure-tensor application of the policy to one op output. Inside the
// supernet the same rules run through tape nodes so gradients flow.
Tensor apply(const NoisePolicy& policy, const std::string& op_name, const Tensor& op_output,
             const NoiseSample& sample);

bool op_is_skip(const std::string& op_name);

}  // namespace nd
