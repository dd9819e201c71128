#include "nd/noise.hpp"

#include <cmath>
#include <stdexcept>

namespace nd {

const char* distribution_name(NoiseDistribution d) {
    return d == NoiseDistribution::Gaussian ? "gaussian" : "uniform";
}

const char* mode_name(NoiseMode m) { return m == NoiseMode::Additive ? "additive" : "multiplicative"; }

const char* placement_name(NoisePlacement p) {
    switch (p) {
        case NoisePlacement::OFS: return "ofs";
        case NoisePlacement::NFA: return "nfa";
        case NoisePlacement::ES: return "es";
        case NoisePlacement::DropPath: return "drop_path";
        case NoisePlacement::None: return "none";
    }
    return "?";
}

NoiseDistribution parse_distribution(const std::string& s) {
    if (s == "gaussian") return NoiseDistribution::Gaussian;
    if (s == "uniform") return NoiseDistribution::Uniform;
    throw std::invalid_argument("noise: unknown distribution '" + s + "'");
}

NoiseMode parse_mode(const std::string& s) {
    if (s == "additive") return NoiseMode::Additive;
    if (s == "multiplicative") return NoiseMode::Multiplicative;
    throw std::invalid_argument("noise: unknown mode '" + s + "'");
}

NoisePlacement parse_placement(const std::string& s) {
    if (s == "ofs") return NoisePlacement::OFS;
    if (s == "nfa") return NoisePlacement::NFA;
    if (s == "es") return NoisePlacement::ES;
    if (s == "drop_path") return NoisePlacement::DropPath;
    if (s == "none") return NoisePlacement::None;
    throw std::invalid_argument("noise: unknown placement '" + s + "'");
}

void NoisePolicy::validate() const {
    if (sigma < 0.0) throw std::invalid_argument("noise: sigma must be >= 0, got " + format_double(sigma));
    if (drop_rate < 0.0 || drop_rate >= 1.0)
        throw std::invalid_argument("noise: drop_rate must be in [0,1), got " + format_double(drop_rate));
    if (!allow_biased && placement != NoisePlacement::DropPath && placement != NoisePlacement::None) {
        const double unbiased_mu = mode == NoiseMode::Additive ? 0.0 : 1.0;
        if (mu != unbiased_mu)
            throw std::invalid_argument(std::string("noise: ") + mode_name(mode) + " policy with mu=" +
                                        format_double(mu) + " is biased; set allow_biased for ablations");
    }
    if (schedule.kind == SigmaSchedule::Kind::LinearDecay && schedule.end_epoch <= 0)
        throw std::invalid_argument("noise: linear decay needs end_epoch > 0");
}

NoisePolicy NoisePolicy::unbiased(NoisePlacement placement, NoiseMode mode, double sigma) {
    NoisePolicy p;
    p.placement = placement;
    p.mode = mode;
    p.mu = mode == NoiseMode::Additive ? 0.0 : 1.0;
    p.sigma = sigma;
    return p;
}

double scheduled_sigma(const NoisePolicy& policy, int epoch, int total_epochs) {
    if (epoch < 0 || (total_epochs > 0 && epoch >= total_epochs))
        throw std::invalid_argument("noise: epoch " + std::to_string(epoch) + " outside [0," +
                                    std::to_string(total_epochs) + ")");
    if (policy.schedule.kind == SigmaSchedule::Kind::Fixed) return policy.sigma;
    const double frac = static_cast<double>(epoch) / static_cast<double>(policy.schedule.end_epoch);
    return policy.sigma * std::max(0.0, 1.0 - frac);
}

NoiseSample replay(const NoisePolicy& policy, const std::vector<int>& shape, int epoch,
                   std::uint64_t seed, std::uint64_t draw_index) {
    if (shape.empty()) throw std::invalid_argument("noise: sample shape must be nonempty");
    if (policy.sigma < 0.0) throw std::invalid_argument("noise: sigma must be >= 0");
    const double sig = scheduled_sigma(policy, epoch, 0);

    NoiseSample s;
    s.seed = seed;
    s.draw_index = draw_index;
    s.values = Tensor(shape);
    const std::int64_t n = s.values.numel();
    if (policy.placement == NoisePlacement::DropPath) {
        for (std::int64_t e = 0; e < n; ++e)
            s.values.at(e) = CounterRng::element_uniform01(seed, draw_index, static_cast<std::uint64_t>(e));
        return s;
    }
    if (policy.distribution == NoiseDistribution::Gaussian) {
        for (std::int64_t e = 0; e < n; ++e)
            s.values.at(e) =
                policy.mu + sig * CounterRng::element_normal(seed, draw_index, static_cast<std::uint64_t>(e));
    } else {
        // uniform on [mu - sqrt(3) sigma, mu + sqrt(3) sigma]: mean mu, std sigma
        const double half = std::sqrt(3.0) * sig;
        for (std::int64_t e = 0; e < n; ++e)
            s.values.at(e) =
                policy.mu +
                half * (2.0 * CounterRng::element_uniform01(seed, draw_index, static_cast<std::uint64_t>(e)) - 1.0);
    }
    return s;
}

NoiseSample sample(const NoisePolicy& policy, const std::vector<int>& shape, int epoch, CounterRng& rng) {
    return replay(policy, shape, epoch, rng.seed(), rng.next_index());
}

bool op_is_skip(const std::string& op_name) { return op_name == "skip_connect"; }

bool placement_applies(NoisePlacement placement, bool is_skip) {
    switch (placement) {
        case NoisePlacement::OFS: return is_skip;
        case NoisePlacement::NFA: return true;
        case NoisePlacement::ES: return !is_skip;
        case NoisePlacement::DropPath: return is_skip;
        case NoisePlacement::None: return false;
    }
    return false;
}

Tensor apply(const NoisePolicy& policy, const std::string& op_name, const Tensor& op_output,
             const NoiseSample& sample) {
    if (policy.placement == NoisePlacement::None) return op_output;
    if (!sample.values.same_shape(op_output))
        throw std::invalid_argument("noise: sample shape " + shape_str(sample.values.shape) +
                                    " does not match op output " + shape_str(op_output.shape));
    if (!placement_applies(policy.placement, op_is_skip(op_name))) return op_output;

    Tensor out = op_output;
    if (policy.placement == NoisePlacement::DropPath) {
        // whole-sample paths: one coin per batch element, read from the first
        // uniform of that slice
        const int B = out.ndim() > 0 ? out.dim(0) : 1;
        const std::int64_t stride = B > 0 ? out.numel() / B : 0;
        const double keep_scale = 1.0 / (1.0 - policy.drop_rate);
        for (int b = 0; b < B; ++b) {
            const double u = sample.values.at(b * stride);
            const double m = u < policy.drop_rate ? 0.0 : keep_scale;
            for (std::int64_t i = 0; i < stride; ++i) out.at(b * stride + i) *= m;
        }
        return out;
    }
    if (policy.mode == NoiseMode::Additive) {
        for (std::int64_t i = 0; i < out.numel(); ++i) out.at(i) += sample.values.at(i);
    } else {
        for (std::int64_t i = 0; i < out.numel(); ++i) out.at(i) *= sample.values.at(i);
    }
    return out;
}

}  // namespace nd
