#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "nd/noise.hpp"
#include "nd/rng.hpp"
#include "nd/searchspace.hpp"
#include "nd/tape.hpp"
#include "nd/tensor.hpp"

namespace nd {

// Train: batch statistics + running-stat updates + noise injection.
// Frozen: batch statistics, no state mutation (diagnostics over a snapshot).
// Eval: running statistics, never any noise.
enum class ForwardMode { Train, Frozen, Eval };

struct InjectionSite {
    int cell_index = 0;
    std::string group;  // normal | reduce
    int edge_index = 0;
    int op_index = 0;
    std::string op_name;
};

// Hook applied to each candidate-op output while a supernet forward is being
// built. Implementations add tape nodes (noise, probes) or pass through.
class NoiseInjector {
public:
    virtual ~NoiseInjector() = default;
    virtual NodeId apply(Tape& tape, const InjectionSite& site, NodeId op_out) = 0;
};

// Applies a NoisePolicy: one fresh replayable draw per touched site.
class PolicyInjector : public NoiseInjector {
public:
    PolicyInjector(const NoisePolicy& policy, int epoch, CounterRng& rng)
        : policy_(policy), epoch_(epoch), rng_(rng) {}
    NodeId apply(Tape& tape, const InjectionSite& site, NodeId op_out) override;

private:
    const NoisePolicy& policy_;
    int epoch_;
    CounterRng& rng_;
};

struct SupernetConfig {
    int init_channels = 8;
    int num_cells = 5;
    int num_classes = 10;
    int input_channels = 3;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;
    bool linear_head = false;   // classifier = GAP + dense only
    double noise_op_sigma = 1.0;  // scale factor of the "noise" candidate op
};

struct ForwardCtx {
    ForwardMode mode = ForwardMode::Eval;
    NoiseInjector* injector = nullptr;   // policy noise / probes
    CounterRng* noise_op_rng = nullptr;  // draws for the "noise" candidate op
    bool weights_trainable = false;      // request gradients w.r.t. weights
    bool alpha_trainable = false;        // request gradients w.r.t. alpha
};

struct ForwardResult {
    NodeId logits = kNoNode;
    std::map<std::string, NodeId> weight_leaves;
    std::map<std::string, NodeId> alpha_leaves;  // keyed by ArchParams edge key
};

// Over-parameterized network carrying every candidate op on every edge.
// Parameters are owned here; each forward pass copies them onto a fresh tape.
class Supernet {
public:
    Supernet(SpaceSpec space, SupernetConfig config, std::uint64_t init_seed);

    ForwardResult forward(Tape& tape, const Tensor& images, const ForwardCtx& ctx);
    NodeId loss(Tape& tape, const ForwardResult& fr, const std::vector<int>& labels) const;

    const SpaceSpec& space() const { return space_; }
    const SupernetConfig& config() const { return config_; }

    NamedTensors weights;
    ArchParams alpha;
    std::map<std::string, RunningStat, std::less<>> running;

    std::vector<std::string> weight_names() const;
    std::vector<std::string> alpha_leaf_names() const;  // "alpha/<edge key>", sorted
    std::uint64_t state_checksum() const;  // weights + alpha + running stats

private:
    SpaceSpec space_;
    SupernetConfig config_;
    CounterRng init_rng_;
};

// Discrete network instantiated from a genotype; used for retraining.
class DiscreteNet {
public:
    DiscreteNet(Genotype genotype, SpaceSpec space, SupernetConfig config, std::uint64_t init_seed);

    NodeId forward(Tape& tape, const Tensor& images, const ForwardCtx& ctx,
                   std::map<std::string, NodeId>* weight_leaves = nullptr);
    NodeId loss(Tape& tape, NodeId logits, const std::vector<int>& labels) const;

    const Genotype& genotype() const { return genotype_; }

    NamedTensors weights;
    std::map<std::string, RunningStat, std::less<>> running;

    std::vector<std::string> weight_names() const;

private:
    Genotype genotype_;
    SpaceSpec space_;
    SupernetConfig config_;
    CounterRng init_rng_;
};

// argmax prediction accuracy; first maximum wins on ties.
double accuracy_from_logits(const Tensor& logits, const std::vector<int>& labels);

// Evaluates one mixed edge in isolation: softmax(alpha)-weighted sum of the
// edge's candidate ops with noise placed per the policy. Owns the scratch op
// weights so repeated calls see the same parameters.
class EdgeEval {
public:
    EdgeEval(SpaceSpec space, SupernetConfig config, std::uint64_t init_seed);

    Tensor forward(const ArchParams& alpha, const std::string& group, int edge_idx, const Tensor& x,
                   const NoisePolicy& policy, int epoch, CounterRng& noise_rng, ForwardMode mode,
                   int stride = 1);

    NamedTensors weights;
    std::map<std::string, RunningStat, std::less<>> running;

private:
    SpaceSpec space_;
    SupernetConfig config_;
    CounterRng init_rng_;
};

}  // namespace nd
