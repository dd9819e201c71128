#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nd/rng.hpp"
#include "nd/tensor.hpp"

namespace nd {

// Canonical candidate-op names understood by the supernet builder.
const std::vector<std::string>& registered_ops();
bool is_registered_op(const std::string& name);

struct CellEdge {
    int from = 0;
    int to = 0;
    std::vector<std::string> ops;
};

// DAG of one cell: nodes 0..num_input_nodes-1 are inputs, the rest are
// intermediate. Edges are topologically ordered (from < to).
struct CellSpec {
    int num_input_nodes = 1;
    int num_intermediate_nodes = 3;
    bool reduction = false;
    bool concat_output = false;  // concat intermediates (DARTS) vs last node (NB201)
    std::vector<CellEdge> edges;

    int num_nodes() const { return num_input_nodes + num_intermediate_nodes; }
    void validate() const;
};

enum class SpaceId { Darts, NasBench201, S1, S2, S3, S4, Custom };

std::string space_name(SpaceId id);
SpaceId parse_space(const std::string& name);

struct SpaceOverrides {
    std::vector<std::string> remove_ops;                // drop from the default menu
    std::vector<std::string> ops;                       // uniform per-edge menu
    std::vector<std::vector<std::string>> edge_ops;     // explicit per-edge menus
    std::string topology = "darts";                     // custom spaces: darts | nasbench201
};

struct SpaceSpec {
    SpaceId id = SpaceId::NasBench201;
    std::string rule;  // genotype derivation rule id
    CellSpec normal;
    std::optional<CellSpec> reduce;

    bool has_reduce() const { return reduce.has_value(); }
    std::vector<std::string> groups() const;
    const CellSpec& cell(const std::string& group) const;
    std::string name() const { return space_name(id); }
};

SpaceSpec build_space(SpaceId id, const SpaceOverrides& overrides = {});
SpaceSpec build_space(const std::string& name, const SpaceOverrides& overrides = {});

// Per-edge logit vectors, shared across all cells of a group. Keys look like
// "normal/e03"; lexicographic key order defines the flat coordinate order.
struct ArchParams {
    NamedTensors logits;

    static std::string edge_key(const std::string& group, int edge_idx);
    static ArchParams init(const SpaceSpec& space, CounterRng& rng, double jitter = 1e-3);

    std::vector<std::string> names() const;
    int dim() const;
    std::vector<double> flat() const;
    void set_flat(const std::vector<double>& v);
    const Tensor& edge(const std::string& group, int edge_idx) const;
    Tensor& edge(const std::string& group, int edge_idx);
    bool all_finite() const;
};

std::vector<double> softmax_weights(const Tensor& logits);

struct GenotypeEdge {
    int from = 0;
    int to = 0;
    std::string op;
    std::string cell;  // empty for single-group spaces
};

struct Genotype {
    std::string space;
    std::string rule;
    std::vector<GenotypeEdge> edges;
};

Genotype derive_genotype(const ArchParams& alpha, const SpaceSpec& space);
int count_op(const Genotype& genotype, const std::string& op_name);

// JSON serialization with stable key order {space, rule, edges:[{from,to,op[,cell]}]}.
std::string genotype_to_json(const Genotype& g);
Genotype genotype_from_json(const std::string& text);
// Canonical lookup key: the stable serialization, independent of the key
// order of the input document.
std::string canonical_genotype_key(const Genotype& g);

// Elementwise sum of same-shaped tensors.
Tensor node_aggregate(const std::vector<Tensor>& inputs);

}  // namespace nd
