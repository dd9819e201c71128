#include "nd/searchspace.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace nd {

namespace {

using ordered_json = nlohmann::ordered_json;

const std::vector<std::string> kDartsOps = {
    "max_pool_3x3", "avg_pool_3x3", "skip_connect", "sep_conv_3x3",
    "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5",
};

const std::vector<std::string> kNb201Ops = {
    "none", "skip_connect", "nor_conv_1x1", "nor_conv_3x3", "avg_pool_3x3",
};

CellSpec make_topology(const std::string& kind, bool reduction) {
    CellSpec cell;
    cell.reduction = reduction;
    if (kind == "darts") {
        cell.num_input_nodes = 2;
        cell.num_intermediate_nodes = 4;
        cell.concat_output = true;
    } else if (kind == "nasbench201") {
        cell.num_input_nodes = 1;
        cell.num_intermediate_nodes = 3;
        cell.concat_output = false;
    } else {
        throw std::invalid_argument("space: unknown topology '" + kind + "'");
    }
    for (int to = cell.num_input_nodes; to < cell.num_nodes(); ++to)
        for (int from = 0; from < to; ++from) cell.edges.push_back({from, to, {}});
    return cell;
}

void assign_ops(CellSpec& cell, const std::vector<std::string>& menu) {
    for (auto& e : cell.edges) e.ops = menu;
}

std::vector<std::string> apply_removals(std::vector<std::string> menu,
                                        const std::vector<std::string>& removals) {
    for (const auto& r : removals) {
        if (!is_registered_op(r)) throw std::invalid_argument("space: unknown op '" + r + "' in remove list");
        menu.erase(std::remove(menu.begin(), menu.end(), r), menu.end());
    }
    return menu;
}

void check_menu(const std::vector<std::string>& menu) {
    if (menu.empty()) throw std::invalid_argument("space: every edge needs at least one candidate op");
    for (const auto& op : menu)
        if (!is_registered_op(op)) throw std::invalid_argument("space: unknown op '" + op + "'");
}

}  // namespace

const std::vector<std::string>& registered_ops() {
    static const std::vector<std::string> ops = {
        "none",         "skip_connect", "max_pool_3x3", "avg_pool_3x3", "sep_conv_3x3",
        "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5", "nor_conv_1x1", "nor_conv_3x3",
        "noise",
    };
    return ops;
}

bool is_registered_op(const std::string& name) {
    const auto& ops = registered_ops();
    return std::find(ops.begin(), ops.end(), name) != ops.end();
}

void CellSpec::validate() const {
    for (const auto& e : edges) {
        if (e.from >= e.to || e.from < 0 || e.to >= num_nodes())
            throw std::invalid_argument("space: edge " + std::to_string(e.from) + "->" + std::to_string(e.to) +
                                        " violates the DAG ordering");
        check_menu(e.ops);
    }
}

std::string space_name(SpaceId id) {
    switch (id) {
        case SpaceId::Darts: return "darts";
        case SpaceId::NasBench201: return "nasbench201";
        case SpaceId::S1: return "s1";
        case SpaceId::S2: return "s2";
        case SpaceId::S3: return "s3";
        case SpaceId::S4: return "s4";
        case SpaceId::Custom: return "custom";
    }
    return "?";
}

SpaceId parse_space(const std::string& name) {
    for (SpaceId id : {SpaceId::Darts, SpaceId::NasBench201, SpaceId::S1, SpaceId::S2, SpaceId::S3,
                       SpaceId::S4, SpaceId::Custom})
        if (space_name(id) == name) return id;
    throw std::invalid_argument("space: unknown space '" + name + "'");
}

std::vector<std::string> SpaceSpec::groups() const {
    return has_reduce() ? std::vector<std::string>{"normal", "reduce"} : std::vector<std::string>{"normal"};
}

const CellSpec& SpaceSpec::cell(const std::string& group) const {
    if (group == "normal") return normal;
    if (group == "reduce" && reduce) return *reduce;
    throw std::invalid_argument("space: unknown cell group '" + group + "'");
}

SpaceSpec build_space(SpaceId id, const SpaceOverrides& ov) {
    SpaceSpec spec;
    spec.id = id;

    auto darts_like = [&](const std::vector<std::string>& menu) {
        spec.rule = "darts-top2";
        spec.normal = make_topology("darts", false);
        spec.reduce = make_topology("darts", true);
        assign_ops(spec.normal, menu);
        assign_ops(*spec.reduce, menu);
    };

    switch (id) {
        case SpaceId::Darts:
            darts_like(apply_removals(kDartsOps, ov.remove_ops));
            break;
        case SpaceId::NasBench201: {
            spec.rule = "nb201-argmax";
            spec.normal = make_topology("nasbench201", false);
            assign_ops(spec.normal, apply_removals(kNb201Ops, ov.remove_ops));
            break;
        }
        case SpaceId::S2:
            darts_like({"sep_conv_3x3", "skip_connect"});
            break;
        case SpaceId::S3:
            darts_like({"sep_conv_3x3", "skip_connect", "none"});
            break;
        case SpaceId::S4:
            darts_like({"sep_conv_3x3", "noise"});
            break;
        case SpaceId::S1:
        case SpaceId::Custom: {
            const bool nb201 = ov.topology == "nasbench201";
            spec.rule = nb201 ? "nb201-argmax" : "darts-top2";
            spec.normal = make_topology(ov.topology, false);
            if (!nb201) spec.reduce = make_topology(ov.topology, true);
            if (!ov.edge_ops.empty()) {
                if (ov.edge_ops.size() != spec.normal.edges.size())
                    throw std::invalid_argument("space: edge_ops has " + std::to_string(ov.edge_ops.size()) +
                                                " menus for " + std::to_string(spec.normal.edges.size()) +
                                                " edges");
                for (size_t e = 0; e < ov.edge_ops.size(); ++e) {
                    spec.normal.edges[e].ops = ov.edge_ops[e];
                    if (spec.reduce) spec.reduce->edges[e].ops = ov.edge_ops[e];
                }
            } else if (!ov.ops.empty()) {
                assign_ops(spec.normal, ov.ops);
                if (spec.reduce) assign_ops(*spec.reduce, ov.ops);
            } else {
                throw std::invalid_argument("space: " + space_name(id) +
                                            " requires per-edge op lists (ops or edge_ops)");
            }
            break;
        }
    }
    spec.normal.validate();
    if (spec.reduce) spec.reduce->validate();
    return spec;
}

SpaceSpec build_space(const std::string& name, const SpaceOverrides& ov) {
    return build_space(parse_space(name), ov);
}

std::string ArchParams::edge_key(const std::string& group, int edge_idx) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "e%02d", edge_idx);
    return group + "/" + buf;
}

ArchParams ArchParams::init(const SpaceSpec& space, CounterRng& rng, double jitter) {
    ArchParams a;
    for (const auto& group : space.groups()) {
        const CellSpec& cell = space.cell(group);
        for (size_t e = 0; e < cell.edges.size(); ++e) {
            const int m = static_cast<int>(cell.edges[e].ops.size());
            a.logits[edge_key(group, static_cast<int>(e))] =
                rng.normal_tensor({m}, 0.0, jitter);
        }
    }
    return a;
}

std::vector<std::string> ArchParams::names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : logits) out.push_back(k);
    return out;
}

int ArchParams::dim() const {
    int d = 0;
    for (const auto& [k, v] : logits) d += static_cast<int>(v.numel());
    return d;
}

std::vector<double> ArchParams::flat() const {
    std::vector<double> out;
    for (const auto& [k, v] : logits) out.insert(out.end(), v.data.begin(), v.data.end());
    return out;
}

void ArchParams::set_flat(const std::vector<double>& v) {
    size_t off = 0;
    for (auto& [k, t] : logits) {
        if (off + t.data.size() > v.size()) throw std::invalid_argument("arch: flat vector too short");
        std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(off), t.data.size(), t.data.begin());
        off += t.data.size();
    }
    if (off != v.size()) throw std::invalid_argument("arch: flat vector too long");
}

const Tensor& ArchParams::edge(const std::string& group, int edge_idx) const {
    auto it = logits.find(edge_key(group, edge_idx));
    if (it == logits.end()) throw std::invalid_argument("arch: no logits for " + edge_key(group, edge_idx));
    return it->second;
}

Tensor& ArchParams::edge(const std::string& group, int edge_idx) {
    auto it = logits.find(edge_key(group, edge_idx));
    if (it == logits.end()) throw std::invalid_argument("arch: no logits for " + edge_key(group, edge_idx));
    return it->second;
}

bool ArchParams::all_finite() const {
    for (const auto& [k, v] : logits)
        if (!v.all_finite()) return false;
    return true;
}

std::vector<double> softmax_weights(const Tensor& logits) {
    std::vector<double> w(logits.data.size());
    double m = logits.data[0];
    for (double v : logits.data) m = std::max(m, v);
    double s = 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
        w[i] = std::exp(logits.data[i] - m);
        s += w[i];
    }
    for (auto& v : w) v /= s;
    return w;
}

namespace {

// Highest softmax weight over non-"none" ops; -1 when the menu is all "none".
std::pair<double, int> best_nonzero_op(const std::vector<std::string>& ops, const std::vector<double>& w) {
    double best = -1.0;
    int best_idx = -1;
    for (size_t k = 0; k < ops.size(); ++k) {
        if (ops[k] == "none") continue;
        if (w[k] > best) {  // strict > keeps the lowest index on ties
            best = w[k];
            best_idx = static_cast<int>(k);
        }
    }
    return {best, best_idx};
}

}  // namespace

Genotype derive_genotype(const ArchParams& alpha, const SpaceSpec& space) {
    if (!alpha.all_finite()) throw std::invalid_argument("derive_genotype: non-finite logits");
    Genotype g;
    g.space = space.name();
    g.rule = space.rule;
    const bool tag_cells = space.has_reduce();

    for (const auto& group : space.groups()) {
        const CellSpec& cell = space.cell(group);
        if (space.rule == "nb201-argmax") {
            for (size_t e = 0; e < cell.edges.size(); ++e) {
                const auto w = softmax_weights(alpha.edge(group, static_cast<int>(e)));
                int best = 0;
                for (size_t k = 1; k < w.size(); ++k)
                    if (w[k] > w[static_cast<size_t>(best)]) best = static_cast<int>(k);
                g.edges.push_back({cell.edges[e].from, cell.edges[e].to, cell.edges[e].ops[static_cast<size_t>(best)],
                                   tag_cells ? group : ""});
            }
            continue;
        }

        // darts-top2: per intermediate node keep the two incoming edges with
        // the largest maximal non-zero-op weight, then the best non-zero op
        // on each kept edge.
        for (int node = cell.num_input_nodes; node < cell.num_nodes(); ++node) {
            struct Cand {
                double score;
                int from;
                size_t edge_idx;
                int op_idx;
            };
            std::vector<Cand> cands;
            for (size_t e = 0; e < cell.edges.size(); ++e) {
                if (cell.edges[e].to != node) continue;
                const auto w = softmax_weights(alpha.edge(group, static_cast<int>(e)));
                auto [score, op_idx] = best_nonzero_op(cell.edges[e].ops, w);
                if (op_idx < 0) continue;
                cands.push_back({score, cell.edges[e].from, e, op_idx});
            }
            if (cands.size() < 2)
                throw std::invalid_argument("derive_genotype: node " + std::to_string(node) + " has only " +
                                            std::to_string(cands.size()) + " edges with a non-zero op");
            std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
                if (a.score != b.score) return a.score > b.score;
                return a.from < b.from;
            });
            std::vector<Cand> kept(cands.begin(), cands.begin() + 2);
            std::sort(kept.begin(), kept.end(), [](const Cand& a, const Cand& b) { return a.from < b.from; });
            for (const auto& c : kept)
                g.edges.push_back({cell.edges[c.edge_idx].from, cell.edges[c.edge_idx].to,
                                   cell.edges[c.edge_idx].ops[static_cast<size_t>(c.op_idx)],
                                   tag_cells ? group : ""});
        }
    }
    return g;
}

int count_op(const Genotype& genotype, const std::string& op_name) {
    if (!is_registered_op(op_name)) throw std::invalid_argument("count_op: unknown op '" + op_name + "'");
    int n = 0;
    for (const auto& e : genotype.edges)
        if (e.op == op_name) ++n;
    return n;
}

std::string genotype_to_json(const Genotype& g) {
    ordered_json j;
    j["space"] = g.space;
    j["rule"] = g.rule;
    j["edges"] = ordered_json::array();
    for (const auto& e : g.edges) {
        ordered_json je;
        je["from"] = e.from;
        je["to"] = e.to;
        je["op"] = e.op;
        if (!e.cell.empty()) je["cell"] = e.cell;
        j["edges"].push_back(je);
    }
    return j.dump();
}

Genotype genotype_from_json(const std::string& text) {
    ordered_json j = ordered_json::parse(text);
    Genotype g;
    g.space = j.at("space").get<std::string>();
    g.rule = j.at("rule").get<std::string>();
    for (const auto& je : j.at("edges")) {
        GenotypeEdge e;
        e.from = je.at("from").get<int>();
        e.to = je.at("to").get<int>();
        e.op = je.at("op").get<std::string>();
        if (je.contains("cell")) e.cell = je.at("cell").get<std::string>();
        g.edges.push_back(e);
    }
    return g;
}

std::string canonical_genotype_key(const Genotype& g) {
    Genotype sorted = g;
    std::stable_sort(sorted.edges.begin(), sorted.edges.end(), [](const GenotypeEdge& a, const GenotypeEdge& b) {
        if (a.cell != b.cell) return a.cell < b.cell;
        if (a.to != b.to) return a.to < b.to;
        return a.from < b.from;
    });
    return genotype_to_json(sorted);
}

Tensor node_aggregate(const std::vector<Tensor>& inputs) {
    if (inputs.empty()) throw std::invalid_argument("node_aggregate: no inputs");
    Tensor out = inputs[0];
    for (size_t i = 1; i < inputs.size(); ++i) {
        if (!inputs[i].same_shape(out))
            throw std::invalid_argument("node_aggregate: shape mismatch " + shape_str(out.shape) + " vs " +
                                        shape_str(inputs[i].shape));
        for (std::int64_t k = 0; k < out.numel(); ++k) out.at(k) += inputs[i].at(k);
    }
    return out;
}

}  // namespace nd
