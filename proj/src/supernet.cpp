#include "nd/supernet.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nd {

namespace {

enum class InitKind { ConvWeight, DenseWeight, Ones, Zeros };

Tensor init_tensor(CounterRng& rng, const std::vector<int>& shape, InitKind kind) {
    switch (kind) {
        case InitKind::ConvWeight: {
            const double fan_in = static_cast<double>(shape[1]) * shape[2] * shape[3];
            return rng.normal_tensor(shape, 0.0, std::sqrt(2.0 / fan_in));
        }
        case InitKind::DenseWeight: {
            const double fan_in = static_cast<double>(shape[1]);
            return rng.normal_tensor(shape, 0.0, std::sqrt(1.0 / fan_in));
        }
        case InitKind::Ones: return Tensor::full(shape, 1.0);
        case InitKind::Zeros: return Tensor::zeros(shape);
    }
    return Tensor::zeros(shape);
}

// Per-pass construction state shared by the supernet and the discrete net.
// Name maps are ordered with transparent comparators so steady-state lookups
// run on a reused scratch buffer without allocating.
struct NetBuild {
    Tape& tape;
    NamedTensors& params;
    std::map<std::string, RunningStat, std::less<>>& running;
    CounterRng& init_rng;
    const ForwardCtx& ctx;
    const SupernetConfig& cfg;
    std::map<std::string, NodeId, std::less<>> leaves;
    std::map<std::string, NodeId> alpha_leaves;
    std::map<std::string, NodeId> softmax_cache;
    std::string namebuf;

    std::string_view join(const std::string& prefix, std::string_view suffix) {
        namebuf.assign(prefix);
        namebuf.append(suffix);
        return namebuf;
    }

    NodeId param(const std::string& prefix, std::string_view suffix, const std::vector<int>& shape,
                 InitKind kind) {
        const std::string_view name = join(prefix, suffix);
        auto lit = leaves.find(name);
        if (lit != leaves.end()) return lit->second;
        auto pit = params.find(name);
        if (pit == params.end()) pit = params.emplace(std::string(name), init_tensor(init_rng, shape, kind)).first;
        if (pit->second.shape != shape)
            throw std::logic_error("supernet: parameter '" + std::string(name) + "' shape " +
                                   shape_str(pit->second.shape) + " does not match requested " +
                                   shape_str(shape));
        NodeId id = tape.leaf(pit->second, pit->first, ctx.weights_trainable);
        leaves.emplace(pit->first, id);
        return id;
    }

    NormAttrs bn_attrs(const std::string& name, int channels) {
        auto it = running.find(name);
        if (it == running.end())
            it = running.emplace(name, RunningStat{Tensor::zeros({channels}), Tensor::full({channels}, 1.0)}).first;
        NormAttrs a;
        a.running = &it->second;
        a.eps = cfg.bn_eps;
        a.momentum = cfg.bn_momentum;
        a.use_batch_stats = ctx.mode != ForwardMode::Eval;
        a.update_running = ctx.mode == ForwardMode::Train;
        return a;
    }

    NodeId bn(const std::string& prefix, NodeId x, int channels) {
        NodeId g = param(prefix, "/g", {channels}, InitKind::Ones);
        NodeId b = param(prefix, "/b", {channels}, InitKind::Zeros);
        return tape.batch_affine_norm(x, g, b, bn_attrs(prefix, channels));
    }

    NodeId conv(const std::string& prefix, NodeId x, int cin, int cout, int k, int stride, int pad,
                int dilation, int groups) {
        NodeId w = param(prefix, "/w", {cout, cin / groups, k, k}, InitKind::ConvWeight);
        return tape.conv2d(x, w, kNoNode, {stride, pad, dilation, groups});
    }

    NodeId relu_conv_bn(const std::string& prefix, NodeId x, int cin, int cout, int k, int stride,
                        int pad, int dilation = 1, int groups = 1) {
        NodeId h = tape.relu(x);
        h = conv(prefix + "/conv", h, cin, cout, k, stride, pad, dilation, groups);
        return bn(prefix + "/bn", h, cout);
    }

    // one depthwise+pointwise round of a separable conv
    NodeId sep_round(const std::string& prefix, NodeId x, int channels, int k, int stride) {
        NodeId h = tape.relu(x);
        h = conv(prefix + "/dw", h, channels, channels, k, stride, k / 2, 1, channels);
        h = conv(prefix + "/pw", h, channels, channels, 1, 1, 0, 1, 1);
        return bn(prefix + "/bn", h, channels);
    }

    NodeId candidate_op(const std::string& prefix, const std::string& op, NodeId x, int channels, int stride) {
        if (op == "none") return tape.zero_like(x, stride);
        if (op == "skip_connect") {
            if (stride == 1) return x;
            NodeId h = tape.relu(x);
            h = conv(prefix + "/proj/conv", h, channels, channels, 1, stride, 0, 1, 1);
            return bn(prefix + "/proj/bn", h, channels);
        }
        if (op == "max_pool_3x3") return tape.max_pool(x, {3, stride, 1, false});
        if (op == "avg_pool_3x3") return tape.avg_pool(x, {3, stride, 1, false});
        if (op == "nor_conv_1x1") return relu_conv_bn(prefix, x, channels, channels, 1, stride, 0);
        if (op == "nor_conv_3x3") return relu_conv_bn(prefix, x, channels, channels, 3, stride, 1);
        if (op == "sep_conv_3x3" || op == "sep_conv_5x5") {
            const int k = op == "sep_conv_3x3" ? 3 : 5;
            NodeId h = sep_round(prefix + "/s0", x, channels, k, stride);
            return sep_round(prefix + "/s1", h, channels, k, 1);
        }
        if (op == "dil_conv_3x3" || op == "dil_conv_5x5") {
            const int k = op == "dil_conv_3x3" ? 3 : 5;
            NodeId h = tape.relu(x);
            h = conv(prefix + "/dw", h, channels, channels, k, stride, k - 1, 2, channels);
            h = conv(prefix + "/pw", h, channels, channels, 1, 1, 0, 1, 1);
            return bn(prefix + "/bn", h, channels);
        }
        if (op == "noise") {
            NodeId zeros = tape.zero_like(x, stride);
            if (ctx.mode != ForwardMode::Train) return zeros;
            if (!ctx.noise_op_rng)
                throw std::logic_error("supernet: the noise candidate op needs a random stream in train mode");
            const double scale = tape.value(x).rms() * cfg.noise_op_sigma;
            Tensor draw = ctx.noise_op_rng->normal_tensor(tape.value(zeros).shape, 0.0, 1.0);
            for (auto& v : draw.data) v *= scale;
            return tape.leaf(std::move(draw));
        }
        throw std::invalid_argument("supernet: unknown candidate op '" + op + "'");
    }

    NodeId alpha_leaf(const ArchParams& alpha, const std::string& group, int edge_idx) {
        const std::string key = ArchParams::edge_key(group, edge_idx);
        auto it = alpha_leaves.find(key);
        if (it != alpha_leaves.end()) return it->second;
        NodeId id = tape.leaf(alpha.edge(group, edge_idx), "alpha/" + key, ctx.alpha_trainable);
        alpha_leaves.emplace(key, id);
        return id;
    }

    NodeId edge_softmax(const ArchParams& alpha, const std::string& group, int edge_idx) {
        const std::string key = ArchParams::edge_key(group, edge_idx);
        auto it = softmax_cache.find(key);
        if (it != softmax_cache.end()) return it->second;
        NodeId sm = tape.softmax(alpha_leaf(alpha, group, edge_idx));
        softmax_cache.emplace(key, sm);
        return sm;
    }

    NodeId mixed_edge(const ArchParams& alpha, const std::string& group, int cell_idx, int edge_idx,
                      const CellEdge& edge, NodeId x, int channels, int stride,
                      const std::string& cell_prefix) {
        NodeId sm = edge_softmax(alpha, group, edge_idx);
        NodeId acc = kNoNode;
        char ebuf[8];
        std::snprintf(ebuf, sizeof(ebuf), "e%02d", edge_idx);
        for (size_t k = 0; k < edge.ops.size(); ++k) {
            const std::string prefix = cell_prefix + "/" + ebuf + "/op" + std::to_string(k);
            NodeId out = candidate_op(prefix, edge.ops[k], x, channels, stride);
            if (ctx.injector) {
                InjectionSite site{cell_idx, group, edge_idx, static_cast<int>(k), edge.ops[k]};
                out = ctx.injector->apply(tape, site, out);
            }
            NodeId term = tape.mul_scalar_node(out, tape.index_scalar(sm, static_cast<int>(k)));
            acc = acc == kNoNode ? term : tape.add(acc, term);
        }
        return acc;
    }

    // NB201-style cell: single input, node j sums all incoming mixed edges.
    NodeId nb201_cell(const ArchParams& alpha, const CellSpec& cell, const std::string& group,
                      int cell_idx, NodeId x, int channels) {
        char cbuf[16];
        std::snprintf(cbuf, sizeof(cbuf), "cell%02d", cell_idx);
        std::vector<NodeId> nodes{x};
        for (int to = cell.num_input_nodes; to < cell.num_nodes(); ++to) {
            NodeId acc = kNoNode;
            for (size_t e = 0; e < cell.edges.size(); ++e) {
                if (cell.edges[e].to != to) continue;
                NodeId term = mixed_edge(alpha, group, cell_idx, static_cast<int>(e), cell.edges[e],
                                         nodes[static_cast<size_t>(cell.edges[e].from)], channels, 1, cbuf);
                acc = acc == kNoNode ? term : tape.add(acc, term);
            }
            nodes.push_back(acc);
        }
        return nodes.back();
    }

    // DARTS-style cell over two preprocessed inputs; concatenates the
    // intermediate nodes along channels.
    NodeId darts_cell(const ArchParams& alpha, const CellSpec& cell, const std::string& group,
                      int cell_idx, NodeId s0, NodeId s1, int c0, int c1, int channels, bool reduction,
                      bool prev_reduction) {
        char cbuf[16];
        std::snprintf(cbuf, sizeof(cbuf), "cell%02d", cell_idx);
        const std::string cp(cbuf);
        NodeId p0 = prev_reduction ? relu_conv_bn(cp + "/pre0", s0, c0, channels, 1, 2, 0)
                                   : relu_conv_bn(cp + "/pre0", s0, c0, channels, 1, 1, 0);
        NodeId p1 = relu_conv_bn(cp + "/pre1", s1, c1, channels, 1, 1, 0);
        std::vector<NodeId> states{p0, p1};
        for (int to = cell.num_input_nodes; to < cell.num_nodes(); ++to) {
            NodeId acc = kNoNode;
            for (size_t e = 0; e < cell.edges.size(); ++e) {
                if (cell.edges[e].to != to) continue;
                const int stride = reduction && cell.edges[e].from < cell.num_input_nodes ? 2 : 1;
                NodeId term = mixed_edge(alpha, group, cell_idx, static_cast<int>(e), cell.edges[e],
                                         states[static_cast<size_t>(cell.edges[e].from)], channels, stride, cp);
                acc = acc == kNoNode ? term : tape.add(acc, term);
            }
            states.push_back(acc);
        }
        return tape.concat_channels(
            std::vector<NodeId>(states.begin() + cell.num_input_nodes, states.end()));
    }

    // NB201 macro: fixed residual reduction block between cell stages.
    NodeId reduction_block(const std::string& prefix, NodeId x, int cin, int cout) {
        NodeId a = relu_conv_bn(prefix + "/a", x, cin, cout, 3, 2, 1);
        NodeId b = relu_conv_bn(prefix + "/b", a, cout, cout, 3, 1, 1);
        NodeId s = tape.avg_pool(x, {2, 2, 0, true});
        s = conv(prefix + "/short/conv", s, cin, cout, 1, 1, 0, 1, 1);
        return tape.add(b, s);
    }

    NodeId classifier(NodeId x, int channels) {
        if (!cfg.linear_head) {
            x = bn("head/bn", x, channels);
            x = tape.relu(x);
        }
        NodeId pooled = tape.global_avg_pool(x);
        NodeId w = param("head/fc", "/w", {cfg.num_classes, channels}, InitKind::DenseWeight);
        NodeId b = param("head/fc", "/b", {cfg.num_classes}, InitKind::Zeros);
        return tape.dense(pooled, w, b);
    }
};

void check_images(const Tensor& images, int want_channels) {
    if (images.ndim() != 4)
        throw std::invalid_argument("supernet: images must be (B,C,H,W), got " + shape_str(images.shape));
    if (images.dim(1) != want_channels)
        throw std::invalid_argument("supernet: expected " + std::to_string(want_channels) +
                                    " input channels, got " + shape_str(images.shape));
}

std::vector<int> stage_sizes(int num_cells) {
    const int base = num_cells / 3, rem = num_cells % 3;
    return {base + (rem > 0 ? 1 : 0), base + (rem > 1 ? 1 : 0), base};
}

}  // namespace

NodeId PolicyInjector::apply(Tape& tape, const InjectionSite& site, NodeId op_out) {
    if (!placement_applies(policy_.placement, op_is_skip(site.op_name))) return op_out;
    if (policy_.placement == NoisePlacement::DropPath) {
        if (policy_.drop_rate == 0.0) return op_out;
        NoiseSample s = sample(policy_, tape.value(op_out).shape, epoch_, rng_);
        Tensor mask(tape.value(op_out).shape);
        const int B = mask.dim(0);
        const std::int64_t stride = mask.numel() / B;
        const double keep = 1.0 / (1.0 - policy_.drop_rate);
        for (int b = 0; b < B; ++b) {
            const double m = s.values.at(b * stride) < policy_.drop_rate ? 0.0 : keep;
            for (std::int64_t i = 0; i < stride; ++i) mask.at(b * stride + i) = m;
        }
        return tape.elementwise_mul(op_out, tape.leaf(std::move(mask)));
    }
    const double sig = scheduled_sigma(policy_, epoch_, 0);
    const double neutral_mu = policy_.mode == NoiseMode::Additive ? 0.0 : 1.0;
    if (sig == 0.0 && policy_.mu == neutral_mu) return op_out;  // exact fallback, no draw
    NoiseSample s = sample(policy_, tape.value(op_out).shape, epoch_, rng_);
    NodeId noise = tape.leaf(std::move(s.values));
    return policy_.mode == NoiseMode::Additive ? tape.add(op_out, noise) : tape.elementwise_mul(op_out, noise);
}

Supernet::Supernet(SpaceSpec space, SupernetConfig config, std::uint64_t init_seed)
    : space_(std::move(space)), config_(config), init_rng_(derive_seed(init_seed, "init")) {
    CounterRng alpha_rng(derive_seed(init_seed, "alpha"));
    alpha = ArchParams::init(space_, alpha_rng);
    // materialize every parameter and running stat up front
    Tape tape;
    ForwardCtx ctx;
    ctx.mode = ForwardMode::Eval;
    const int s = 4 * (1 << 2);  // smallest extent that survives both reductions
    forward(tape, Tensor::zeros({1, config_.input_channels, s, s}), ctx);
}

ForwardResult Supernet::forward(Tape& tape, const Tensor& images, const ForwardCtx& ctx) {
    check_images(images, config_.input_channels);
    NetBuild nb{tape, weights, running, init_rng_, ctx, config_, {}, {}, {}};
    NodeId x = tape.leaf(images);
    ForwardResult fr;

    if (!space_.normal.concat_output) {
        // NB201-style macro: stem, three stages of cells, residual reductions
        int c = config_.init_channels;
        x = nb.bn("stem/bn", nb.conv("stem/conv", x, config_.input_channels, c, 3, 1, 1, 1, 1), c);
        const auto stages = stage_sizes(config_.num_cells);
        int cell_idx = 0;
        for (size_t stage = 0; stage < stages.size(); ++stage) {
            if (stage > 0) {
                x = nb.reduction_block("reduce" + std::to_string(stage - 1), x, c, 2 * c);
                c *= 2;
            }
            for (int i = 0; i < stages[stage]; ++i, ++cell_idx)
                x = nb.nb201_cell(alpha, space_.normal, "normal", cell_idx, x, c);
        }
        fr.logits = nb.classifier(x, c);
    } else {
        // DARTS-style macro: two-input cells, channel concatenation
        const int stem_mult = 3;
        int c_curr = config_.init_channels;
        int c0 = stem_mult * c_curr, c1 = stem_mult * c_curr;
        NodeId stem = nb.bn("stem/bn", nb.conv("stem/conv", x, config_.input_channels, c0, 3, 1, 1, 1, 1), c0);
        NodeId s0 = stem, s1 = stem;
        bool prev_reduction = false;
        for (int i = 0; i < config_.num_cells; ++i) {
            const bool reduction =
                config_.num_cells >= 3 && (i == config_.num_cells / 3 || i == 2 * config_.num_cells / 3);
            if (reduction) c_curr *= 2;
            const CellSpec& cell = reduction ? *space_.reduce : space_.normal;
            NodeId out = nb.darts_cell(alpha, cell, reduction ? "reduce" : "normal", i, s0, s1, c0, c1,
                                       c_curr, reduction, prev_reduction);
            s0 = s1;
            c0 = c1;
            s1 = out;
            c1 = cell.num_intermediate_nodes * c_curr;
            prev_reduction = reduction;
        }
        fr.logits = nb.classifier(s1, c1);
    }

    fr.weight_leaves.insert(nb.leaves.begin(), nb.leaves.end());
    fr.alpha_leaves = std::move(nb.alpha_leaves);
    return fr;
}

NodeId Supernet::loss(Tape& tape, const ForwardResult& fr, const std::vector<int>& labels) const {
    return tape.cross_entropy_with_logits(fr.logits, labels);
}

std::vector<std::string> Supernet::weight_names() const {
    std::vector<std::string> names;
    for (const auto& [k, v] : weights) names.push_back(k);
    return names;
}

std::vector<std::string> Supernet::alpha_leaf_names() const {
    std::vector<std::string> names;
    for (const auto& [k, v] : alpha.logits) names.push_back("alpha/" + k);
    return names;
}

std::uint64_t Supernet::state_checksum() const {
    std::uint64_t h = 0x9e3779b97f4a7c15ull;
    for (const auto& [k, v] : weights) h = mix3(h, derive_seed(0, k), checksum(v));
    for (const auto& [k, v] : alpha.logits) h = mix3(h, derive_seed(1, k), checksum(v));
    for (const auto& [k, v] : running) h = mix3(h, mix3(derive_seed(2, k), checksum(v.mean), 0), checksum(v.var));
    return h;
}

DiscreteNet::DiscreteNet(Genotype genotype, SpaceSpec space, SupernetConfig config, std::uint64_t init_seed)
    : genotype_(std::move(genotype)), space_(std::move(space)), config_(config),
      init_rng_(derive_seed(init_seed, "init")) {
    if (genotype_.space != space_.name())
        throw std::invalid_argument("retrain: genotype space '" + genotype_.space + "' does not match '" +
                                    space_.name() + "'");
    for (const auto& e : genotype_.edges) {
        const CellSpec& cell = space_.cell(e.cell.empty() ? "normal" : e.cell);
        const bool known = std::any_of(cell.edges.begin(), cell.edges.end(), [&](const CellEdge& ce) {
            return ce.from == e.from && ce.to == e.to &&
                   std::find(ce.ops.begin(), ce.ops.end(), e.op) != ce.ops.end();
        });
        if (!known)
            throw std::invalid_argument("retrain: genotype edge " + std::to_string(e.from) + "->" +
                                        std::to_string(e.to) + " op '" + e.op + "' is not in the space");
    }
    Tape tape;
    ForwardCtx ctx;
    ctx.mode = ForwardMode::Eval;
    forward(tape, Tensor::zeros({1, config_.input_channels, 16, 16}), ctx);
}

NodeId DiscreteNet::forward(Tape& tape, const Tensor& images, const ForwardCtx& ctx,
                            std::map<std::string, NodeId>* weight_leaves) {
    check_images(images, config_.input_channels);
    NetBuild nb{tape, weights, running, init_rng_, ctx, config_, {}, {}, {}};
    NodeId x = tape.leaf(images);
    NodeId logits;

    auto edges_for = [&](const std::string& group) {
        std::vector<GenotypeEdge> out;
        for (const auto& e : genotype_.edges)
            if ((e.cell.empty() ? "normal" : e.cell) == group) out.push_back(e);
        return out;
    };

    if (!space_.normal.concat_output) {
        int c = config_.init_channels;
        x = nb.bn("stem/bn", nb.conv("stem/conv", x, config_.input_channels, c, 3, 1, 1, 1, 1), c);
        const auto stages = stage_sizes(config_.num_cells);
        const auto edges = edges_for("normal");
        int cell_idx = 0;
        for (size_t stage = 0; stage < stages.size(); ++stage) {
            if (stage > 0) {
                x = nb.reduction_block("reduce" + std::to_string(stage - 1), x, c, 2 * c);
                c *= 2;
            }
            for (int i = 0; i < stages[stage]; ++i, ++cell_idx) {
                char cbuf[16];
                std::snprintf(cbuf, sizeof(cbuf), "cell%02d", cell_idx);
                std::vector<NodeId> nodes{x};
                for (int to = space_.normal.num_input_nodes; to < space_.normal.num_nodes(); ++to) {
                    NodeId acc = kNoNode;
                    for (size_t e = 0; e < edges.size(); ++e) {
                        if (edges[e].to != to) continue;
                        const std::string prefix = std::string(cbuf) + "/e" + std::to_string(e) + "/op";
                        NodeId term = nb.candidate_op(prefix, edges[e].op,
                                                      nodes[static_cast<size_t>(edges[e].from)], c, 1);
                        acc = acc == kNoNode ? term : tape.add(acc, term);
                    }
                    nodes.push_back(acc);
                }
                x = nodes.back();
            }
        }
        logits = nb.classifier(x, c);
    } else {
        const int stem_mult = 3;
        int c_curr = config_.init_channels;
        int c0 = stem_mult * c_curr, c1 = stem_mult * c_curr;
        NodeId stem = nb.bn("stem/bn", nb.conv("stem/conv", x, config_.input_channels, c0, 3, 1, 1, 1, 1), c0);
        NodeId s0 = stem, s1 = stem;
        bool prev_reduction = false;
        for (int i = 0; i < config_.num_cells; ++i) {
            const bool reduction =
                config_.num_cells >= 3 && (i == config_.num_cells / 3 || i == 2 * config_.num_cells / 3);
            if (reduction) c_curr *= 2;
            const CellSpec& cell = reduction ? *space_.reduce : space_.normal;
            const auto edges = edges_for(reduction ? "reduce" : "normal");
            char cbuf[16];
            std::snprintf(cbuf, sizeof(cbuf), "cell%02d", i);
            const std::string cp(cbuf);
            NodeId p0 = prev_reduction ? nb.relu_conv_bn(cp + "/pre0", s0, c0, c_curr, 1, 2, 0)
                                       : nb.relu_conv_bn(cp + "/pre0", s0, c0, c_curr, 1, 1, 0);
            NodeId p1 = nb.relu_conv_bn(cp + "/pre1", s1, c1, c_curr, 1, 1, 0);
            std::vector<NodeId> states{p0, p1};
            for (int to = cell.num_input_nodes; to < cell.num_nodes(); ++to) {
                NodeId acc = kNoNode;
                for (size_t e = 0; e < edges.size(); ++e) {
                    if (edges[e].to != to) continue;
                    const int stride = reduction && edges[e].from < cell.num_input_nodes ? 2 : 1;
                    const std::string prefix = cp + "/e" + std::to_string(e) + "/op";
                    NodeId term = nb.candidate_op(prefix, edges[e].op,
                                                  states[static_cast<size_t>(edges[e].from)], c_curr, stride);
                    acc = acc == kNoNode ? term : tape.add(acc, term);
                }
                states.push_back(acc);
            }
            NodeId out = tape.concat_channels(
                std::vector<NodeId>(states.begin() + cell.num_input_nodes, states.end()));
            s0 = s1;
            c0 = c1;
            s1 = out;
            c1 = cell.num_intermediate_nodes * c_curr;
            prev_reduction = reduction;
        }
        logits = nb.classifier(s1, c1);
    }
    if (weight_leaves) weight_leaves->insert(nb.leaves.begin(), nb.leaves.end());
    return logits;
}

NodeId DiscreteNet::loss(Tape& tape, NodeId logits, const std::vector<int>& labels) const {
    return tape.cross_entropy_with_logits(logits, labels);
}

std::vector<std::string> DiscreteNet::weight_names() const {
    std::vector<std::string> names;
    for (const auto& [k, v] : weights) names.push_back(k);
    return names;
}

EdgeEval::EdgeEval(SpaceSpec space, SupernetConfig config, std::uint64_t init_seed)
    : space_(std::move(space)), config_(config), init_rng_(derive_seed(init_seed, "init")) {}

Tensor EdgeEval::forward(const ArchParams& alpha, const std::string& group, int edge_idx, const Tensor& x,
                         const NoisePolicy& policy, int epoch, CounterRng& noise_rng, ForwardMode mode,
                         int stride) {
    const CellSpec& cell = space_.cell(group);
    if (edge_idx < 0 || static_cast<size_t>(edge_idx) >= cell.edges.size())
        throw std::invalid_argument("mixed_edge: no edge " + std::to_string(edge_idx) + " in group '" + group +
                                    "'");
    check_images(x, x.dim(1));
    Tape tape;
    ForwardCtx ctx;
    ctx.mode = mode;
    ctx.noise_op_rng = &noise_rng;
    PolicyInjector injector(policy, epoch, noise_rng);
    if (mode == ForwardMode::Train) ctx.injector = &injector;  // eval forwards carry no noise
    NetBuild nb{tape, weights, running, init_rng_, ctx, config_, {}, {}, {}};
    NodeId out = nb.mixed_edge(alpha, group, 0, edge_idx, cell.edges[static_cast<size_t>(edge_idx)],
                               tape.leaf(x), x.dim(1), stride, "cell00");
    return tape.value(out);
}

double accuracy_from_logits(const Tensor& logits, const std::vector<int>& labels) {
    const int B = logits.dim(0), K = logits.dim(1);
    int hits = 0;
    for (int b = 0; b < B; ++b) {
        const double* p = logits.data.data() + static_cast<size_t>(b) * K;
        int best = 0;
        for (int k = 1; k < K; ++k)
            if (p[k] > p[best]) best = k;
        if (best == labels[static_cast<size_t>(b)]) ++hits;
    }
    return static_cast<double>(hits) / B;
}

}  // namespace nd
