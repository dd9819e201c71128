#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "nd/rng.hpp"
#include "nd/searchspace.hpp"

using namespace nd;

TEST_CASE("nasbench201 space: 6 edges over 4 nodes, 5 ops, 30 logits") {
    SpaceSpec s = build_space(SpaceId::NasBench201);
    CHECK(s.normal.num_nodes() == 4);
    CHECK(s.normal.edges.size() == 6);
    for (const auto& e : s.normal.edges) CHECK(e.ops.size() == 5);
    CHECK_FALSE(s.has_reduce());
    CounterRng rng(1);
    ArchParams a = ArchParams::init(s, rng);
    CHECK(a.dim() == 30);
}

TEST_CASE("s2 space: every DARTS edge carries exactly sep_conv_3x3 and skip") {
    SpaceSpec s = build_space(SpaceId::S2);
    CHECK(s.normal.edges.size() == 14);
    REQUIRE(s.has_reduce());
    for (const auto& cell : {s.normal, *s.reduce})
        for (const auto& e : cell.edges)
            CHECK(e.ops == std::vector<std::string>{"sep_conv_3x3", "skip_connect"});
}

TEST_CASE("darts space with skip removed has 6 ops per edge") {
    SpaceOverrides ov;
    ov.remove_ops = {"skip_connect"};
    SpaceSpec s = build_space(SpaceId::Darts, ov);
    for (const auto& e : s.normal.edges) {
        CHECK(e.ops.size() == 6);
        CHECK(std::find(e.ops.begin(), e.ops.end(), "skip_connect") == e.ops.end());
    }
    CHECK_THROWS_AS(build_space("nope"), std::invalid_argument);
    CHECK_THROWS_AS(build_space(SpaceId::S1), std::invalid_argument);  // needs per-edge menus
}

TEST_CASE("s4 pairs sep_conv with the noise op") {
    SpaceSpec s = build_space(SpaceId::S4);
    for (const auto& e : s.normal.edges) CHECK(e.ops == std::vector<std::string>{"sep_conv_3x3", "noise"});
}

TEST_CASE("softmax weights for logits (1,0)") {
    Tensor t({2}, {1.0, 0.0});
    auto w = softmax_weights(t);
    CHECK(w[0] == doctest::Approx(0.73106).epsilon(1e-4));
    CHECK(w[1] == doctest::Approx(0.26894).epsilon(1e-4));
}

TEST_CASE("dominant logit is selected on every edge") {
    SpaceSpec s = build_space(SpaceId::NasBench201);
    CounterRng rng(3);
    ArchParams a = ArchParams::init(s, rng);
    for (auto& [k, t] : a.logits) t.data[2] = 10.0;  // nor_conv_1x1
    Genotype g = derive_genotype(a, s);
    REQUIRE(g.edges.size() == 6);
    for (const auto& e : g.edges) CHECK(e.op == "nor_conv_1x1");
    CHECK(count_op(g, "nor_conv_1x1") == 6);
    CHECK(count_op(g, "skip_connect") == 0);
}

TEST_CASE("exact logit tie selects the lowest op index") {
    SpaceSpec s = build_space(SpaceId::NasBench201);
    ArchParams a;
    for (size_t e = 0; e < s.normal.edges.size(); ++e)
        a.logits[ArchParams::edge_key("normal", static_cast<int>(e))] = Tensor::zeros({5});
    Genotype g = derive_genotype(a, s);
    for (const auto& e : g.edges) CHECK(e.op == "none");  // index 0 of the NB201 menu
}

TEST_CASE("all-skip NB201 genotype counts 6 skips") {
    SpaceSpec s = build_space(SpaceId::NasBench201);
    ArchParams a;
    for (size_t e = 0; e < s.normal.edges.size(); ++e) {
        Tensor t = Tensor::zeros({5});
        t.data[1] = 5.0;  // skip_connect
        a.logits[ArchParams::edge_key("normal", static_cast<int>(e))] = t;
    }
    Genotype g = derive_genotype(a, s);
    CHECK(count_op(g, "skip_connect") == 6);
    CHECK_THROWS_AS(count_op(g, "warp_drive"), std::invalid_argument);
}

namespace {

// independent top-2 rule: exhaustive enumeration over edge pairs per node
Genotype darts_oracle(const ArchParams& a, const SpaceSpec& s) {
    Genotype g;
    g.space = s.name();
    g.rule = s.rule;
    for (const auto& group : s.groups()) {
        const CellSpec& cell = s.cell(group);
        for (int node = cell.num_input_nodes; node < cell.num_nodes(); ++node) {
            std::vector<size_t> in_edges;
            for (size_t e = 0; e < cell.edges.size(); ++e)
                if (cell.edges[e].to == node) in_edges.push_back(e);
            auto edge_best = [&](size_t e) {
                auto w = softmax_weights(a.edge(group, static_cast<int>(e)));
                double best = -1.0;
                int idx = -1;
                for (size_t k = 0; k < w.size(); ++k) {
                    if (cell.edges[e].ops[k] == "none") continue;
                    if (w[k] > best) {
                        best = w[k];
                        idx = static_cast<int>(k);
                    }
                }
                return std::pair<double, int>{best, idx};
            };
            // enumerate all pairs, keep the one with the largest sorted scores
            std::pair<size_t, size_t> best_pair{0, 0};
            double best_hi = -1.0, best_lo = -1.0;
            for (size_t i = 0; i < in_edges.size(); ++i)
                for (size_t j = i + 1; j < in_edges.size(); ++j) {
                    double si = edge_best(in_edges[i]).first;
                    double sj = edge_best(in_edges[j]).first;
                    const double hi = std::max(si, sj), lo = std::min(si, sj);
                    if (hi > best_hi || (hi == best_hi && lo > best_lo)) {
                        best_hi = hi;
                        best_lo = lo;
                        best_pair = {in_edges[i], in_edges[j]};
                    }
                }
            for (size_t e : {best_pair.first, best_pair.second}) {
                auto [score, k] = edge_best(e);
                g.edges.push_back({cell.edges[e].from, cell.edges[e].to,
                                   cell.edges[e].ops[static_cast<size_t>(k)], s.has_reduce() ? group : ""});
            }
        }
    }
    return g;
}

}  // namespace

TEST_CASE("random DARTS alpha matches the exhaustive top-2 oracle") {
    SpaceSpec s = build_space(SpaceId::Darts);
    for (int trial = 0; trial < 20; ++trial) {
        CounterRng rng(1000 + static_cast<std::uint64_t>(trial));
        ArchParams a = ArchParams::init(s, rng, 1.0);  // wide spread, no ties
        Genotype mine = derive_genotype(a, s);
        Genotype ref = darts_oracle(a, s);
        REQUIRE(mine.edges.size() == ref.edges.size());
        auto key = [](const GenotypeEdge& e) {
            return e.cell + "|" + std::to_string(e.to) + "|" + std::to_string(e.from) + "|" + e.op;
        };
        std::vector<std::string> ka, kb;
        for (const auto& e : mine.edges) ka.push_back(key(e));
        for (const auto& e : ref.edges) kb.push_back(key(e));
        std::sort(ka.begin(), ka.end());
        std::sort(kb.begin(), kb.end());
        CHECK(ka == kb);
    }
}

TEST_CASE("darts genotype keeps exactly 2 edges per node and never zero") {
    SpaceSpec s = build_space(SpaceId::S3);  // includes the zero op
    for (int trial = 0; trial < 30; ++trial) {
        CounterRng rng(77 + static_cast<std::uint64_t>(trial));
        ArchParams a = ArchParams::init(s, rng, 2.0);
        Genotype g = derive_genotype(a, s);
        CHECK(count_op(g, "none") == 0);
        for (const auto& group : {"normal", "reduce"}) {
            const CellSpec& cell = s.cell(group);
            for (int node = cell.num_input_nodes; node < cell.num_nodes(); ++node) {
                int in_count = 0;
                for (const auto& e : g.edges)
                    if (e.cell == group && e.to == node) ++in_count;
                CHECK(in_count == 2);
            }
        }
    }
}

TEST_CASE("derivation is invariant to per-edge logit shifts") {
    SpaceSpec s = build_space(SpaceId::NasBench201);
    for (int trial = 0; trial < 10; ++trial) {
        CounterRng rng(5 + static_cast<std::uint64_t>(trial));
        ArchParams a = ArchParams::init(s, rng, 1.0);
        Genotype g1 = derive_genotype(a, s);
        ArchParams shifted = a;
        double c = 0.5;
        for (auto& [k, t] : shifted.logits) {
            for (auto& v : t.data) v += c;
            c += 0.25;
        }
        Genotype g2 = derive_genotype(shifted, s);
        CHECK(genotype_to_json(g1) == genotype_to_json(g2));
    }
}

TEST_CASE("genotype JSON round trip and canonical key") {
    SpaceSpec s = build_space(SpaceId::NasBench201);
    CounterRng rng(9);
    ArchParams a = ArchParams::init(s, rng, 1.0);
    Genotype g = derive_genotype(a, s);
    const std::string j = genotype_to_json(g);
    CHECK(j.find("\"space\"") < j.find("\"rule\""));
    CHECK(j.find("\"rule\"") < j.find("\"edges\""));
    Genotype back = genotype_from_json(j);
    CHECK(genotype_to_json(back) == j);

    // key order in the input must not matter
    const std::string scrambled = R"({"edges":[{"op":"skip_connect","to":1,"from":0}],"rule":"nb201-argmax","space":"nasbench201"})";
    Genotype gs = genotype_from_json(scrambled);
    Genotype plain;
    plain.space = "nasbench201";
    plain.rule = "nb201-argmax";
    plain.edges = {{0, 1, "skip_connect", ""}};
    CHECK(canonical_genotype_key(gs) == canonical_genotype_key(plain));
}

TEST_CASE("node_aggregate sums elementwise") {
    CounterRng rng(31);
    Tensor x = rng.uniform_tensor({2, 3}, -1.0, 1.0);
    CHECK(node_aggregate({x}).data == x.data);

    Tensor nx = x;
    for (auto& v : nx.data) v = -v;
    Tensor z = node_aggregate({x, nx});
    for (double v : z.data) CHECK(v == 0.0);

    Tensor a = rng.uniform_tensor({2, 3}, -1.0, 1.0);
    Tensor b = rng.uniform_tensor({2, 3}, -1.0, 1.0);
    Tensor c = rng.uniform_tensor({2, 3}, -1.0, 1.0);
    Tensor s = node_aggregate({a, b, c});
    for (std::int64_t i = 0; i < s.numel(); ++i) {
        const double ref = a.at(i) + b.at(i) + c.at(i);  // scalar-loop oracle
        CHECK(std::abs(s.at(i) - ref) <= 1e-12);
    }
    CHECK_THROWS_AS(node_aggregate({x, Tensor::zeros({3, 2})}), std::invalid_argument);
}

TEST_CASE("arch params flatten round trip") {
    SpaceSpec s = build_space(SpaceId::S2);
    CounterRng rng(4);
    ArchParams a = ArchParams::init(s, rng, 0.5);
    auto flat = a.flat();
    CHECK(static_cast<int>(flat.size()) == a.dim());
    ArchParams b = a;
    for (auto& [k, t] : b.logits)
        for (auto& v : t.data) v = 0.0;
    b.set_flat(flat);
    for (const auto& [k, t] : a.logits) CHECK(b.logits.at(k).data == t.data);
}

TEST_CASE("custom space validates op names and menus") {
    SpaceOverrides ov;
    ov.ops = {"skip_connect", "warp_drive"};
    CHECK_THROWS_AS(build_space(SpaceId::Custom, ov), std::invalid_argument);
    ov.ops = {"skip_connect", "avg_pool_3x3"};
    ov.topology = "nasbench201";
    SpaceSpec s = build_space(SpaceId::Custom, ov);
    CHECK(s.rule == "nb201-argmax");
    CHECK(s.normal.edges.size() == 6);
}
