#include "doctest.h"

#include <cmath>
#include <stdexcept>

#include "nd/bilevel.hpp"

using namespace nd;

namespace {

DatasetSplit tiny_data(int classes = 4, int samples = 64, int size = 8, std::uint64_t seed = 5) {
    SyntheticOptions opt;
    opt.classes = classes;
    opt.samples = samples;
    opt.test_samples = samples / 2;
    opt.image_size = size;
    opt.seed = seed;
    return load_synthetic(opt);
}

SupernetConfig tiny_cfg(int cells = 1, int channels = 4, int classes = 4) {
    SupernetConfig cfg;
    cfg.init_channels = channels;
    cfg.num_cells = cells;
    cfg.num_classes = classes;
    cfg.input_channels = 3;
    return cfg;
}

SearchHyper tiny_hyper(int epochs) {
    SearchHyper h;
    h.epochs = epochs;
    h.batch_size = 16;
    h.retrain_epochs = 2;
    h.retrain_batch_size = 16;
    return h;
}

}  // namespace

TEST_CASE("cosine learning rate hits lr at 0 and lr/2 at the midpoint") {
    SgdConfig cfg;
    cfg.lr = 0.4;
    cfg.total_epochs = 10;
    MomentumSgd opt(cfg);
    CHECK(opt.lr_at(0) == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(opt.lr_at(5) == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("sgd: zero gradient, zero momentum, zero decay leaves weights unchanged") {
    SgdConfig cfg;
    cfg.lr = 0.1;
    cfg.momentum = 0.0;
    cfg.weight_decay = 0.0;
    cfg.grad_clip = 0.0;
    MomentumSgd opt(cfg);
    NamedTensors w{{"x", Tensor({2}, {1.0, -2.0})}};
    NamedTensors g{{"x", Tensor::zeros({2})}};
    opt.step(w, g, 0);
    CHECK(w.at("x").data == std::vector<double>{1.0, -2.0});
}

TEST_CASE("sgd: two steps match the hand momentum recursion") {
    SgdConfig cfg;
    cfg.lr = 0.1;
    cfg.momentum = 0.9;
    cfg.weight_decay = 0.0;
    cfg.grad_clip = 0.0;
    cfg.total_epochs = 1000000;  // effectively constant lr for epoch 0
    MomentumSgd opt(cfg);
    NamedTensors w{{"x", Tensor({1}, {0.0})}};
    NamedTensors g{{"x", Tensor({1}, {1.0})}};

    double v = 0.0, ref = 0.0;
    const double eta = opt.lr_at(0);
    for (int step = 0; step < 2; ++step) {
        opt.step(w, g, 0);
        v = 0.9 * v + 1.0;
        ref -= eta * v;
        CHECK(w.at("x").at(0) == doctest::Approx(ref).epsilon(1e-12));
    }
}

TEST_CASE("adam: zero gradient from fresh state leaves alpha unchanged") {
    AdamConfig cfg;
    cfg.weight_decay = 0.0;
    AdamOpt opt(cfg);
    NamedTensors w{{"a", Tensor({3}, {0.5, -0.5, 1.5})}};
    NamedTensors g{{"a", Tensor::zeros({3})}};
    opt.step(w, g);
    CHECK(w.at("a").data == std::vector<double>{0.5, -0.5, 1.5});
}

TEST_CASE("adam: first step matches the bias-corrected closed form") {
    AdamConfig cfg;
    cfg.lr = 0.01;
    cfg.beta1 = 0.5;
    cfg.beta2 = 0.999;
    cfg.eps = 1e-8;
    cfg.weight_decay = 0.0;
    AdamOpt opt(cfg);
    const double g0 = 0.37;
    NamedTensors w{{"a", Tensor({1}, {2.0})}};
    NamedTensors g{{"a", Tensor({1}, {g0})}};
    opt.step(w, g);
    // mhat = g, vhat = g^2 after one bias-corrected step
    const double expect = 2.0 - 0.01 * g0 / (std::abs(g0) + 1e-8);
    CHECK(w.at("a").at(0) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("adam: opposite gradients accumulate second moment and shrink the step") {
    AdamConfig cfg;
    cfg.lr = 0.01;
    cfg.beta1 = 0.5;
    cfg.beta2 = 0.999;
    cfg.weight_decay = 0.0;
    AdamOpt opt(cfg);
    NamedTensors w{{"a", Tensor({1}, {0.0})}};
    NamedTensors gp{{"a", Tensor({1}, {1.0})}};
    NamedTensors gm{{"a", Tensor({1}, {-1.0})}};
    opt.step(w, gp);
    const double first = std::abs(w.at("a").at(0));
    const double before_second = w.at("a").at(0);
    opt.step(w, gm);
    const double second = std::abs(w.at("a").at(0) - before_second);
    CHECK(second < first);
}

TEST_CASE("quadratic surrogate: one alternation matches hand-computed updates") {
    // L_train = 0.5*|w - a|^2, L_val = 0.5*|a|^2
    const double w0 = 1.7, a0 = -0.6;
    NamedTensors wmap{{"w", Tensor({1}, {w0})}};
    NamedTensors amap{{"a", Tensor({1}, {a0})}};

    SgdConfig scfg;
    scfg.lr = 0.05;
    scfg.momentum = 0.9;
    scfg.weight_decay = 0.0;
    scfg.grad_clip = 0.0;
    scfg.total_epochs = 1000000;
    MomentumSgd wopt(scfg);
    AdamConfig acfg;
    acfg.lr = 0.01;
    acfg.beta1 = 0.5;
    acfg.beta2 = 0.999;
    acfg.weight_decay = 0.0;
    AdamOpt aopt(acfg);

    // w-step: gradient through the tape
    {
        Tape t;
        NodeId w = t.leaf(wmap.at("w"), "w", true);
        NodeId a = t.leaf(amap.at("a"), "a", false);
        NodeId diff = t.add(w, t.scalar_scale(a, -1.0));
        NodeId loss = t.scalar_scale(t.reduce_sum(t.elementwise_mul(diff, diff)), 0.5);
        t.backward(loss);
        NamedTensors g{{"w", t.grad(t.find_leaf("w"))}};
        wopt.step(wmap, g, 0);
    }
    const double gw = w0 - a0;
    const double w_expect = w0 - wopt.lr_at(0) * gw;  // momentum buffer starts at 0
    CHECK(wmap.at("w").at(0) == doctest::Approx(w_expect).epsilon(1e-12));

    // alpha-step: first-order, w treated as constant
    {
        Tape t;
        NodeId a = t.leaf(amap.at("a"), "a", true);
        NodeId loss = t.scalar_scale(t.reduce_sum(t.elementwise_mul(a, a)), 0.5);
        t.backward(loss);
        NamedTensors g{{"a", t.grad(t.find_leaf("a"))}};
        aopt.step(amap, g);
    }
    const double ga = a0;
    const double a_expect = a0 - 0.01 * ga / (std::abs(ga) + acfg.eps);
    CHECK(amap.at("a").at(0) == doctest::Approx(a_expect).epsilon(1e-12));
}

TEST_CASE("search records contiguous epochs and derives a valid genotype") {
    DatasetSplit data = tiny_data();
    Supernet net(build_space(SpaceId::NasBench201), tiny_cfg(), 3);
    NoisePolicy pol = NoisePolicy::unbiased(NoisePlacement::OFS, NoiseMode::Additive, 0.2);
    SearchRunRecord rec = search(net, pol, data, tiny_hyper(3), 17);
    REQUIRE(rec.epochs.size() == 3);
    for (int e = 0; e < 3; ++e) CHECK(rec.epochs[static_cast<size_t>(e)].epoch == e);
    CHECK(rec.genotype.edges.size() == 6);
    for (const auto& er : rec.epochs) CHECK(std::isfinite(er.train_loss));
}

TEST_CASE("zero-epoch search derives the genotype from the initial alpha") {
    DatasetSplit data = tiny_data();
    Supernet net(build_space(SpaceId::NasBench201), tiny_cfg(), 3);
    const ArchParams alpha0 = net.alpha;
    NoisePolicy none;
    SearchRunRecord rec = search(net, none, data, tiny_hyper(0), 17);
    CHECK(rec.epochs.empty());
    CHECK(genotype_to_json(rec.genotype) == genotype_to_json(derive_genotype(alpha0, net.space())));
}

TEST_CASE("placement none and OFS sigma=0 produce bitwise-identical records") {
    DatasetSplit data = tiny_data();
    NoisePolicy none;
    NoisePolicy zero = NoisePolicy::unbiased(NoisePlacement::OFS, NoiseMode::Additive, 0.0);

    Supernet net1(build_space(SpaceId::NasBench201), tiny_cfg(), 3);
    SearchRunRecord r1 = search(net1, none, data, tiny_hyper(2), 99);
    Supernet net2(build_space(SpaceId::NasBench201), tiny_cfg(), 3);
    SearchRunRecord r2 = search(net2, zero, data, tiny_hyper(2), 99);

    CHECK(search_log_csv(r1) == search_log_csv(r2));
    CHECK(genotype_to_json(r1.genotype) == genotype_to_json(r2.genotype));
}

TEST_CASE("first-order contract: each step leaves the other variable untouched") {
    DatasetSplit data = tiny_data();
    Supernet net(build_space(SpaceId::NasBench201), tiny_cfg(), 7);
    NoisePolicy pol = NoisePolicy::unbiased(NoisePlacement::OFS, NoiseMode::Additive, 0.3);
    CounterRng noise_rng(4), op_rng(5);
    std::vector<int> labels;
    std::vector<int> idx{0, 1, 2, 3};
    const Tensor batch = make_batch(data.train, idx, &labels);

    auto alpha_sum = [&net] {
        std::uint64_t h = 0;
        for (const auto& [k, t] : net.alpha.logits) h = mix3(h, 0, checksum(t));
        return h;
    };
    auto weight_sum = [&net] {
        std::uint64_t h = 0;
        for (const auto& [k, t] : net.weights) h = mix3(h, 0, checksum(t));
        return h;
    };

    // w-step must not mutate alpha
    const auto a_before = alpha_sum();
    {
        Tape tape;
        PolicyInjector inj(pol, 0, noise_rng);
        ForwardCtx ctx;
        ctx.mode = ForwardMode::Train;
        ctx.injector = &inj;
        ctx.noise_op_rng = &op_rng;
        ctx.weights_trainable = true;
        ForwardResult fr = net.forward(tape, batch, ctx);
        NodeId loss = net.loss(tape, fr, labels);
        tape.backward(loss);
        NamedTensors grads;
        for (const auto& [name, id] : fr.weight_leaves)
            grads.emplace(name, tape.has_grad(id) ? tape.grad(id) : Tensor(net.weights.at(name).shape));
        MomentumSgd opt({0.01, 0.9, 0.0, 0.0, 10});
        opt.step(net.weights, grads, 0);
    }
    CHECK(alpha_sum() == a_before);

    // alpha-step must not mutate weights
    const auto w_before = weight_sum();
    {
        Tape tape;
        PolicyInjector inj(pol, 0, noise_rng);
        ForwardCtx ctx;
        ctx.mode = ForwardMode::Frozen;
        ctx.injector = &inj;
        ctx.alpha_trainable = true;
        ForwardResult fr = net.forward(tape, batch, ctx);
        NodeId loss = net.loss(tape, fr, labels);
        tape.backward(loss);
        NamedTensors grads;
        for (const auto& [name, id] : fr.alpha_leaves)
            grads.emplace(name, tape.has_grad(id) ? tape.grad(id) : Tensor(net.alpha.logits.at(name).shape));
        AdamOpt opt(AdamConfig{});
        opt.step(net.alpha.logits, grads);
    }
    CHECK(weight_sum() == w_before);
}

TEST_CASE("search is deterministic for identical config and seed") {
    DatasetSplit data = tiny_data();
    NoisePolicy pol = NoisePolicy::unbiased(NoisePlacement::OFS, NoiseMode::Additive, 0.4);
    Supernet n1(build_space(SpaceId::NasBench201), tiny_cfg(), 21);
    Supernet n2(build_space(SpaceId::NasBench201), tiny_cfg(), 21);
    SearchRunRecord r1 = search(n1, pol, data, tiny_hyper(2), 31);
    SearchRunRecord r2 = search(n2, pol, data, tiny_hyper(2), 31);
    CHECK(search_log_csv(r1) == search_log_csv(r2));
    CHECK(genotype_to_json(r1.genotype) == genotype_to_json(r2.genotype));
}

TEST_CASE("search log CSV has the declared schema") {
    DatasetSplit data = tiny_data();
    Supernet net(build_space(SpaceId::NasBench201), tiny_cfg(), 3);
    NoisePolicy none;
    SearchRunRecord rec = search(net, none, data, tiny_hyper(1), 1);
    const std::string csv = search_log_csv(rec);
    CHECK(csv.rfind("epoch,train_loss,train_acc,val_loss,val_acc,sigma,", 0) == 0);
    CHECK(csv.find("normal/e00/none") != std::string::npos);
    // one header + one epoch line
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
}

TEST_CASE("retrain: identical genotype and seed reproduce the accuracy") {
    DatasetSplit data = tiny_data(4, 64, 8);
    SpaceSpec space = build_space(SpaceId::NasBench201);
    CounterRng arng(2);
    ArchParams a = ArchParams::init(space, arng, 1.0);
    Genotype g = derive_genotype(a, space);
    SearchHyper h = tiny_hyper(1);
    h.retrain_epochs = 2;
    RetrainResult r1 = retrain(g, space, tiny_cfg(), data, h, 77);
    RetrainResult r2 = retrain(g, space, tiny_cfg(), data, h, 77);
    CHECK(r1.test_accuracy == r2.test_accuracy);
}

TEST_CASE("zero-epoch retrain sits near chance on balanced data") {
    DatasetSplit data = tiny_data(4, 64, 8);
    SpaceSpec space = build_space(SpaceId::NasBench201);
    CounterRng arng(3);
    Genotype g = derive_genotype(ArchParams::init(space, arng, 1.0), space);
    SearchHyper h = tiny_hyper(0);
    h.retrain_epochs = 0;
    RetrainResult r = retrain(g, space, tiny_cfg(), data, h, 5);
    // binomial 3-sigma band around 1/4 for n test samples
    const double n = static_cast<double>(data.test.size());
    const double band = 3.0 * std::sqrt(0.25 * 0.75 / n);
    CHECK(r.test_accuracy >= 0.25 - band - 0.15);  // random head, wide tolerance
    CHECK(r.test_accuracy <= 0.25 + band + 0.15);
}

TEST_CASE("all-none genotype retrains to the majority-class rate") {
    DatasetSplit data = tiny_data(4, 64, 8);
    SpaceSpec space = build_space(SpaceId::NasBench201);
    Genotype g;
    g.space = "nasbench201";
    g.rule = "nb201-argmax";
    for (const auto& e : space.normal.edges) g.edges.push_back({e.from, e.to, "none", ""});
    SearchHyper h = tiny_hyper(0);
    h.retrain_epochs = 4;
    RetrainResult r = retrain(g, space, tiny_cfg(), data, h, 5);
    // constant classifier: accuracy equals the rate of whichever class it
    // settles on; the synthetic test split is class-balanced
    std::vector<int> counts(4, 0);
    for (const auto& s : data.test) ++counts[static_cast<size_t>(s.label)];
    const double majority = *std::max_element(counts.begin(), counts.end()) /
                            static_cast<double>(data.test.size());
    CHECK(r.test_accuracy == doctest::Approx(majority).epsilon(1e-12));
}

TEST_CASE("train and val splits are disjoint by sample identity") {
    DatasetSplit data = tiny_data(4, 64, 8);
    for (const auto& tr : data.train)
        for (const auto& va : data.val) {
            if (tr.label != va.label) continue;
            CHECK(tr.image.data != va.image.data);
        }
}

TEST_CASE("non-finite loss aborts with epoch and step recorded") {
    DatasetSplit data = tiny_data();
    Supernet net(build_space(SpaceId::NasBench201), tiny_cfg(), 3);
    // blow up the head so the first forward overflows
    for (auto& v : net.weights.at("head/fc/w").data) v = 1e308;
    for (auto& v : net.weights.at("stem/conv/w").data) v = 1e8;
    NoisePolicy none;
    try {
        search(net, none, data, tiny_hyper(1), 1);
        FAIL("expected SearchAbort");
    } catch (const SearchAbort& e) {
        CHECK(e.epoch == 0);
        CHECK(e.step == 0);
    }
}
