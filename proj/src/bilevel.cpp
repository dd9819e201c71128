#include "nd/bilevel.hpp"

#include <chrono>
#include <cmath>

namespace nd {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Complete gradient map over `params`: zeros where a leaf is unreachable.
NamedTensors collect_grads(const Tape& tape, const std::map<std::string, NodeId>& leaves,
                           const NamedTensors& params) {
    NamedTensors grads;
    for (const auto& [name, value] : params) {
        auto it = leaves.find(name);
        if (it != leaves.end() && tape.has_grad(it->second))
            grads.emplace(name, tape.grad(it->second));
        else
            grads.emplace(name, Tensor(value.shape));
    }
    return grads;
}

std::vector<int> shuffled_indices(size_t n, CounterRng& rng) {
    std::vector<int> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = static_cast<int>(i);
    rng.shuffle(idx);
    return idx;
}

// Cycling batch iterator: reshuffles whenever fewer than batch_size remain.
class BatchStream {
public:
    BatchStream(size_t n, int batch_size, CounterRng& rng)
        : n_(n), batch_(std::min<size_t>(static_cast<size_t>(batch_size), n)), rng_(rng) {
        order_ = shuffled_indices(n_, rng_);
    }

    std::vector<int> next() {
        if (pos_ + batch_ > n_) {
            order_ = shuffled_indices(n_, rng_);
            pos_ = 0;
        }
        std::vector<int> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                             order_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
        pos_ += batch_;
        return out;
    }

    size_t batch_size() const { return batch_; }

private:
    size_t n_;
    size_t batch_;
    CounterRng& rng_;
    std::vector<int> order_;
    size_t pos_ = 0;
};

std::vector<std::string> alpha_column_names(const SpaceSpec& space) {
    std::vector<std::string> cols;
    // lexicographic edge-key order matches the ArchParams flat layout
    for (const auto& group : space.groups()) {
        const CellSpec& cell = space.cell(group);
        for (size_t e = 0; e < cell.edges.size(); ++e)
            for (const auto& op : cell.edges[e].ops)
                cols.push_back(ArchParams::edge_key(group, static_cast<int>(e)) + "/" + op);
    }
    return cols;
}

}  // namespace

SearchRunRecord search(Supernet& net, const NoisePolicy& policy, const DatasetSplit& data,
                       const SearchHyper& hyper, std::uint64_t seed) {
    policy.validate();
    if (data.train.empty() || data.val.empty())
        throw std::invalid_argument("search: train and val splits must be nonempty");

    const auto t_run = Clock::now();
    CounterRng data_rng(derive_seed(seed, "search.data"));
    CounterRng noise_w_rng(derive_seed(seed, "search.noise.w"));
    CounterRng noise_a_rng(derive_seed(seed, "search.noise.alpha"));
    CounterRng noise_op_rng(derive_seed(seed, "search.noise.op"));

    SgdConfig wcfg = hyper.w;
    wcfg.total_epochs = hyper.epochs;
    MomentumSgd wopt(wcfg);
    AdamOpt aopt(hyper.alpha);

    SearchRunRecord rec;
    rec.alpha_columns = alpha_column_names(net.space());

    BatchStream train_stream(data.train.size(), hyper.batch_size, data_rng);
    BatchStream val_stream(data.val.size(), hyper.batch_size, data_rng);
    const int steps_per_epoch =
        std::max<int>(1, static_cast<int>(data.train.size() / train_stream.batch_size()));

    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        const auto t_epoch = Clock::now();
        const double sigma_e = scheduled_sigma(policy, epoch, hyper.epochs);
        double train_loss = 0.0, train_acc = 0.0, val_loss = 0.0, val_acc = 0.0;

        for (int step = 0; step < steps_per_epoch; ++step) {
            {  // weight step on the train stream
                std::vector<int> labels;
                const Tensor batch = make_batch(data.train, train_stream.next(), &labels);
                Tape tape;
                PolicyInjector injector(policy, epoch, noise_w_rng);
                ForwardCtx ctx;
                ctx.mode = ForwardMode::Train;
                ctx.injector = &injector;
                ctx.noise_op_rng = &noise_op_rng;
                ctx.weights_trainable = true;
                ForwardResult fr = net.forward(tape, batch, ctx);
                NodeId loss = net.loss(tape, fr, labels);
                const double lv = tape.value(loss).at(0);
                if (!std::isfinite(lv)) throw SearchAbort(epoch, step, "non-finite train loss");
                train_loss += lv;
                train_acc += accuracy_from_logits(tape.value(fr.logits), labels);
                tape.backward(loss);
                wopt.step(net.weights, collect_grads(tape, fr.weight_leaves, net.weights), epoch);
            }
            {  // architecture step on the val stream; weights held constant
                std::vector<int> labels;
                const Tensor batch = make_batch(data.val, val_stream.next(), &labels);
                Tape tape;
                PolicyInjector injector(policy, epoch, noise_a_rng);
                ForwardCtx ctx;
                ctx.mode = ForwardMode::Train;
                ctx.injector = &injector;
                ctx.noise_op_rng = &noise_op_rng;
                ctx.alpha_trainable = true;
                ForwardResult fr = net.forward(tape, batch, ctx);
                NodeId loss = net.loss(tape, fr, labels);
                const double lv = tape.value(loss).at(0);
                if (!std::isfinite(lv)) throw SearchAbort(epoch, step, "non-finite val loss");
                val_loss += lv;
                val_acc += accuracy_from_logits(tape.value(fr.logits), labels);
                tape.backward(loss);
                aopt.step(net.alpha.logits, collect_grads(tape, fr.alpha_leaves, net.alpha.logits));
            }
        }

        if (!net.alpha.all_finite()) throw SearchAbort(epoch, steps_per_epoch - 1, "non-finite alpha");

        EpochRecord er;
        er.epoch = epoch;
        er.train_loss = train_loss / steps_per_epoch;
        er.train_acc = train_acc / steps_per_epoch;
        er.val_loss = val_loss / steps_per_epoch;
        er.val_acc = val_acc / steps_per_epoch;
        er.sigma = sigma_e;
        er.alpha_flat = net.alpha.flat();
        er.wall_seconds = seconds_since(t_epoch);
        rec.epochs.push_back(std::move(er));
    }

    rec.genotype = derive_genotype(net.alpha, net.space());
    rec.wall_seconds = seconds_since(t_run);
    return rec;
}

std::string search_log_csv(const SearchRunRecord& record) {
    std::string out = "epoch,train_loss,train_acc,val_loss,val_acc,sigma";
    for (const auto& col : record.alpha_columns) out += "," + col;
    out += "\n";
    for (const auto& er : record.epochs) {
        out += std::to_string(er.epoch);
        for (double v : {er.train_loss, er.train_acc, er.val_loss, er.val_acc, er.sigma})
            out += "," + format_double(v);
        for (double v : er.alpha_flat) out += "," + format_double(v);
        out += "\n";
    }
    return out;
}

EvalStats evaluate_supernet(Supernet& net, const std::vector<Sample>& samples, int batch_size,
                            ForwardMode mode) {
    if (samples.empty()) throw std::invalid_argument("evaluate: empty sample list");
    if (mode == ForwardMode::Train) throw std::invalid_argument("evaluate: train mode would mutate state");
    EvalStats stats;
    std::int64_t hits = 0;
    double loss_sum = 0.0;
    for (size_t pos = 0; pos < samples.size(); pos += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(samples.size(), pos + static_cast<size_t>(batch_size));
        std::vector<int> idx;
        for (size_t i = pos; i < end; ++i) idx.push_back(static_cast<int>(i));
        std::vector<int> labels;
        const Tensor batch = make_batch(samples, idx, &labels);
        Tape tape;
        ForwardCtx ctx;
        ctx.mode = mode;
        ForwardResult fr = net.forward(tape, batch, ctx);
        NodeId loss = net.loss(tape, fr, labels);
        loss_sum += tape.value(loss).at(0) * static_cast<double>(idx.size());
        hits += std::llround(accuracy_from_logits(tape.value(fr.logits), labels) *
                             static_cast<double>(idx.size()));
    }
    stats.loss = loss_sum / static_cast<double>(samples.size());
    stats.accuracy = static_cast<double>(hits) / static_cast<double>(samples.size());
    return stats;
}

EvalStats evaluate_discrete(DiscreteNet& net, const std::vector<Sample>& samples, int batch_size) {
    if (samples.empty()) throw std::invalid_argument("evaluate: empty sample list");
    EvalStats stats;
    std::int64_t hits = 0;
    double loss_sum = 0.0;
    for (size_t pos = 0; pos < samples.size(); pos += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(samples.size(), pos + static_cast<size_t>(batch_size));
        std::vector<int> idx;
        for (size_t i = pos; i < end; ++i) idx.push_back(static_cast<int>(i));
        std::vector<int> labels;
        const Tensor batch = make_batch(samples, idx, &labels);
        Tape tape;
        ForwardCtx ctx;
        ctx.mode = ForwardMode::Eval;
        NodeId logits = net.forward(tape, batch, ctx);
        NodeId loss = net.loss(tape, logits, labels);
        loss_sum += tape.value(loss).at(0) * static_cast<double>(idx.size());
        hits += std::llround(accuracy_from_logits(tape.value(logits), labels) *
                             static_cast<double>(idx.size()));
    }
    stats.loss = loss_sum / static_cast<double>(samples.size());
    stats.accuracy = static_cast<double>(hits) / static_cast<double>(samples.size());
    return stats;
}

RetrainResult retrain(const Genotype& genotype, const SpaceSpec& space, const SupernetConfig& netcfg,
                      const DatasetSplit& data, const SearchHyper& hyper, std::uint64_t seed) {
    if (data.test.empty()) throw std::invalid_argument("retrain: empty test split");
    const auto t_run = Clock::now();

    DiscreteNet net(genotype, space, netcfg, derive_seed(seed, "retrain"));

    // search is over; the discrete model trains on train+val
    std::vector<Sample> pool = data.train;
    pool.insert(pool.end(), data.val.begin(), data.val.end());

    CounterRng data_rng(derive_seed(seed, "retrain.data"));
    CounterRng noise_op_rng(derive_seed(seed, "retrain.noise.op"));
    SgdConfig wcfg = hyper.w;
    wcfg.total_epochs = std::max(1, hyper.retrain_epochs);
    MomentumSgd opt(wcfg);

    RetrainResult res;
    BatchStream stream(pool.size(), hyper.retrain_batch_size, data_rng);
    const int steps_per_epoch = std::max<int>(1, static_cast<int>(pool.size() / stream.batch_size()));
    for (int epoch = 0; epoch < hyper.retrain_epochs; ++epoch) {
        double loss_sum = 0.0;
        for (int step = 0; step < steps_per_epoch; ++step) {
            std::vector<int> labels;
            const Tensor batch = make_batch(pool, stream.next(), &labels);
            Tape tape;
            ForwardCtx ctx;
            ctx.mode = ForwardMode::Train;
            ctx.noise_op_rng = &noise_op_rng;
            ctx.weights_trainable = true;
            std::map<std::string, NodeId> leaves;
            NodeId logits = net.forward(tape, batch, ctx, &leaves);
            NodeId loss = net.loss(tape, logits, labels);
            const double lv = tape.value(loss).at(0);
            if (!std::isfinite(lv)) throw SearchAbort(epoch, step, "non-finite retrain loss");
            loss_sum += lv;
            tape.backward(loss);
            opt.step(net.weights, collect_grads(tape, leaves, net.weights), epoch);
        }
        res.final_train_loss = loss_sum / steps_per_epoch;
    }

    res.test_accuracy = evaluate_discrete(net, data.test, hyper.retrain_batch_size).accuracy;
    res.wall_seconds = seconds_since(t_run);
    return res;
}

}  // namespace nd
