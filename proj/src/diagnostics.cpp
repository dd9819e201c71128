#include "nd/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

#include "nd/bilevel.hpp"

namespace nd {

namespace {

using ordered_json = nlohmann::ordered_json;

// flat-alpha coordinate bookkeeping in map (lexicographic) order
struct AlphaLayout {
    struct EdgeBlock {
        std::string group;
        int edge_idx = 0;
        std::string key;
        int offset = 0;
        int m = 0;
        int skip_idx = -1;
        std::vector<std::string> ops;
    };
    std::vector<EdgeBlock> edges;
    int dim = 0;

    static AlphaLayout build(const SpaceSpec& space) {
        AlphaLayout lay;
        std::vector<EdgeBlock> blocks;
        for (const auto& group : space.groups()) {
            const CellSpec& cell = space.cell(group);
            for (size_t e = 0; e < cell.edges.size(); ++e) {
                EdgeBlock b;
                b.group = group;
                b.edge_idx = static_cast<int>(e);
                b.key = ArchParams::edge_key(group, static_cast<int>(e));
                b.m = static_cast<int>(cell.edges[e].ops.size());
                b.ops = cell.edges[e].ops;
                for (size_t k = 0; k < cell.edges[e].ops.size(); ++k)
                    if (op_is_skip(cell.edges[e].ops[k])) b.skip_idx = static_cast<int>(k);
                blocks.push_back(std::move(b));
            }
        }
        std::sort(blocks.begin(), blocks.end(),
                  [](const EdgeBlock& a, const EdgeBlock& b) { return a.key < b.key; });
        int off = 0;
        for (auto& b : blocks) {
            b.offset = off;
            off += b.m;
        }
        lay.edges = std::move(blocks);
        lay.dim = off;
        return lay;
    }
};

NodeId diag_loss_node(Tape& tape, const ForwardResult& fr, const std::vector<int>& labels,
                      const DiagOptions& opt) {
    if (opt.loss == DiagLoss::CrossEntropy) return tape.cross_entropy_with_logits(fr.logits, labels);
    const Tensor& logits = tape.value(fr.logits);
    CounterRng rng(derive_seed(opt.readout_seed, "diag.readout"));
    Tensor c = rng.uniform_tensor(logits.shape, -1.0, 1.0);
    NodeId cid = tape.leaf(std::move(c));
    return tape.scalar_scale(tape.reduce_sum(tape.elementwise_mul(fr.logits, cid)),
                             1.0 / logits.dim(0));
}

std::vector<std::string> alpha_leaf_name_list(const Supernet& net) {
    return net.alpha_leaf_names();
}

double vec_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

void axpy(std::vector<double>& y, double a, const std::vector<double>& x) {
    for (size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

std::vector<double> HessianTrace::smoothed() const {
    std::vector<double> out(raw.size(), 0.0);
    for (size_t i = 0; i < raw.size(); ++i) {
        const size_t lo = i + 1 >= static_cast<size_t>(window) ? i + 1 - static_cast<size_t>(window) : 0;
        double s = 0.0;
        for (size_t k = lo; k <= i; ++k) s += raw[k];
        out[i] = s / static_cast<double>(i - lo + 1);
    }
    return out;
}

std::string HessianTrace::to_csv() const {
    std::string out = "epoch,lambda_max,lambda_max_smoothed\n";
    const auto sm = smoothed();
    for (size_t i = 0; i < raw.size(); ++i)
        out += std::to_string(i) + "," + format_double(raw[i]) + "," + format_double(sm[i]) + "\n";
    return out;
}

ValBatch make_val_batch(const std::vector<Sample>& samples, int max_samples) {
    if (samples.empty()) throw std::invalid_argument("diagnostics: empty sample list");
    std::vector<int> idx;
    for (int i = 0; i < static_cast<int>(samples.size()) && i < max_samples; ++i) idx.push_back(i);
    ValBatch b;
    b.images = make_batch(samples, idx, &b.labels);
    return b;
}

LossGrad val_loss_grad(Supernet& net, const std::vector<Sample>& valset, const DiagOptions& opt) {
    if (valset.empty()) throw std::invalid_argument("diagnostics: empty valset");
    const auto names = alpha_leaf_name_list(net);
    LossGrad out;
    const double total = static_cast<double>(valset.size());
    for (size_t pos = 0; pos < valset.size(); pos += static_cast<size_t>(opt.batch_size)) {
        const size_t end = std::min(valset.size(), pos + static_cast<size_t>(opt.batch_size));
        std::vector<int> idx;
        for (size_t i = pos; i < end; ++i) idx.push_back(static_cast<int>(i));
        std::vector<int> labels;
        const Tensor batch = make_batch(valset, idx, &labels);

        Tape tape;
        ForwardCtx ctx;
        ctx.mode = ForwardMode::Frozen;
        ctx.alpha_trainable = true;
        ForwardResult fr = net.forward(tape, batch, ctx);
        NodeId loss = diag_loss_node(tape, fr, labels, opt);
        const double w = static_cast<double>(idx.size()) / total;
        out.loss += tape.value(loss).at(0) * w;
        auto g = tape.grad_wrt(loss, names);
        if (out.grad.empty()) out.grad.assign(g.size(), 0.0);
        axpy(out.grad, w, g);
    }
    return out;
}

SymMatrix fd_hessian_from_gradients(const GradFn& grad_fn, const std::vector<double>& center, double h) {
    const int d = static_cast<int>(center.size());
    SymMatrix H(d);
    std::vector<double> point = center;
    for (int i = 0; i < d; ++i) {
        point[static_cast<size_t>(i)] = center[static_cast<size_t>(i)] + h;
        const auto gp = grad_fn(point);
        point[static_cast<size_t>(i)] = center[static_cast<size_t>(i)] - h;
        const auto gm = grad_fn(point);
        point[static_cast<size_t>(i)] = center[static_cast<size_t>(i)];
        for (int j = 0; j < d; ++j) {
            const double v = (gp[static_cast<size_t>(j)] - gm[static_cast<size_t>(j)]) / (2.0 * h);
            if (!std::isfinite(v))
                throw std::runtime_error("alpha_hessian: non-finite entry at (" + std::to_string(i) + "," +
                                         std::to_string(j) + ")");
            H.at(i, j) = v;
        }
    }
    // symmetrize: the two difference orders agree only up to FD error
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) {
            const double s = 0.5 * (H.at(i, j) + H.at(j, i));
            H.at(i, j) = s;
            H.at(j, i) = s;
        }
    return H;
}

SymMatrix alpha_hessian(Supernet& net, const std::vector<Sample>& valset, double h,
                        const DiagOptions& opt) {
    const std::vector<double> center = net.alpha.flat();
    if (center.size() > 200)
        throw std::invalid_argument("alpha_hessian: " + std::to_string(center.size()) +
                                    " coordinates is beyond the supported scale (~100)");
    GradFn grad_fn = [&](const std::vector<double>& point) {
        net.alpha.set_flat(point);
        return val_loss_grad(net, valset, opt).grad;
    };
    SymMatrix H = fd_hessian_from_gradients(grad_fn, center, h);
    net.alpha.set_flat(center);
    return H;
}

double max_eigenvalue(const SymMatrix& H, double tol, int max_iter) {
    const int n = H.n;
    if (n == 0) throw std::invalid_argument("max_eigenvalue: empty matrix");
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            if (std::abs(H.at(i, j) - H.at(j, i)) > 1e-12 * std::max(1.0, std::abs(H.at(i, j))))
                throw std::invalid_argument("max_eigenvalue: matrix is not symmetric");

    // Gershgorin shift makes the target eigenvalue the largest in magnitude
    double shift = 0.0;
    for (int i = 0; i < n; ++i) {
        double row = 0.0;
        for (int j = 0; j < n; ++j) row += std::abs(H.at(i, j));
        shift = std::max(shift, row);
    }
    if (shift == 0.0) return 0.0;

    std::vector<double> v(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) v[static_cast<size_t>(i)] = 1.0 + 1e-3 * (i + 1);
    double nv = vec_norm(v);
    for (auto& x : v) x /= nv;

    std::vector<double> w(static_cast<size_t>(n));
    double theta = 0.0;
    for (int it = 0; it < max_iter; ++it) {
        for (int i = 0; i < n; ++i) {
            double s = shift * v[static_cast<size_t>(i)];
            for (int j = 0; j < n; ++j) s += H.at(i, j) * v[static_cast<size_t>(j)];
            w[static_cast<size_t>(i)] = s;
        }
        theta = dot(v, w);
        double resid = 0.0;
        for (int i = 0; i < n; ++i) {
            const double r = w[static_cast<size_t>(i)] - theta * v[static_cast<size_t>(i)];
            resid += r * r;
        }
        resid = std::sqrt(resid);
        if (resid <= tol * std::max(1.0, std::abs(theta))) return theta - shift;
        const double nw = vec_norm(w);
        if (nw == 0.0) return theta - shift;  // v spans the null space of the shifted matrix
        for (int i = 0; i < n; ++i) v[static_cast<size_t>(i)] = w[static_cast<size_t>(i)] / nw;
    }
    double resid = 0.0;
    for (int i = 0; i < n; ++i) {
        const double r = w[static_cast<size_t>(i)] - theta * v[static_cast<size_t>(i)];
        resid += r * r;
    }
    throw std::runtime_error("max_eigenvalue: no convergence after " + std::to_string(max_iter) +
                             " iterations, residual " + format_double(std::sqrt(resid)));
}

double LandscapeGrid::acc_at(int i, int j) const {
    const int side = 2 * radius + 1;
    return accuracy[static_cast<size_t>((i + radius) * side + (j + radius))];
}

std::string LandscapeGrid::to_csv() const {
    std::string out;
    out += "# landscape grid: rows = x offset, cols = y offset\n";
    out += "# radius=" + std::to_string(radius) + " step=" + format_double(step) + "\n";
    auto dir_line = [](const char* name, const std::vector<double>& d) {
        std::string s = std::string("# ") + name + "=";
        for (size_t i = 0; i < d.size(); ++i) {
            if (i) s += " ";
            s += format_double(d[i]);
        }
        return s + "\n";
    };
    out += dir_line("dir_x", dir_x);
    out += dir_line("dir_y", dir_y);
    const int side = 2 * radius + 1;
    out += "# accuracy\n";
    for (int i = 0; i < side; ++i) {
        for (int j = 0; j < side; ++j) {
            if (j) out += ",";
            out += format_double(accuracy[static_cast<size_t>(i * side + j)]);
        }
        out += "\n";
    }
    out += "# loss\n";
    for (int i = 0; i < side; ++i) {
        for (int j = 0; j < side; ++j) {
            if (j) out += ",";
            out += format_double(loss[static_cast<size_t>(i * side + j)]);
        }
        out += "\n";
    }
    return out;
}

LandscapeGrid landscape_scan(Supernet& net, const std::vector<Sample>& valset,
                             const LandscapeOptions& opt) {
    if (valset.empty()) throw std::invalid_argument("landscape_scan: empty valset");
    const std::vector<double> center = net.alpha.flat();
    const size_t d = center.size();

    std::vector<double> dx, dy;
    if (opt.random_directions) {
        CounterRng rng(derive_seed(opt.seed, "landscape.dirs"));
        dx = rng.normal_tensor({static_cast<int>(d)}, 0.0, 1.0).data;
        dy = rng.normal_tensor({static_cast<int>(d)}, 0.0, 1.0).data;
    } else {
        const std::vector<Sample> first(valset.begin(), valset.begin() + static_cast<std::ptrdiff_t>(valset.size() / 2));
        const std::vector<Sample> second(valset.begin() + static_cast<std::ptrdiff_t>(valset.size() / 2), valset.end());
        if (first.empty() || second.empty())
            throw std::invalid_argument("landscape_scan: valset too small to split for directions");
        dx = val_loss_grad(net, first, opt.diag).grad;
        dy = val_loss_grad(net, second, opt.diag).grad;
    }
    const double nx = vec_norm(dx);
    if (nx < 1e-14) throw std::runtime_error("landscape_scan: zero gradient at the center");
    for (auto& v : dx) v /= nx;
    // Gram-Schmidt twice to push the overlap below 1e-10
    for (int pass = 0; pass < 2; ++pass) axpy(dy, -dot(dy, dx), dx);
    const double ny = vec_norm(dy);
    if (ny < 1e-14) throw std::runtime_error("landscape_scan: second direction is degenerate");
    for (auto& v : dy) v /= ny;

    PointEval eval = [&](const std::vector<double>& point) {
        net.alpha.set_flat(point);
        EvalStats st = evaluate_supernet(net, valset, opt.diag.batch_size, ForwardMode::Frozen);
        return std::pair<double, double>{st.loss, st.accuracy};
    };
    LandscapeGrid grid = scan_grid(eval, center, std::move(dx), std::move(dy), opt.step, opt.radius);
    net.alpha.set_flat(center);
    return grid;
}

LandscapeGrid scan_grid(const PointEval& eval, const std::vector<double>& center,
                        std::vector<double> dir_x, std::vector<double> dir_y, double step, int radius) {
    LandscapeGrid grid;
    grid.dir_x = std::move(dir_x);
    grid.dir_y = std::move(dir_y);
    grid.step = step;
    grid.radius = radius;
    const int side = 2 * radius + 1;
    grid.accuracy.assign(static_cast<size_t>(side) * side, 0.0);
    grid.loss.assign(static_cast<size_t>(side) * side, 0.0);
    const size_t d = center.size();
    std::vector<double> point(d);
    for (int i = -radius; i <= radius; ++i)
        for (int j = -radius; j <= radius; ++j) {
            for (size_t k = 0; k < d; ++k)
                point[k] = center[k] + i * step * grid.dir_x[k] + j * step * grid.dir_y[k];
            const auto [lo, acc] = eval(point);
            grid.accuracy[static_cast<size_t>((i + radius) * side + (j + radius))] = acc;
            grid.loss[static_cast<size_t>((i + radius) * side + (j + radius))] = lo;
        }
    return grid;
}

namespace {

// adds s_site * ones (additive) or s_site * out (multiplicative) at OFS skip
// sites; the gradient w.r.t. s_site is the loss sensitivity used by the
// first-order shift prediction
class ProbeInjector : public NoiseInjector {
public:
    explicit ProbeInjector(NoiseMode mode) : mode_(mode) {}

    NodeId apply(Tape& tape, const InjectionSite& site, NodeId op_out) override {
        if (!placement_applies(NoisePlacement::OFS, op_is_skip(site.op_name))) return op_out;
        NodeId s = tape.leaf(Tensor::scalar(0.0), "", true);
        sites_.push_back({site, s});
        NodeId direction = mode_ == NoiseMode::Additive
                               ? tape.leaf(Tensor::full(tape.value(op_out).shape, 1.0))
                               : op_out;
        return tape.add(op_out, tape.mul_scalar_node(direction, s));
    }

    struct Site {
        InjectionSite site;
        NodeId leaf;
    };
    const std::vector<Site>& sites() const { return sites_; }

private:
    NoiseMode mode_;
    std::vector<Site> sites_;
};

}  // namespace

std::string UnbiasednessReport::to_json() const {
    ordered_json j;
    j["draws"] = draws;
    j["max_abs_z"] = max_abs_z;
    j["max_prediction_z"] = max_prediction_z;
    j["noiseless_grad"] = noiseless_grad;
    j["mean_grad"] = mean_grad;
    j["std_error"] = std_error;
    j["z_score"] = z_score;
    j["predicted_shift"] = predicted_shift;
    j["measured_shift"] = measured_shift;
    return j.dump(2);
}

UnbiasednessReport verify_unbiasedness(Supernet& net, const NoisePolicy& policy, const ValBatch& batch,
                                       int n_draws, std::uint64_t seed, const DiagOptions& opt) {
    if (n_draws < 2) throw std::invalid_argument("verify_unbiasedness: need at least 2 draws");
    if (policy.placement != NoisePlacement::OFS)
        throw std::invalid_argument("verify_unbiasedness: placement must be OFS");
    const auto names = alpha_leaf_name_list(net);
    const AlphaLayout layout = AlphaLayout::build(net.space());

    auto grad_once = [&](NoiseInjector* injector) {
        Tape tape;
        ForwardCtx ctx;
        ctx.mode = ForwardMode::Frozen;
        ctx.alpha_trainable = true;
        ctx.injector = injector;
        ForwardResult fr = net.forward(tape, batch.images, ctx);
        NodeId loss = diag_loss_node(tape, fr, batch.labels, opt);
        return tape.grad_wrt(loss, names);
    };

    UnbiasednessReport rep;
    rep.draws = n_draws;
    rep.noiseless_grad = grad_once(nullptr);
    const size_t d = rep.noiseless_grad.size();

    // Welford accumulation per coordinate
    std::vector<double> mean(d, 0.0), m2(d, 0.0);
    CounterRng noise_rng(derive_seed(seed, "unbias.noise"));
    for (int k = 0; k < n_draws; ++k) {
        PolicyInjector inj(policy, 0, noise_rng);
        const auto g = grad_once(&inj);
        for (size_t i = 0; i < d; ++i) {
            const double delta = g[i] - mean[i];
            mean[i] += delta / (k + 1);
            m2[i] += delta * (g[i] - mean[i]);
        }
    }
    rep.mean_grad = mean;
    rep.std_error.assign(d, 0.0);
    rep.z_score.assign(d, 0.0);
    rep.measured_shift.assign(d, 0.0);
    for (size_t i = 0; i < d; ++i) {
        rep.std_error[i] = std::sqrt(m2[i] / (static_cast<double>(n_draws) * (n_draws - 1)));
        rep.measured_shift[i] = mean[i] - rep.noiseless_grad[i];
        if (rep.std_error[i] > 0.0) {
            rep.z_score[i] = rep.measured_shift[i] / rep.std_error[i];
        } else {
            rep.z_score[i] = std::abs(rep.measured_shift[i]) <= 1e-14 ? 0.0
                             : std::numeric_limits<double>::infinity();
        }
        rep.max_abs_z = std::max(rep.max_abs_z, std::abs(rep.z_score[i]));
    }

    // first-order prediction of the shift for biased policies
    rep.predicted_shift.assign(d, 0.0);
    const double bias_center = policy.mode == NoiseMode::Additive ? policy.mu : policy.mu - 1.0;
    if (bias_center != 0.0) {
        Tape tape;
        ProbeInjector probe(policy.mode);
        ForwardCtx ctx;
        ctx.mode = ForwardMode::Frozen;
        ctx.injector = &probe;
        ForwardResult fr = net.forward(tape, batch.images, ctx);
        NodeId loss = diag_loss_node(tape, fr, batch.labels, opt);
        tape.backward(loss);
        for (const auto& ps : probe.sites()) {
            const double ds = tape.has_grad(ps.leaf) ? tape.grad(ps.leaf).at(0) : 0.0;
            for (const auto& blk : layout.edges) {
                if (blk.group != ps.site.group || blk.edge_idx != ps.site.edge_index) continue;
                const auto w = softmax_weights(net.alpha.edge(blk.group, blk.edge_idx));
                for (int j = 0; j < blk.m; ++j) {
                    const double jac = (j == blk.skip_idx ? 1.0 : 0.0) - w[static_cast<size_t>(j)];
                    rep.predicted_shift[static_cast<size_t>(blk.offset + j)] += bias_center * jac * ds;
                }
            }
        }
    }
    for (size_t i = 0; i < d; ++i) {
        const double se = rep.std_error[i];
        const double miss = std::abs(rep.measured_shift[i] - rep.predicted_shift[i]);
        if (se > 0.0)
            rep.max_prediction_z = std::max(rep.max_prediction_z, miss / se);
        else if (miss > 1e-12)
            rep.max_prediction_z = std::numeric_limits<double>::infinity();
    }
    return rep;
}

std::string SmoothingReport::to_json() const {
    ordered_json j;
    j["draws"] = draws;
    j["z_dim"] = z_dim;
    j["sigma"] = sigma;
    j["mc_mean"] = mc_mean;
    j["mc_se"] = mc_se;
    j["loss_at_zero"] = loss_at_zero;
    j["fd_trace"] = fd_trace;
    j["predicted_gap"] = predicted_gap;
    j["ratio"] = ratio;
    j["ratio_se"] = ratio_se;
    j["beta"] = beta;
    j["inconclusive"] = inconclusive;
    return j.dump(2);
}

SmoothingReport verify_smoothing(NoisyLossFn& fn, double sigma, int n_draws, std::uint64_t seed,
                                 double fd_h) {
    if (sigma <= 0.0) throw std::invalid_argument("verify_smoothing: sigma must be positive");
    if (n_draws < 4) throw std::invalid_argument("verify_smoothing: need at least 4 draws");
    const int d = fn.z_dim();
    if (d <= 0) throw std::invalid_argument("verify_smoothing: empty noise space");

    SmoothingReport rep;
    rep.sigma = sigma;
    rep.z_dim = d;
    rep.draws = n_draws;

    std::vector<double> z(static_cast<size_t>(d), 0.0);
    rep.loss_at_zero = fn.eval(z);

    // loss-only central second differences along each coordinate
    double trace = 0.0;
    for (int i = 0; i < d; ++i) {
        z[static_cast<size_t>(i)] = fd_h;
        const double lp = fn.eval(z);
        z[static_cast<size_t>(i)] = -fd_h;
        const double lm = fn.eval(z);
        z[static_cast<size_t>(i)] = 0.0;
        trace += (lp + lm - 2.0 * rep.loss_at_zero) / (fd_h * fd_h);
    }
    rep.fd_trace = trace;
    rep.predicted_gap = 0.5 * sigma * sigma * trace;

    // antithetic pairs: the pair average cancels the odd-order terms
    const std::uint64_t zseed = derive_seed(seed, "smooth.z");
    const int pairs = n_draws / 2;
    double mean = 0.0, m2 = 0.0;
    for (int k = 0; k < pairs; ++k) {
        for (int i = 0; i < d; ++i)
            z[static_cast<size_t>(i)] =
                sigma * CounterRng::element_normal(zseed, static_cast<std::uint64_t>(k),
                                                   static_cast<std::uint64_t>(i));
        const double lp = fn.eval(z);
        for (auto& v : z) v = -v;
        const double lm = fn.eval(z);
        for (auto& v : z) v = 0.0;
        const double pair_mean = 0.5 * (lp + lm);
        const double delta = pair_mean - mean;
        mean += delta / (k + 1);
        m2 += delta * (pair_mean - mean);
    }
    rep.mc_mean = mean;
    rep.mc_se = pairs > 1 ? std::sqrt(m2 / (static_cast<double>(pairs) * (pairs - 1))) : 0.0;

    const double gap = rep.mc_mean - rep.loss_at_zero;
    // FD noise floor: rounding of the second difference, coherently summed
    const double floor_per_coord = 4.0 * 2.2e-16 * std::max(1.0, std::abs(rep.loss_at_zero)) / (fd_h * fd_h);
    const double trace_floor = floor_per_coord * static_cast<double>(d);
    if (std::abs(trace) < 10.0 * trace_floor) {
        rep.inconclusive = true;
        rep.ratio = 0.0;
        rep.ratio_se = 0.0;
    } else {
        rep.ratio = gap / rep.predicted_gap;
        rep.ratio_se = rep.mc_se / std::abs(rep.predicted_gap);
    }
    rep.beta = fn.beta_estimate();
    return rep;
}

namespace {

// routes a flat z additively into OFS skip sites, in forward-walk order
class AddVectorInjector : public NoiseInjector {
public:
    explicit AddVectorInjector(const std::vector<double>& z) : z_(z) {}

    NodeId apply(Tape& tape, const InjectionSite& site, NodeId op_out) override {
        if (!placement_applies(NoisePlacement::OFS, op_is_skip(site.op_name))) return op_out;
        const Tensor& out = tape.value(op_out);
        Tensor nz(out.shape);
        if (off_ + static_cast<size_t>(nz.numel()) > z_.size())
            throw std::logic_error("smoothing: z vector shorter than the site walk");
        std::copy_n(z_.begin() + static_cast<std::ptrdiff_t>(off_), nz.numel(), nz.data.begin());
        off_ += static_cast<size_t>(nz.numel());
        return tape.add(op_out, tape.leaf(std::move(nz)));
    }

    size_t consumed() const { return off_; }

private:
    const std::vector<double>& z_;
    size_t off_ = 0;
};

// collects per-site op outputs (used for sizing, rms, beta, histograms)
class CaptureInjector : public NoiseInjector {
public:
    explicit CaptureInjector(std::string op_name) : op_name_(std::move(op_name)) {}

    NodeId apply(Tape& tape, const InjectionSite& site, NodeId op_out) override {
        if (site.op_name != op_name_) return op_out;
        char buf[48];
        std::snprintf(buf, sizeof(buf), "cell%02d/%s/e%02d", site.cell_index, site.group.c_str(),
                      site.edge_index);
        captured_.emplace_back(buf, tape.value(op_out));
        return op_out;
    }

    const std::vector<std::pair<std::string, Tensor>>& captured() const { return captured_; }

private:
    std::string op_name_;
    std::vector<std::pair<std::string, Tensor>> captured_;
};

}  // namespace

SupernetNoisyLoss::SupernetNoisyLoss(Supernet& net, const ValBatch& batch, const DiagOptions& opt)
    : net_(net), batch_(batch), opt_(opt) {
    CaptureInjector cap("skip_connect");
    Tape tape;
    ForwardCtx ctx;
    ctx.mode = ForwardMode::Frozen;
    ctx.injector = &cap;
    net_.forward(tape, batch_.images, ctx);
    for (const auto& [key, value] : cap.captured()) {
        site_sizes_.push_back(static_cast<int>(value.numel()));
        z_dim_ += static_cast<int>(value.numel());
    }
    if (z_dim_ == 0) throw std::invalid_argument("smoothing: the supernet has no skip sites");
}

int SupernetNoisyLoss::z_dim() const { return z_dim_; }

double SupernetNoisyLoss::eval(const std::vector<double>& z) {
    if (static_cast<int>(z.size()) != z_dim_)
        throw std::invalid_argument("smoothing: z has wrong dimension");
    AddVectorInjector inj(z);
    Tape tape;
    ForwardCtx ctx;
    ctx.mode = ForwardMode::Frozen;
    ctx.injector = &inj;
    ForwardResult fr = net_.forward(tape, batch_.images, ctx);
    NodeId loss = diag_loss_node(tape, fr, batch_.labels, opt_);
    return tape.value(loss).at(0);
}

double SupernetNoisyLoss::beta_estimate() {
    CaptureInjector cap("skip_connect");
    Tape tape;
    ForwardCtx ctx;
    ctx.mode = ForwardMode::Frozen;
    ctx.injector = &cap;
    net_.forward(tape, batch_.images, ctx);
    double total = 0.0;
    std::int64_t count = 0;
    for (const auto& [key, value] : cap.captured()) {
        const int B = value.dim(0);
        const std::int64_t stride = value.numel() / B;
        for (int b = 0; b < B; ++b) {
            double sq = 0.0;
            for (std::int64_t i = 0; i < stride; ++i) {
                const double v = value.at(b * stride + i);
                sq += v * v;
            }
            if (sq > 0.0) {
                total += 1.0 / sq;
                ++count;
            }
        }
    }
    return count > 0 ? total / static_cast<double>(count) : 0.0;
}

double SupernetNoisyLoss::skip_output_rms() {
    CaptureInjector cap("skip_connect");
    Tape tape;
    ForwardCtx ctx;
    ctx.mode = ForwardMode::Frozen;
    ctx.injector = &cap;
    net_.forward(tape, batch_.images, ctx);
    double sq = 0.0;
    std::int64_t n = 0;
    for (const auto& [key, value] : cap.captured()) {
        for (double v : value.data) sq += v * v;
        n += value.numel();
    }
    return n > 0 ? std::sqrt(sq / static_cast<double>(n)) : 0.0;
}

void moments(const std::vector<double>& xs, double* mean, double* stddev, double* skewness,
             double* excess_kurtosis) {
    const double n = static_cast<double>(xs.size());
    double m = 0.0;
    for (double v : xs) m += v;
    m /= n;
    double m2 = 0.0, m3 = 0.0, m4 = 0.0;
    for (double v : xs) {
        const double d = v - m;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    *mean = m;
    *stddev = std::sqrt(m2);
    *skewness = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
    *excess_kurtosis = m2 > 0.0 ? m4 / (m2 * m2) - 3.0 : 0.0;
}

std::vector<FeatureHistogram> feature_histogram(Supernet& net, const std::vector<Sample>& data,
                                                const std::string& op_name, int bins, int batch_size) {
    if (!is_registered_op(op_name))
        throw std::invalid_argument("feature_histogram: unknown op '" + op_name + "'");
    if (data.empty()) throw std::invalid_argument("feature_histogram: empty dataset");

    std::map<std::string, std::vector<double>> values;
    for (size_t pos = 0; pos < data.size(); pos += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(data.size(), pos + static_cast<size_t>(batch_size));
        std::vector<int> idx;
        for (size_t i = pos; i < end; ++i) idx.push_back(static_cast<int>(i));
        std::vector<int> labels;
        const Tensor batch = make_batch(data, idx, &labels);
        CaptureInjector cap(op_name);
        Tape tape;
        ForwardCtx ctx;
        ctx.mode = ForwardMode::Eval;
        ctx.injector = &cap;
        net.forward(tape, batch, ctx);
        for (const auto& [key, value] : cap.captured()) {
            auto& dst = values[key];
            dst.insert(dst.end(), value.data.begin(), value.data.end());
        }
    }
    if (values.empty())
        throw std::invalid_argument("feature_histogram: op '" + op_name + "' sits on no edge");

    std::vector<FeatureHistogram> out;
    for (auto& [site, xs] : values) {
        FeatureHistogram h;
        h.site = site;
        h.total = static_cast<std::int64_t>(xs.size());
        moments(xs, &h.mean, &h.stddev, &h.skewness, &h.excess_kurtosis);
        double lo = xs[0], hi = xs[0];
        for (double v : xs) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        if (lo == hi) {  // constant features occupy one centered bin
            lo -= 0.5;
            hi += 0.5;
        }
        h.bin_edges.resize(static_cast<size_t>(bins) + 1);
        for (int b = 0; b <= bins; ++b)
            h.bin_edges[static_cast<size_t>(b)] = lo + (hi - lo) * b / static_cast<double>(bins);
        h.counts.assign(static_cast<size_t>(bins), 0);
        for (double v : xs) {
            int b = static_cast<int>((v - lo) / (hi - lo) * bins);
            b = std::clamp(b, 0, bins - 1);
            ++h.counts[static_cast<size_t>(b)];
        }
        out.push_back(std::move(h));
    }
    return out;
}

std::string histograms_to_json(const std::vector<FeatureHistogram>& hists) {
    ordered_json j = ordered_json::array();
    for (const auto& h : hists) {
        ordered_json e;
        e["site"] = h.site;
        e["total"] = h.total;
        e["mean"] = h.mean;
        e["stddev"] = h.stddev;
        e["skewness"] = h.skewness;
        e["excess_kurtosis"] = h.excess_kurtosis;
        e["bin_edges"] = h.bin_edges;
        e["counts"] = h.counts;
        j.push_back(e);
    }
    return j.dump(2);
}

}  // namespace nd
