#include "nd/tape.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nd {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

// conv scratch, reused across calls; a tape is thread-confined during a pass
thread_local std::vector<double> g_col, g_dcol, g_tmp, g_gout;

double* scratch(std::vector<double>& buf, size_t n) {
    if (buf.size() < n) buf.resize(n);
    return buf.data();
}

[[noreturn]] void fail(const std::string& op, const std::string& what) {
    throw std::invalid_argument(op + ": " + what);
}

void require_4d(const Tensor& t, const char* op, const char* role) {
    if (t.ndim() != 4) fail(op, std::string(role) + " must be 4-d (B,C,H,W), got " + shape_str(t.shape));
}

int conv_out_extent(int in, int pad, int dilation, int kernel, int stride) {
    return (in + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1;
}

// Gathers the convolution window matrix for one group across the whole
// batch: rows = Cg*kh*kw, cols = B*Ho*Wo (sample-major), zero-filled where
// the window leaves the input.
void im2col(const Tensor& x, int group, int cg, int kh, int kw, int stride, int pad, int dilation,
            int ho, int wo, std::vector<double>& col) {
    const int B = x.dim(0), H = x.dim(2), W = x.dim(3);
    const std::int64_t spatial = static_cast<std::int64_t>(ho) * wo;
    const std::int64_t cols = static_cast<std::int64_t>(B) * spatial;
    double* out = scratch(col, static_cast<size_t>(cg) * kh * kw * cols);
    size_t row = 0;
    for (int ci = 0; ci < cg; ++ci) {
        const int c = group * cg + ci;
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj, ++row) {
                double* base = out + row * static_cast<size_t>(cols);
                for (int b = 0; b < B; ++b) {
                    double* dst = base + static_cast<std::int64_t>(b) * spatial;
                    for (int oh = 0; oh < ho; ++oh) {
                        const int ih = oh * stride - pad + ki * dilation;
                        if (ih < 0 || ih >= H) {
                            std::fill_n(dst, wo, 0.0);
                            dst += wo;
                            continue;
                        }
                        const double* src = &x.at4(b, c, ih, 0);
                        for (int ow = 0; ow < wo; ++ow, ++dst) {
                            const int iw = ow * stride - pad + kj * dilation;
                            *dst = (iw >= 0 && iw < W) ? src[iw] : 0.0;
                        }
                    }
                }
            }
        }
    }
}

// Scatter-add of a batched column matrix back into the input gradient.
void col2im_add(Tensor& dx, int group, int cg, int kh, int kw, int stride, int pad, int dilation,
                int ho, int wo, const std::vector<double>& col) {
    const int B = dx.dim(0), H = dx.dim(2), W = dx.dim(3);
    const std::int64_t spatial = static_cast<std::int64_t>(ho) * wo;
    const std::int64_t cols = static_cast<std::int64_t>(B) * spatial;
    size_t row = 0;
    for (int ci = 0; ci < cg; ++ci) {
        const int c = group * cg + ci;
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj, ++row) {
                const double* base = col.data() + row * static_cast<size_t>(cols);
                for (int b = 0; b < B; ++b) {
                    const double* src = base + static_cast<std::int64_t>(b) * spatial;
                    for (int oh = 0; oh < ho; ++oh) {
                        const int ih = oh * stride - pad + ki * dilation;
                        if (ih < 0 || ih >= H) { src += wo; continue; }
                        double* dst = &dx.at4(b, c, ih, 0);
                        for (int ow = 0; ow < wo; ++ow, ++src) {
                            const int iw = ow * stride - pad + kj * dilation;
                            if (iw >= 0 && iw < W) dst[iw] += *src;
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Conv2d: return "conv2d";
        case OpKind::Relu: return "relu";
        case OpKind::BatchAffineNorm: return "batch_affine_norm";
        case OpKind::AvgPool: return "avg_pool";
        case OpKind::MaxPool: return "max_pool";
        case OpKind::GlobalAvgPool: return "global_avg_pool";
        case OpKind::Dense: return "dense";
        case OpKind::Add: return "add";
        case OpKind::ScalarScale: return "scalar_scale";
        case OpKind::Softmax: return "softmax";
        case OpKind::CrossEntropyWithLogits: return "cross_entropy_with_logits";
        case OpKind::ElementwiseMul: return "elementwise_mul";
        case OpKind::Zero: return "zero";
        case OpKind::ReduceSum: return "reduce_sum";
        case OpKind::ConcatChannels: return "concat_channels";
        case OpKind::IndexScalar: return "index_scalar";
        case OpKind::MulScalarNode: return "mul_scalar_node";
    }
    return "?";
}

void Tape::check_id(NodeId id, const char* who) const {
    if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
        throw std::invalid_argument(std::string(who) + ": node id " + std::to_string(id) + " not on tape");
}

NodeId Tape::push(TapeNode n) {
    for (NodeId p : n.parents) check_id(p, op_name(n.kind));
    if (n.kind != OpKind::Leaf) {
        n.requires_grad = false;
        for (NodeId p : n.parents) n.requires_grad = n.requires_grad || nodes_[static_cast<size_t>(p)].requires_grad;
    }
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::leaf(Tensor value, std::string name, bool requires_grad) {
    TapeNode n;
    n.kind = OpKind::Leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.name = name;
    NodeId id = push(std::move(n));
    if (!name.empty()) {
        auto [it, fresh] = leaves_.emplace(std::move(name), id);
        if (!fresh) fail("leaf", "duplicate leaf name '" + it->first + "'");
    }
    return id;
}

NodeId Tape::find_leaf(const std::string& name) const {
    auto it = leaves_.find(name);
    return it == leaves_.end() ? kNoNode : it->second;
}

NodeId Tape::conv2d(NodeId xid, NodeId wid, NodeId bid, const Conv2dAttrs& a) {
    const Tensor& x = value(xid);
    const Tensor& w = value(wid);
    require_4d(x, "conv2d", "input");
    require_4d(w, "conv2d", "weight");
    const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(0), Cw = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (a.groups < 1 || Cin % a.groups != 0 || Cout % a.groups != 0)
        fail("conv2d", "channels " + std::to_string(Cin) + "->" + std::to_string(Cout) +
                           " not divisible by groups " + std::to_string(a.groups));
    if (Cw != Cin / a.groups)
        fail("conv2d", "weight expects " + std::to_string(Cw) + " input channels per group, input " +
                           shape_str(x.shape) + " provides " + std::to_string(Cin / a.groups));
    const int Ho = conv_out_extent(H, a.padding, a.dilation, kh, a.stride);
    const int Wo = conv_out_extent(W, a.padding, a.dilation, kw, a.stride);
    if (Ho <= 0 || Wo <= 0)
        fail("conv2d", "kernel " + std::to_string(kh) + "x" + std::to_string(kw) + " does not fit input " +
                           shape_str(x.shape));
    if (bid != kNoNode) {
        const Tensor& bias = value(bid);
        if (bias.ndim() != 1 || bias.dim(0) != Cout)
            fail("conv2d", "bias shape " + shape_str(bias.shape) + " must be (" + std::to_string(Cout) + ")");
    }

    TapeNode n;
    n.kind = OpKind::Conv2d;
    n.parents = bid == kNoNode ? std::vector<NodeId>{xid, wid} : std::vector<NodeId>{xid, wid, bid};
    n.attrs.conv = a;
    n.value = Tensor({B, Cout, Ho, Wo});

    const int cg = Cin / a.groups, cog = Cout / a.groups;
    const int krows = cg * kh * kw;
    const std::int64_t spatial = static_cast<std::int64_t>(Ho) * Wo;
    const std::int64_t cols = static_cast<std::int64_t>(B) * spatial;
    double* tmp = scratch(g_tmp, static_cast<size_t>(cog) * cols);
    for (int g = 0; g < a.groups; ++g) {
        im2col(x, g, cg, kh, kw, a.stride, a.padding, a.dilation, Ho, Wo, g_col);
        CMapRM wmat(w.data.data() + static_cast<size_t>(g) * cog * krows, cog, krows);
        CMapRM cmat(g_col.data(), krows, cols);
        MapRM omat(tmp, cog, cols);
        omat.noalias() = wmat * cmat;
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < cog; ++c)
                std::copy_n(tmp + static_cast<size_t>(c) * cols + static_cast<std::int64_t>(b) * spatial,
                            spatial, &n.value.at4(b, g * cog + c, 0, 0));
    }
    if (bid != kNoNode) {
        const Tensor& bias = value(bid);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < Cout; ++c) {
                double* p = &n.value.at4(b, c, 0, 0);
                for (std::int64_t i = 0; i < spatial; ++i) p[i] += bias.data[static_cast<size_t>(c)];
            }
    }
    return push(std::move(n));
}

NodeId Tape::relu(NodeId xid) {
    const Tensor& x = value(xid);
    TapeNode n;
    n.kind = OpKind::Relu;
    n.parents = {xid};
    n.value = Tensor(x.shape);
    for (std::int64_t i = 0; i < x.numel(); ++i) n.value.at(i) = x.at(i) > 0.0 ? x.at(i) : 0.0;
    return push(std::move(n));
}

NodeId Tape::batch_affine_norm(NodeId xid, NodeId gid, NodeId bid, const NormAttrs& a) {
    const Tensor& x = value(xid);
    if (x.ndim() != 2 && x.ndim() != 4)
        fail("batch_affine_norm", "input must be (B,C) or (B,C,H,W), got " + shape_str(x.shape));
    const int C = x.dim(1);
    const Tensor& gamma = value(gid);
    const Tensor& beta = value(bid);
    if (gamma.ndim() != 1 || gamma.dim(0) != C || beta.ndim() != 1 || beta.dim(0) != C)
        fail("batch_affine_norm", "affine shapes " + shape_str(gamma.shape) + "/" + shape_str(beta.shape) +
                                      " must be (" + std::to_string(C) + ")");
    const int B = x.dim(0);
    const int spatial = x.ndim() == 4 ? x.dim(2) * x.dim(3) : 1;
    const std::int64_t n_per_c = static_cast<std::int64_t>(B) * spatial;

    Tensor mean({C}), var({C});
    if (a.use_batch_stats) {
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int b = 0; b < B; ++b) {
                const double* p = x.data.data() + (static_cast<std::int64_t>(b) * C + c) * spatial;
                for (int i = 0; i < spatial; ++i) s += p[i];
            }
            mean.at(c) = s / static_cast<double>(n_per_c);
        }
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int b = 0; b < B; ++b) {
                const double* p = x.data.data() + (static_cast<std::int64_t>(b) * C + c) * spatial;
                for (int i = 0; i < spatial; ++i) {
                    const double d = p[i] - mean.at(c);
                    s += d * d;
                }
            }
            var.at(c) = s / static_cast<double>(n_per_c);
        }
        if (a.update_running) {
            if (!a.running) fail("batch_affine_norm", "update_running set but no running stats attached");
            const double m = a.momentum;
            const double unbias = n_per_c > 1 ? static_cast<double>(n_per_c) / static_cast<double>(n_per_c - 1) : 1.0;
            for (int c = 0; c < C; ++c) {
                a.running->mean.at(c) = (1.0 - m) * a.running->mean.at(c) + m * mean.at(c);
                a.running->var.at(c) = (1.0 - m) * a.running->var.at(c) + m * var.at(c) * unbias;
            }
        }
    } else {
        if (!a.running) fail("batch_affine_norm", "eval mode requires running stats");
        mean = a.running->mean;
        var = a.running->var;
    }

    Tensor invstd({C});
    for (int c = 0; c < C; ++c) invstd.at(c) = 1.0 / std::sqrt(var.at(c) + a.eps);

    TapeNode n;
    n.kind = OpKind::BatchAffineNorm;
    n.parents = {xid, gid, bid};
    n.attrs.norm = a;
    n.value = Tensor(x.shape);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double* p = x.data.data() + (static_cast<std::int64_t>(b) * C + c) * spatial;
            double* q = n.value.data.data() + (static_cast<std::int64_t>(b) * C + c) * spatial;
            const double g = gamma.at(c), mu = mean.at(c), is = invstd.at(c), bt = beta.at(c);
            for (int i = 0; i < spatial; ++i) q[i] = g * (p[i] - mu) * is + bt;
        }
    n.saved = {std::move(mean), std::move(invstd)};
    return push(std::move(n));
}

NodeId Tape::avg_pool(NodeId xid, const PoolAttrs& a) {
    const Tensor& x = value(xid);
    require_4d(x, "avg_pool", "input");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = conv_out_extent(H, a.padding, 1, a.kernel, a.stride);
    const int Wo = conv_out_extent(W, a.padding, 1, a.kernel, a.stride);
    if (Ho <= 0 || Wo <= 0) fail("avg_pool", "window does not fit input " + shape_str(x.shape));
    TapeNode n;
    n.kind = OpKind::AvgPool;
    n.parents = {xid};
    n.attrs.pool = a;
    n.value = Tensor({B, C, Ho, Wo});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    double s = 0.0;
                    int cnt = 0;
                    for (int ki = 0; ki < a.kernel; ++ki)
                        for (int kj = 0; kj < a.kernel; ++kj) {
                            const int ih = oh * a.stride - a.padding + ki;
                            const int iw = ow * a.stride - a.padding + kj;
                            if (ih >= 0 && ih < H && iw >= 0 && iw < W) {
                                s += x.at4(b, c, ih, iw);
                                ++cnt;
                            }
                        }
                    const int div = a.count_include_pad ? a.kernel * a.kernel : std::max(cnt, 1);
                    n.value.at4(b, c, oh, ow) = s / static_cast<double>(div);
                }
    return push(std::move(n));
}

NodeId Tape::max_pool(NodeId xid, const PoolAttrs& a) {
    const Tensor& x = value(xid);
    require_4d(x, "max_pool", "input");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = conv_out_extent(H, a.padding, 1, a.kernel, a.stride);
    const int Wo = conv_out_extent(W, a.padding, 1, a.kernel, a.stride);
    if (Ho <= 0 || Wo <= 0) fail("max_pool", "window does not fit input " + shape_str(x.shape));
    TapeNode n;
    n.kind = OpKind::MaxPool;
    n.parents = {xid};
    n.attrs.pool = a;
    n.value = Tensor({B, C, Ho, Wo});
    n.aux_idx.assign(n.value.data.size(), -1);
    std::int64_t out = 0;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow, ++out) {
                    double best = -std::numeric_limits<double>::infinity();
                    int best_idx = -1;
                    for (int ki = 0; ki < a.kernel; ++ki)
                        for (int kj = 0; kj < a.kernel; ++kj) {
                            const int ih = oh * a.stride - a.padding + ki;
                            const int iw = ow * a.stride - a.padding + kj;
                            if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                            const double v = x.at4(b, c, ih, iw);
                            // strict > keeps the first maximal element on ties
                            if (v > best) {
                                best = v;
                                best_idx = static_cast<int>(((static_cast<std::int64_t>(b) * C + c) * H + ih) * W + iw);
                            }
                        }
                    n.value.at(out) = best_idx < 0 ? 0.0 : best;
                    n.aux_idx[static_cast<size_t>(out)] = best_idx;
                }
    return push(std::move(n));
}

NodeId Tape::global_avg_pool(NodeId xid) {
    const Tensor& x = value(xid);
    require_4d(x, "global_avg_pool", "input");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    TapeNode n;
    n.kind = OpKind::GlobalAvgPool;
    n.parents = {xid};
    n.value = Tensor({B, C});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            const double* p = &x.at4(b, c, 0, 0);
            for (int i = 0; i < H * W; ++i) s += p[i];
            n.value.data[static_cast<size_t>(b) * C + c] = s / (static_cast<double>(H) * W);
        }
    return push(std::move(n));
}

NodeId Tape::dense(NodeId xid, NodeId wid, NodeId bid) {
    const Tensor& x = value(xid);
    const Tensor& w = value(wid);
    if (x.ndim() != 2) fail("dense", "input must be (B,K), got " + shape_str(x.shape));
    if (w.ndim() != 2) fail("dense", "weight must be (N,K), got " + shape_str(w.shape));
    const int B = x.dim(0), K = x.dim(1), N = w.dim(0);
    if (w.dim(1) != K)
        fail("dense", "weight " + shape_str(w.shape) + " incompatible with input " + shape_str(x.shape));
    TapeNode n;
    n.kind = OpKind::Dense;
    n.parents = bid == kNoNode ? std::vector<NodeId>{xid, wid} : std::vector<NodeId>{xid, wid, bid};
    n.value = Tensor({B, N});
    CMapRM xm(x.data.data(), B, K);
    CMapRM wm(w.data.data(), N, K);
    MapRM om(n.value.data.data(), B, N);
    om.noalias() = xm * wm.transpose();
    if (bid != kNoNode) {
        const Tensor& bias = value(bid);
        if (bias.ndim() != 1 || bias.dim(0) != N)
            fail("dense", "bias shape " + shape_str(bias.shape) + " must be (" + std::to_string(N) + ")");
        for (int b = 0; b < B; ++b)
            for (int j = 0; j < N; ++j) n.value.data[static_cast<size_t>(b) * N + j] += bias.at(j);
    }
    return push(std::move(n));
}

NodeId Tape::add(NodeId aid, NodeId bid) {
    const Tensor& a = value(aid);
    const Tensor& b = value(bid);
    if (!a.same_shape(b)) fail("add", "shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    TapeNode n;
    n.kind = OpKind::Add;
    n.parents = {aid, bid};
    n.value = Tensor(a.shape);
    for (std::int64_t i = 0; i < a.numel(); ++i) n.value.at(i) = a.at(i) + b.at(i);
    return push(std::move(n));
}

NodeId Tape::scalar_scale(NodeId xid, double c) {
    const Tensor& x = value(xid);
    TapeNode n;
    n.kind = OpKind::ScalarScale;
    n.parents = {xid};
    n.attrs.scale = c;
    n.value = Tensor(x.shape);
    for (std::int64_t i = 0; i < x.numel(); ++i) n.value.at(i) = c * x.at(i);
    return push(std::move(n));
}

NodeId Tape::softmax(NodeId xid) {
    const Tensor& x = value(xid);
    if (x.ndim() < 1) fail("softmax", "input must have at least one dimension");
    const int K = x.shape.back();
    const std::int64_t rows = x.numel() / K;
    TapeNode n;
    n.kind = OpKind::Softmax;
    n.parents = {xid};
    n.value = Tensor(x.shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* p = x.data.data() + r * K;
        double* q = n.value.data.data() + r * K;
        double m = p[0];
        for (int k = 1; k < K; ++k) m = std::max(m, p[k]);
        double s = 0.0;
        for (int k = 0; k < K; ++k) {
            q[k] = std::exp(p[k] - m);
            s += q[k];
        }
        for (int k = 0; k < K; ++k) q[k] /= s;
    }
    return push(std::move(n));
}

NodeId Tape::cross_entropy_with_logits(NodeId lid, std::vector<int> labels) {
    const Tensor& logits = value(lid);
    if (logits.ndim() != 2) fail("cross_entropy_with_logits", "logits must be (B,K), got " + shape_str(logits.shape));
    const int B = logits.dim(0), K = logits.dim(1);
    if (static_cast<int>(labels.size()) != B)
        fail("cross_entropy_with_logits",
             std::to_string(labels.size()) + " labels for batch of " + std::to_string(B));
    for (int l : labels)
        if (l < 0 || l >= K)
            fail("cross_entropy_with_logits", "label " + std::to_string(l) + " outside [0," + std::to_string(K) + ")");
    TapeNode n;
    n.kind = OpKind::CrossEntropyWithLogits;
    n.parents = {lid};
    n.attrs.labels = std::move(labels);
    Tensor probs(logits.shape);
    double total = 0.0;
    for (int b = 0; b < B; ++b) {
        const double* p = logits.data.data() + static_cast<size_t>(b) * K;
        double* q = probs.data.data() + static_cast<size_t>(b) * K;
        double m = p[0];
        for (int k = 1; k < K; ++k) m = std::max(m, p[k]);
        double s = 0.0;
        for (int k = 0; k < K; ++k) s += std::exp(p[k] - m);
        const double lse = m + std::log(s);
        for (int k = 0; k < K; ++k) q[k] = std::exp(p[k] - lse);
        total += lse - p[n.attrs.labels[static_cast<size_t>(b)]];
    }
    n.value = Tensor::scalar(total / B);
    n.saved = {std::move(probs)};
    return push(std::move(n));
}

NodeId Tape::elementwise_mul(NodeId aid, NodeId bid) {
    const Tensor& a = value(aid);
    const Tensor& b = value(bid);
    if (!a.same_shape(b))
        fail("elementwise_mul", "shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    TapeNode n;
    n.kind = OpKind::ElementwiseMul;
    n.parents = {aid, bid};
    n.value = Tensor(a.shape);
    for (std::int64_t i = 0; i < a.numel(); ++i) n.value.at(i) = a.at(i) * b.at(i);
    return push(std::move(n));
}

NodeId Tape::zero_like(NodeId xid, int stride) {
    const Tensor& x = value(xid);
    TapeNode n;
    n.kind = OpKind::Zero;
    n.parents = {xid};
    n.attrs.stride = stride;
    if (x.ndim() == 4 && stride > 1) {
        const int Ho = (x.dim(2) + stride - 1) / stride;
        const int Wo = (x.dim(3) + stride - 1) / stride;
        n.value = Tensor({x.dim(0), x.dim(1), Ho, Wo});
    } else {
        n.value = Tensor(x.shape);
    }
    return push(std::move(n));
}

NodeId Tape::reduce_sum(NodeId xid) {
    const Tensor& x = value(xid);
    TapeNode n;
    n.kind = OpKind::ReduceSum;
    n.parents = {xid};
    double s = 0.0;
    for (double v : x.data) s += v;
    n.value = Tensor::scalar(s);
    return push(std::move(n));
}

NodeId Tape::concat_channels(const std::vector<NodeId>& xs) {
    if (xs.empty()) fail("concat_channels", "no inputs");
    const Tensor& first = value(xs[0]);
    require_4d(first, "concat_channels", "input");
    int ctotal = 0;
    for (NodeId id : xs) {
        const Tensor& t = value(id);
        require_4d(t, "concat_channels", "input");
        if (t.dim(0) != first.dim(0) || t.dim(2) != first.dim(2) || t.dim(3) != first.dim(3))
            fail("concat_channels", "incompatible shapes " + shape_str(first.shape) + " vs " + shape_str(t.shape));
        ctotal += t.dim(1);
    }
    TapeNode n;
    n.kind = OpKind::ConcatChannels;
    n.parents = xs;
    const int B = first.dim(0), H = first.dim(2), W = first.dim(3);
    n.value = Tensor({B, ctotal, H, W});
    for (int b = 0; b < B; ++b) {
        int coff = 0;
        for (NodeId id : xs) {
            const Tensor& t = value(id);
            const int Ci = t.dim(1);
            std::copy_n(&t.at4(b, 0, 0, 0), static_cast<size_t>(Ci) * H * W, &n.value.at4(b, coff, 0, 0));
            coff += Ci;
        }
    }
    return push(std::move(n));
}

NodeId Tape::index_scalar(NodeId vid, int index) {
    const Tensor& v = value(vid);
    if (v.ndim() != 1) fail("index_scalar", "input must be 1-d, got " + shape_str(v.shape));
    if (index < 0 || index >= v.dim(0))
        fail("index_scalar", "index " + std::to_string(index) + " outside " + shape_str(v.shape));
    TapeNode n;
    n.kind = OpKind::IndexScalar;
    n.parents = {vid};
    n.attrs.index = index;
    n.value = Tensor::scalar(v.at(index));
    return push(std::move(n));
}

NodeId Tape::mul_scalar_node(NodeId xid, NodeId sid) {
    const Tensor& x = value(xid);
    const Tensor& s = value(sid);
    if (s.numel() != 1) fail("mul_scalar_node", "scale must be scalar, got " + shape_str(s.shape));
    TapeNode n;
    n.kind = OpKind::MulScalarNode;
    n.parents = {xid, sid};
    n.value = Tensor(x.shape);
    const double c = s.at(0);
    for (std::int64_t i = 0; i < x.numel(); ++i) n.value.at(i) = c * x.at(i);
    return push(std::move(n));
}

NodeId Tape::forward_op(OpKind kind, const std::vector<NodeId>& in, const OpAttrs& a) {
    auto arity = [&](size_t lo, size_t hi) {
        if (in.size() < lo || in.size() > hi)
            fail(op_name(kind), "expected " + std::to_string(lo) + (hi != lo ? ".." + std::to_string(hi) : "") +
                                    " inputs, got " + std::to_string(in.size()));
    };
    switch (kind) {
        case OpKind::Conv2d: arity(2, 3); return conv2d(in[0], in[1], in.size() == 3 ? in[2] : kNoNode, a.conv);
        case OpKind::Relu: arity(1, 1); return relu(in[0]);
        case OpKind::BatchAffineNorm: arity(3, 3); return batch_affine_norm(in[0], in[1], in[2], a.norm);
        case OpKind::AvgPool: arity(1, 1); return avg_pool(in[0], a.pool);
        case OpKind::MaxPool: arity(1, 1); return max_pool(in[0], a.pool);
        case OpKind::GlobalAvgPool: arity(1, 1); return global_avg_pool(in[0]);
        case OpKind::Dense: arity(2, 3); return dense(in[0], in[1], in.size() == 3 ? in[2] : kNoNode);
        case OpKind::Add: arity(2, 2); return add(in[0], in[1]);
        case OpKind::ScalarScale: arity(1, 1); return scalar_scale(in[0], a.scale);
        case OpKind::Softmax: arity(1, 1); return softmax(in[0]);
        case OpKind::CrossEntropyWithLogits: arity(1, 1); return cross_entropy_with_logits(in[0], a.labels);
        case OpKind::ElementwiseMul: arity(2, 2); return elementwise_mul(in[0], in[1]);
        case OpKind::Zero: arity(1, 1); return zero_like(in[0], a.stride);
        case OpKind::ReduceSum: arity(1, 1); return reduce_sum(in[0]);
        case OpKind::ConcatChannels: return concat_channels(in);
        case OpKind::IndexScalar: arity(1, 1); return index_scalar(in[0], a.index);
        case OpKind::MulScalarNode: arity(2, 2); return mul_scalar_node(in[0], in[1]);
        case OpKind::Leaf: fail("forward_op", "leaf is not a computed op");
    }
    fail("forward_op", "unknown op kind");
}

const Tensor& Tape::value(NodeId id) const {
    check_id(id, "value");
    return nodes_[static_cast<size_t>(id)].value;
}

bool Tape::has_grad(NodeId id) const {
    check_id(id, "has_grad");
    return nodes_[static_cast<size_t>(id)].has_grad;
}

const Tensor& Tape::grad(NodeId id) const {
    check_id(id, "grad");
    const TapeNode& n = nodes_[static_cast<size_t>(id)];
    if (!n.has_grad)
        throw std::logic_error("grad: node " + std::to_string(id) + " (" + op_name(n.kind) +
                               ") has no gradient; run backward() first");
    return n.grad;
}

Tensor& Tape::grad_buf(NodeId id) {
    TapeNode& n = nodes_[static_cast<size_t>(id)];
    if (!n.has_grad) {
        n.grad = Tensor(n.value.shape);
        n.has_grad = true;
    }
    return n.grad;
}

void Tape::backward(NodeId loss) {
    check_id(loss, "backward");
    if (consumed_) throw std::logic_error("backward: tape already consumed");
    if (nodes_.empty()) throw std::logic_error("backward: empty tape");
    if (value(loss).numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(value(loss).shape));
    consumed_ = true;
    grad_buf(loss).at(0) = 1.0;
    for (NodeId id = loss; id >= 0; --id) {
        TapeNode& n = nodes_[static_cast<size_t>(id)];
        if (!n.has_grad) continue;
        if (n.kind != OpKind::Leaf) {
            backward_node(id);
            if (!keep_all_grads_ && id != loss) {
                n.grad = Tensor();
                n.has_grad = false;
            }
        }
    }
}

std::vector<double> Tape::grad_wrt(NodeId loss, const std::vector<std::string>& names) {
    std::vector<std::string> sorted = names;
    std::sort(sorted.begin(), sorted.end());
    std::vector<NodeId> ids;
    for (const auto& name : sorted) {
        NodeId id = find_leaf(name);
        if (id == kNoNode) throw std::invalid_argument("grad_wrt: unknown parameter '" + name + "'");
        ids.push_back(id);
    }
    if (!consumed_) backward(loss);
    std::vector<double> flat;
    for (size_t i = 0; i < ids.size(); ++i) {
        const TapeNode& n = nodes_[static_cast<size_t>(ids[i])];
        if (n.has_grad) {
            flat.insert(flat.end(), n.grad.data.begin(), n.grad.data.end());
        } else {
            flat.insert(flat.end(), n.value.data.size(), 0.0);  // leaf unreachable from loss
        }
    }
    return flat;
}

void Tape::backward_node(NodeId id) {
    TapeNode& n = nodes_[static_cast<size_t>(id)];
    const Tensor& gy = n.grad;
    auto want = [&](size_t slot) {
        const TapeNode& p = nodes_[static_cast<size_t>(n.parents[slot])];
        return keep_all_grads_ || p.requires_grad;
    };
    switch (n.kind) {
        case OpKind::Leaf:
            break;
        case OpKind::Conv2d: {
            const Tensor& x = nodes_[static_cast<size_t>(n.parents[0])].value;
            const Tensor& w = nodes_[static_cast<size_t>(n.parents[1])].value;
            const auto& a = n.attrs.conv;
            const int B = x.dim(0), Cin = x.dim(1);
            const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
            const int Ho = n.value.dim(2), Wo = n.value.dim(3);
            const int cg = Cin / a.groups, cog = Cout / a.groups;
            const int krows = cg * kh * kw;
            const std::int64_t spatial = static_cast<std::int64_t>(Ho) * Wo;
            const std::int64_t cols = static_cast<std::int64_t>(B) * spatial;
            const bool need_x = want(0), need_w = want(1);
            if (need_w) grad_buf(n.parents[1]);
            if (need_x) grad_buf(n.parents[0]);
            double* gout = scratch(g_gout, static_cast<size_t>(cog) * cols);
            for (int g = 0; g < a.groups; ++g) {
                for (int b = 0; b < B; ++b)
                    for (int c = 0; c < cog; ++c)
                        std::copy_n(&gy.at4(b, g * cog + c, 0, 0), spatial,
                                    gout + static_cast<size_t>(c) * cols +
                                        static_cast<std::int64_t>(b) * spatial);
                CMapRM gom(gout, cog, cols);
                if (need_w) {
                    im2col(x, g, cg, kh, kw, a.stride, a.padding, a.dilation, Ho, Wo, g_col);
                    CMapRM cmat(g_col.data(), krows, cols);
                    Tensor& dw = nodes_[static_cast<size_t>(n.parents[1])].grad;
                    MapRM dwm(dw.data.data() + static_cast<size_t>(g) * cog * krows, cog, krows);
                    dwm.noalias() += gom * cmat.transpose();
                }
                if (need_x) {
                    double* dcol = scratch(g_dcol, static_cast<size_t>(krows) * cols);
                    CMapRM wmat(w.data.data() + static_cast<size_t>(g) * cog * krows, cog, krows);
                    MapRM dcm(dcol, krows, cols);
                    dcm.noalias() = wmat.transpose() * gom;
                    col2im_add(nodes_[static_cast<size_t>(n.parents[0])].grad, g, cg, kh, kw, a.stride,
                               a.padding, a.dilation, Ho, Wo, g_dcol);
                }
            }
            if (n.parents.size() == 3 && want(2)) {
                Tensor& db = grad_buf(n.parents[2]);
                for (int b = 0; b < B; ++b)
                    for (int c = 0; c < Cout; ++c) {
                        const double* p = &gy.at4(b, c, 0, 0);
                        double s = 0.0;
                        for (std::int64_t i = 0; i < spatial; ++i) s += p[i];
                        db.at(c) += s;
                    }
            }
            break;
        }
        case OpKind::Relu: {
            if (!want(0)) break;
            const Tensor& x = nodes_[static_cast<size_t>(n.parents[0])].value;
            Tensor& dx = grad_buf(n.parents[0]);
            for (std::int64_t i = 0; i < x.numel(); ++i)
                if (x.at(i) > 0.0) dx.at(i) += gy.at(i);
            break;
        }
        case OpKind::BatchAffineNorm: {
            const Tensor& x = nodes_[static_cast<size_t>(n.parents[0])].value;
            const Tensor& gamma = nodes_[static_cast<size_t>(n.parents[1])].value;
            const Tensor& mean = n.saved[0];
            const Tensor& invstd = n.saved[1];
            const int B = x.dim(0), C = x.dim(1);
            const int spatial = x.ndim() == 4 ? x.dim(2) * x.dim(3) : 1;
            const double cnt = static_cast<double>(B) * spatial;
            // per-channel reductions shared by all three parents
            Tensor sum_gy({C}), sum_gy_xhat({C});
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const double* px = x.data.data() + (static_cast<std::int64_t>(b) * C + c) * spatial;
                    const double* pg = gy.data.data() + (static_cast<std::int64_t>(b) * C + c) * spatial;
                    double s0 = 0.0, s1 = 0.0;
                    for (int i = 0; i < spatial; ++i) {
                        s0 += pg[i];
                        s1 += pg[i] * (px[i] - mean.at(c)) * invstd.at(c);
                    }
                    sum_gy.at(c) += s0;
                    sum_gy_xhat.at(c) += s1;
                }
            if (want(2)) {
                Tensor& db = grad_buf(n.parents[2]);
                for (int c = 0; c < C; ++c) db.at(c) += sum_gy.at(c);
            }
            if (want(1)) {
                Tensor& dg = grad_buf(n.parents[1]);
                for (int c = 0; c < C; ++c) dg.at(c) += sum_gy_xhat.at(c);
            }
            if (want(0)) {
                Tensor& dx = grad_buf(n.parents[0]);
                if (n.attrs.norm.use_batch_stats) {
                    for (int b = 0; b < B; ++b)
                        for (int c = 0; c < C; ++c) {
                            const double* px = x.data.data() + (static_cast<std::int64_t>(b) * C + c) * spatial;
                            const double* pg = gy.data.data() + (static_cast<std::int64_t>(b) * C + c) * spatial;
                            double* pd = dx.data.data() + (static_cast<std::int64_t>(b) * C + c) * spatial;
                            const double g = gamma.at(c) * invstd.at(c);
                            const double mg = sum_gy.at(c) / cnt;
                            const double mgx = sum_gy_xhat.at(c) / cnt;
                            for (int i = 0; i < spatial; ++i) {
                                const double xhat = (px[i] - mean.at(c)) * invstd.at(c);
                                pd[i] += g * (pg[i] - mg - xhat * mgx);
                            }
                        }
                } else {
                    for (int b = 0; b < B; ++b)
                        for (int c = 0; c < C; ++c) {
                            const double* pg = gy.data.data() + (static_cast<std::int64_t>(b) * C + c) * spatial;
                            double* pd = dx.data.data() + (static_cast<std::int64_t>(b) * C + c) * spatial;
                            const double g = gamma.at(c) * invstd.at(c);
                            for (int i = 0; i < spatial; ++i) pd[i] += g * pg[i];
                        }
                }
            }
            break;
        }
        case OpKind::AvgPool: {
            if (!want(0)) break;
            const Tensor& x = nodes_[static_cast<size_t>(n.parents[0])].value;
            Tensor& dx = grad_buf(n.parents[0]);
            const auto& a = n.attrs.pool;
            const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
            const int Ho = n.value.dim(2), Wo = n.value.dim(3);
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c)
                    for (int oh = 0; oh < Ho; ++oh)
                        for (int ow = 0; ow < Wo; ++ow) {
                            int cnt = 0;
                            for (int ki = 0; ki < a.kernel; ++ki)
                                for (int kj = 0; kj < a.kernel; ++kj) {
                                    const int ih = oh * a.stride - a.padding + ki;
                                    const int iw = ow * a.stride - a.padding + kj;
                                    if (ih >= 0 && ih < H && iw >= 0 && iw < W) ++cnt;
                                }
                            const int div = a.count_include_pad ? a.kernel * a.kernel : std::max(cnt, 1);
                            const double g = gy.at4(b, c, oh, ow) / static_cast<double>(div);
                            for (int ki = 0; ki < a.kernel; ++ki)
                                for (int kj = 0; kj < a.kernel; ++kj) {
                                    const int ih = oh * a.stride - a.padding + ki;
                                    const int iw = ow * a.stride - a.padding + kj;
                                    if (ih >= 0 && ih < H && iw >= 0 && iw < W) dx.at4(b, c, ih, iw) += g;
                                }
                        }
            break;
        }
        case OpKind::MaxPool: {
            if (!want(0)) break;
            Tensor& dx = grad_buf(n.parents[0]);
            for (size_t i = 0; i < n.aux_idx.size(); ++i)
                if (n.aux_idx[i] >= 0) dx.at(n.aux_idx[i]) += gy.at(static_cast<std::int64_t>(i));
            break;
        }
        case OpKind::GlobalAvgPool: {
            if (!want(0)) break;
            const Tensor& x = nodes_[static_cast<size_t>(n.parents[0])].value;
            Tensor& dx = grad_buf(n.parents[0]);
            const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const double g = gy.data[static_cast<size_t>(b) * C + c] / (static_cast<double>(H) * W);
                    double* p = &dx.at4(b, c, 0, 0);
                    for (int i = 0; i < H * W; ++i) p[i] += g;
                }
            break;
        }
        case OpKind::Dense: {
            const Tensor& x = nodes_[static_cast<size_t>(n.parents[0])].value;
            const Tensor& w = nodes_[static_cast<size_t>(n.parents[1])].value;
            const int B = x.dim(0), K = x.dim(1), N = w.dim(0);
            CMapRM gym(gy.data.data(), B, N);
            if (want(0)) {
                Tensor& dx = grad_buf(n.parents[0]);
                MapRM dxm(dx.data.data(), B, K);
                CMapRM wm(w.data.data(), N, K);
                dxm.noalias() += gym * wm;
            }
            if (want(1)) {
                Tensor& dw = grad_buf(n.parents[1]);
                MapRM dwm(dw.data.data(), N, K);
                CMapRM xm(x.data.data(), B, K);
                dwm.noalias() += gym.transpose() * xm;
            }
            if (n.parents.size() == 3 && want(2)) {
                Tensor& db = grad_buf(n.parents[2]);
                for (int b = 0; b < B; ++b)
                    for (int j = 0; j < N; ++j) db.at(j) += gy.data[static_cast<size_t>(b) * N + j];
            }
            break;
        }
        case OpKind::Add: {
            for (int slot = 0; slot < 2; ++slot)
                if (want(static_cast<size_t>(slot))) {
                    Tensor& d = grad_buf(n.parents[static_cast<size_t>(slot)]);
                    for (std::int64_t i = 0; i < gy.numel(); ++i) d.at(i) += gy.at(i);
                }
            break;
        }
        case OpKind::ScalarScale: {
            if (!want(0)) break;
            Tensor& dx = grad_buf(n.parents[0]);
            for (std::int64_t i = 0; i < gy.numel(); ++i) dx.at(i) += n.attrs.scale * gy.at(i);
            break;
        }
        case OpKind::Softmax: {
            if (!want(0)) break;
            Tensor& dx = grad_buf(n.parents[0]);
            const int K = n.value.shape.back();
            const std::int64_t rows = n.value.numel() / K;
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* y = n.value.data.data() + r * K;
                const double* g = gy.data.data() + r * K;
                double dot = 0.0;
                for (int k = 0; k < K; ++k) dot += g[k] * y[k];
                double* d = dx.data.data() + r * K;
                for (int k = 0; k < K; ++k) d[k] += y[k] * (g[k] - dot);
            }
            break;
        }
        case OpKind::CrossEntropyWithLogits: {
            if (!want(0)) break;
            Tensor& dx = grad_buf(n.parents[0]);
            const Tensor& probs = n.saved[0];
            const int B = probs.dim(0), K = probs.dim(1);
            const double g = gy.at(0) / B;
            for (int b = 0; b < B; ++b) {
                const double* p = probs.data.data() + static_cast<size_t>(b) * K;
                double* d = dx.data.data() + static_cast<size_t>(b) * K;
                const int lbl = n.attrs.labels[static_cast<size_t>(b)];
                for (int k = 0; k < K; ++k) d[k] += g * (p[k] - (k == lbl ? 1.0 : 0.0));
            }
            break;
        }
        case OpKind::ElementwiseMul: {
            const Tensor& a = nodes_[static_cast<size_t>(n.parents[0])].value;
            const Tensor& b = nodes_[static_cast<size_t>(n.parents[1])].value;
            if (want(0)) {
                Tensor& da = grad_buf(n.parents[0]);
                for (std::int64_t i = 0; i < gy.numel(); ++i) da.at(i) += gy.at(i) * b.at(i);
            }
            if (want(1)) {
                Tensor& db = grad_buf(n.parents[1]);
                for (std::int64_t i = 0; i < gy.numel(); ++i) db.at(i) += gy.at(i) * a.at(i);
            }
            break;
        }
        case OpKind::Zero:
            break;  // no gradient flows to the input
        case OpKind::ReduceSum: {
            if (!want(0)) break;
            Tensor& dx = grad_buf(n.parents[0]);
            const double g = gy.at(0);
            for (auto& v : dx.data) v += g;
            break;
        }
        case OpKind::ConcatChannels: {
            const int B = n.value.dim(0), H = n.value.dim(2), W = n.value.dim(3);
            int coff = 0;
            for (size_t slot = 0; slot < n.parents.size(); ++slot) {
                const Tensor& t = nodes_[static_cast<size_t>(n.parents[slot])].value;
                const int Ci = t.dim(1);
                if (want(slot)) {
                    Tensor& d = grad_buf(n.parents[slot]);
                    for (int b = 0; b < B; ++b) {
                        const double* src = &gy.at4(b, coff, 0, 0);
                        double* dst = &d.at4(b, 0, 0, 0);
                        for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ci) * H * W; ++i) dst[i] += src[i];
                    }
                }
                coff += Ci;
            }
            break;
        }
        case OpKind::IndexScalar: {
            if (!want(0)) break;
            grad_buf(n.parents[0]).at(n.attrs.index) += gy.at(0);
            break;
        }
        case OpKind::MulScalarNode: {
            const Tensor& x = nodes_[static_cast<size_t>(n.parents[0])].value;
            const double c = nodes_[static_cast<size_t>(n.parents[1])].value.at(0);
            if (want(0)) {
                Tensor& dx = grad_buf(n.parents[0]);
                for (std::int64_t i = 0; i < gy.numel(); ++i) dx.at(i) += c * gy.at(i);
            }
            if (want(1)) {
                double s = 0.0;
                for (std::int64_t i = 0; i < gy.numel(); ++i) s += gy.at(i) * x.at(i);
                grad_buf(n.parents[1]).at(0) += s;
            }
            break;
        }
    }
}

std::vector<double> flatten_named(const NamedTensors& tensors, const std::vector<std::string>& names) {
    std::vector<std::string> sorted = names;
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> flat;
    for (const auto& name : sorted) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::invalid_argument("flatten_named: unknown name '" + name + "'");
        flat.insert(flat.end(), it->second.data.begin(), it->second.data.end());
    }
    return flat;
}

void unflatten_named(NamedTensors& tensors, const std::vector<std::string>& names,
                     const std::vector<double>& flat) {
    std::vector<std::string> sorted = names;
    std::sort(sorted.begin(), sorted.end());
    size_t off = 0;
    for (const auto& name : sorted) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::invalid_argument("unflatten_named: unknown name '" + name + "'");
        const size_t n = it->second.data.size();
        if (off + n > flat.size()) throw std::invalid_argument("unflatten_named: flat vector too short");
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), n, it->second.data.begin());
        off += n;
    }
    if (off != flat.size()) throw std::invalid_argument("unflatten_named: flat vector too long");
}

}  // namespace nd
