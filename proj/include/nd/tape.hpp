#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nd/tensor.hpp"

namespace nd {

using NodeId = int;
inline constexpr NodeId kNoNode = -1;

enum class OpKind {
    Leaf,
    Conv2d,
    Relu,
    BatchAffineNorm,
    AvgPool,
    MaxPool,
    GlobalAvgPool,
    Dense,
    Add,
    ScalarScale,
    Softmax,
    CrossEntropyWithLogits,
    ElementwiseMul,
    Zero,
    ReduceSum,
    ConcatChannels,
    IndexScalar,
    MulScalarNode,
};

const char* op_name(OpKind kind);

// Per-channel running statistics owned by the model; batch_affine_norm reads
// them in eval mode and updates them when update_running is set.
struct RunningStat {
    Tensor mean;
    Tensor var;
};

struct Conv2dAttrs {
    int stride = 1;
    int padding = 0;
    int dilation = 1;
    int groups = 1;
};

struct PoolAttrs {
    int kernel = 3;
    int stride = 1;
    int padding = 1;
    bool count_include_pad = false;
};

struct NormAttrs {
    RunningStat* running = nullptr;
    bool use_batch_stats = true;
    bool update_running = false;
    double eps = 1e-5;
    double momentum = 0.1;
};

struct OpAttrs {
    Conv2dAttrs conv;
    PoolAttrs pool;
    NormAttrs norm;
    double scale = 1.0;          // ScalarScale
    int index = 0;               // IndexScalar
    int stride = 1;              // Zero
    std::vector<int> labels;     // CrossEntropyWithLogits
};

struct TapeNode {
    OpKind kind = OpKind::Leaf;
    std::vector<NodeId> parents;  // reference strictly earlier nodes
    OpAttrs attrs;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::string name;            // leaves only
    std::vector<int> aux_idx;    // max-pool argmax positions
    std::vector<Tensor> saved;   // activations needed by the backward rule
};

// Single-pass reverse-mode tape. Nodes are appended by forward calls and
// consumed by one backward() sweep. A tape is confined to one logical thread
// while a pass is active.
class Tape {
public:
    NodeId leaf(Tensor value, std::string name = {}, bool requires_grad = false);

    NodeId conv2d(NodeId x, NodeId w, NodeId bias, const Conv2dAttrs& attrs);
    NodeId relu(NodeId x);
    NodeId batch_affine_norm(NodeId x, NodeId gamma, NodeId beta, const NormAttrs& attrs);
    NodeId avg_pool(NodeId x, const PoolAttrs& attrs);
    NodeId max_pool(NodeId x, const PoolAttrs& attrs);
    NodeId global_avg_pool(NodeId x);
    NodeId dense(NodeId x, NodeId w, NodeId bias);
    NodeId add(NodeId a, NodeId b);
    NodeId scalar_scale(NodeId x, double c);
    NodeId softmax(NodeId x);
    NodeId cross_entropy_with_logits(NodeId logits, std::vector<int> labels);
    NodeId elementwise_mul(NodeId a, NodeId b);
    NodeId zero_like(NodeId x, int stride = 1);
    NodeId reduce_sum(NodeId x);
    NodeId concat_channels(const std::vector<NodeId>& xs);
    NodeId index_scalar(NodeId v, int index);
    NodeId mul_scalar_node(NodeId x, NodeId s);

    // Generic dispatch over the same op set; inputs are existing node ids.
    NodeId forward_op(OpKind kind, const std::vector<NodeId>& inputs, const OpAttrs& attrs);

    // Reverse sweep from a scalar loss. Grad buffers of interior nodes are
    // released as soon as their consumers are processed unless
    // keep_all_grads(true) was requested. Throws if called twice or if the
    // loss is not scalar.
    void backward(NodeId loss);

    // Flat gradient of `loss` w.r.t. the named leaves, lexicographic by name
    // then row-major within each leaf. Runs backward() if not yet consumed.
    std::vector<double> grad_wrt(NodeId loss, const std::vector<std::string>& names);

    const Tensor& value(NodeId id) const;
    const Tensor& grad(NodeId id) const;
    bool has_grad(NodeId id) const;
    NodeId find_leaf(const std::string& name) const;  // kNoNode if absent

    void keep_all_grads(bool keep) { keep_all_grads_ = keep; }
    bool consumed() const { return consumed_; }
    size_t size() const { return nodes_.size(); }
    const TapeNode& node(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }

private:
    NodeId push(TapeNode n);
    Tensor& grad_buf(NodeId id);
    void backward_node(NodeId id);
    void check_id(NodeId id, const char* who) const;

    std::vector<TapeNode> nodes_;
    std::map<std::string, NodeId> leaves_;
    bool consumed_ = false;
    bool keep_all_grads_ = false;
};

// Flatten/unflatten named tensors in lexicographic name order.
std::vector<double> flatten_named(const NamedTensors& tensors, const std::vector<std::string>& names);
void unflatten_named(NamedTensors& tensors, const std::vector<std::string>& names,
                     const std::vector<double>& flat);

}  // namespace nd
