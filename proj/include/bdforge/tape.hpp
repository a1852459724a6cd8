#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bdforge/kernels.hpp"
#include "bdforge/tensor.hpp"

namespace bdforge {

class Tape;

/// Handle to a tensor recorded on a tape.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Tensor& val() const;
};

/// Gradients keyed by leaf node id. Leaves never touched by the loss map
/// to zero tensors of the leaf's shape.
using GradMap = std::map<int, Tensor>;

/// Reverse-mode tape. Nodes are appended in execution order, so parents
/// always precede children and one reverse sweep visits each node once.
/// A tape is rebuilt per forward pass and is single-threaded; distinct
/// tapes may live on distinct threads.
class Tape {
public:
    using AccumFn = std::function<void(int parent_slot, Tensor grad)>;
    using BackwardFn = std::function<void(const Tensor& dy, const AccumFn& accumulate)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Differentiable input.
    Var leaf(Tensor value);
    /// Recorded value that never receives a gradient.
    Var constant(Tensor value);

    const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    const Tensor& value(Var v) const { return value(v.id); }
    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
    std::size_t node_count() const { return nodes_.size(); }
    const std::vector<int>& leaf_ids() const { return leaves_; }

    /// Reverse sweep from a scalar loss. Returns a gradient per leaf.
    GradMap backward(Var loss) const;

    /// Used by the ops layer.
    Var record(Tensor value, std::vector<int> parents, BackwardFn fn);

private:
    struct Node {
        Tensor value;
        std::vector<int> parents;
        BackwardFn backward;
        bool needs_grad = false;
        bool is_leaf = false;
    };

    std::vector<Node> nodes_;
    std::vector<int> leaves_;
};

namespace ops {

Var add(Var a, Var b);      // same shape, or b a rank-1 bias over the last dim
Var mul(Var a, Var b);      // elementwise, same shape
Var scale(Var a, double c);
Var matmul(Var a, Var b);
Var conv2d(Var x, Var k);   // x[B,H,W,Ci] * k[KH,KW,Ci,Co], valid padding, stride 1
Var conv1d(Var x, Var k);   // x[B,T,Ci] * k[K,Ci,Co]
Var pad2d(Var x, int top, int bottom, int left, int right);  // zero pad H,W
Var maxpool2(Var x);        // 2x2, stride 2, floor
Var relu(Var a);            // subgradient at 0 is 0
Var sigmoid(Var a);
Var reshape(Var a, std::vector<int> shape);
/// Rows of `table` gathered per token id; positions beyond a sequence's
/// length are zero and receive no gradient. Output [B, Tmax, D].
Var embedding(Var table, const std::vector<std::vector<int>>& ids);
/// Mean over the token axis using true lengths: out[b,:] = mean over t < len_b.
Var mean_tokens(Var emb, const std::vector<int>& lengths);
Var mean_axis(Var a, int axis);
Var mean_all(Var a);
Var sum_all(Var a);
/// Per-sample cross-entropy losses from logits [B,K] and integer labels.
Var softmax_xent(Var logits, const std::vector<int>& labels);
/// (1-m)*x + m*p with mask m[H,W] broadcast over batch and channels.
Var mask_blend(Var x, Var m, Var p);

/// Softmax over the last axis of a rank-2 tensor (no tape involvement).
Tensor softmax_rows(const Tensor& logits);

/// Name-based dispatch for attribute-free primitives; throws an
/// unknown-primitive error for anything else.
Tensor forward_primitive(const std::string& name, const std::vector<Tensor>& inputs);

}  // namespace ops

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar-valued builder evaluated at `point`. epsilon in (0, 1e-2].
double finite_diff_check(const std::function<Var(Tape&, Var)>& build, const Tensor& point,
                         double epsilon);

}  // namespace bdforge
