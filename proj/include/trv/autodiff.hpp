#pragma once

#include "trv/rope.hpp"
#include "trv/tensor.hpp"

#include <functional>
#include <vector>

namespace trv {

// Handle to a node on a Tape.
struct Value {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended in forward order; the reverse pass
// walks them backwards. One tape per training step; not thread-safe.
class Tape {
public:
    Value leaf(const Tensor& t);

    const Tensor& value(Value v) const { return node(v).val; }
    const Tensor& grad(Value v) const { return node(v).grad; }
    long size() const { return static_cast<long>(nodes_.size()); }

    Value add(Value a, Value b);
    Value sub(Value a, Value b);
    Value mul(Value a, Value b);  // elementwise
    Value scale(Value a, double c);
    Value matmul(Value a, Value b);
    Value add_rowvec(Value x, Value b);  // x: [n,d], b: [d] or [1,d]
    Value layer_norm(Value x, Value gamma, Value beta, double eps);
    Value softmax_rows(Value x);
    Value silu(Value x);
    Value gelu(Value x);
    Value sum(Value x);  // -> scalar
    Value transpose(Value x);
    Value reshape(Value x, std::vector<long> shape);
    Value slice_cols(Value x, long c0, long len);
    Value concat_cols(const std::vector<Value>& xs);
    Value select_rows(Value x, std::vector<long> idx);
    // Overwrite the listed rows of x with a shared broadcast row (the mask
    // token); gradient flows to both x (visible rows) and the row (masked).
    Value replace_rows(Value x, Value row, std::vector<long> idx);
    Value rope(Value x, const RopeTable* table, std::vector<GridPos> positions);
    // Sum over rows of -<p,t>/(|p||t| + eps); target is a constant.
    Value neg_cosine_sum(Value pred, Tensor target, double eps = 1e-8);

    // Gradients of a scalar loss w.r.t. the given leaves. Resets all node
    // grads first, so repeated calls replay identically.
    std::vector<Tensor> gradient(Value loss, const std::vector<Value>& params);

private:
    struct Node {
        Tensor val;
        Tensor grad;
        std::function<void(Tape&)> back;
    };

    Node& node(Value v);
    const Node& node(Value v) const;
    Value push(Tensor val, std::function<void(Tape&)> back);

    std::vector<Node> nodes_;
};

// Eager (tape-free) kernels; the tape ops share these forward paths.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor softmax_lastdim(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor gelu(const Tensor& x);

// Central finite differences (f(p+h)-f(p-h))/(2h) per coordinate.
std::vector<Tensor> finite_diff_grad(const std::function<double(const std::vector<Tensor>&)>& f,
                                     const std::vector<Tensor>& params, double h = 1e-5);

// max over coordinates of |a-b| / max(|a|, |b|, floor)
double max_rel_err(const std::vector<Tensor>& a, const std::vector<Tensor>& b,
                   double floor = 1e-8);

}  // namespace trv
