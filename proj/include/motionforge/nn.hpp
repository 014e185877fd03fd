#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

// Minimal reverse-mode autodiff over dense NCHW double tensors. Enough to train the toy
// denoiser on a CPU; not a general framework.
namespace motionforge::nn {

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> shape_, double fill = 0.0);
    Tensor(std::vector<int> shape_, std::vector<double> data_);

    std::size_t size() const noexcept { return data.size(); }
    int dim(std::size_t i) const { return shape.at(i); }
};

std::size_t element_count(const std::vector<int>& shape);

using Var = std::size_t;

class Tape {
public:
    /// With `record` false no backward closures are kept (inference mode).
    explicit Tape(bool record = true) : record_(record) {}

    Var constant(Tensor value);
    Var parameter(Tensor value);

    const Tensor& value(Var v) const { return nodes_[v].value; }
    /// Gradient buffer of `v`; empty until backward() reaches it.
    const std::vector<double>& grad(Var v) const { return nodes_[v].grad; }

    bool needs_grad(Var v) const { return nodes_[v].needs_grad; }
    bool recording() const noexcept { return record_; }

    /// Seeds d(root)/d(root) = 1 for a single-element root and propagates.
    void backward(Var root);

    // Used by op implementations.
    Var push(Tensor value, std::initializer_list<Var> inputs, std::function<void(Tape&, Var)> back);
    std::vector<double>& grad_buffer(Var v);

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        bool needs_grad = false;
        std::function<void(Tape&, Var)> back;
    };

    bool record_;
    std::vector<Node> nodes_;
};

/// Direct convolution. x [N,C,H,W], w [O,C,k,k], b [O]; zero padding.
Var conv2d(Tape& t, Var x, Var w, Var b, int stride, int pad);
Var add(Tape& t, Var a, Var b);
Var silu(Tape& t, Var x);
/// x [N,C,H,W] + bias [N,C] broadcast over the spatial grid.
Var add_channel_bias(Tape& t, Var x, Var bias);
/// x [B,D] * w[O,D]^T + b[O].
Var linear(Tape& t, Var x, Var w, Var b);
/// [B,D] -> [B*r,D], each row repeated r times consecutively.
Var repeat_rows(Tape& t, Var x, int r);
Var upsample2(Tape& t, Var x);
Var concat_channels(Tape& t, Var a, Var b);
/// Mean over each run of `group` consecutive images, broadcast back to every member.
Var group_mean(Tape& t, Var x, int group);

/// Cross-attention with queries and keys from `z` and values from `zm`:
/// softmax(Q K^T / sqrt(d)) V over all tokens of each group of `group` images
/// (group * h * w tokens). z [N,C,h,w], zm [N,Cm,h,w], wq/wk [d,C], wv [dv,Cm].
Var motion_attention(Tape& t, Var z, Var zm, Var wq, Var wk, Var wv, int group);

/// out_n = a_n * z_n - b_n * x_n per image n (z is a constant tensor shaped like x).
Var affine_combine(Tape& t, Var x, const Tensor& z, std::span<const double> a, std::span<const double> b);
/// sum((pred - target)^2) / divisor, as a one-element tensor.
Var squared_error(Tape& t, Var pred, const Tensor& target, double divisor);

// Dense single-group attention kernel shared by the tape op and diffcore's public entry point.
// Row-major matrices: z [n,c], zm [n,cm], wq/wk [d,c], wv [dv,cm]. Writes out [n,dv] and
// attn [n,n] (softmax rows).
void attention_forward(std::span<const double> z, std::span<const double> zm, int n, int c, int cm,
                       std::span<const double> wq, std::span<const double> wk, std::span<const double> wv, int d,
                       int dv, std::span<double> out, std::span<double> attn);

}  // namespace motionforge::nn
