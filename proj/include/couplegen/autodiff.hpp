#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "couplegen/tensor.hpp"

namespace couplegen::ag {

// Reverse-mode autodiff over a per-step tape of dense double tensors.
//
// A Tape is built fresh for every forward pass; ops append nodes whose
// backward closures capture node ids (never references -- the node vector
// reallocates while building). backward() seeds the scalar root with 1 and
// sweeps in reverse creation order. Parameters are registered through
// Tape::param, which flushes the accumulated gradient back into the owning
// Param after the sweep, so optimizers only ever look at Param::grad.
//
// Everything is double precision; analytic gradients for every op are
// checked against central finite differences in the test suite.

struct Param {
    std::string name;
    Tensor value;
    Tensor grad;  // same shape; zeroed by the optimizer between steps

    Param() = default;
    Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad() {
        grad = Tensor::zeros(value.shape);
    }
};

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
  public:
    using BackFn = std::function<void(Tape&)>;

    Var constant(Tensor v);
    Var leaf(Tensor v);       // gradient retained, readable via grad()
    Var param(Param& p);      // gradient flushed into p.grad by backward()

    void backward(Var root);  // root must be scalar (size 1)

    const Tensor& val(Var v) const { return nodes_[v.id].value; }
    const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
    std::size_t node_count() const { return nodes_.size(); }

    // --- op construction internals (used by the free-function ops) ---
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        BackFn back;       // empty for leaves/constants
        Param* flush_to = nullptr;
    };
    int push(Tensor value, bool requires_grad, BackFn back);
    Node& node(int id) { return nodes_[id]; }
    Tensor& grad_buf(int id);  // lazily allocates the gradient buffer

  private:
    std::vector<Node> nodes_;
};

// Elementwise / arithmetic.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double alpha);
Var add_scalar(Var a, double c);
Var mul_const(Var a, const Tensor& c);        // same-shape constant
Var mul_rowvec_const(Var a, const Tensor& r); // broadcast a [m x n] by r [n]
Var tanh_(Var a);
Var gelu(Var a);
Var exp_(Var a);
Var log_(Var a);

// Linear algebra / shape.
Var matmul(Var a, Var b);     // [m x k] * [k x n]
Var matmul_nt(Var a, Var b);  // [m x k] * [n x k]^T
Var add_rowvec(Var a, Var bias);
Var reshape(Var a, std::vector<std::size_t> shape);
Var reverse_cols(Var a);
// out.data[i] = in.data[perm[i]]; perm must be a bijection on the element
// count. Covers layout changes (NCHW -> rows, grid block rearrangement).
Var permute_elements(Var a, const std::vector<std::size_t>& perm, std::vector<std::size_t> out_shape);
Var slice_cols(Var a, std::size_t c0, std::size_t c1);
Var concat_cols(const std::vector<Var>& parts);

// Reductions / rows.
Var sum_all(Var a);
Var mean_all(Var a);
Var row_softmax(Var a);
Var row_log_softmax(Var a);

// Σ_i w_i * (-log softmax(logits_i)[targets_i]); weights may be empty (=1).
Var nll(Var logits, const std::vector<int>& targets, const std::vector<double>& weights = {});

Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

// rows of `table` selected by `tokens`; backward scatter-adds.
Var embedding(Var table, const std::vector<int>& tokens);

// NCHW batched convolutions. x {B,Cin,H,W}; conv weight {Cout,Cin,kh,kw};
// transpose-conv weight {Cin,Cout,kh,kw}.
Var conv2d(Var x, Var w, Var bias, std::size_t stride, std::size_t pad);
Var conv_transpose2d(Var x, Var w, Var bias, std::size_t stride, std::size_t pad);

// Straight-through one-hot: forward rows are exact argmax one-hots of
// (logits + noise)/tau; backward flows through the tempered softmax at the
// same perturbed logits.
Var st_gumbel_onehot(Var logits, const Tensor& noise, double tau);

}  // namespace couplegen::ag
