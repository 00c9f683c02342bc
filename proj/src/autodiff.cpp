#include "couplegen/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <stdexcept>

#include "couplegen/kernels.hpp"

namespace couplegen::ag {

namespace kn = couplegen::kernels;

int Tape::push(Tensor value, bool requires_grad, BackFn back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
}

Var Tape::constant(Tensor v) { return {this, push(std::move(v), false, {})}; }
Var Tape::leaf(Tensor v) { return {this, push(std::move(v), true, {})}; }

Var Tape::param(Param& p) {
    const int id = push(p.value, true, {});
    nodes_[id].flush_to = &p;
    return {this, id};
}

Tensor& Tape::grad_buf(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
}

void Tape::backward(Var root) {
    if (root.tape != this) throw std::invalid_argument("backward: var from another tape");
    if (nodes_[root.id].value.size() != 1) throw std::invalid_argument("backward: root must be scalar");
    grad_buf(root.id).data[0] = 1.0;
    for (int id = root.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (!n.requires_grad || n.grad.size() == 0) continue;
        if (n.back) n.back(*this);
        if (n.flush_to) {
            if (n.flush_to->grad.size() == 0) n.flush_to->grad = Tensor::zeros(n.value.shape);
            kn::axpy(1.0, n.grad.data.data(), n.flush_to->grad.data.data(), n.grad.size());
        }
    }
}

namespace {

Tape& same_tape(Var a, Var b) {
    if (a.tape != b.tape) throw std::invalid_argument("op: vars from different tapes");
    return *a.tape;
}

bool rg(Tape& t, Var v) { return t.node(v.id).requires_grad; }

// Accumulate g into node ia's gradient buffer (no-op for constants).
void accum(Tape& t, int ia, const Tensor& g) {
    if (!t.node(ia).requires_grad) return;
    kn::axpy(1.0, g.data.data(), t.grad_buf(ia).data.data(), g.size());
}

Tensor colsum(const Tensor& g) {
    const std::size_t m = g.rows(), n = g.cols();
    Tensor out({n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data[j] += g.data[i * n + j];
    return out;
}

}  // namespace

Var add(Var a, Var b) {
    Tape& t = same_tape(a, b);
    require_same_shape(t.val(a), t.val(b), "add");
    Tensor out(t.val(a).shape);
    kn::ewise_add(t.val(a).data.data(), t.val(b).data.data(), out.data.data(), out.size());
    const int id = t.push(std::move(out), rg(t, a) || rg(t, b), {});
    const int ia = a.id, ib = b.id;
    t.node(id).back = [id, ia, ib](Tape& tp) {
        const Tensor& g = tp.node(id).grad;
        accum(tp, ia, g);
        accum(tp, ib, g);
    };
    return {&t, id};
}

Var sub(Var a, Var b) {
    Tape& t = same_tape(a, b);
    require_same_shape(t.val(a), t.val(b), "sub");
    Tensor out(t.val(a).shape);
    kn::ewise_sub(t.val(a).data.data(), t.val(b).data.data(), out.data.data(), out.size());
    const int id = t.push(std::move(out), rg(t, a) || rg(t, b), {});
    const int ia = a.id, ib = b.id;
    t.node(id).back = [id, ia, ib](Tape& tp) {
        const Tensor& g = tp.node(id).grad;
        accum(tp, ia, g);
        if (tp.node(ib).requires_grad)
            kn::axpy(-1.0, g.data.data(), tp.grad_buf(ib).data.data(), g.size());
    };
    return {&t, id};
}

Var mul(Var a, Var b) {
    Tape& t = same_tape(a, b);
    require_same_shape(t.val(a), t.val(b), "mul");
    Tensor out(t.val(a).shape);
    kn::ewise_mul(t.val(a).data.data(), t.val(b).data.data(), out.data.data(), out.size());
    const int id = t.push(std::move(out), rg(t, a) || rg(t, b), {});
    const int ia = a.id, ib = b.id;
    t.node(id).back = [id, ia, ib](Tape& tp) {
        const Tensor& g = tp.node(id).grad;
        if (tp.node(ia).requires_grad) {
            Tensor tmp(g.shape);
            kn::ewise_mul(g.data.data(), tp.node(ib).value.data.data(), tmp.data.data(), g.size());
            accum(tp, ia, tmp);
        }
        if (tp.node(ib).requires_grad) {
            Tensor tmp(g.shape);
            kn::ewise_mul(g.data.data(), tp.node(ia).value.data.data(), tmp.data.data(), g.size());
            accum(tp, ib, tmp);
        }
    };
    return {&t, id};
}

Var scale(Var a, double alpha) {
    Tape& t = *a.tape;
    Tensor out = t.val(a);
    kn::scale(alpha, out.data.data(), out.size());
    const int id = t.push(std::move(out), rg(t, a), {});
    const int ia = a.id;
    t.node(id).back = [id, ia, alpha](Tape& tp) {
        const Tensor& g = tp.node(id).grad;
        if (tp.node(ia).requires_grad)
            kn::axpy(alpha, g.data.data(), tp.grad_buf(ia).data.data(), g.size());
    };
    return {&t, id};
}

Var add_scalar(Var a, double c) {
    Tape& t = *a.tape;
    Tensor out = t.val(a);
    for (double& v : out.data) v += c;
    const int id = t.push(std::move(out), rg(t, a), {});
    const int ia = a.id;
    t.node(id).back = [id, ia](Tape& tp) { accum(tp, ia, tp.node(id).grad); };
    return {&t, id};
}

Var mul_const(Var a, const Tensor& c) {
    Tape& t = *a.tape;
    require_same_shape(t.val(a), c, "mul_const");
    Tensor out(c.shape);
    kn::ewise_mul(t.val(a).data.data(), c.data.data(), out.data.data(), out.size());
    const int id = t.push(std::move(out), rg(t, a), {});
    const int ia = a.id;
    Tensor cc = c;
    t.node(id).back = [id, ia, cc](Tape& tp) {
        if (!tp.node(ia).requires_grad) return;
        const Tensor& g = tp.node(id).grad;
        Tensor tmp(g.shape);
        kn::ewise_mul(g.data.data(), cc.data.data(), tmp.data.data(), g.size());
        accum(tp, ia, tmp);
    };
    return {&t, id};
}

Var mul_rowvec_const(Var a, const Tensor& r) {
    Tape& t = *a.tape;
    const std::size_t m = t.val(a).rows(), n = t.val(a).cols();
    if (r.size() != n) throw std::invalid_argument("mul_rowvec_const: width mismatch");
    Tensor out(t.val(a).shape);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] = t.val(a).data[i * n + j] * r.data[j];
    const int id = t.push(std::move(out), rg(t, a), {});
    const int ia = a.id;
    Tensor rr = r;
    t.node(id).back = [id, ia, rr, m, n](Tape& tp) {
        if (!tp.node(ia).requires_grad) return;
        const Tensor& g = tp.node(id).grad;
        Tensor& da = tp.grad_buf(ia);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) da.data[i * n + j] += g.data[i * n + j] * rr.data[j];
    };
    return {&t, id};
}

Var tanh_(Var a) {
    Tape& t = *a.tape;
    Tensor out(t.val(a).shape);
    kn::map_tanh(t.val(a).data.data(), out.data.data(), out.size());
    const int id = t.push(std::move(out), rg(t, a), {});
    const int ia = a.id;
    t.node(id).back = [id, ia](Tape& tp) {
        if (!tp.node(ia).requires_grad) return;
        const Tensor& g = tp.node(id).grad;
        const Tensor& y = tp.node(id).value;
        Tensor& da = tp.grad_buf(ia);
        for (std::size_t i = 0; i < g.size(); ++i) da.data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
    };
    return {&t, id};
}

Var gelu(Var a) {
    // tanh approximation; the backward differentiates the same approximation.
    constexpr double kA = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kB = 0.044715;
    Tape& t = *a.tape;
    const Tensor& x = t.val(a);
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = x.data[i];
        out.data[i] = 0.5 * xi * (1.0 + std::tanh(kA * (xi + kB * xi * xi * xi)));
    }
    const int id = t.push(std::move(out), rg(t, a), {});
    const int ia = a.id;
    t.node(id).back = [id, ia](Tape& tp) {
        if (!tp.node(ia).requires_grad) return;
        const Tensor& g = tp.node(id).grad;
        const Tensor& x = tp.node(ia).value;
        Tensor& da = tp.grad_buf(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double xi = x.data[i];
            const double u = kA * (xi + kB * xi * xi * xi);
            const double th = std::tanh(u);
            const double du = kA * (1.0 + 3.0 * kB * xi * xi);
            da.data[i] += g.data[i] * (0.5 * (1.0 + th) + 0.5 * xi * (1.0 - th * th) * du);
        }
    };
    return {&t, id};
}

Var exp_(Var a) {
    Tape& t = *a.tape;
    Tensor out(t.val(a).shape);
    kn::map_exp(t.val(a).data.data(), out.data.data(), out.size());
    const int id = t.push(std::move(out), rg(t, a), {});
    const int ia = a.id;
    t.node(id).back = [id, ia](Tape& tp) {
        if (!tp.node(ia).requires_grad) return;
        const Tensor& g = tp.node(id).grad;
        const Tensor& y = tp.node(id).value;
        Tensor& da = tp.grad_buf(ia);
        for (std::size_t i = 0; i < g.size(); ++i) da.data[i] += g.data[i] * y.data[i];
    };
    return {&t, id};
}

Var log_(Var a) {
    Tape& t = *a.tape;
    const Tensor& x = t.val(a);
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = std::log(x.data[i]);
    const int id = t.push(std::move(out), rg(t, a), {});
    const int ia = a.id;
    t.node(id).back = [id, ia](Tape& tp) {
        if (!tp.node(ia).requires_grad) return;
        const Tensor& g = tp.node(id).grad;
        const Tensor& x = tp.node(ia).value;
        Tensor& da = tp.grad_buf(ia);
        for (std::size_t i = 0; i < g.size(); ++i) da.data[i] += g.data[i] / x.data[i];
    };
    return {&t, id};
}

Var matmul(Var a, Var b) {
    Tape& t = same_tape(a, b);
    const std::size_t m = t.val(a).rows(), k = t.val(a).cols(), n = t.val(b).cols();
    if (t.val(b).rows() != k) throw std::invalid_argument("matmul: inner dim mismatch");
    Tensor out({m, n});
    kn::matmul_nn(t.val(a).data.data(), t.val(b).data.data(), out.data.data(), m, k, n);
    const int id = t.push(std::move(out), rg(t, a) || rg(t, b), {});
    const int ia = a.id, ib = b.id;
    t.node(id).back = [id, ia, ib, m, k, n](Tape& tp) {
        const Tensor& g = tp.node(id).grad;
        if (tp.node(ia).requires_grad) {
            Tensor da({m, k});
            kn::matmul_nt(g.data.data(), tp.node(ib).value.data.data(), da.data.data(), m, n, k);
            accum(tp, ia, da);
        }
        if (tp.node(ib).requires_grad) {
            Tensor db({k, n});
            kn::matmul_tn(tp.node(ia).value.data.data(), g.data.data(), db.data.data(), k, m, n);
            accum(tp, ib, db);
        }
    };
    return {&t, id};
}

Var matmul_nt(Var a, Var b) {
    Tape& t = same_tape(a, b);
    const std::size_t m = t.val(a).rows(), k = t.val(a).cols(), n = t.val(b).rows();
    if (t.val(b).cols() != k) throw std::invalid_argument("matmul_nt: inner dim mismatch");
    Tensor out({m, n});
    kn::matmul_nt(t.val(a).data.data(), t.val(b).data.data(), out.data.data(), m, k, n);
    const int id = t.push(std::move(out), rg(t, a) || rg(t, b), {});
    const int ia = a.id, ib = b.id;
    t.node(id).back = [id, ia, ib, m, k, n](Tape& tp) {
        const Tensor& g = tp.node(id).grad;
        if (tp.node(ia).requires_grad) {
            Tensor da({m, k});
            kn::matmul_nn(g.data.data(), tp.node(ib).value.data.data(), da.data.data(), m, n, k);
            accum(tp, ia, da);
        }
        if (tp.node(ib).requires_grad) {
            Tensor db({n, k});
            kn::matmul_tn(g.data.data(), tp.node(ia).value.data.data(), db.data.data(), n, m, k);
            accum(tp, ib, db);
        }
    };
    return {&t, id};
}

Var add_rowvec(Var a, Var bias) {
    Tape& t = same_tape(a, bias);
    const std::size_t m = t.val(a).rows(), n = t.val(a).cols();
    if (t.val(bias).size() != n) throw std::invalid_argument("add_rowvec: width mismatch");
    Tensor out(t.val(a).shape);
    kn::add_row_bias(t.val(a).data.data(), t.val(bias).data.data(), out.data.data(), m, n);
    const int id = t.push(std::move(out), rg(t, a) || rg(t, bias), {});
    const int ia = a.id, ib = bias.id;
    t.node(id).back = [id, ia, ib](Tape& tp) {
        const Tensor& g = tp.node(id).grad;
        accum(tp, ia, g);
        if (tp.node(ib).requires_grad) {
            Tensor db = colsum(g);
            accum(tp, ib, db);
        }
    };
    return {&t, id};
}

Var reshape(Var a, std::vector<std::size_t> shape) {
    Tape& t = *a.tape;
    if (Tensor::count(shape) != t.val(a).size()) throw std::invalid_argument("reshape: size mismatch");
    Tensor out(std::move(shape), t.val(a).data);
    const int id = t.push(std::move(out), rg(t, a), {});
    const int ia = a.id;
    t.node(id).back = [id, ia](Tape& tp) {
        if (!tp.node(ia).requires_grad) return;
        const Tensor& g = tp.node(id).grad;
        kn::axpy(1.0, g.data.data(), tp.grad_buf(ia).data.data(), g.size());
    };
    return {&t, id};
}

Var reverse_cols(Var a) {
    Tape& t = *a.tape;
    const std::size_t m = t.val(a).rows(), n = t.val(a).cols();
    Tensor out(t.val(a).shape);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] = t.val(a).data[i * n + (n - 1 - j)];
    const int id = t.push(std::move(out), rg(t, a), {});
    const int ia = a.id;
    t.node(id).back = [id, ia, m, n](Tape& tp) {
        if (!tp.node(ia).requires_grad) return;
        const Tensor& g = tp.node(id).grad;
        Tensor& da = tp.grad_buf(ia);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) da.data[i * n + (n - 1 - j)] += g.data[i * n + j];
    };
    return {&t, id};
}

Var permute_elements(Var a, const std::vector<std::size_t>& perm, std::vector<std::size_t> out_shape) {
    Tape& t = *a.tape;
    const Tensor& x = t.val(a);
    if (perm.size() != x.size() || Tensor::count(out_shape) != x.size())
        throw std::invalid_argument("permute_elements: size mismatch");
    Tensor out(std::move(out_shape));
    for (std::size_t i = 0; i < perm.size(); ++i) out.data[i] = x.data[perm[i]];
    const int id = t.push(std::move(out), rg(t, a), {});
    const int ia = a.id;
    std::vector<std::size_t> pm = perm;
    t.node(id).back = [id, ia, pm](Tape& tp) {
        if (!tp.node(ia).requires_grad) return;
        const Tensor& g = tp.node(id).grad;
        Tensor& da = tp.grad_buf(ia);
        for (std::size_t i = 0; i < pm.size(); ++i) da.data[pm[i]] += g.data[i];
    };
    return {&t, id};
}

Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
    Tape& t = *a.tape;
    const std::size_t m = t.val(a).rows(), n = t.val(a).cols();
    if (c0 >= c1 || c1 > n) throw std::invalid_argument("slice_cols: bad range");
    const std::size_t w = c1 - c0;
    Tensor out({m, w});
    for (std::size_t i = 0; i < m; ++i)
        std::memcpy(out.data.data() + i * w, t.val(a).data.data() + i * n + c0, w * sizeof(double));
    const int id = t.push(std::move(out), rg(t, a), {});
    const int ia = a.id;
    t.node(id).back = [id, ia, m, n, c0, w](Tape& tp) {
        if (!tp.node(ia).requires_grad) return;
        const Tensor& g = tp.node(id).grad;
        Tensor& da = tp.grad_buf(ia);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) da.data[i * n + c0 + j] += g.data[i * w + j];
    };
    return {&t, id};
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    Tape& t = *parts[0].tape;
    const std::size_t m = t.val(parts[0]).rows();
    std::size_t n = 0;
    bool needs = false;
    for (Var p : parts) {
        if (t.val(p).rows() != m) throw std::invalid_argument("concat_cols: row mismatch");
        n += t.val(p).cols();
        needs = needs || rg(t, p);
    }
    Tensor out({m, n});
    std::size_t off = 0;
    std::vector<int> ids;
    std::vector<std::size_t> widths;
    for (Var p : parts) {
        const std::size_t w = t.val(p).cols();
        for (std::size_t i = 0; i < m; ++i)
            std::memcpy(out.data.data() + i * n + off, t.val(p).data.data() + i * w, w * sizeof(double));
        ids.push_back(p.id);
        widths.push_back(w);
        off += w;
    }
    const int id = t.push(std::move(out), needs, {});
    t.node(id).back = [id, ids, widths, m, n](Tape& tp) {
        const Tensor& g = tp.node(id).grad;
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const std::size_t w = widths[k];
            if (tp.node(ids[k]).requires_grad) {
                Tensor& da = tp.grad_buf(ids[k]);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j) da.data[i * w + j] += g.data[i * n + off + j];
            }
            off += w;
        }
    };
    return {&t, id};
}

Var sum_all(Var a) {
    Tape& t = *a.tape;
    Tensor out({1}, {kn::sum(t.val(a).data.data(), t.val(a).size())});
    const int id = t.push(std::move(out), rg(t, a), {});
    const int ia = a.id;
    t.node(id).back = [id, ia](Tape& tp) {
        if (!tp.node(ia).requires_grad) return;
        const double g0 = tp.node(id).grad.data[0];
        Tensor& da = tp.grad_buf(ia);
        for (double& v : da.data) v += g0;
    };
    return {&t, id};
}

Var mean_all(Var a) {
    Tape& t = *a.tape;
    const double inv = 1.0 / double(t.val(a).size());
    return scale(sum_all(a), inv);
}

Var row_softmax(Var a) {
    Tape& t = *a.tape;
    const std::size_t m = t.val(a).rows(), n = t.val(a).cols();
    Tensor out(t.val(a).shape);
    kn::row_softmax(t.val(a).data.data(), out.data.data(), m, n);
    const int id = t.push(std::move(out), rg(t, a), {});
    const int ia = a.id;
    t.node(id).back = [id, ia, m, n](Tape& tp) {
        if (!tp.node(ia).requires_grad) return;
        const Tensor& g = tp.node(id).grad;
        const Tensor& y = tp.node(id).value;
        Tensor& da = tp.grad_buf(ia);
        for (std::size_t i = 0; i < m; ++i) {
            const double* gi = g.data.data() + i * n;
            const double* yi = y.data.data() + i * n;
            double dotgy = 0.0;
            for (std::size_t j = 0; j < n; ++j) dotgy += gi[j] * yi[j];
            for (std::size_t j = 0; j < n; ++j) da.data[i * n + j] += yi[j] * (gi[j] - dotgy);
        }
    };
    return {&t, id};
}

Var row_log_softmax(Var a) {
    Tape& t = *a.tape;
    const std::size_t m = t.val(a).rows(), n = t.val(a).cols();
    Tensor lse({m});
    kn::row_logsumexp(t.val(a).data.data(), lse.data.data(), m, n);
    Tensor out(t.val(a).shape);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] = t.val(a).data[i * n + j] - lse.data[i];
    const int id = t.push(std::move(out), rg(t, a), {});
    const int ia = a.id;
    t.node(id).back = [id, ia, m, n](Tape& tp) {
        if (!tp.node(ia).requires_grad) return;
        const Tensor& g = tp.node(id).grad;
        const Tensor& y = tp.node(id).value;  // log-probs; softmax = exp(y)
        Tensor& da = tp.grad_buf(ia);
        for (std::size_t i = 0; i < m; ++i) {
            double gsum = 0.0;
            for (std::size_t j = 0; j < n; ++j) gsum += g.data[i * n + j];
            for (std::size_t j = 0; j < n; ++j)
                da.data[i * n + j] += g.data[i * n + j] - std::exp(y.data[i * n + j]) * gsum;
        }
    };
    return {&t, id};
}

Var nll(Var logits, const std::vector<int>& targets, const std::vector<double>& weights) {
    Tape& t = *logits.tape;
    const std::size_t m = t.val(logits).rows(), n = t.val(logits).cols();
    if (targets.size() != m) throw std::invalid_argument("nll: targets/rows mismatch");
    if (!weights.empty() && weights.size() != m) throw std::invalid_argument("nll: weights/rows mismatch");
    Tensor lse({m});
    kn::row_logsumexp(t.val(logits).data.data(), lse.data.data(), m, n);
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const int tgt = targets[i];
        if (tgt < 0 || std::size_t(tgt) >= n) throw std::invalid_argument("nll: target out of range");
        const double w = weights.empty() ? 1.0 : weights[i];
        total += w * (lse.data[i] - t.val(logits).data[i * n + std::size_t(tgt)]);
    }
    const int id = t.push(Tensor({1}, {total}), rg(t, logits), {});
    const int ia = logits.id;
    std::vector<int> tg = targets;
    std::vector<double> wv = weights;
    t.node(id).back = [id, ia, tg, wv, m, n](Tape& tp) {
        if (!tp.node(ia).requires_grad) return;
        const double g0 = tp.node(id).grad.data[0];
        const Tensor& x = tp.node(ia).value;
        Tensor sm(x.shape);
        kn::row_softmax(x.data.data(), sm.data.data(), m, n);
        Tensor& da = tp.grad_buf(ia);
        for (std::size_t i = 0; i < m; ++i) {
            const double w = wv.empty() ? 1.0 : wv[i];
            for (std::size_t j = 0; j < n; ++j) da.data[i * n + j] += g0 * w * sm.data[i * n + j];
            da.data[i * n + std::size_t(tg[i])] -= g0 * w;
        }
    };
    return {&t, id};
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    Tape& t = *x.tape;
    const std::size_t m = t.val(x).rows(), n = t.val(x).cols();
    if (t.val(gamma).size() != n || t.val(beta).size() != n)
        throw std::invalid_argument("layer_norm: affine width mismatch");
    Tensor out(t.val(x).shape);
    Tensor xhat(t.val(x).shape);
    Tensor inv_std({m});
    for (std::size_t i = 0; i < m; ++i) {
        const double* xi = t.val(x).data.data() + i * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += xi[j];
        mu /= double(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= double(n);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std.data[i] = is;
        for (std::size_t j = 0; j < n; ++j) {
            xhat.data[i * n + j] = (xi[j] - mu) * is;
            out.data[i * n + j] = t.val(gamma).data[j] * xhat.data[i * n + j] + t.val(beta).data[j];
        }
    }
    const int id = t.push(std::move(out), rg(t, x) || rg(t, gamma) || rg(t, beta), {});
    const int ix = x.id, ig = gamma.id, ib = beta.id;
    t.node(id).back = [id, ix, ig, ib, xhat, inv_std, m, n](Tape& tp) {
        const Tensor& g = tp.node(id).grad;
        const Tensor& gamma_v = tp.node(ig).value;
        if (tp.node(ig).requires_grad) {
            Tensor& dg = tp.grad_buf(ig);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) dg.data[j] += g.data[i * n + j] * xhat.data[i * n + j];
        }
        if (tp.node(ib).requires_grad) {
            Tensor& db = tp.grad_buf(ib);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) db.data[j] += g.data[i * n + j];
        }
        if (tp.node(ix).requires_grad) {
            Tensor& dx = tp.grad_buf(ix);
            for (std::size_t i = 0; i < m; ++i) {
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double gg = g.data[i * n + j] * gamma_v.data[j];
                    m1 += gg;
                    m2 += gg * xhat.data[i * n + j];
                }
                m1 /= double(n);
                m2 /= double(n);
                for (std::size_t j = 0; j < n; ++j) {
                    const double gg = g.data[i * n + j] * gamma_v.data[j];
                    dx.data[i * n + j] += (gg - m1 - xhat.data[i * n + j] * m2) * inv_std.data[i];
                }
            }
        }
    };
    return {&t, id};
}

Var embedding(Var table, const std::vector<int>& tokens) {
    Tape& t = *table.tape;
    const std::size_t rows = t.val(table).rows(), d = t.val(table).cols();
    Tensor out({tokens.size(), d});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const int tok = tokens[i];
        if (tok < 0 || std::size_t(tok) >= rows) throw std::invalid_argument("embedding: token out of range");
        std::memcpy(out.data.data() + i * d, t.val(table).data.data() + std::size_t(tok) * d,
                    d * sizeof(double));
    }
    const int id = t.push(std::move(out), rg(t, table), {});
    const int it = table.id;
    std::vector<int> toks = tokens;
    t.node(id).back = [id, it, toks, d](Tape& tp) {
        if (!tp.node(it).requires_grad) return;
        const Tensor& g = tp.node(id).grad;
        Tensor& dt = tp.grad_buf(it);
        for (std::size_t i = 0; i < toks.size(); ++i)
            kn::serial::axpy(1.0, g.data.data() + i * d, dt.data.data() + std::size_t(toks[i]) * d, d);
    };
    return {&t, id};
}

namespace {
struct ConvDims {
    std::size_t b, cin, h, w, cout, kh, kw, oh, ow;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
    if (x.rank() != 4 || w.rank() != 4) throw std::invalid_argument("conv2d: rank-4 tensors required");
    ConvDims d{};
    d.b = x.dim(0);
    d.cin = x.dim(1);
    d.h = x.dim(2);
    d.w = x.dim(3);
    d.cout = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    if (w.dim(1) != d.cin) throw std::invalid_argument("conv2d: channel mismatch");
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    return d;
}
}  // namespace

Var conv2d(Var x, Var w, Var bias, std::size_t stride, std::size_t pad) {
    Tape& t = same_tape(x, w);
    const ConvDims d = conv_dims(t.val(x), t.val(w), stride, pad);
    if (t.val(bias).size() != d.cout) throw std::invalid_argument("conv2d: bias size mismatch");
    const std::size_t ckk = d.cin * d.kh * d.kw, owh = d.oh * d.ow;
    Tensor out({d.b, d.cout, d.oh, d.ow});
    auto cols_store = std::make_shared<std::vector<Tensor>>();
    cols_store->reserve(d.b);
    for (std::size_t bi = 0; bi < d.b; ++bi) {
        Tensor cols({ckk, owh});
        kn::im2col(t.val(x).data.data() + bi * d.cin * d.h * d.w, cols.data.data(), d.cin, d.h, d.w, d.kh,
                   d.kw, stride, pad, d.oh, d.ow);
        kn::matmul_nn(t.val(w).data.data(), cols.data.data(), out.data.data() + bi * d.cout * owh, d.cout,
                      ckk, owh);
        for (std::size_t c = 0; c < d.cout; ++c) {
            double* oc = out.data.data() + (bi * d.cout + c) * owh;
            const double bv = t.val(bias).data[c];
            for (std::size_t p = 0; p < owh; ++p) oc[p] += bv;
        }
        cols_store->push_back(std::move(cols));
    }
    const int id = t.push(std::move(out), rg(t, x) || rg(t, w) || rg(t, bias), {});
    const int ix = x.id, iw = w.id, ib = bias.id;
    t.node(id).back = [id, ix, iw, ib, d, stride, pad, ckk, owh, cols_store](Tape& tp) {
        const Tensor& g = tp.node(id).grad;
        for (std::size_t bi = 0; bi < d.b; ++bi) {
            const double* gb = g.data.data() + bi * d.cout * owh;
            if (tp.node(iw).requires_grad) {
                Tensor dw({d.cout, ckk});
                kn::matmul_nt(gb, (*cols_store)[bi].data.data(), dw.data.data(), d.cout, owh, ckk);
                kn::axpy(1.0, dw.data.data(), tp.grad_buf(iw).data.data(), dw.size());
            }
            if (tp.node(ib).requires_grad) {
                Tensor& db = tp.grad_buf(ib);
                for (std::size_t c = 0; c < d.cout; ++c)
                    db.data[c] += kn::serial::sum(gb + c * owh, owh);
            }
            if (tp.node(ix).requires_grad) {
                Tensor dcols({ckk, owh});
                kn::matmul_tn(tp.node(iw).value.data.data(), gb, dcols.data.data(), ckk, d.cout, owh);
                Tensor dxb({d.cin, d.h, d.w});
                kn::col2im(dcols.data.data(), dxb.data.data(), d.cin, d.h, d.w, d.kh, d.kw, stride, pad,
                           d.oh, d.ow);
                kn::axpy(1.0, dxb.data.data(),
                         tp.grad_buf(ix).data.data() + bi * d.cin * d.h * d.w, dxb.size());
            }
        }
    };
    return {&t, id};
}

Var conv_transpose2d(Var x, Var w, Var bias, std::size_t stride, std::size_t pad) {
    Tape& t = same_tape(x, w);
    const Tensor& xv = t.val(x);
    const Tensor& wv = t.val(w);
    if (xv.rank() != 4 || wv.rank() != 4) throw std::invalid_argument("conv_transpose2d: rank-4 required");
    const std::size_t b = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), win = xv.dim(3);
    const std::size_t cout = wv.dim(1), kh = wv.dim(2), kw = wv.dim(3);
    if (wv.dim(0) != cin) throw std::invalid_argument("conv_transpose2d: channel mismatch");
    const std::size_t hout = (h - 1) * stride + kh - 2 * pad;
    const std::size_t wout = (win - 1) * stride + kw - 2 * pad;
    if (t.val(bias).size() != cout) throw std::invalid_argument("conv_transpose2d: bias size mismatch");
    const std::size_t ckk = cout * kh * kw, hw = h * win;
    Tensor out({b, cout, hout, wout});
    for (std::size_t bi = 0; bi < b; ++bi) {
        Tensor cols({ckk, hw});
        kn::matmul_tn(wv.data.data(), xv.data.data() + bi * cin * hw, cols.data.data(), ckk, cin, hw);
        kn::col2im(cols.data.data(), out.data.data() + bi * cout * hout * wout, cout, hout, wout, kh, kw,
                   stride, pad, h, win);
        for (std::size_t c = 0; c < cout; ++c) {
            double* oc = out.data.data() + (bi * cout + c) * hout * wout;
            const double bv = t.val(bias).data[c];
            for (std::size_t p = 0; p < hout * wout; ++p) oc[p] += bv;
        }
    }
    const int id = t.push(std::move(out), rg(t, x) || rg(t, w) || rg(t, bias), {});
    const int ix = x.id, iw = w.id, ib = bias.id;
    t.node(id).back = [id, ix, iw, ib, b, cin, cout, h, win, hout, wout, kh, kw, stride, pad, ckk,
                       hw](Tape& tp) {
        const Tensor& g = tp.node(id).grad;
        for (std::size_t bi = 0; bi < b; ++bi) {
            Tensor dcols({ckk, hw});
            kn::im2col(g.data.data() + bi * cout * hout * wout, dcols.data.data(), cout, hout, wout, kh, kw,
                       stride, pad, h, win);
            if (tp.node(ix).requires_grad) {
                Tensor dxb({cin, hw});
                kn::matmul_nn(tp.node(iw).value.data.data(), dcols.data.data(), dxb.data.data(), cin, ckk,
                              hw);
                kn::axpy(1.0, dxb.data.data(), tp.grad_buf(ix).data.data() + bi * cin * hw, dxb.size());
            }
            if (tp.node(iw).requires_grad) {
                Tensor dw({cin, ckk});
                kn::matmul_nt(tp.node(ix).value.data.data() + bi * cin * hw, dcols.data.data(),
                              dw.data.data(), cin, hw, ckk);
                kn::axpy(1.0, dw.data.data(), tp.grad_buf(iw).data.data(), dw.size());
            }
            if (tp.node(ib).requires_grad) {
                Tensor& db = tp.grad_buf(ib);
                for (std::size_t c = 0; c < cout; ++c)
                    db.data[c] += kn::serial::sum(g.data.data() + (bi * cout + c) * hout * wout,
                                                  hout * wout);
            }
        }
    };
    return {&t, id};
}

Var st_gumbel_onehot(Var logits, const Tensor& noise, double tau) {
    Tape& t = *logits.tape;
    require_same_shape(t.val(logits), noise, "st_gumbel_onehot");
    if (tau <= 0.0) throw std::invalid_argument("st_gumbel_onehot: tau must be positive");
    const std::size_t m = t.val(logits).rows(), n = t.val(logits).cols();
    Tensor pert(t.val(logits).shape);
    for (std::size_t i = 0; i < pert.size(); ++i)
        pert.data[i] = (t.val(logits).data[i] + noise.data[i]) / tau;
    Tensor out(t.val(logits).shape);
    for (std::size_t i = 0; i < m; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < n; ++j)
            if (pert.data[i * n + j] > pert.data[i * n + best]) best = j;
        out.data[i * n + best] = 1.0;
    }
    const int id = t.push(std::move(out), rg(t, logits), {});
    const int ia = logits.id;
    t.node(id).back = [id, ia, pert, tau, m, n](Tape& tp) {
        if (!tp.node(ia).requires_grad) return;
        const Tensor& g = tp.node(id).grad;
        Tensor sm(pert.shape);
        kn::row_softmax(pert.data.data(), sm.data.data(), m, n);
        Tensor& da = tp.grad_buf(ia);
        for (std::size_t i = 0; i < m; ++i) {
            double dotgy = 0.0;
            for (std::size_t j = 0; j < n; ++j) dotgy += g.data[i * n + j] * sm.data[i * n + j];
            for (std::size_t j = 0; j < n; ++j)
                da.data[i * n + j] += sm.data[i * n + j] * (g.data[i * n + j] - dotgy) / tau;
        }
    };
    return {&t, id};
}

}  // namespace couplegen::ag
