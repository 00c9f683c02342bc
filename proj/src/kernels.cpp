#include "couplegen/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <vector>

namespace couplegen::kernels {

namespace {

std::atomic<bool> g_parallel{true};

bool env_forces_serial() {
    const char* v = std::getenv("COUPLEGEN_DETERMINISTIC");
    // Parallel results are already bitwise-deterministic by construction; the
    // env toggle additionally forces the serial reference path outright.
    return v != nullptr && v[0] != '\0' && !(v[0] == '0' && v[1] == '\0');
}

constexpr std::size_t kChunk = 4096;  // reduction chunk; shared by both variants

}  // namespace

bool parallel_enabled() {
    static const bool forced_serial = env_forces_serial();
    return g_parallel.load(std::memory_order_relaxed) && !forced_serial;
}

void set_parallel(bool on) { g_parallel.store(on, std::memory_order_relaxed); }

int worker_count() { return parallel_enabled() ? omp_get_max_threads() : 1; }

// ---------------------------------------------------------------- serial ---

namespace serial {

void matmul_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        std::fill(ci, ci + n, 0.0);
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            c[i * n + j] = acc;
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        std::fill(ci, ci + n, 0.0);
        for (std::size_t p = 0; p < k; ++p) {
            const double api = a[p * m + i];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
}

void row_softmax(const double* in, double* out, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = in + r * cols;
        double* y = out + r * cols;
        double mx = x[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        const double inv = 1.0 / z;
        for (std::size_t j = 0; j < cols; ++j) y[j] *= inv;
    }
}

void row_logsumexp(const double* in, double* out, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = in + r * cols;
        double mx = x[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < cols; ++j) z += std::exp(x[j] - mx);
        out[r] = mx + std::log(z);
    }
}

namespace {
// Both variants reduce through identical per-chunk partials combined in index
// order, which is what makes omp::sum bitwise-equal to serial::sum.
double chunk_partial_sum(const double* x, std::size_t begin, std::size_t end) {
    double acc = 0.0;
    for (std::size_t i = begin; i < end; ++i) acc += x[i];
    return acc;
}
double chunk_partial_dot(const double* x, const double* y, std::size_t begin, std::size_t end) {
    double acc = 0.0;
    for (std::size_t i = begin; i < end; ++i) acc += x[i] * y[i];
    return acc;
}
}  // namespace

double sum(const double* x, std::size_t n) {
    const std::size_t nchunks = (n + kChunk - 1) / kChunk;
    double acc = 0.0;
    for (std::size_t ci = 0; ci < nchunks; ++ci)
        acc += chunk_partial_sum(x, ci * kChunk, std::min(n, (ci + 1) * kChunk));
    return acc;
}

double dot(const double* x, const double* y, std::size_t n) {
    const std::size_t nchunks = (n + kChunk - 1) / kChunk;
    double acc = 0.0;
    for (std::size_t ci = 0; ci < nchunks; ++ci)
        acc += chunk_partial_dot(x, y, ci * kChunk, std::min(n, (ci + 1) * kChunk));
    return acc;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale(double alpha, double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void ewise_add(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void ewise_sub(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void ewise_mul(const double* a, const double* b, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void add_row_bias(const double* a, const double* bias, double* out, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = a[r * cols + j] + bias[j];
}

void map_tanh(const double* in, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(in[i]);
}

void map_exp(const double* in, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(in[i]);
}

void im2col(const double* im, double* cols, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow) {
    const std::size_t owh = oh * ow;
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t ki = 0; ki < kh; ++ki)
            for (std::size_t kj = 0; kj < kw; ++kj) {
                double* dst = cols + ((c * kh + ki) * kw + kj) * owh;
                for (std::size_t oi = 0; oi < oh; ++oi) {
                    const std::ptrdiff_t ii = std::ptrdiff_t(oi * stride + ki) - std::ptrdiff_t(pad);
                    for (std::size_t oj = 0; oj < ow; ++oj) {
                        const std::ptrdiff_t jj = std::ptrdiff_t(oj * stride + kj) - std::ptrdiff_t(pad);
                        const bool inside =
                            ii >= 0 && ii < std::ptrdiff_t(h) && jj >= 0 && jj < std::ptrdiff_t(w);
                        dst[oi * ow + oj] = inside ? im[(c * h + std::size_t(ii)) * w + std::size_t(jj)] : 0.0;
                    }
                }
            }
}

void col2im(const double* cols, double* im, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow) {
    std::fill(im, im + cin * h * w, 0.0);
    const std::size_t owh = oh * ow;
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t ki = 0; ki < kh; ++ki)
            for (std::size_t kj = 0; kj < kw; ++kj) {
                const double* src = cols + ((c * kh + ki) * kw + kj) * owh;
                for (std::size_t oi = 0; oi < oh; ++oi) {
                    const std::ptrdiff_t ii = std::ptrdiff_t(oi * stride + ki) - std::ptrdiff_t(pad);
                    if (ii < 0 || ii >= std::ptrdiff_t(h)) continue;
                    for (std::size_t oj = 0; oj < ow; ++oj) {
                        const std::ptrdiff_t jj = std::ptrdiff_t(oj * stride + kj) - std::ptrdiff_t(pad);
                        if (jj < 0 || jj >= std::ptrdiff_t(w)) continue;
                        im[(c * h + std::size_t(ii)) * w + std::size_t(jj)] += src[oi * ow + oj];
                    }
                }
            }
}

}  // namespace serial

// ------------------------------------------------------------------- omp ---

namespace omp {

void matmul_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(m); ++i) {
        double* ci = c + std::size_t(i) * n;
        std::fill(ci, ci + n, 0.0);
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[std::size_t(i) * k + p];
            const double* bp = b + p * n;
#pragma omp simd
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(m); ++i) {
        const double* ai = a + std::size_t(i) * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            c[std::size_t(i) * n + j] = acc;
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(m); ++i) {
        double* ci = c + std::size_t(i) * n;
        std::fill(ci, ci + n, 0.0);
        for (std::size_t p = 0; p < k; ++p) {
            const double api = a[p * m + std::size_t(i)];
            const double* bp = b + p * n;
#pragma omp simd
            for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
}

void row_softmax(const double* in, double* out, std::size_t rows, std::size_t cols) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < std::ptrdiff_t(rows); ++r)
        serial::row_softmax(in + std::size_t(r) * cols, out + std::size_t(r) * cols, 1, cols);
}

void row_logsumexp(const double* in, double* out, std::size_t rows, std::size_t cols) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < std::ptrdiff_t(rows); ++r)
        serial::row_logsumexp(in + std::size_t(r) * cols, out + std::size_t(r), 1, cols);
}

double sum(const double* x, std::size_t n) {
    const std::size_t nchunks = (n + kChunk - 1) / kChunk;
    std::vector<double> partial(nchunks);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ci = 0; ci < std::ptrdiff_t(nchunks); ++ci) {
        const std::size_t b = std::size_t(ci) * kChunk;
        const std::size_t e = std::min(n, b + kChunk);
        double acc = 0.0;
        for (std::size_t i = b; i < e; ++i) acc += x[i];
        partial[std::size_t(ci)] = acc;
    }
    double acc = 0.0;
    for (double p : partial) acc += p;  // fixed index order = serial order
    return acc;
}

double dot(const double* x, const double* y, std::size_t n) {
    const std::size_t nchunks = (n + kChunk - 1) / kChunk;
    std::vector<double> partial(nchunks);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ci = 0; ci < std::ptrdiff_t(nchunks); ++ci) {
        const std::size_t b = std::size_t(ci) * kChunk;
        const std::size_t e = std::min(n, b + kChunk);
        double acc = 0.0;
        for (std::size_t i = b; i < e; ++i) acc += x[i] * y[i];
        partial[std::size_t(ci)] = acc;
    }
    double acc = 0.0;
    for (double p : partial) acc += p;
    return acc;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(n); ++i) y[i] += alpha * x[i];
}

void scale(double alpha, double* x, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(n); ++i) x[i] *= alpha;
}

void ewise_add(const double* a, const double* b, double* out, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(n); ++i) out[i] = a[i] + b[i];
}

void ewise_sub(const double* a, const double* b, double* out, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(n); ++i) out[i] = a[i] - b[i];
}

void ewise_mul(const double* a, const double* b, double* out, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(n); ++i) out[i] = a[i] * b[i];
}

void add_row_bias(const double* a, const double* bias, double* out, std::size_t rows, std::size_t cols) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < std::ptrdiff_t(rows); ++r)
        for (std::size_t j = 0; j < cols; ++j)
            out[std::size_t(r) * cols + j] = a[std::size_t(r) * cols + j] + bias[j];
}

void map_tanh(const double* in, double* out, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(n); ++i) out[i] = std::tanh(in[i]);
}

void map_exp(const double* in, double* out, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < std::ptrdiff_t(n); ++i) out[i] = std::exp(in[i]);
}

void im2col(const double* im, double* cols, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow) {
    const std::size_t owh = oh * ow;
    const std::size_t total = cin * kh * kw;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t idx = 0; idx < std::ptrdiff_t(total); ++idx) {
        const std::size_t c = std::size_t(idx) / (kh * kw);
        const std::size_t ki = (std::size_t(idx) / kw) % kh;
        const std::size_t kj = std::size_t(idx) % kw;
        double* dst = cols + std::size_t(idx) * owh;
        for (std::size_t oi = 0; oi < oh; ++oi) {
            const std::ptrdiff_t ii = std::ptrdiff_t(oi * stride + ki) - std::ptrdiff_t(pad);
            for (std::size_t oj = 0; oj < ow; ++oj) {
                const std::ptrdiff_t jj = std::ptrdiff_t(oj * stride + kj) - std::ptrdiff_t(pad);
                const bool inside = ii >= 0 && ii < std::ptrdiff_t(h) && jj >= 0 && jj < std::ptrdiff_t(w);
                dst[oi * ow + oj] = inside ? im[(c * h + std::size_t(ii)) * w + std::size_t(jj)] : 0.0;
            }
        }
    }
}

void col2im(const double* cols, double* im, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow) {
    // Scatter-add collides across kernel offsets within one channel, so we
    // parallelize over channels only; inner loops keep the serial order.
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t c = 0; c < std::ptrdiff_t(cin); ++c) {
        double* imc = im + std::size_t(c) * h * w;
        std::fill(imc, imc + h * w, 0.0);
        const std::size_t owh = oh * ow;
        for (std::size_t ki = 0; ki < kh; ++ki)
            for (std::size_t kj = 0; kj < kw; ++kj) {
                const double* src = cols + ((std::size_t(c) * kh + ki) * kw + kj) * owh;
                for (std::size_t oi = 0; oi < oh; ++oi) {
                    const std::ptrdiff_t ii = std::ptrdiff_t(oi * stride + ki) - std::ptrdiff_t(pad);
                    if (ii < 0 || ii >= std::ptrdiff_t(h)) continue;
                    for (std::size_t oj = 0; oj < ow; ++oj) {
                        const std::ptrdiff_t jj = std::ptrdiff_t(oj * stride + kj) - std::ptrdiff_t(pad);
                        if (jj < 0 || jj >= std::ptrdiff_t(w)) continue;
                        imc[std::size_t(ii) * w + std::size_t(jj)] += src[oi * ow + oj];
                    }
                }
            }
    }
}

}  // namespace omp

// -------------------------------------------------------------- dispatch ---

#define COUPLEGEN_DISPATCH(fn, ...) \
    do {                            \
        if (parallel_enabled())     \
            omp::fn(__VA_ARGS__);   \
        else                        \
            serial::fn(__VA_ARGS__); \
    } while (0)

void matmul_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    COUPLEGEN_DISPATCH(matmul_nn, a, b, c, m, k, n);
}
void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    COUPLEGEN_DISPATCH(matmul_nt, a, b, c, m, k, n);
}
void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    COUPLEGEN_DISPATCH(matmul_tn, a, b, c, m, k, n);
}
void row_softmax(const double* in, double* out, std::size_t rows, std::size_t cols) {
    COUPLEGEN_DISPATCH(row_softmax, in, out, rows, cols);
}
void row_logsumexp(const double* in, double* out, std::size_t rows, std::size_t cols) {
    COUPLEGEN_DISPATCH(row_logsumexp, in, out, rows, cols);
}
double sum(const double* x, std::size_t n) { return parallel_enabled() ? omp::sum(x, n) : serial::sum(x, n); }
double dot(const double* x, const double* y, std::size_t n) {
    return parallel_enabled() ? omp::dot(x, y, n) : serial::dot(x, y, n);
}
void axpy(double alpha, const double* x, double* y, std::size_t n) { COUPLEGEN_DISPATCH(axpy, alpha, x, y, n); }
void scale(double alpha, double* x, std::size_t n) { COUPLEGEN_DISPATCH(scale, alpha, x, n); }
void ewise_add(const double* a, const double* b, double* out, std::size_t n) {
    COUPLEGEN_DISPATCH(ewise_add, a, b, out, n);
}
void ewise_sub(const double* a, const double* b, double* out, std::size_t n) {
    COUPLEGEN_DISPATCH(ewise_sub, a, b, out, n);
}
void ewise_mul(const double* a, const double* b, double* out, std::size_t n) {
    COUPLEGEN_DISPATCH(ewise_mul, a, b, out, n);
}
void add_row_bias(const double* a, const double* bias, double* out, std::size_t rows, std::size_t cols) {
    COUPLEGEN_DISPATCH(add_row_bias, a, bias, out, rows, cols);
}
void map_tanh(const double* in, double* out, std::size_t n) { COUPLEGEN_DISPATCH(map_tanh, in, out, n); }
void map_exp(const double* in, double* out, std::size_t n) { COUPLEGEN_DISPATCH(map_exp, in, out, n); }
void im2col(const double* im, double* cols, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow) {
    COUPLEGEN_DISPATCH(im2col, im, cols, cin, h, w, kh, kw, stride, pad, oh, ow);
}
void col2im(const double* cols, double* im, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow) {
    COUPLEGEN_DISPATCH(col2im, cols, im, cin, h, w, kh, kw, stride, pad, oh, ow);
}

#undef COUPLEGEN_DISPATCH

}  // namespace couplegen::kernels
