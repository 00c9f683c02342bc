#pragma once

#include <cstddef>

namespace couplegen::kernels {

// Hot numeric loops, each in two variants with identical semantics:
//   serial::  - straight-line reference implementation, kept for testing;
//   omp::     - OpenMP version.
// The omp variants parallelize only over independent outputs, and the two
// reductions (sum, dot) use fixed 4096-element chunk partials combined in
// index order in both variants, so results are bitwise identical to the
// serial reference at any thread count. The unprefixed functions dispatch on
// parallel_enabled().

bool parallel_enabled();
void set_parallel(bool on);     // also consulted by the deterministic-mode env toggle
int worker_count();

namespace serial {
// C[m x n] = A[m x k] * B[k x n]
void matmul_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
// C[m x n] = A[m x k] * B[n x k]^T
void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
// C[m x n] = A[k x m]^T * B[k x n]
void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
// per-row numerically stable softmax / log-sum-exp over [rows x cols]
void row_softmax(const double* in, double* out, std::size_t rows, std::size_t cols);
void row_logsumexp(const double* in, double* out, std::size_t rows, std::size_t cols);
double sum(const double* x, std::size_t n);
double dot(const double* x, const double* y, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);  // y += alpha*x
void scale(double alpha, double* x, std::size_t n);
void ewise_add(const double* a, const double* b, double* out, std::size_t n);
void ewise_sub(const double* a, const double* b, double* out, std::size_t n);
void ewise_mul(const double* a, const double* b, double* out, std::size_t n);
void add_row_bias(const double* a, const double* bias, double* out, std::size_t rows, std::size_t cols);
void map_tanh(const double* in, double* out, std::size_t n);
void map_exp(const double* in, double* out, std::size_t n);
// im2col for NCHW conv: input [cin x h x w] -> cols [(cin*kh*kw) x (oh*ow)]
void im2col(const double* im, double* cols, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow);
void col2im(const double* cols, double* im, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow);
}  // namespace serial

namespace omp {
void matmul_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void row_softmax(const double* in, double* out, std::size_t rows, std::size_t cols);
void row_logsumexp(const double* in, double* out, std::size_t rows, std::size_t cols);
double sum(const double* x, std::size_t n);
double dot(const double* x, const double* y, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void scale(double alpha, double* x, std::size_t n);
void ewise_add(const double* a, const double* b, double* out, std::size_t n);
void ewise_sub(const double* a, const double* b, double* out, std::size_t n);
void ewise_mul(const double* a, const double* b, double* out, std::size_t n);
void add_row_bias(const double* a, const double* bias, double* out, std::size_t rows, std::size_t cols);
void map_tanh(const double* in, double* out, std::size_t n);
void map_exp(const double* in, double* out, std::size_t n);
void im2col(const double* im, double* cols, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow);
void col2im(const double* cols, double* im, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow);
}  // namespace omp

void matmul_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void row_softmax(const double* in, double* out, std::size_t rows, std::size_t cols);
void row_logsumexp(const double* in, double* out, std::size_t rows, std::size_t cols);
double sum(const double* x, std::size_t n);
double dot(const double* x, const double* y, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void scale(double alpha, double* x, std::size_t n);
void ewise_add(const double* a, const double* b, double* out, std::size_t n);
void ewise_sub(const double* a, const double* b, double* out, std::size_t n);
void ewise_mul(const double* a, const double* b, double* out, std::size_t n);
void add_row_bias(const double* a, const double* bias, double* out, std::size_t rows, std::size_t cols);
void map_tanh(const double* in, double* out, std::size_t n);
void map_exp(const double* in, double* out, std::size_t n);
void im2col(const double* im, double* cols, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow);
void col2im(const double* cols, double* im, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow);

}  // namespace couplegen::kernels
