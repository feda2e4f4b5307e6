#pragma once

#include <cstdint>

namespace kd3d::kernels {

// Dense numeric inner loops, each in two variants: a plain serial reference
// and an OpenMP version parallelized over output elements. Within one output
// element the accumulation order is identical in both variants, so the two
// produce bitwise-equal results at any thread count. The omp variant is the
// production path; the serial one is kept for tests and the benchmark.
//
// All matrices are row-major. `acc` accumulates into the output instead of
// overwriting it.

// c[m x n] = a[m x k] * b[k x n]
void matmul_serial(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n, bool acc = false);
void matmul_omp(const double* a, const double* b, double* c,
                std::int64_t m, std::int64_t k, std::int64_t n, bool acc = false);

// c[m x n] = a[m x k] * b[n x k]^T
void matmul_nt_serial(const double* a, const double* b, double* c,
                      std::int64_t m, std::int64_t k, std::int64_t n, bool acc = false);
void matmul_nt_omp(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n, bool acc = false);

// c[m x n] = a[k x m]^T * b[k x n]
void matmul_tn_serial(const double* a, const double* b, double* c,
                      std::int64_t m, std::int64_t k, std::int64_t n, bool acc = false);
void matmul_tn_omp(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n, bool acc = false);

// 3x3 same-padding convolution on channel-major maps.
// in: [ci][h][w], w: [co][ci][3*3], bias: [co] or nullptr, out: [co][h][w]
void conv3x3_serial(const double* in, const double* w, const double* bias, double* out,
                    std::int64_t ci, std::int64_t co, std::int64_t h, std::int64_t wd,
                    bool acc = false);
void conv3x3_omp(const double* in, const double* w, const double* bias, double* out,
                 std::int64_t ci, std::int64_t co, std::int64_t h, std::int64_t wd,
                 bool acc = false);

// gin[ci][h][w] += or = sum_co sum_taps w[co][ci][tap] * gout[co][...]
void conv3x3_grad_input_serial(const double* gout, const double* w, double* gin,
                               std::int64_t ci, std::int64_t co, std::int64_t h,
                               std::int64_t wd, bool acc = false);
void conv3x3_grad_input_omp(const double* gout, const double* w, double* gin,
                            std::int64_t ci, std::int64_t co, std::int64_t h,
                            std::int64_t wd, bool acc = false);

// gw[co][ci][tap], gb[co] (gb may be nullptr)
void conv3x3_grad_weights_serial(const double* gout, const double* in, double* gw, double* gb,
                                 std::int64_t ci, std::int64_t co, std::int64_t h,
                                 std::int64_t wd, bool acc = false);
void conv3x3_grad_weights_omp(const double* gout, const double* in, double* gw, double* gb,
                              std::int64_t ci, std::int64_t co, std::int64_t h,
                              std::int64_t wd, bool acc = false);

// k-nearest-neighbor search: for each of m query points, the k closest of the
// v centers by Euclidean distance (ties broken by lower center index).
// out_idx/out_dist are [m x k]. Requires k <= v.
void knn_serial(const double* queries, std::int64_t m, const double* centers, std::int64_t v,
                std::int64_t k, std::int64_t* out_idx, double* out_dist);
void knn_omp(const double* queries, std::int64_t m, const double* centers, std::int64_t v,
             std::int64_t k, std::int64_t* out_idx, double* out_dist);

// Production dispatch (the omp variants).
inline void matmul(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n, bool acc = false) {
  matmul_omp(a, b, c, m, k, n, acc);
}
inline void matmul_nt(const double* a, const double* b, double* c,
                      std::int64_t m, std::int64_t k, std::int64_t n, bool acc = false) {
  matmul_nt_omp(a, b, c, m, k, n, acc);
}
inline void matmul_tn(const double* a, const double* b, double* c,
                      std::int64_t m, std::int64_t k, std::int64_t n, bool acc = false) {
  matmul_tn_omp(a, b, c, m, k, n, acc);
}
inline void conv3x3(const double* in, const double* w, const double* bias, double* out,
                    std::int64_t ci, std::int64_t co, std::int64_t h, std::int64_t wd,
                    bool acc = false) {
  conv3x3_omp(in, w, bias, out, ci, co, h, wd, acc);
}
inline void conv3x3_grad_input(const double* gout, const double* w, double* gin,
                               std::int64_t ci, std::int64_t co, std::int64_t h,
                               std::int64_t wd, bool acc = false) {
  conv3x3_grad_input_omp(gout, w, gin, ci, co, h, wd, acc);
}
inline void conv3x3_grad_weights(const double* gout, const double* in, double* gw, double* gb,
                                 std::int64_t ci, std::int64_t co, std::int64_t h,
                                 std::int64_t wd, bool acc = false) {
  conv3x3_grad_weights_omp(gout, in, gw, gb, ci, co, h, wd, acc);
}
inline void knn(const double* queries, std::int64_t m, const double* centers, std::int64_t v,
                std::int64_t k, std::int64_t* out_idx, double* out_dist) {
  knn_omp(queries, m, centers, v, k, out_idx, out_dist);
}

}  // namespace kd3d::kernels
