#include "kd3d/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace kd3d::kernels {

namespace {

// One output row of C = A*B; inner accumulation in ascending k order.
inline void matmul_row(const double* a, const double* b, double* c,
                       std::int64_t row, std::int64_t k, std::int64_t n, bool acc) {
  double* crow = c + row * n;
  if (!acc) std::memset(crow, 0, sizeof(double) * n);
  const double* arow = a + row * k;
  for (std::int64_t kk = 0; kk < k; ++kk) {
    const double av = arow[kk];
    const double* brow = b + kk * n;
    for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

inline void matmul_nt_row(const double* a, const double* b, double* c,
                          std::int64_t row, std::int64_t k, std::int64_t n, bool acc) {
  const double* arow = a + row * k;
  double* crow = c + row * n;
  for (std::int64_t j = 0; j < n; ++j) {
    const double* brow = b + j * k;
    double s = 0.0;
    for (std::int64_t kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
    crow[j] = acc ? crow[j] + s : s;
  }
}

inline void matmul_tn_row(const double* a, const double* b, double* c,
                          std::int64_t row, std::int64_t m, std::int64_t k, std::int64_t n,
                          bool acc) {
  double* crow = c + row * n;
  if (!acc) std::memset(crow, 0, sizeof(double) * n);
  for (std::int64_t kk = 0; kk < k; ++kk) {
    const double av = a[kk * m + row];
    const double* brow = b + kk * n;
    for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

inline void conv3x3_cell(const double* in, const double* w, const double* bias, double* out,
                         std::int64_t ci, std::int64_t oc, std::int64_t y, std::int64_t x,
                         std::int64_t h, std::int64_t wd, bool acc) {
  double s = bias ? bias[oc] : 0.0;
  const double* wc = w + oc * ci * 9;
  for (std::int64_t c = 0; c < ci; ++c) {
    const double* plane = in + c * h * wd;
    const double* wk = wc + c * 9;
    for (std::int64_t dy = -1; dy <= 1; ++dy) {
      const std::int64_t yy = y + dy;
      if (yy < 0 || yy >= h) continue;
      const double* prow = plane + yy * wd;
      const double* wrow = wk + (dy + 1) * 3;
      for (std::int64_t dx = -1; dx <= 1; ++dx) {
        const std::int64_t xx = x + dx;
        if (xx < 0 || xx >= wd) continue;
        s += wrow[dx + 1] * prow[xx];
      }
    }
  }
  double* o = out + (oc * h + y) * wd + x;
  *o = acc ? *o + s : s;
}

// grad wrt input is a correlation with the transposed kernel, written as a
// gather so each gin element is owned by exactly one iteration.
inline void conv3x3_gin_cell(const double* gout, const double* w, double* gin,
                             std::int64_t ci, std::int64_t co, std::int64_t c,
                             std::int64_t y, std::int64_t x, std::int64_t h, std::int64_t wd,
                             bool acc) {
  double s = 0.0;
  for (std::int64_t oc = 0; oc < co; ++oc) {
    const double* gplane = gout + oc * h * wd;
    const double* wk = w + (oc * ci + c) * 9;
    for (std::int64_t dy = -1; dy <= 1; ++dy) {
      const std::int64_t yy = y - dy;
      if (yy < 0 || yy >= h) continue;
      const double* grow = gplane + yy * wd;
      const double* wrow = wk + (dy + 1) * 3;
      for (std::int64_t dx = -1; dx <= 1; ++dx) {
        const std::int64_t xx = x - dx;
        if (xx < 0 || xx >= wd) continue;
        s += wrow[dx + 1] * grow[xx];
      }
    }
  }
  double* g = gin + (c * h + y) * wd + x;
  *g = acc ? *g + s : s;
}

inline void conv3x3_gw_outchannel(const double* gout, const double* in, double* gw, double* gb,
                                  std::int64_t ci, std::int64_t oc, std::int64_t h,
                                  std::int64_t wd, bool acc) {
  const double* gplane = gout + oc * h * wd;
  for (std::int64_t c = 0; c < ci; ++c) {
    const double* plane = in + c * h * wd;
    for (std::int64_t dy = -1; dy <= 1; ++dy) {
      for (std::int64_t dx = -1; dx <= 1; ++dx) {
        double s = 0.0;
        const std::int64_t y0 = std::max<std::int64_t>(0, -dy);
        const std::int64_t y1 = std::min(h, h - dy);
        const std::int64_t x0 = std::max<std::int64_t>(0, -dx);
        const std::int64_t x1 = std::min(wd, wd - dx);
        for (std::int64_t y = y0; y < y1; ++y) {
          const double* grow = gplane + y * wd;
          const double* prow = plane + (y + dy) * wd;
          for (std::int64_t x = x0; x < x1; ++x) s += grow[x] * prow[x + dx];
        }
        double* g = gw + ((oc * ci + c) * 9) + (dy + 1) * 3 + (dx + 1);
        *g = acc ? *g + s : s;
      }
    }
  }
  if (gb) {
    double s = 0.0;
    for (std::int64_t i = 0; i < h * wd; ++i) s += gplane[i];
    gb[oc] = acc ? gb[oc] + s : s;
  }
}

inline void knn_query(const double* q, const double* centers, std::int64_t v, std::int64_t k,
                      std::int64_t* idx, double* dist) {
  // insertion into a k-slot best list ordered by (dist2, index)
  for (std::int64_t s = 0; s < k; ++s) {
    idx[s] = -1;
    dist[s] = std::numeric_limits<double>::infinity();
  }
  for (std::int64_t j = 0; j < v; ++j) {
    const double dx = q[0] - centers[j * 3 + 0];
    const double dy = q[1] - centers[j * 3 + 1];
    const double dz = q[2] - centers[j * 3 + 2];
    const double d2 = dx * dx + dy * dy + dz * dz;
    if (d2 > dist[k - 1] || (d2 == dist[k - 1] && j > idx[k - 1])) continue;
    std::int64_t s = k - 1;
    while (s > 0 && (d2 < dist[s - 1] || (d2 == dist[s - 1] && j < idx[s - 1]))) {
      dist[s] = dist[s - 1];
      idx[s] = idx[s - 1];
      --s;
    }
    dist[s] = d2;
    idx[s] = j;
  }
  for (std::int64_t s = 0; s < k; ++s) dist[s] = std::sqrt(dist[s]);
}

}  // namespace

void matmul_serial(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n, bool acc) {
  for (std::int64_t i = 0; i < m; ++i) matmul_row(a, b, c, i, k, n, acc);
}

void matmul_omp(const double* a, const double* b, double* c,
                std::int64_t m, std::int64_t k, std::int64_t n, bool acc) {
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < m; ++i) matmul_row(a, b, c, i, k, n, acc);
}

void matmul_nt_serial(const double* a, const double* b, double* c,
                      std::int64_t m, std::int64_t k, std::int64_t n, bool acc) {
  for (std::int64_t i = 0; i < m; ++i) matmul_nt_row(a, b, c, i, k, n, acc);
}

void matmul_nt_omp(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n, bool acc) {
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < m; ++i) matmul_nt_row(a, b, c, i, k, n, acc);
}

void matmul_tn_serial(const double* a, const double* b, double* c,
                      std::int64_t m, std::int64_t k, std::int64_t n, bool acc) {
  for (std::int64_t i = 0; i < m; ++i) matmul_tn_row(a, b, c, i, m, k, n, acc);
}

void matmul_tn_omp(const double* a, const double* b, double* c,
                   std::int64_t m, std::int64_t k, std::int64_t n, bool acc) {
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < m; ++i) matmul_tn_row(a, b, c, i, m, k, n, acc);
}

void conv3x3_serial(const double* in, const double* w, const double* bias, double* out,
                    std::int64_t ci, std::int64_t co, std::int64_t h, std::int64_t wd,
                    bool acc) {
  for (std::int64_t oc = 0; oc < co; ++oc)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < wd; ++x)
        conv3x3_cell(in, w, bias, out, ci, oc, y, x, h, wd, acc);
}

void conv3x3_omp(const double* in, const double* w, const double* bias, double* out,
                 std::int64_t ci, std::int64_t co, std::int64_t h, std::int64_t wd,
                 bool acc) {
#pragma omp parallel for collapse(2) schedule(static)
  for (std::int64_t oc = 0; oc < co; ++oc)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < wd; ++x)
        conv3x3_cell(in, w, bias, out, ci, oc, y, x, h, wd, acc);
}

void conv3x3_grad_input_serial(const double* gout, const double* w, double* gin,
                               std::int64_t ci, std::int64_t co, std::int64_t h,
                               std::int64_t wd, bool acc) {
  for (std::int64_t c = 0; c < ci; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < wd; ++x)
        conv3x3_gin_cell(gout, w, gin, ci, co, c, y, x, h, wd, acc);
}

void conv3x3_grad_input_omp(const double* gout, const double* w, double* gin,
                            std::int64_t ci, std::int64_t co, std::int64_t h,
                            std::int64_t wd, bool acc) {
#pragma omp parallel for collapse(2) schedule(static)
  for (std::int64_t c = 0; c < ci; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < wd; ++x)
        conv3x3_gin_cell(gout, w, gin, ci, co, c, y, x, h, wd, acc);
}

void conv3x3_grad_weights_serial(const double* gout, const double* in, double* gw, double* gb,
                                 std::int64_t ci, std::int64_t co, std::int64_t h,
                                 std::int64_t wd, bool acc) {
  for (std::int64_t oc = 0; oc < co; ++oc)
    conv3x3_gw_outchannel(gout, in, gw, gb, ci, oc, h, wd, acc);
}

void conv3x3_grad_weights_omp(const double* gout, const double* in, double* gw, double* gb,
                              std::int64_t ci, std::int64_t co, std::int64_t h,
                              std::int64_t wd, bool acc) {
#pragma omp parallel for schedule(static)
  for (std::int64_t oc = 0; oc < co; ++oc)
    conv3x3_gw_outchannel(gout, in, gw, gb, ci, oc, h, wd, acc);
}

void knn_serial(const double* queries, std::int64_t m, const double* centers, std::int64_t v,
                std::int64_t k, std::int64_t* out_idx, double* out_dist) {
  for (std::int64_t i = 0; i < m; ++i)
    knn_query(queries + i * 3, centers, v, k, out_idx + i * k, out_dist + i * k);
}

void knn_omp(const double* queries, std::int64_t m, const double* centers, std::int64_t v,
             std::int64_t k, std::int64_t* out_idx, double* out_dist) {
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < m; ++i)
    knn_query(queries + i * 3, centers, v, k, out_idx + i * k, out_dist + i * k);
}

}  // namespace kd3d::kernels
