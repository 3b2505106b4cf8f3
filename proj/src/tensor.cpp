#include "grecall/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace grecall::nn {

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

namespace {

// C(m,n) = A(m,k) B(k,n), ikj order so the inner loop streams both B and C.
void mm_nn(const double* a, const double* b, double* y, int64_t m, int64_t k,
           int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* yi = y + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) yi[j] += av * bp[j];
    }
  }
}

// C(m,n) = A(m,k) B(n,k)^T: dot products of contiguous rows.
void mm_nt(const double* a, const double* b, double* y, int64_t m, int64_t k,
           int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* yi = y + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      yi[j] += acc;
    }
  }
}

// C(m,n) = A(k,m)^T B(k,n), pkj order keeps B and C streaming.
void mm_tn(const double* a, const double* b, double* y, int64_t m, int64_t k,
           int64_t n) {
  for (int64_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      double av = ap[i];
      if (av == 0.0) continue;
      double* yi = y + i * n;
      for (int64_t j = 0; j < n; ++j) yi[j] += av * bp[j];
    }
  }
}

}  // namespace

void matmul(const double* a, const double* b, double* y, int64_t m, int64_t k,
            int64_t n, bool trans_a, bool trans_b, bool accumulate) {
  if (!accumulate) std::memset(y, 0, sizeof(double) * static_cast<size_t>(m * n));
  if (!trans_a && !trans_b) {
    mm_nn(a, b, y, m, k, n);
  } else if (!trans_a && trans_b) {
    mm_nt(a, b, y, m, k, n);
  } else if (trans_a && !trans_b) {
    mm_tn(a, b, y, m, k, n);
  } else {
    // A^T B^T never shows up in these models; compose via explicit loops.
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int64_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        y[i * n + j] += acc;
      }
  }
}

}  // namespace grecall::nn
