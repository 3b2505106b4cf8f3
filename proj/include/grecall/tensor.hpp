#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace grecall::nn {

// Dense row-major double tensor. Doubles throughout: the finite-difference
// oracles need the headroom and the models here are small enough not to care.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel(shape)), 0.0);
  }
  Tensor(std::vector<int> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {}

  static int64_t numel(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }
  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }
  // Rows/cols of the trailing matrix view: all leading dims collapse to rows.
  int64_t rows() const { return size() / cols(); }
  int64_t cols() const { return shape.empty() ? 1 : shape.back(); }

  double& at(int64_t i) { return data[static_cast<size_t>(i)]; }
  const double& at(int64_t i) const { return data[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  std::string shape_str() const;
  bool all_finite() const;
};

// y += or = A(m,k) * B(k,n), with optional transposes on logical A/B.
// A and B point at row-major storage of their *untransposed* layouts.
void matmul(const double* a, const double* b, double* y, int64_t m, int64_t k,
            int64_t n, bool trans_a, bool trans_b, bool accumulate);

}  // namespace grecall::nn
