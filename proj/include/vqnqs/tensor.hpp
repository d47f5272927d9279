#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

#include "vqnqs/common.hpp"
#include "vqnqs/flops.hpp"
#include "vqnqs/rng.hpp"

namespace vqnqs {

// Dense row-major tensor of 64-bit reals. Rank is kept general but the
// kernels below operate on rank-2 views; batched sequences are stored
// flattened as [B*T x d] with the sequence structure passed alongside.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel(shape)), 0.0);
  }

  static int64_t numel(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int64_t> s, double v) {
    Tensor t(std::move(s));
    for (double& x : t.data) x = v;
    return t;
  }

  static Tensor randn(std::vector<int64_t> s, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(s));
    for (double& x : t.data) x = scale * rng.gaussian();
    return t;
  }

  static Tensor from_rows(const std::vector<std::vector<double>>& rows) {
    Tensor t({static_cast<int64_t>(rows.size()),
              static_cast<int64_t>(rows.empty() ? 0 : rows[0].size())});
    for (size_t r = 0; r < rows.size(); ++r)
      for (size_t c = 0; c < rows[r].size(); ++c)
        t.data[r * rows[r].size() + c] = rows[r][c];
    return t;
  }

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
  int64_t cols() const { return rank() < 2 ? 1 : shape[1]; }

  double& at(int64_t r, int64_t c) { return data[r * cols() + c]; }
  double at(int64_t r, int64_t c) const { return data[r * cols() + c]; }
  double& operator[](int64_t i) { return data[i]; }
  double operator[](int64_t i) const { return data[i]; }

  const double* row_ptr(int64_t r) const { return data.data() + r * cols(); }
  double* row_ptr(int64_t r) { return data.data() + r * cols(); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  void fill(double v) {
    for (double& x : data) x = v;
  }
};

void debug_check_finite(const Tensor& t, const char* where);

enum class Mask { none, causal };

// Analytic FLOP cost of each kernel as a function of shapes. Convention:
// multiply-add counts as 2, comparisons and unary transcendentals as 1.
// These formulas are the single source the kernels log from; measurement
// tests rebuild expected totals from them.
namespace opcost {
constexpr int64_t matmul(int64_t m, int64_t n, int64_t p) { return 2 * m * n * p; }
constexpr int64_t linear(int64_t m, int64_t n, int64_t p) {
  return 2 * m * n * p + m * p;
}
constexpr int64_t layer_norm(int64_t m, int64_t n) { return m * (7 * n + 5); }
constexpr int64_t softmax(int64_t m, int64_t n) { return 5 * m * n; }
constexpr int64_t log_softmax(int64_t m, int64_t n) { return m * (5 * n + 1); }
constexpr int64_t gelu(int64_t numel) { return 10 * numel; }
constexpr int64_t add(int64_t numel) { return numel; }
constexpr int64_t mul(int64_t numel) { return numel; }
constexpr int64_t mean_pool(int64_t t, int64_t d) { return d * (t + 1); }
// One masked attention head over a length-T sequence: scores, scale+mask,
// softmax, and the value mix.
constexpr int64_t attention_head(int64_t t, int64_t dh) {
  return 4 * t * t * dh + 6 * t * t;
}
// VQ distance block for one input row: H heads, Q codes, segment width dh.
constexpr int64_t vq_row(int64_t heads, int64_t q, int64_t dh) {
  return heads * (q * (3 * dh + 2) + q);
}
}  // namespace opcost

// Forward kernels. Each logs its analytic cost to the active FlopLedger.
namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b);
// y = x * w + b (bias broadcast over rows); x:[m x n], w:[n x p], b:[p]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps);
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
Tensor mean_pool_rows(const Tensor& x);  // [T x d] -> [1 x d]
// Single attention head: q,k,v are [T x dh].
Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        Mask mask);
// Multi-head attention over B sequences of length T, flattened [B*T x d].
// Splits d into n_heads segments and runs masked_attention per (seq, head).
Tensor multihead_attention(const Tensor& qkv_q, const Tensor& qkv_k,
                           const Tensor& qkv_v, int64_t batch, int64_t seq_len,
                           int n_heads, Mask mask);

}  // namespace kernels

}  // namespace vqnqs
