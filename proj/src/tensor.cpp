#include "vqnqs/tensor.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <cstdlib>

namespace vqnqs {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

void debug_check_finite(const Tensor& t, const char* where) {
#ifdef VQNQS_CHECK_FINITE
  for (double v : t.data) {
    if (!std::isfinite(v)) {
      std::fprintf(stderr, "non-finite value in %s\n", where);
      std::abort();
    }
  }
#else
  (void)t;
  (void)where;
#endif
}

namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 tensors");
  check(a.shape[1] == b.shape[0], "matmul inner dims mismatch");
  const int64_t m = a.shape[0], n = a.shape[1], p = b.shape[1];
  Tensor y({m, p});
  MMap(y.data.data(), m, p).noalias() =
      CMap(a.data.data(), m, n) * CMap(b.data.data(), n, p);
  flops::log(opcost::matmul(m, n, p));
  debug_check_finite(y, "matmul");
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  check(x.rank() == 2 && w.rank() == 2, "linear expects rank-2 x,w");
  check(x.shape[1] == w.shape[0], "linear inner dims mismatch");
  check(Tensor::numel(b.shape) == w.shape[1], "linear bias size mismatch");
  const int64_t m = x.shape[0], n = x.shape[1], p = w.shape[1];
  Tensor y({m, p});
  MMap ym(y.data.data(), m, p);
  ym.noalias() = CMap(x.data.data(), m, n) * CMap(w.data.data(), n, p);
  ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data.data(), p);
  flops::log(opcost::linear(m, n, p));
  debug_check_finite(y, "linear");
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  check(x.rank() == 2, "layer_norm expects rank-2 input");
  const int64_t m = x.shape[0], n = x.shape[1];
  check(Tensor::numel(gamma.shape) == n && Tensor::numel(beta.shape) == n,
        "layer_norm affine size mismatch");
  Tensor y({m, n});
  for (int64_t r = 0; r < m; ++r) {
    const double* xr = x.row_ptr(r);
    double mean = 0.0;
    for (int64_t c = 0; c < n; ++c) mean += xr[c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t c = 0; c < n; ++c) {
      const double d = xr[c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    double* yr = y.row_ptr(r);
    for (int64_t c = 0; c < n; ++c)
      yr[c] = (xr[c] - mean) * rstd * gamma[c] + beta[c];
  }
  flops::log(opcost::layer_norm(m, n));
  debug_check_finite(y, "layer_norm");
  return y;
}

Tensor softmax_rows(const Tensor& x) {
  check(x.rank() == 2, "softmax expects rank-2 input");
  const int64_t m = x.shape[0], n = x.shape[1];
  Tensor y({m, n});
  for (int64_t r = 0; r < m; ++r) {
    const double* xr = x.row_ptr(r);
    double* yr = y.row_ptr(r);
    double mx = xr[0];
    for (int64_t c = 1; c < n; ++c) mx = std::max(mx, xr[c]);
    double sum = 0.0;
    for (int64_t c = 0; c < n; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      sum += yr[c];
    }
    const double inv = 1.0 / sum;
    for (int64_t c = 0; c < n; ++c) yr[c] *= inv;
  }
  flops::log(opcost::softmax(m, n));
  debug_check_finite(y, "softmax_rows");
  return y;
}

Tensor log_softmax_rows(const Tensor& x) {
  check(x.rank() == 2, "log_softmax expects rank-2 input");
  const int64_t m = x.shape[0], n = x.shape[1];
  Tensor y({m, n});
  for (int64_t r = 0; r < m; ++r) {
    const double* xr = x.row_ptr(r);
    double* yr = y.row_ptr(r);
    double mx = xr[0];
    for (int64_t c = 1; c < n; ++c) mx = std::max(mx, xr[c]);
    double sum = 0.0;
    for (int64_t c = 0; c < n; ++c) sum += std::exp(xr[c] - mx);
    const double lse = mx + std::log(sum);
    for (int64_t c = 0; c < n; ++c) yr[c] = xr[c] - lse;
  }
  flops::log(opcost::log_softmax(m, n));
  debug_check_finite(y, "log_softmax_rows");
  return y;
}

double gelu_scalar(double v) {
  // tanh approximation
  const double c = 0.7978845608028654;  // sqrt(2/pi)
  const double u = c * (v + 0.044715 * v * v * v);
  return 0.5 * v * (1.0 + std::tanh(u));
}

Tensor gelu(const Tensor& x) {
  Tensor y(x.shape);
  for (int64_t i = 0; i < x.size(); ++i) y.data[i] = gelu_scalar(x.data[i]);
  flops::log(opcost::gelu(x.size()));
  debug_check_finite(y, "gelu");
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check(a.same_shape(b), "add shape mismatch");
  Tensor y(a.shape);
  for (int64_t i = 0; i < a.size(); ++i) y.data[i] = a.data[i] + b.data[i];
  flops::log(opcost::add(a.size()));
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.same_shape(b), "mul shape mismatch");
  Tensor y(a.shape);
  for (int64_t i = 0; i < a.size(); ++i) y.data[i] = a.data[i] * b.data[i];
  flops::log(opcost::mul(a.size()));
  return y;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2 && a.shape[0] == b.shape[0],
        "concat_rows expects matching row counts");
  Tensor y({a.shape[0], a.shape[1] + b.shape[1]});
  for (int64_t r = 0; r < a.shape[0]; ++r) {
    double* yr = y.row_ptr(r);
    const double* ar = a.row_ptr(r);
    const double* br = b.row_ptr(r);
    for (int64_t c = 0; c < a.shape[1]; ++c) yr[c] = ar[c];
    for (int64_t c = 0; c < b.shape[1]; ++c) yr[a.shape[1] + c] = br[c];
  }
  return y;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  check(table.rank() == 2, "embedding table must be rank-2");
  const int64_t d = table.shape[1];
  Tensor y({static_cast<int64_t>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    check(ids[i] >= 0 && ids[i] < table.shape[0], "embedding id out of range");
    const double* src = table.row_ptr(ids[i]);
    double* dst = y.row_ptr(static_cast<int64_t>(i));
    for (int64_t c = 0; c < d; ++c) dst[c] = src[c];
  }
  return y;
}

Tensor mean_pool_rows(const Tensor& x) {
  check(x.rank() == 2, "mean_pool expects rank-2 input");
  const int64_t t = x.shape[0], d = x.shape[1];
  check(t > 0, "mean_pool over empty tensor");
  Tensor y({1, d});
  for (int64_t r = 0; r < t; ++r) {
    const double* xr = x.row_ptr(r);
    for (int64_t c = 0; c < d; ++c) y.data[c] += xr[c];
  }
  const double inv = 1.0 / static_cast<double>(t);
  for (int64_t c = 0; c < d; ++c) y.data[c] *= inv;
  flops::log(opcost::mean_pool(t, d));
  return y;
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        Mask mask) {
  check(q.same_shape(k) && q.same_shape(v), "attention q/k/v shape mismatch");
  check(q.rank() == 2, "attention expects rank-2 inputs");
  const int64_t t = q.shape[0], dh = q.shape[1];
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  RowMat scores = CMap(q.data.data(), t, dh) *
                  CMap(k.data.data(), t, dh).transpose();
  scores *= scale;
  if (mask == Mask::causal) {
    for (int64_t r = 0; r < t; ++r)
      for (int64_t c = r + 1; c < t; ++c) scores(r, c) = -1e30;
  }
  // row softmax with max subtraction
  for (int64_t r = 0; r < t; ++r) {
    double mx = scores.row(r).maxCoeff();
    double sum = 0.0;
    for (int64_t c = 0; c < t; ++c) {
      scores(r, c) = std::exp(scores(r, c) - mx);
      sum += scores(r, c);
    }
    scores.row(r) /= sum;
  }
  Tensor y({t, dh});
  MMap(y.data.data(), t, dh).noalias() = scores * CMap(v.data.data(), t, dh);
  {
    flops::ClassScope cls(flops::Class::Attention);
    flops::log(opcost::attention_head(t, dh));
  }
  debug_check_finite(y, "masked_attention");
  return y;
}

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           int64_t batch, int64_t seq_len, int n_heads,
                           Mask mask) {
  check(q.same_shape(k) && q.same_shape(v), "attention q/k/v shape mismatch");
  check(q.shape[0] == batch * seq_len, "attention rows != batch*seq_len");
  const int64_t d = q.shape[1];
  check(d % n_heads == 0, "model width not divisible by head count");
  const int64_t dh = d / n_heads;
  Tensor y({batch * seq_len, d});

  Tensor qh({seq_len, dh}), kh({seq_len, dh}), vh({seq_len, dh});
  for (int64_t b = 0; b < batch; ++b) {
    for (int h = 0; h < n_heads; ++h) {
      const int64_t off = h * dh;
      for (int64_t r = 0; r < seq_len; ++r) {
        const int64_t src = (b * seq_len + r);
        for (int64_t c = 0; c < dh; ++c) {
          qh.at(r, c) = q.at(src, off + c);
          kh.at(r, c) = k.at(src, off + c);
          vh.at(r, c) = v.at(src, off + c);
        }
      }
      Tensor out = masked_attention(qh, kh, vh, mask);
      for (int64_t r = 0; r < seq_len; ++r)
        for (int64_t c = 0; c < dh; ++c)
          y.at(b * seq_len + r, off + c) = out.at(r, c);
    }
  }
  return y;
}

}  // namespace kernels

}  // namespace vqnqs
