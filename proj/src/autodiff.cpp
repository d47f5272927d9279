#include "vqnqs/autodiff.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <memory>

#include "vqnqs/flops.hpp"

namespace vqnqs::ad {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

namespace {
CMap cmap(const Tensor& t) { return CMap(t.data.data(), t.rows(), t.cols()); }
MMap mmap(Tensor& t) { return MMap(t.data.data(), t.rows(), t.cols()); }
}  // namespace

Graph::Id Graph::push(Tensor value, bool requires_grad,
                      std::function<void(Graph&, Id)> backprop) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

Tensor& Graph::ensure_grad(Id id) {
  Node& n = nodes_[id];
  if (!n.grad_alive) {
    n.grad = Tensor::zeros(n.value.shape);
    n.grad_alive = true;
  }
  return n.grad;
}

Graph::Id Graph::constant(Tensor v) { return push(std::move(v), false, {}); }

Graph::Id Graph::param(Parameter& p) {
  Parameter* pp = &p;
  return push(p.value, true, [pp](Graph& g, Id self) {
    const Tensor& gr = g.nodes_[self].grad;
    for (int64_t i = 0; i < gr.size(); ++i) pp->grad.data[i] += gr.data[i];
  });
}

Graph::Id Graph::matmul(Id a, Id b) {
  Tensor y = kernels::matmul(nodes_[a].value, nodes_[b].value);
  bool req = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(y), req, [a, b](Graph& g, Id self) {
    const Tensor& gy = g.nodes_[self].grad;
    const Tensor& av = g.nodes_[a].value;
    const Tensor& bv = g.nodes_[b].value;
    if (g.nodes_[a].requires_grad)
      mmap(g.ensure_grad(a)).noalias() += cmap(gy) * cmap(bv).transpose();
    if (g.nodes_[b].requires_grad)
      mmap(g.ensure_grad(b)).noalias() += cmap(av).transpose() * cmap(gy);
  });
}

Graph::Id Graph::linear(Id x, Id w, Id b) {
  Tensor y = kernels::linear(nodes_[x].value, nodes_[w].value, nodes_[b].value);
  bool req = nodes_[x].requires_grad || nodes_[w].requires_grad ||
             nodes_[b].requires_grad;
  return push(std::move(y), req, [x, w, b](Graph& g, Id self) {
    const Tensor& gy = g.nodes_[self].grad;
    const Tensor& xv = g.nodes_[x].value;
    const Tensor& wv = g.nodes_[w].value;
    if (g.nodes_[x].requires_grad)
      mmap(g.ensure_grad(x)).noalias() += cmap(gy) * cmap(wv).transpose();
    if (g.nodes_[w].requires_grad)
      mmap(g.ensure_grad(w)).noalias() += cmap(xv).transpose() * cmap(gy);
    if (g.nodes_[b].requires_grad) {
      Tensor& gb = g.ensure_grad(b);
      for (int64_t r = 0; r < gy.rows(); ++r)
        for (int64_t c = 0; c < gy.cols(); ++c) gb[c] += gy.at(r, c);
    }
  });
}

Graph::Id Graph::layer_norm(Id x, Id gamma, Id beta, double eps) {
  Tensor y = kernels::layer_norm(nodes_[x].value, nodes_[gamma].value,
                                 nodes_[beta].value, eps);
  bool req = nodes_[x].requires_grad || nodes_[gamma].requires_grad ||
             nodes_[beta].requires_grad;
  return push(std::move(y), req, [x, gamma, beta, eps](Graph& g, Id self) {
    const Tensor& gy = g.nodes_[self].grad;
    const Tensor& xv = g.nodes_[x].value;
    const Tensor& gv = g.nodes_[gamma].value;
    const int64_t m = xv.rows(), n = xv.cols();
    const double invn = 1.0 / static_cast<double>(n);
    Tensor* gx = g.nodes_[x].requires_grad ? &g.ensure_grad(x) : nullptr;
    Tensor* gg = g.nodes_[gamma].requires_grad ? &g.ensure_grad(gamma) : nullptr;
    Tensor* gb = g.nodes_[beta].requires_grad ? &g.ensure_grad(beta) : nullptr;
    std::vector<double> xhat(n), ghat(n);
    for (int64_t r = 0; r < m; ++r) {
      const double* xr = xv.row_ptr(r);
      const double* gyr = gy.row_ptr(r);
      double mean = 0.0;
      for (int64_t c = 0; c < n; ++c) mean += xr[c];
      mean *= invn;
      double var = 0.0;
      for (int64_t c = 0; c < n; ++c) {
        const double d = xr[c] - mean;
        var += d * d;
      }
      var *= invn;
      const double rstd = 1.0 / std::sqrt(var + eps);
      double gmean = 0.0, gxmean = 0.0;
      for (int64_t c = 0; c < n; ++c) {
        xhat[c] = (xr[c] - mean) * rstd;
        ghat[c] = gyr[c] * gv[c];
        gmean += ghat[c];
        gxmean += ghat[c] * xhat[c];
      }
      gmean *= invn;
      gxmean *= invn;
      if (gx) {
        double* gxr = gx->row_ptr(r);
        for (int64_t c = 0; c < n; ++c)
          gxr[c] += rstd * (ghat[c] - gmean - xhat[c] * gxmean);
      }
      if (gg)
        for (int64_t c = 0; c < n; ++c) (*gg)[c] += gyr[c] * xhat[c];
      if (gb)
        for (int64_t c = 0; c < n; ++c) (*gb)[c] += gyr[c];
    }
  });
}

Graph::Id Graph::softmax_rows(Id x) {
  Tensor y = kernels::softmax_rows(nodes_[x].value);
  return push(std::move(y), nodes_[x].requires_grad, [x](Graph& g, Id self) {
    if (!g.nodes_[x].requires_grad) return;
    const Tensor& y = g.nodes_[self].value;
    const Tensor& gy = g.nodes_[self].grad;
    Tensor& gx = g.ensure_grad(x);
    for (int64_t r = 0; r < y.rows(); ++r) {
      double dotv = 0.0;
      for (int64_t c = 0; c < y.cols(); ++c) dotv += gy.at(r, c) * y.at(r, c);
      for (int64_t c = 0; c < y.cols(); ++c)
        gx.at(r, c) += y.at(r, c) * (gy.at(r, c) - dotv);
    }
  });
}

Graph::Id Graph::log_softmax_rows(Id x) {
  Tensor y = kernels::log_softmax_rows(nodes_[x].value);
  return push(std::move(y), nodes_[x].requires_grad, [x](Graph& g, Id self) {
    if (!g.nodes_[x].requires_grad) return;
    const Tensor& y = g.nodes_[self].value;
    const Tensor& gy = g.nodes_[self].grad;
    Tensor& gx = g.ensure_grad(x);
    for (int64_t r = 0; r < y.rows(); ++r) {
      double gsum = 0.0;
      for (int64_t c = 0; c < y.cols(); ++c) gsum += gy.at(r, c);
      for (int64_t c = 0; c < y.cols(); ++c)
        gx.at(r, c) += gy.at(r, c) - std::exp(y.at(r, c)) * gsum;
    }
  });
}

Graph::Id Graph::gelu(Id x) {
  Tensor y = kernels::gelu(nodes_[x].value);
  return push(std::move(y), nodes_[x].requires_grad, [x](Graph& g, Id self) {
    if (!g.nodes_[x].requires_grad) return;
    const Tensor& xv = g.nodes_[x].value;
    const Tensor& gy = g.nodes_[self].grad;
    Tensor& gx = g.ensure_grad(x);
    const double c = 0.7978845608028654;
    for (int64_t i = 0; i < xv.size(); ++i) {
      const double v = xv.data[i];
      const double u = c * (v + 0.044715 * v * v * v);
      const double th = std::tanh(u);
      const double dudv = c * (1.0 + 3.0 * 0.044715 * v * v);
      gx.data[i] += gy.data[i] *
                    (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dudv);
    }
  });
}

Graph::Id Graph::add(Id a, Id b) {
  Tensor y = kernels::add(nodes_[a].value, nodes_[b].value);
  bool req = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(y), req, [a, b](Graph& g, Id self) {
    const Tensor& gy = g.nodes_[self].grad;
    if (g.nodes_[a].requires_grad) {
      Tensor& ga = g.ensure_grad(a);
      for (int64_t i = 0; i < gy.size(); ++i) ga.data[i] += gy.data[i];
    }
    if (g.nodes_[b].requires_grad) {
      Tensor& gb = g.ensure_grad(b);
      for (int64_t i = 0; i < gy.size(); ++i) gb.data[i] += gy.data[i];
    }
  });
}

Graph::Id Graph::sub(Id a, Id b) {
  check(nodes_[a].value.same_shape(nodes_[b].value), "sub shape mismatch");
  Tensor y(nodes_[a].value.shape);
  for (int64_t i = 0; i < y.size(); ++i)
    y.data[i] = nodes_[a].value.data[i] - nodes_[b].value.data[i];
  flops::log(opcost::add(y.size()));
  bool req = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(y), req, [a, b](Graph& g, Id self) {
    const Tensor& gy = g.nodes_[self].grad;
    if (g.nodes_[a].requires_grad) {
      Tensor& ga = g.ensure_grad(a);
      for (int64_t i = 0; i < gy.size(); ++i) ga.data[i] += gy.data[i];
    }
    if (g.nodes_[b].requires_grad) {
      Tensor& gb = g.ensure_grad(b);
      for (int64_t i = 0; i < gy.size(); ++i) gb.data[i] -= gy.data[i];
    }
  });
}

Graph::Id Graph::mul(Id a, Id b) {
  Tensor y = kernels::mul(nodes_[a].value, nodes_[b].value);
  bool req = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(y), req, [a, b](Graph& g, Id self) {
    const Tensor& gy = g.nodes_[self].grad;
    const Tensor& av = g.nodes_[a].value;
    const Tensor& bv = g.nodes_[b].value;
    if (g.nodes_[a].requires_grad) {
      Tensor& ga = g.ensure_grad(a);
      for (int64_t i = 0; i < gy.size(); ++i)
        ga.data[i] += gy.data[i] * bv.data[i];
    }
    if (g.nodes_[b].requires_grad) {
      Tensor& gb = g.ensure_grad(b);
      for (int64_t i = 0; i < gy.size(); ++i)
        gb.data[i] += gy.data[i] * av.data[i];
    }
  });
}

Graph::Id Graph::scale(Id a, double c) {
  Tensor y(nodes_[a].value.shape);
  for (int64_t i = 0; i < y.size(); ++i) y.data[i] = nodes_[a].value.data[i] * c;
  flops::log(opcost::mul(y.size()));
  return push(std::move(y), nodes_[a].requires_grad, [a, c](Graph& g, Id self) {
    if (!g.nodes_[a].requires_grad) return;
    const Tensor& gy = g.nodes_[self].grad;
    Tensor& ga = g.ensure_grad(a);
    for (int64_t i = 0; i < gy.size(); ++i) ga.data[i] += gy.data[i] * c;
  });
}

Graph::Id Graph::exp(Id a) {
  Tensor y(nodes_[a].value.shape);
  for (int64_t i = 0; i < y.size(); ++i)
    y.data[i] = std::exp(nodes_[a].value.data[i]);
  flops::log(y.size());
  return push(std::move(y), nodes_[a].requires_grad, [a](Graph& g, Id self) {
    if (!g.nodes_[a].requires_grad) return;
    const Tensor& y = g.nodes_[self].value;
    const Tensor& gy = g.nodes_[self].grad;
    Tensor& ga = g.ensure_grad(a);
    for (int64_t i = 0; i < gy.size(); ++i)
      ga.data[i] += gy.data[i] * y.data[i];
  });
}

Graph::Id Graph::cos(Id a) {
  Tensor y(nodes_[a].value.shape);
  for (int64_t i = 0; i < y.size(); ++i)
    y.data[i] = std::cos(nodes_[a].value.data[i]);
  flops::log(y.size());
  return push(std::move(y), nodes_[a].requires_grad, [a](Graph& g, Id self) {
    if (!g.nodes_[a].requires_grad) return;
    const Tensor& xv = g.nodes_[a].value;
    const Tensor& gy = g.nodes_[self].grad;
    Tensor& ga = g.ensure_grad(a);
    for (int64_t i = 0; i < gy.size(); ++i)
      ga.data[i] -= gy.data[i] * std::sin(xv.data[i]);
  });
}

Graph::Id Graph::sin(Id a) {
  Tensor y(nodes_[a].value.shape);
  for (int64_t i = 0; i < y.size(); ++i)
    y.data[i] = std::sin(nodes_[a].value.data[i]);
  flops::log(y.size());
  return push(std::move(y), nodes_[a].requires_grad, [a](Graph& g, Id self) {
    if (!g.nodes_[a].requires_grad) return;
    const Tensor& xv = g.nodes_[a].value;
    const Tensor& gy = g.nodes_[self].grad;
    Tensor& ga = g.ensure_grad(a);
    for (int64_t i = 0; i < gy.size(); ++i)
      ga.data[i] += gy.data[i] * std::cos(xv.data[i]);
  });
}

Graph::Id Graph::sum_all(Id a) {
  Tensor y({1, 1});
  for (double v : nodes_[a].value.data) y.data[0] += v;
  flops::log(nodes_[a].value.size());
  return push(std::move(y), nodes_[a].requires_grad, [a](Graph& g, Id self) {
    if (!g.nodes_[a].requires_grad) return;
    const double gy = g.nodes_[self].grad.data[0];
    Tensor& ga = g.ensure_grad(a);
    for (int64_t i = 0; i < ga.size(); ++i) ga.data[i] += gy;
  });
}

Graph::Id Graph::dot(Id a, Id b) {
  check(nodes_[a].value.same_shape(nodes_[b].value), "dot shape mismatch");
  Tensor y({1, 1});
  for (int64_t i = 0; i < nodes_[a].value.size(); ++i)
    y.data[0] += nodes_[a].value.data[i] * nodes_[b].value.data[i];
  flops::log(2 * nodes_[a].value.size());
  bool req = nodes_[a].requires_grad || nodes_[b].requires_grad;
  return push(std::move(y), req, [a, b](Graph& g, Id self) {
    const double gy = g.nodes_[self].grad.data[0];
    const Tensor& av = g.nodes_[a].value;
    const Tensor& bv = g.nodes_[b].value;
    if (g.nodes_[a].requires_grad) {
      Tensor& ga = g.ensure_grad(a);
      for (int64_t i = 0; i < ga.size(); ++i) ga.data[i] += gy * bv.data[i];
    }
    if (g.nodes_[b].requires_grad) {
      Tensor& gb = g.ensure_grad(b);
      for (int64_t i = 0; i < gb.size(); ++i) gb.data[i] += gy * av.data[i];
    }
  });
}

Graph::Id Graph::attention(Id q, Id k, Id v, int64_t batch, int64_t seq_len,
                           int n_heads, Mask mask) {
  const Tensor& qv = nodes_[q].value;
  const Tensor& kv = nodes_[k].value;
  const Tensor& vv = nodes_[v].value;
  check(qv.same_shape(kv) && qv.same_shape(vv), "attention shape mismatch");
  check(qv.rows() == batch * seq_len, "attention rows != batch*seq_len");
  const int64_t d = qv.cols();
  check(d % n_heads == 0, "model width not divisible by head count");
  const int64_t dh = d / n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs cached for the backward pass: [(batch*heads*T) x T]
  auto probs = std::make_shared<Tensor>(
      Tensor::zeros({batch * n_heads * seq_len, seq_len}));
  Tensor y({batch * seq_len, d});

  RowMat qh(seq_len, dh), kh(seq_len, dh), vh(seq_len, dh);
  for (int64_t b = 0; b < batch; ++b) {
    for (int h = 0; h < n_heads; ++h) {
      const int64_t off = h * dh;
      for (int64_t r = 0; r < seq_len; ++r)
        for (int64_t c = 0; c < dh; ++c) {
          qh(r, c) = qv.at(b * seq_len + r, off + c);
          kh(r, c) = kv.at(b * seq_len + r, off + c);
          vh(r, c) = vv.at(b * seq_len + r, off + c);
        }
      RowMat s = qh * kh.transpose() * sc;
      if (mask == Mask::causal)
        for (int64_t r = 0; r < seq_len; ++r)
          for (int64_t c = r + 1; c < seq_len; ++c) s(r, c) = -1e30;
      for (int64_t r = 0; r < seq_len; ++r) {
        const double mx = s.row(r).maxCoeff();
        double sum = 0.0;
        for (int64_t c = 0; c < seq_len; ++c) {
          s(r, c) = std::exp(s(r, c) - mx);
          sum += s(r, c);
        }
        s.row(r) /= sum;
      }
      MMap(probs->row_ptr((b * n_heads + h) * seq_len), seq_len, seq_len) = s;
      RowMat out = s * vh;
      for (int64_t r = 0; r < seq_len; ++r)
        for (int64_t c = 0; c < dh; ++c)
          y.at(b * seq_len + r, off + c) = out(r, c);
    }
  }
  {
    flops::ClassScope cls(flops::Class::Attention);
    flops::log(batch * n_heads * opcost::attention_head(seq_len, dh));
  }

  bool req = nodes_[q].requires_grad || nodes_[k].requires_grad ||
             nodes_[v].requires_grad;
  return push(
      std::move(y), req,
      [q, k, v, batch, seq_len, n_heads, dh, sc, probs](Graph& g, Id self) {
        const Tensor& gy = g.nodes_[self].grad;
        const Tensor& qv = g.nodes_[q].value;
        const Tensor& kv = g.nodes_[k].value;
        const Tensor& vv = g.nodes_[v].value;
        Tensor* gq = g.nodes_[q].requires_grad ? &g.ensure_grad(q) : nullptr;
        Tensor* gk = g.nodes_[k].requires_grad ? &g.ensure_grad(k) : nullptr;
        Tensor* gv = g.nodes_[v].requires_grad ? &g.ensure_grad(v) : nullptr;
        RowMat qh(seq_len, dh), kh(seq_len, dh), vh(seq_len, dh),
            dyh(seq_len, dh);
        for (int64_t b = 0; b < batch; ++b) {
          for (int h = 0; h < n_heads; ++h) {
            const int64_t off = h * dh;
            for (int64_t r = 0; r < seq_len; ++r)
              for (int64_t c = 0; c < dh; ++c) {
                qh(r, c) = qv.at(b * seq_len + r, off + c);
                kh(r, c) = kv.at(b * seq_len + r, off + c);
                vh(r, c) = vv.at(b * seq_len + r, off + c);
                dyh(r, c) = gy.at(b * seq_len + r, off + c);
              }
            CMap p(probs->row_ptr((b * n_heads + h) * seq_len), seq_len,
                   seq_len);
            RowMat dp = dyh * vh.transpose();
            RowMat ds(seq_len, seq_len);
            for (int64_t r = 0; r < seq_len; ++r) {
              const double rowdot = (dp.row(r).array() * p.row(r).array()).sum();
              ds.row(r) =
                  (p.row(r).array() * (dp.row(r).array() - rowdot)).matrix();
            }
            if (gv) {
              RowMat dvh = p.transpose() * dyh;
              for (int64_t r = 0; r < seq_len; ++r)
                for (int64_t c = 0; c < dh; ++c)
                  gv->at(b * seq_len + r, off + c) += dvh(r, c);
            }
            if (gq) {
              RowMat dqh = ds * kh * sc;
              for (int64_t r = 0; r < seq_len; ++r)
                for (int64_t c = 0; c < dh; ++c)
                  gq->at(b * seq_len + r, off + c) += dqh(r, c);
            }
            if (gk) {
              RowMat dkh = ds.transpose() * qh * sc;
              for (int64_t r = 0; r < seq_len; ++r)
                for (int64_t c = 0; c < dh; ++c)
                  gk->at(b * seq_len + r, off + c) += dkh(r, c);
            }
          }
        }
      });
}

Graph::Id Graph::embedding(Parameter& table, const std::vector<int>& ids) {
  Tensor y = kernels::embedding_lookup(table.value, ids);
  Parameter* tp = &table;
  auto ids_copy = std::make_shared<std::vector<int>>(ids);
  return push(std::move(y), true, [tp, ids_copy](Graph& g, Id self) {
    const Tensor& gy = g.nodes_[self].grad;
    const int64_t d = gy.cols();
    for (size_t i = 0; i < ids_copy->size(); ++i) {
      double* dst = tp->grad.row_ptr((*ids_copy)[i]);
      const double* src = gy.row_ptr(static_cast<int64_t>(i));
      for (int64_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
}

Graph::Id Graph::mean_pool_seq(Id x, int64_t batch, int64_t seq_len) {
  const Tensor& xv = nodes_[x].value;
  check(xv.rows() == batch * seq_len, "mean_pool_seq rows != batch*seq_len");
  const int64_t d = xv.cols();
  Tensor y({batch, d});
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t t = 0; t < seq_len; ++t) {
      const double* xr = xv.row_ptr(b * seq_len + t);
      for (int64_t c = 0; c < d; ++c) y.at(b, c) += xr[c];
    }
    const double inv = 1.0 / static_cast<double>(seq_len);
    for (int64_t c = 0; c < d; ++c) y.at(b, c) *= inv;
  }
  flops::log(batch * opcost::mean_pool(seq_len, d));
  return push(std::move(y), nodes_[x].requires_grad,
              [x, batch, seq_len](Graph& g, Id self) {
                if (!g.nodes_[x].requires_grad) return;
                const Tensor& gy = g.nodes_[self].grad;
                Tensor& gx = g.ensure_grad(x);
                const int64_t d = gy.cols();
                const double inv = 1.0 / static_cast<double>(seq_len);
                for (int64_t b = 0; b < batch; ++b)
                  for (int64_t t = 0; t < seq_len; ++t) {
                    double* dst = gx.row_ptr(b * seq_len + t);
                    const double* src = gy.row_ptr(b);
                    for (int64_t c = 0; c < d; ++c) dst[c] += src[c] * inv;
                  }
              });
}

Graph::Id Graph::pick_sum_per_seq(Id logits, const std::vector<int>& targets,
                                  int64_t batch, int64_t seq_len) {
  const Tensor& lv = nodes_[logits].value;
  check(lv.rows() == batch * seq_len, "pick_sum rows != batch*seq_len");
  check(static_cast<int64_t>(targets.size()) == lv.rows(),
        "pick_sum targets size mismatch");
  Tensor y({batch, 1});
  for (int64_t b = 0; b < batch; ++b) {
    double s = 0.0;
    for (int64_t t = 0; t < seq_len; ++t) {
      const int64_t r = b * seq_len + t;
      check(targets[r] >= 0 && targets[r] < lv.cols(),
            "pick_sum target out of range");
      s += lv.at(r, targets[r]);
    }
    y.at(b, 0) = s;
  }
  flops::log(batch * seq_len);
  auto tg = std::make_shared<std::vector<int>>(targets);
  return push(std::move(y), nodes_[logits].requires_grad,
              [logits, tg, batch, seq_len](Graph& g, Id self) {
                if (!g.nodes_[logits].requires_grad) return;
                const Tensor& gy = g.nodes_[self].grad;
                Tensor& gl = g.ensure_grad(logits);
                for (int64_t b = 0; b < batch; ++b)
                  for (int64_t t = 0; t < seq_len; ++t) {
                    const int64_t r = b * seq_len + t;
                    gl.at(r, (*tg)[r]) += gy.at(b, 0);
                  }
              });
}

Graph::Id Graph::weighted_sum(Id x, std::vector<double> w) {
  const Tensor& xv = nodes_[x].value;
  check(xv.cols() == 1, "weighted_sum expects a column");
  check(static_cast<int64_t>(w.size()) == xv.rows(),
        "weighted_sum weight count mismatch");
  Tensor y({1, 1});
  for (int64_t r = 0; r < xv.rows(); ++r) y.data[0] += w[r] * xv.at(r, 0);
  flops::log(2 * xv.rows());
  auto wp = std::make_shared<std::vector<double>>(std::move(w));
  return push(std::move(y), nodes_[x].requires_grad,
              [x, wp](Graph& g, Id self) {
                if (!g.nodes_[x].requires_grad) return;
                const double gy = g.nodes_[self].grad.data[0];
                Tensor& gx = g.ensure_grad(x);
                for (int64_t r = 0; r < gx.rows(); ++r)
                  gx.at(r, 0) += gy * (*wp)[r];
              });
}

Graph::Id Graph::vq_quantize(Id x, Parameter& codebook, const VqOptions& opt,
                             std::vector<int>* indices_out) {
  const Tensor& xv = nodes_[x].value;
  const int64_t rows = xv.rows();
  const int64_t d = xv.cols();
  const int h = opt.heads;
  check(d % h == 0, "vq width not divisible by heads");
  const int64_t dh = d / h;
  check(codebook.value.cols() == dh, "codebook segment width mismatch");
  check(codebook.value.rows() % h == 0, "codebook rows not divisible by heads");
  const int64_t q = codebook.value.rows() / h;
  check(!opt.gumbel || opt.rng != nullptr, "gumbel selection needs an rng");

  // Selection logits cached for the surrogate backward: [rows*h x q].
  auto logits = std::make_shared<Tensor>(Tensor::zeros({rows * h, q}));
  auto picks = std::make_shared<std::vector<int>>(rows * h);
  Tensor y({rows, d});
  const Tensor& wv = codebook.value;

  for (int64_t r = 0; r < rows; ++r) {
    for (int hh = 0; hh < h; ++hh) {
      const double* xr = xv.row_ptr(r) + hh * dh;
      double* lr = logits->row_ptr(r * h + hh);
      int best = 0;
      // selection by squared distance (ties -> lowest j), so the no-grad
      // evaluation path makes bitwise-identical picks; gumbel mode selects
      // on the noisy logits instead
      double best_s2 = 1e300, best_logit = -1e300;
      for (int64_t j = 0; j < q; ++j) {
        const double* wr = wv.row_ptr(hh * q + j);
        double s2 = 0.0;
        for (int64_t c = 0; c < dh; ++c) {
          const double df = xr[c] - wr[c];
          s2 += df * df;
        }
        double logit = -std::sqrt(s2) / opt.tau;
        if (opt.gumbel) {
          const double u = opt.rng->uniform();
          logit += -std::log(-std::log(u + 1e-300) + 1e-300);
        }
        lr[j] = logit;
        if (opt.gumbel ? (logit > best_logit) : (s2 < best_s2)) {
          best_s2 = s2;
          best_logit = logit;
          best = static_cast<int>(j);
        }
      }
      (*picks)[r * h + hh] = best;
      const double* wr = wv.row_ptr(hh * q + best);
      double* yr = y.row_ptr(r) + hh * dh;
      for (int64_t c = 0; c < dh; ++c) yr[c] = wr[c];
    }
  }
  {
    flops::ClassScope cls(flops::Class::VqDistance);
    flops::log(rows * opcost::vq_row(h, q, dh));
  }
  if (indices_out) *indices_out = *picks;

  Parameter* cb = &codebook;
  const double tau = opt.tau;
  bool req = nodes_[x].requires_grad;  // codebook always accumulates
  return push(
      std::move(y), true,
      [x, cb, logits, picks, h, dh, q, tau, req](Graph& g, Id self) {
        const Tensor& gy = g.nodes_[self].grad;
        const Tensor& xv = g.nodes_[x].value;
        const Tensor& wv = cb->value;
        Tensor* gx = req ? &g.ensure_grad(x) : nullptr;
        const int64_t rows = xv.rows();
        std::vector<double> p(q), a(q);
        for (int64_t r = 0; r < rows; ++r) {
          for (int hh = 0; hh < h; ++hh) {
            const double* lr = logits->row_ptr(r * h + hh);
            const double* xr = xv.row_ptr(r) + hh * dh;
            const double* gr = gy.row_ptr(r) + hh * dh;
            // p = softmax(selection logits)
            double mx = lr[0];
            for (int64_t j = 1; j < q; ++j) mx = std::max(mx, lr[j]);
            double sum = 0.0;
            for (int64_t j = 0; j < q; ++j) {
              p[j] = std::exp(lr[j] - mx);
              sum += p[j];
            }
            for (int64_t j = 0; j < q; ++j) p[j] /= sum;
            // a_j = g . W_j ; sbar = sum_j p_j a_j
            double sbar = 0.0;
            for (int64_t j = 0; j < q; ++j) {
              const double* wr = wv.row_ptr(hh * q + j);
              double acc = 0.0;
              for (int64_t c = 0; c < dh; ++c) acc += gr[c] * wr[c];
              a[j] = acc;
              sbar += p[j] * acc;
            }
            for (int64_t j = 0; j < q; ++j) {
              const double* wr = wv.row_ptr(hh * q + j);
              double* gw = cb->grad.row_ptr(hh * q + j);
              // direct surrogate mixture term
              for (int64_t c = 0; c < dh; ++c) gw[c] += p[j] * gr[c];
              // distance chain: dL/dS_j through logit S_j = -||x-W_j||/tau
              const double cj = p[j] * (a[j] - sbar);
              double dist = 0.0;
              for (int64_t c = 0; c < dh; ++c) {
                const double df = xr[c] - wr[c];
                dist += df * df;
              }
              dist = std::sqrt(dist);
              if (dist < 1e-12) continue;
              const double f = cj / (tau * dist);
              for (int64_t c = 0; c < dh; ++c) {
                const double df = xr[c] - wr[c];
                // dS_j/dx = -(x-W_j)/(tau*dist), dS_j/dW_j = +(x-W_j)/(tau*dist)
                if (gx) gx->row_ptr(r)[hh * dh + c] += -f * df;
                gw[c] += f * df;
              }
            }
          }
        }
      });
}

void Graph::backward(Id root) {
  check(root >= 0 && root < static_cast<Id>(nodes_.size()), "bad root id");
  check(nodes_[root].value.size() == 1, "backward root must be scalar");
  for (Node& n : nodes_) {
    n.grad_alive = false;
    n.grad = Tensor();
  }
  ensure_grad(root).data[0] = 1.0;
  for (Id i = root; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.grad_alive || !n.backprop) continue;
    n.backprop(*this, i);
  }
}

}  // namespace vqnqs::ad
