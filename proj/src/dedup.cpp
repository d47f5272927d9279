#include "vqnqs/dedup.hpp"

#include <cmath>
#include <cstring>
#include <unordered_map>

namespace vqnqs {

namespace {

constexpr uint64_t kInputSalt = 0x76716e7173696e70ULL;  // decoder input layer
constexpr uint64_t kPhaseSalt = 0x76716e7170686173ULL;  // phase input layer

uint64_t op_tag(uint64_t stage, uint64_t block, uint64_t op) {
  return mix64((stage << 32) | (block << 8) | op);
}

bool g_merge_verify = false;

int diff_sites(const SpinConfiguration& a, const SpinConfiguration& b) {
  int d = 0;
  for (size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

}  // namespace

void set_merge_verification(bool on) { g_merge_verify = on; }
bool merge_verification() { return g_merge_verify; }

Tensor CompressedBatch::expand() const {
  const int64_t w = V.cols();
  Tensor out({K * T, w});
  for (int64_t l = 0; l < K * T; ++l)
    std::memcpy(out.row_ptr(l), V.row_ptr(I[l]), sizeof(double) * w);
  return out;
}

CompressedBatch compress_inputs(const VqTransformer& model,
                                const std::vector<SpinConfiguration>& configs,
                                const SpinConfiguration& base) {
  const ModelConfig& cfg = model.cfg;
  const int64_t K = static_cast<int64_t>(configs.size());
  const int64_t T = cfg.seq_len();
  const int bos = cfg.vocab();
  check(K >= 1, "empty connected set");

  CompressedBatch b;
  b.K = K;
  b.T = T;
  b.I.resize(K * T);

  std::vector<int> row_token;  // unique-row input token, parallel to ids
  std::unordered_map<uint64_t, int32_t> seen;
  seen.reserve(2 * K * T);
  for (int64_t k = 0; k < K; ++k) {
    if (diff_sites(configs[k], base) > 2)
      throw UsageError("connected configuration differs in more than 2 sites");
    const std::vector<int> toks = model.tokenize(configs[k]);
    for (int64_t p = 0; p < T; ++p) {
      const int tok = p == 0 ? bos : toks[p - 1];
      const uint64_t key =
          hash_combine(hash_combine(kInputSalt, uint64_t(p)), uint64_t(tok));
      auto [it, fresh] = seen.emplace(key, int32_t(b.ids.size()));
      if (fresh) {
        b.ids.push_back(key);
        b.pos.push_back(int32_t(p));
        row_token.push_back(tok);
      }
      if (g_merge_verify &&
          (b.pos[it->second] != p || row_token[it->second] != tok))
        throw NumericError("identity key collision at the input layer");
      b.I[k * T + p] = it->second;
    }
  }

  const int64_t U = static_cast<int64_t>(b.ids.size());
  const int64_t d = cfg.d_hidden;
  b.V = Tensor({U, d});
  {
    flops::PerLocationScope meter(K * T, U, false);
    for (int64_t u = 0; u < U; ++u) {
      const double* te = model.tok_embed.value.row_ptr(row_token[u]);
      const double* pe = model.pos_embed.value.row_ptr(b.pos[u]);
      double* out = b.V.row_ptr(u);
      for (int64_t c = 0; c < d; ++c) out[c] = te[c] + pe[c];
    }
    flops::log(U * d);
  }
  return b;
}

CompressedBatch apply_per_location(const PerLocationOp& op,
                                   const CompressedBatch& b) {
  switch (op.kind) {
    case LocOp::embed:
    case LocOp::layer_norm:
    case LocOp::linear:
    case LocOp::continuation:
    case LocOp::output_head:
      break;
    default:
      throw UsageError("op is not registered as location-independent");
  }
  check(static_cast<bool>(op.fn), "per-location op has no kernel");

  CompressedBatch out;
  out.K = b.K;
  out.T = b.T;
  out.I = b.I;
  out.pos = b.pos;
  {
    flops::PerLocationScope meter(b.K * b.T, b.U(), op.quantized);
    out.V = op.fn(b.V);
  }
  check(out.V.rows() == b.U(), "per-location op changed the row count");
  out.ids.reserve(b.ids.size());
  for (uint64_t id : b.ids) out.ids.push_back(hash_combine(id, op.tag));
  if (g_merge_verify) {
    std::unordered_map<uint64_t, int32_t> dup;
    for (uint64_t id : out.ids)
      if (!dup.emplace(id, 0).second)
        throw NumericError("identity key collision after per-location op");
  }
  return out;
}

Tensor attention_dense(const CompressedBatch& q, const CompressedBatch& k,
                       const CompressedBatch& v, int n_heads, Mask mask) {
  check(q.K == k.K && q.K == v.K && q.T == k.T && q.T == v.T,
        "attention stream shapes disagree");
  Tensor qd = q.expand(), kd = k.expand(), vd = v.expand();
  return kernels::multihead_attention(qd, kd, vd, q.K, q.T, n_heads, mask);
}

CompressedBatch requantize(const Tensor& attention_out,
                           const CompressedBatch& residual,
                           const ad::Parameter& codebook, int vq_heads,
                           uint64_t tag) {
  const int64_t K = residual.K, T = residual.T;
  const int64_t d = residual.V.cols();
  check(attention_out.rows() == K * T && attention_out.cols() == d,
        "attention output shape mismatch");

  std::vector<int> picks;
  Tensor quantized = vq_apply_rows(codebook, attention_out, vq_heads, &picks);

  CompressedBatch out;
  out.K = K;
  out.T = T;
  out.I.resize(K * T);
  std::unordered_map<uint64_t, int32_t> seen;
  seen.reserve(2 * residual.U());
  std::vector<int64_t> rep;  // representative location per unique row
  for (int64_t l = 0; l < K * T; ++l) {
    uint64_t key = residual.ids[residual.I[l]];
    for (int h = 0; h < vq_heads; ++h)
      key = hash_combine(key, uint64_t(picks[l * vq_heads + h]));
    key = hash_combine(key, tag);
    auto [it, fresh] = seen.emplace(key, int32_t(out.ids.size()));
    if (fresh) {
      out.ids.push_back(key);
      out.pos.push_back(residual.pos[residual.I[l]]);
      rep.push_back(l);
    }
    if (g_merge_verify) {
      const int64_t r = rep[it->second];
      bool same = residual.I[r] == residual.I[l];
      for (int h = 0; same && h < vq_heads; ++h)
        same = picks[r * vq_heads + h] == picks[l * vq_heads + h];
      if (!same) throw NumericError("identity key collision in requantize");
    }
    out.I[l] = it->second;
  }

  const int64_t U = static_cast<int64_t>(out.ids.size());
  out.V = Tensor({U, 2 * d});
  for (int64_t u = 0; u < U; ++u) {
    const int64_t l = rep[u];
    std::memcpy(out.V.row_ptr(u), quantized.row_ptr(l), sizeof(double) * d);
    std::memcpy(out.V.row_ptr(u) + d, residual.V.row_ptr(residual.I[l]),
                sizeof(double) * d);
  }
  return out;
}

CompressedBatch densify_attention(const Tensor& attention_out,
                                  const CompressedBatch& residual,
                                  uint64_t tag) {
  const int64_t K = residual.K, T = residual.T;
  const int64_t d = residual.V.cols();
  check(attention_out.rows() == K * T && attention_out.cols() == d,
        "attention output shape mismatch");
  CompressedBatch out;
  out.K = K;
  out.T = T;
  out.I.resize(K * T);
  out.ids.resize(K * T);
  out.pos.resize(K * T);
  out.V = Tensor({K * T, 2 * d});
  for (int64_t l = 0; l < K * T; ++l) {
    out.I[l] = int32_t(l);
    out.ids[l] = hash_combine(hash_combine(residual.ids[residual.I[l]], tag),
                              uint64_t(l));
    out.pos[l] = residual.pos[residual.I[l]];
    std::memcpy(out.V.row_ptr(l), attention_out.row_ptr(l), sizeof(double) * d);
    std::memcpy(out.V.row_ptr(l) + d, residual.V.row_ptr(residual.I[l]),
                sizeof(double) * d);
  }
  return out;
}

namespace {

// One transformer block over a compressed stream. Per-location chunks run on
// unique rows; attention (and VQ distances, when present) run dense.
CompressedBatch run_block(const Block& blk, const ModelConfig& cfg,
                          const CompressedBatch& x, Mask mask, uint64_t stage,
                          uint64_t bi, bool pre_q, bool cont_q) {
  PerLocationOp ln1{LocOp::layer_norm, op_tag(stage, bi, 0), pre_q,
                    [&](const Tensor& t) {
                      return kernels::layer_norm(t, blk.ln1_g.value,
                                                 blk.ln1_b.value, 1e-5);
                    }};
  CompressedBatch h = apply_per_location(ln1, x);

  auto proj = [&](const ad::Parameter& w, const ad::Parameter& b,
                  uint64_t op) {
    PerLocationOp o{LocOp::linear, op_tag(stage, bi, op), pre_q,
                    [&](const Tensor& t) {
                      return kernels::linear(t, w.value, b.value);
                    }};
    return apply_per_location(o, h);
  };
  CompressedBatch q = proj(blk.wq, blk.bq, 1);
  CompressedBatch k = proj(blk.wk, blk.bk, 2);
  CompressedBatch v = proj(blk.wv, blk.bv, 3);

  Tensor att = attention_dense(q, k, v, cfg.n_heads, mask);
  CompressedBatch cat =
      blk.has_vq
          ? requantize(att, x, blk.codebook, cfg.vq_heads,
                       op_tag(stage, bi, 4))
          : densify_attention(att, x, op_tag(stage, bi, 5));

  const int64_t d = cfg.d_hidden;
  PerLocationOp cont{
      LocOp::continuation, op_tag(stage, bi, 6), cont_q, [&, d](const Tensor& t) {
        const int64_t u = t.rows();
        Tensor a({u, d}), r({u, d});
        for (int64_t i = 0; i < u; ++i) {
          std::memcpy(a.row_ptr(i), t.row_ptr(i), sizeof(double) * d);
          std::memcpy(r.row_ptr(i), t.row_ptr(i) + d, sizeof(double) * d);
        }
        Tensor o = kernels::linear(a, blk.wo.value, blk.bo.value);
        Tensor y = kernels::add(r, o);
        if (blk.has_ffn) {
          Tensor h2 =
              kernels::layer_norm(y, blk.ln2_g.value, blk.ln2_b.value, 1e-5);
          Tensor f = kernels::linear(
              kernels::gelu(kernels::linear(h2, blk.w1.value, blk.b1.value)),
              blk.w2.value, blk.b2.value);
          y = kernels::add(y, f);
        }
        return y;
      }};
  return apply_per_location(cont, cat);
}

}  // namespace

std::vector<double> dedup_log_prob(const VqTransformer& model,
                                   const std::vector<SpinConfiguration>& configs,
                                   const SpinConfiguration& base) {
  const ModelConfig& cfg = model.cfg;
  const int64_t K = static_cast<int64_t>(configs.size());
  const int64_t T = cfg.seq_len();

  CompressedBatch x = compress_inputs(model, configs, base);
  for (size_t bi = 0; bi < model.blocks.size(); ++bi)
    x = run_block(model.blocks[bi], cfg, x, Mask::causal, 0, bi,
                  model.pre_quantized(int(bi)), model.cont_quantized(int(bi)));

  const bool head_q = model.head_quantized();
  PerLocationOp lnf{LocOp::layer_norm, op_tag(0, 99, 0), head_q,
                    [&](const Tensor& t) {
                      return kernels::layer_norm(t, model.lnf_g.value,
                                                 model.lnf_b.value, 1e-5);
                    }};
  CompressedBatch hf = apply_per_location(lnf, x);
  PerLocationOp headp{LocOp::linear, op_tag(0, 99, 1), head_q,
                      [&](const Tensor& t) {
                        return kernels::linear(t, model.head_w.value,
                                               model.head_b.value);
                      }};
  CompressedBatch logits = apply_per_location(headp, hf);
  if (cfg.last_vocab() < cfg.vocab()) {
    const int32_t last = int32_t(T - 1);
    for (int64_t u = 0; u < logits.U(); ++u)
      if (logits.pos[u] == last)
        for (int64_t c = cfg.last_vocab(); c < cfg.vocab(); ++c)
          logits.V.at(u, c) = -1e30;
  }
  PerLocationOp lsm{LocOp::output_head, op_tag(0, 99, 2), head_q,
                    [](const Tensor& t) {
                      return kernels::log_softmax_rows(t);
                    }};
  CompressedBatch lp = apply_per_location(lsm, logits);

  std::vector<double> out(K);
  {
    flops::ClassScope cls(flops::Class::Other);
    flops::log(K * T);
    for (int64_t k = 0; k < K; ++k) {
      const std::vector<int> toks = model.tokenize(configs[k]);
      double s = 0.0;
      for (int64_t p = 0; p < T; ++p)
        s += lp.V.at(lp.I[k * T + p], toks[p]);
      out[k] = s;
    }
  }
  return out;
}

std::vector<double> dedup_phase(const VqTransformer& model,
                                const std::vector<SpinConfiguration>& configs,
                                const SpinConfiguration& base) {
  const ModelConfig& cfg = model.cfg;
  check(cfg.phase_enabled, "phase network disabled");
  const int64_t K = static_cast<int64_t>(configs.size());
  const int64_t T = cfg.seq_len();
  const int64_t d = cfg.d_hidden;

  // input layer: unshifted tokens, bidirectional positions
  CompressedBatch b;
  b.K = K;
  b.T = T;
  b.I.resize(K * T);
  std::vector<int> row_token;
  std::unordered_map<uint64_t, int32_t> seen;
  for (int64_t k = 0; k < K; ++k) {
    if (diff_sites(configs[k], base) > 2)
      throw UsageError("connected configuration differs in more than 2 sites");
    const std::vector<int> toks = model.tokenize(configs[k]);
    for (int64_t p = 0; p < T; ++p) {
      const uint64_t key = hash_combine(
          hash_combine(kPhaseSalt, uint64_t(p)), uint64_t(toks[p]));
      auto [it, fresh] = seen.emplace(key, int32_t(b.ids.size()));
      if (fresh) {
        b.ids.push_back(key);
        b.pos.push_back(int32_t(p));
        row_token.push_back(toks[p]);
      }
      b.I[k * T + p] = it->second;
    }
  }
  const int64_t U = static_cast<int64_t>(b.ids.size());
  b.V = Tensor({U, d});
  {
    flops::PerLocationScope meter(K * T, U, false);
    for (int64_t u = 0; u < U; ++u) {
      const double* te = model.ph_tok_embed.value.row_ptr(row_token[u]);
      const double* pe = model.ph_pos_embed.value.row_ptr(b.pos[u]);
      double* outp = b.V.row_ptr(u);
      for (int64_t c = 0; c < d; ++c) outp[c] = te[c] + pe[c];
    }
    flops::log(U * d);
  }

  for (size_t bi = 0; bi < model.ph_blocks.size(); ++bi)
    b = run_block(model.ph_blocks[bi], cfg, b, Mask::none, 1, bi, false,
                  false);

  PerLocationOp lnf{LocOp::layer_norm, op_tag(1, 99, 0), false,
                    [&](const Tensor& t) {
                      return kernels::layer_norm(t, model.ph_lnf_g.value,
                                                 model.ph_lnf_b.value, 1e-5);
                    }};
  CompressedBatch hf = apply_per_location(lnf, b);
  Tensor dense = hf.expand();

  std::vector<double> out(K);
  flops::ClassScope cls(flops::Class::Other);
  for (int64_t k = 0; k < K; ++k) {
    Tensor seq({T, d});
    std::memcpy(seq.data.data(), dense.row_ptr(k * T), sizeof(double) * T * d);
    Tensor pooled = kernels::mean_pool_rows(seq);
    Tensor y = kernels::linear(pooled, model.ph_w.value, model.ph_b.value);
    out[k] = y.data[0];
  }
  return out;
}

LocalEnergyResult local_energy_batch(const VqTransformer& model,
                                     const HamiltonianModel& h,
                                     const SpinConfiguration& s) {
  ConnectedSet cs = connected_set(h, s);
  const int64_t K = static_cast<int64_t>(cs.entries.size());
  check(K >= 1 && cs.entries[0].config == s, "connected set must start at s");
  std::vector<SpinConfiguration> configs;
  configs.reserve(K);
  for (const auto& e : cs.entries) configs.push_back(e.config);

  LocalEnergyResult res;
  {
    flops::LedgerScope scope(&res.ledger);
    std::vector<double> lp = dedup_log_prob(model, configs, s);
    std::vector<double> ph(K, 0.0);
    if (model.cfg.phase_enabled) ph = dedup_phase(model, configs, s);
    std::complex<double> e = 0.0;
    for (int64_t k = 0; k < K; ++k) {
      const double dlp = 0.5 * (lp[k] - lp[0]);
      const double dph = ph[k] - ph[0];
      e += cs.entries[k].coeff * std::exp(dlp) *
           std::complex<double>(std::cos(dph), std::sin(dph));
    }
    res.value = e;
  }
  return res;
}

}  // namespace vqnqs
