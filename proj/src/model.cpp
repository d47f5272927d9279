#include "vqnqs/model.hpp"

#include <cmath>
#include <cstring>

#include "vqnqs/flops.hpp"

namespace vqnqs {

void ModelConfig::validate() const {
  if (n_sites < 1) throw ConfigError("n_sites must be positive");
  if (local_dim != kLocalDim) throw ConfigError("only d=2 local states");
  if (group_size < 1 || group_size > 16)
    throw ConfigError("group_size out of range");
  if (d_hidden < 1) throw ConfigError("d_hidden must be positive");
  if (n_heads < 1 || d_hidden % n_heads != 0)
    throw ConfigError("d_hidden must divide into n_heads");
  if (n_blocks < 0) throw ConfigError("n_blocks must be nonnegative");
  if (n_blocks == 0 && !trailing_half_block)
    throw ConfigError("model needs at least one block");
  if (vq_enabled) {
    if (vq_heads < 1 || d_hidden % vq_heads != 0)
      throw ConfigError("d_hidden must divide into vq_heads");
    if (vq_codebook < 1) throw ConfigError("vq_codebook must be positive");
    if (!(vq_temperature > 0)) throw ConfigError("vq_temperature must be > 0");
  }
}

// --- codebook bookkeeping -------------------------------------------------

void CodebookState::init(int heads_, int q_, int64_t dh_) {
  heads = heads_;
  q = q_;
  dh = dh_;
  usage_ema.assign(static_cast<size_t>(heads) * q, 1.0 / q);
  below_steps.assign(static_cast<size_t>(heads) * q, 0);
  recent.assign(static_cast<size_t>(heads) * kReservoir * dh, 0.0);
  recent_n.assign(heads, 0);
}

void CodebookState::observe_step(const std::vector<int>& picks,
                                 const Tensor& prequant, Rng& rng) {
  const int64_t rows = prequant.rows();
  check(static_cast<int64_t>(picks.size()) == rows * heads,
        "pick count mismatch");
  std::vector<int64_t> counts(static_cast<size_t>(heads) * q, 0);
  for (int64_t r = 0; r < rows; ++r)
    for (int h = 0; h < heads; ++h)
      ++counts[h * q + picks[r * heads + h]];
  for (int h = 0; h < heads; ++h)
    for (int j = 0; j < q; ++j) {
      const size_t i = static_cast<size_t>(h) * q + j;
      usage_ema[i] = decay * usage_ema[i] +
                     (1.0 - decay) * static_cast<double>(counts[i]) /
                         static_cast<double>(rows);
      below_steps[i] = usage_ema[i] < threshold ? below_steps[i] + 1 : 0;
    }
  // reservoir of pre-quantization segments, per head
  for (int64_t r = 0; r < rows; ++r)
    for (int h = 0; h < heads; ++h) {
      const int64_t n = recent_n[h]++;
      int64_t slot = -1;
      if (n < kReservoir)
        slot = n;
      else {
        const uint64_t j = rng.below(static_cast<uint64_t>(n) + 1);
        if (j < kReservoir) slot = static_cast<int64_t>(j);
      }
      if (slot >= 0)
        std::memcpy(&recent[(static_cast<int64_t>(h) * kReservoir + slot) * dh],
                    prequant.row_ptr(r) + h * dh, sizeof(double) * dh);
    }
}

int CodebookState::maintain(ad::Parameter& w, Rng& rng) {
  int reseeded = 0;
  for (int h = 0; h < heads; ++h) {
    const int64_t avail = std::min<int64_t>(recent_n[h], kReservoir);
    if (avail == 0) continue;
    for (int j = 0; j < q; ++j) {
      const size_t i = static_cast<size_t>(h) * q + j;
      if (below_steps[i] < t_dead) continue;
      const int64_t pick = static_cast<int64_t>(rng.below(avail));
      double* dst = w.value.row_ptr(static_cast<int64_t>(h) * q + j);
      const double* src = &recent[(static_cast<int64_t>(h) * kReservoir + pick) * dh];
      for (int64_t c = 0; c < dh; ++c)
        dst[c] = src[c] + 0.01 * rng.gaussian();
      below_steps[i] = 0;
      usage_ema[i] = 1.0 / q;
      ++reseeded;
    }
  }
  return reseeded;
}

double CodebookState::used_fraction() const {
  if (usage_ema.empty()) return 0.0;
  int used = 0;
  for (double u : usage_ema)
    if (u >= threshold) ++used;
  return static_cast<double>(used) / static_cast<double>(usage_ema.size());
}

// --- construction ----------------------------------------------------------

namespace {

ad::Parameter weight(const std::string& name, std::vector<int64_t> shape,
                     Rng& rng, double scale) {
  return ad::Parameter(name, Tensor::randn(std::move(shape), rng, scale));
}

Block make_block(const std::string& prefix, const ModelConfig& cfg,
                 bool has_ffn, bool has_vq, Rng& rng) {
  const int64_t d = cfg.d_hidden;
  const double s = 0.02;
  Block b;
  b.ln1_g = ad::Parameter(prefix + ".ln1_g", Tensor::full({d}, 1.0));
  b.ln1_b = ad::Parameter(prefix + ".ln1_b", Tensor::zeros({d}));
  b.wq = weight(prefix + ".wq", {d, d}, rng, s);
  b.bq = ad::Parameter(prefix + ".bq", Tensor::zeros({d}));
  b.wk = weight(prefix + ".wk", {d, d}, rng, s);
  b.bk = ad::Parameter(prefix + ".bk", Tensor::zeros({d}));
  b.wv = weight(prefix + ".wv", {d, d}, rng, s);
  b.bv = ad::Parameter(prefix + ".bv", Tensor::zeros({d}));
  b.wo = weight(prefix + ".wo", {d, d}, rng, s);
  b.bo = ad::Parameter(prefix + ".bo", Tensor::zeros({d}));
  b.has_ffn = has_ffn;
  if (has_ffn) {
    b.ln2_g = ad::Parameter(prefix + ".ln2_g", Tensor::full({d}, 1.0));
    b.ln2_b = ad::Parameter(prefix + ".ln2_b", Tensor::zeros({d}));
    b.w1 = weight(prefix + ".w1", {d, 4 * d}, rng, s);
    b.b1 = ad::Parameter(prefix + ".b1", Tensor::zeros({4 * d}));
    b.w2 = weight(prefix + ".w2", {4 * d, d}, rng, s);
    b.b2 = ad::Parameter(prefix + ".b2", Tensor::zeros({d}));
  }
  b.has_vq = has_vq;
  if (has_vq) {
    const int64_t dh = d / cfg.vq_heads;
    b.codebook = weight(prefix + ".codebook",
                        {static_cast<int64_t>(cfg.vq_heads) * cfg.vq_codebook, dh},
                        rng, cfg.vq_init_scale);
    b.cb.init(cfg.vq_heads, cfg.vq_codebook, dh);
  }
  return b;
}

}  // namespace

VqTransformer VqTransformer::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  VqTransformer m;
  m.cfg = cfg;
  const int64_t d = cfg.d_hidden;
  const int64_t t = cfg.seq_len();
  const int64_t v = cfg.vocab();
  const double s = 0.02;

  m.tok_embed = weight("dec.tok_embed", {v + 1, d}, rng, s);
  m.pos_embed = weight("dec.pos_embed", {t, d}, rng, s);
  for (int b = 0; b < cfg.n_blocks; ++b)
    m.blocks.push_back(make_block("dec.block" + std::to_string(b), cfg, true,
                                  cfg.vq_enabled, rng));
  if (cfg.trailing_half_block)
    m.blocks.push_back(
        make_block("dec.half", cfg, /*has_ffn=*/false, /*has_vq=*/false, rng));
  m.lnf_g = ad::Parameter("dec.lnf_g", Tensor::full({d}, 1.0));
  m.lnf_b = ad::Parameter("dec.lnf_b", Tensor::zeros({d}));
  m.head_w = weight("dec.head_w", {d, v}, rng, s);
  m.head_b = ad::Parameter("dec.head_b", Tensor::zeros({v}));

  if (cfg.phase_enabled) {
    m.ph_tok_embed = weight("ph.tok_embed", {v + 1, d}, rng, s);
    m.ph_pos_embed = weight("ph.pos_embed", {t, d}, rng, s);
    for (int b = 0; b < cfg.n_blocks; ++b)
      m.ph_blocks.push_back(make_block("ph.block" + std::to_string(b), cfg,
                                       true, /*has_vq=*/false, rng));
    m.ph_lnf_g = ad::Parameter("ph.lnf_g", Tensor::full({d}, 1.0));
    m.ph_lnf_b = ad::Parameter("ph.lnf_b", Tensor::zeros({d}));
    m.ph_w = weight("ph.w", {d, 1}, rng, s);
    m.ph_b = ad::Parameter("ph.b", Tensor::zeros({1}));
  }
  return m;
}

namespace {
void collect_block(Block& b, std::vector<ad::Parameter*>& out) {
  out.push_back(&b.ln1_g);
  out.push_back(&b.ln1_b);
  out.push_back(&b.wq);
  out.push_back(&b.bq);
  out.push_back(&b.wk);
  out.push_back(&b.bk);
  out.push_back(&b.wv);
  out.push_back(&b.bv);
  out.push_back(&b.wo);
  out.push_back(&b.bo);
  if (b.has_vq) out.push_back(&b.codebook);
  if (b.has_ffn) {
    out.push_back(&b.ln2_g);
    out.push_back(&b.ln2_b);
    out.push_back(&b.w1);
    out.push_back(&b.b1);
    out.push_back(&b.w2);
    out.push_back(&b.b2);
  }
}
}  // namespace

std::vector<ad::Parameter*> VqTransformer::parameters() {
  std::vector<ad::Parameter*> out;
  out.push_back(&tok_embed);
  out.push_back(&pos_embed);
  for (Block& b : blocks) collect_block(b, out);
  out.push_back(&lnf_g);
  out.push_back(&lnf_b);
  out.push_back(&head_w);
  out.push_back(&head_b);
  if (cfg.phase_enabled) {
    out.push_back(&ph_tok_embed);
    out.push_back(&ph_pos_embed);
    for (Block& b : ph_blocks) collect_block(b, out);
    out.push_back(&ph_lnf_g);
    out.push_back(&ph_lnf_b);
    out.push_back(&ph_w);
    out.push_back(&ph_b);
  }
  return out;
}

std::vector<const ad::Parameter*> VqTransformer::parameters() const {
  auto ps = const_cast<VqTransformer*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

std::vector<int> VqTransformer::tokenize(const SpinConfiguration& s) const {
  check(static_cast<int>(s.size()) == cfg.n_sites, "configuration size");
  const int t = cfg.seq_len();
  std::vector<int> tokens(t, 0);
  for (int i = 0; i < cfg.n_sites; ++i) {
    const int pos = i / cfg.group_size;
    const int slot = i % cfg.group_size;
    int mult = 1;
    for (int k = 0; k < slot; ++k) mult *= cfg.local_dim;
    tokens[pos] += static_cast<int>(s[i]) * mult;
  }
  return tokens;
}

SpinConfiguration VqTransformer::detokenize(
    const std::vector<int>& tokens) const {
  SpinConfiguration s(cfg.n_sites);
  for (int i = 0; i < cfg.n_sites; ++i) {
    const int pos = i / cfg.group_size;
    const int slot = i % cfg.group_size;
    int v = tokens[pos];
    for (int k = 0; k < slot; ++k) v /= cfg.local_dim;
    s[i] = static_cast<uint8_t>(v % cfg.local_dim);
  }
  return s;
}

bool VqTransformer::pre_quantized(int block) const {
  if (!cfg.vq_enabled) return false;
  for (int b = 0; b < block; ++b)
    if (blocks[b].has_vq) return true;
  return false;
}

bool VqTransformer::cont_quantized(int block) const {
  return cfg.vq_enabled && (pre_quantized(block) || blocks[block].has_vq);
}

bool VqTransformer::head_quantized() const {
  if (!cfg.vq_enabled) return false;
  for (const Block& b : blocks)
    if (b.has_vq) return true;
  return false;
}

// --- hard VQ over rows ------------------------------------------------------

Tensor vq_apply_rows(const ad::Parameter& codebook, const Tensor& x, int heads,
                     std::vector<int>* picks_out) {
  const int64_t rows = x.rows(), d = x.cols();
  check(d % heads == 0, "vq width not divisible by heads");
  const int64_t dh = d / heads;
  check(codebook.value.cols() == dh, "codebook segment width mismatch");
  const int64_t q = codebook.value.rows() / heads;
  Tensor y({rows, d});
  if (picks_out) picks_out->assign(rows * heads, 0);
  for (int64_t r = 0; r < rows; ++r)
    for (int h = 0; h < heads; ++h) {
      const double* xr = x.row_ptr(r) + h * dh;
      int best = 0;
      double best_s2 = 1e300;
      for (int64_t j = 0; j < q; ++j) {
        const double* wr = codebook.value.row_ptr(h * q + j);
        double s2 = 0.0;
        for (int64_t c = 0; c < dh; ++c) {
          const double df = xr[c] - wr[c];
          s2 += df * df;
        }
        if (s2 < best_s2) {
          best_s2 = s2;
          best = static_cast<int>(j);
        }
      }
      if (picks_out) (*picks_out)[r * heads + h] = best;
      const double* wr = codebook.value.row_ptr(h * q + best);
      double* yr = y.row_ptr(r) + h * dh;
      for (int64_t c = 0; c < dh; ++c) yr[c] = wr[c];
    }
  {
    flops::ClassScope cls(flops::Class::VqDistance);
    flops::log(rows * opcost::vq_row(heads, q, dh));
  }
  return y;
}

// --- evaluation paths -------------------------------------------------------

namespace {

void apply_block_dense(const Block& blk, Tensor& x, int64_t batch,
                       int64_t seq_len, const ModelConfig& cfg, Mask mask,
                       bool pre_q, bool cont_q) {
  const int64_t rows = x.rows();
  Tensor q, k, v;
  {
    flops::PerLocationScope meter(rows, rows, pre_q);
    Tensor h = kernels::layer_norm(x, blk.ln1_g.value, blk.ln1_b.value, 1e-5);
    q = kernels::linear(h, blk.wq.value, blk.bq.value);
    k = kernels::linear(h, blk.wk.value, blk.bk.value);
    v = kernels::linear(h, blk.wv.value, blk.bv.value);
  }
  Tensor att =
      kernels::multihead_attention(q, k, v, batch, seq_len, cfg.n_heads, mask);
  Tensor attq = blk.has_vq
                    ? vq_apply_rows(blk.codebook, att, cfg.vq_heads, nullptr)
                    : std::move(att);
  {
    flops::PerLocationScope meter(rows, rows, cont_q);
    Tensor o = kernels::linear(attq, blk.wo.value, blk.bo.value);
    x = kernels::add(x, o);
    if (blk.has_ffn) {
      Tensor h2 =
          kernels::layer_norm(x, blk.ln2_g.value, blk.ln2_b.value, 1e-5);
      Tensor f = kernels::linear(
          kernels::gelu(kernels::linear(h2, blk.w1.value, blk.b1.value)),
          blk.w2.value, blk.b2.value);
      x = kernels::add(x, f);
    }
  }
}

}  // namespace

Tensor VqTransformer::decoder_logprob_rows(const std::vector<int>& ids,
                                           int64_t batch,
                                           int64_t seq_len) const {
  check(static_cast<int64_t>(ids.size()) == batch * seq_len,
        "id count != batch*seq_len");
  const int64_t rows = batch * seq_len;
  std::vector<int> pos_ids(rows);
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t t = 0; t < seq_len; ++t)
      pos_ids[b * seq_len + t] = static_cast<int>(t);

  Tensor x;
  {
    flops::PerLocationScope meter(rows, rows, false);
    x = kernels::add(kernels::embedding_lookup(tok_embed.value, ids),
                     kernels::embedding_lookup(pos_embed.value, pos_ids));
  }
  for (size_t b = 0; b < blocks.size(); ++b)
    apply_block_dense(blocks[b], x, batch, seq_len, cfg, Mask::causal,
                      pre_quantized(static_cast<int>(b)),
                      cont_quantized(static_cast<int>(b)));
  Tensor logp;
  {
    flops::PerLocationScope meter(rows, rows, head_quantized());
    Tensor h = kernels::layer_norm(x, lnf_g.value, lnf_b.value, 1e-5);
    Tensor logits = kernels::linear(h, head_w.value, head_b.value);
    if (cfg.last_vocab() < cfg.vocab()) {
      const int last_pos = cfg.seq_len() - 1;
      for (int64_t b = 0; b < batch; ++b)
        for (int64_t t = 0; t < seq_len; ++t)
          if (t == last_pos)
            for (int64_t c = cfg.last_vocab(); c < cfg.vocab(); ++c)
              logits.at(b * seq_len + t, c) = -1e30;
    }
    logp = kernels::log_softmax_rows(logits);
  }
  return logp;
}

std::vector<double> VqTransformer::log_prob_batch(
    const std::vector<SpinConfiguration>& batch) const {
  const int64_t t = cfg.seq_len();
  const int bos = cfg.vocab();
  std::vector<double> out(batch.size());
  const int64_t chunk = std::max<int64_t>(1, 16384 / t);
  for (size_t start = 0; start < batch.size();
       start += static_cast<size_t>(chunk)) {
    const int64_t b =
        std::min<int64_t>(chunk, static_cast<int64_t>(batch.size() - start));
    std::vector<int> ids(b * t);
    std::vector<std::vector<int>> targets(b);
    for (int64_t i = 0; i < b; ++i) {
      targets[i] = tokenize(batch[start + i]);
      ids[i * t] = bos;
      for (int64_t p = 1; p < t; ++p)
        ids[i * t + p] = targets[i][p - 1];
    }
    Tensor logp = decoder_logprob_rows(ids, b, t);
    flops::ClassScope cls(flops::Class::Other);
    flops::log(b * t);
    for (int64_t i = 0; i < b; ++i) {
      double s = 0.0;
      for (int64_t p = 0; p < t; ++p) s += logp.at(i * t + p, targets[i][p]);
      out[start + i] = s;
    }
  }
  return out;
}

double VqTransformer::log_prob(const SpinConfiguration& s) const {
  return log_prob_batch({s})[0];
}

std::vector<double> VqTransformer::phase_batch(
    const std::vector<SpinConfiguration>& batch) const {
  if (!cfg.phase_enabled) return std::vector<double>(batch.size(), 0.0);
  const int64_t t = cfg.seq_len();
  std::vector<double> out(batch.size());
  const int64_t chunk = std::max<int64_t>(1, 16384 / t);
  for (size_t start = 0; start < batch.size();
       start += static_cast<size_t>(chunk)) {
    const int64_t b =
        std::min<int64_t>(chunk, static_cast<int64_t>(batch.size() - start));
    const int64_t rows = b * t;
    std::vector<int> ids(rows), pos_ids(rows);
    for (int64_t i = 0; i < b; ++i) {
      std::vector<int> toks = tokenize(batch[start + i]);
      for (int64_t p = 0; p < t; ++p) {
        ids[i * t + p] = toks[p];
        pos_ids[i * t + p] = static_cast<int>(p);
      }
    }
    Tensor x;
    {
      flops::PerLocationScope meter(rows, rows, false);
      x = kernels::add(kernels::embedding_lookup(ph_tok_embed.value, ids),
                       kernels::embedding_lookup(ph_pos_embed.value, pos_ids));
    }
    for (const Block& blk : ph_blocks)
      apply_block_dense(blk, x, b, t, cfg, Mask::none, false, false);
    Tensor h;
    {
      flops::PerLocationScope meter(rows, rows, false);
      h = kernels::layer_norm(x, ph_lnf_g.value, ph_lnf_b.value, 1e-5);
    }
    flops::ClassScope cls(flops::Class::Other);
    for (int64_t i = 0; i < b; ++i) {
      Tensor seq({t, static_cast<int64_t>(cfg.d_hidden)});
      std::memcpy(seq.data.data(), h.row_ptr(i * t),
                  sizeof(double) * t * cfg.d_hidden);
      Tensor pooled = kernels::mean_pool_rows(seq);
      Tensor y = kernels::linear(pooled, ph_w.value, ph_b.value);
      out[start + i] = y.data[0];
    }
  }
  return out;
}

double VqTransformer::phase(const SpinConfiguration& s) const {
  return phase_batch({s})[0];
}

std::complex<double> VqTransformer::log_psi(const SpinConfiguration& s) const {
  return {0.5 * log_prob(s), cfg.phase_enabled ? phase(s) : 0.0};
}

VqTransformer::SampleResult VqTransformer::sample(int count, Rng& rng) const {
  check(count >= 1, "sample count must be >= 1");
  const int64_t t = cfg.seq_len();
  const int bos = cfg.vocab();
  const int64_t b = count;
  std::vector<std::vector<int>> tokens(b);

  for (int64_t step = 0; step < t; ++step) {
    const int64_t plen = step + 1;
    std::vector<int> ids(b * plen);
    for (int64_t i = 0; i < b; ++i) {
      ids[i * plen] = bos;
      for (int64_t p = 1; p < plen; ++p)
        ids[i * plen + p] = tokens[i][p - 1];
    }
    Tensor logp = decoder_logprob_rows(ids, b, plen);
    for (int64_t i = 0; i < b; ++i) {
      const double* row = logp.row_ptr(i * plen + step);
      const double u = rng.uniform();
      double cum = 0.0;
      int picked = -1, last_pos_prob = 0;
      for (int c = 0; c < cfg.vocab(); ++c) {
        const double p = std::exp(row[c]);
        if (p > 0) last_pos_prob = c;
        cum += p;
        if (u < cum) {
          picked = c;
          break;
        }
      }
      if (picked < 0) picked = last_pos_prob;  // guard against rounding
      tokens[i].push_back(picked);
    }
  }

  SampleResult res;
  res.configs.reserve(b);
  for (int64_t i = 0; i < b; ++i) res.configs.push_back(detokenize(tokens[i]));
  res.log_probs = log_prob_batch(res.configs);
  return res;
}

// --- training graphs --------------------------------------------------------

namespace {

ad::Graph::Id graph_block(ad::Graph& g, Block& blk, ad::Graph::Id x,
                          int64_t batch, int64_t seq_len,
                          const ModelConfig& cfg, Mask mask, int block_index,
                          VqTrace* trace, Rng* gumbel_rng) {
  auto h = g.layer_norm(x, g.param(blk.ln1_g), g.param(blk.ln1_b), 1e-5);
  auto q = g.linear(h, g.param(blk.wq), g.param(blk.bq));
  auto k = g.linear(h, g.param(blk.wk), g.param(blk.bk));
  auto v = g.linear(h, g.param(blk.wv), g.param(blk.bv));
  auto att = g.attention(q, k, v, batch, seq_len, cfg.n_heads, mask);
  auto attq = att;
  if (blk.has_vq) {
    ad::VqOptions opt;
    opt.heads = cfg.vq_heads;
    opt.tau = cfg.vq_temperature;
    opt.gumbel = cfg.vq_gumbel;
    opt.rng = gumbel_rng;
    std::vector<int> picks;
    attq = g.vq_quantize(att, blk.codebook, opt, trace ? &picks : nullptr);
    if (trace) {
      VqTrace::Entry e;
      e.block = block_index;
      e.picks = std::move(picks);
      e.prequant = g.value(att);
      trace->entries.push_back(std::move(e));
    }
  }
  auto o = g.linear(attq, g.param(blk.wo), g.param(blk.bo));
  x = g.add(x, o);
  if (blk.has_ffn) {
    auto h2 = g.layer_norm(x, g.param(blk.ln2_g), g.param(blk.ln2_b), 1e-5);
    auto f = g.linear(g.gelu(g.linear(h2, g.param(blk.w1), g.param(blk.b1))),
                      g.param(blk.w2), g.param(blk.b2));
    x = g.add(x, f);
  }
  return x;
}

}  // namespace

ad::Graph::Id VqTransformer::build_log_prob(
    ad::Graph& g, const std::vector<SpinConfiguration>& batch, VqTrace* trace,
    Rng* gumbel_rng) {
  const int64_t b = static_cast<int64_t>(batch.size());
  const int64_t t = cfg.seq_len();
  const int bos = cfg.vocab();
  std::vector<int> ids(b * t), pos_ids(b * t), targets(b * t);
  for (int64_t i = 0; i < b; ++i) {
    std::vector<int> toks = tokenize(batch[i]);
    ids[i * t] = bos;
    for (int64_t p = 1; p < t; ++p) ids[i * t + p] = toks[p - 1];
    for (int64_t p = 0; p < t; ++p) {
      pos_ids[i * t + p] = static_cast<int>(p);
      targets[i * t + p] = toks[p];
    }
  }
  auto x = g.add(g.embedding(tok_embed, ids), g.embedding(pos_embed, pos_ids));
  for (size_t bi = 0; bi < blocks.size(); ++bi)
    x = graph_block(g, blocks[bi], x, b, t, cfg, Mask::causal,
                    static_cast<int>(bi), trace, gumbel_rng);
  auto h = g.layer_norm(x, g.param(lnf_g), g.param(lnf_b), 1e-5);
  auto logits = g.linear(h, g.param(head_w), g.param(head_b));
  if (cfg.last_vocab() < cfg.vocab()) {
    Tensor mask = Tensor::zeros({b * t, static_cast<int64_t>(cfg.vocab())});
    const int last_pos = cfg.seq_len() - 1;
    for (int64_t i = 0; i < b; ++i)
      for (int64_t c = cfg.last_vocab(); c < cfg.vocab(); ++c)
        mask.at(i * t + last_pos, c) = -1e30;
    logits = g.add(logits, g.constant(std::move(mask)));
  }
  auto logp = g.log_softmax_rows(logits);
  return g.pick_sum_per_seq(logp, targets, b, t);
}

ad::Graph::Id VqTransformer::build_phase(
    ad::Graph& g, const std::vector<SpinConfiguration>& batch) {
  check(cfg.phase_enabled, "phase network disabled");
  const int64_t b = static_cast<int64_t>(batch.size());
  const int64_t t = cfg.seq_len();
  std::vector<int> ids(b * t), pos_ids(b * t);
  for (int64_t i = 0; i < b; ++i) {
    std::vector<int> toks = tokenize(batch[i]);
    for (int64_t p = 0; p < t; ++p) {
      ids[i * t + p] = toks[p];
      pos_ids[i * t + p] = static_cast<int>(p);
    }
  }
  auto x =
      g.add(g.embedding(ph_tok_embed, ids), g.embedding(ph_pos_embed, pos_ids));
  for (size_t bi = 0; bi < ph_blocks.size(); ++bi)
    x = graph_block(g, ph_blocks[bi], x, b, t, cfg, Mask::none,
                    static_cast<int>(bi), nullptr, nullptr);
  auto h = g.layer_norm(x, g.param(ph_lnf_g), g.param(ph_lnf_b), 1e-5);
  auto pooled = g.mean_pool_seq(h, b, t);
  return g.linear(pooled, g.param(ph_w), g.param(ph_b));  // [B x 1]
}

}  // namespace vqnqs
