#pragma once

#include <cmath>
#include <complex>
#include <string>
#include <vector>

#include "vqnqs/autodiff.hpp"
#include "vqnqs/hamiltonian.hpp"

namespace vqnqs {

struct ModelConfig {
  int n_sites = 4;
  int local_dim = kLocalDim;
  int group_size = 2;   // K_g particles per token
  int d_hidden = 32;
  int n_heads = 4;
  int n_blocks = 2;
  bool trailing_half_block = true;  // extra attention-only block, no VQ
  bool vq_enabled = true;
  int vq_heads = 1;       // H
  int vq_codebook = 64;   // Q
  double vq_temperature = 1.0;
  bool vq_gumbel = false;
  double vq_init_scale = 0.05;
  bool phase_enabled = false;

  int seq_len() const { return (n_sites + group_size - 1) / group_size; }
  int vocab() const {
    int v = 1;
    for (int i = 0; i < group_size; ++i) v *= local_dim;
    return v;
  }
  // number of valid classes at the final position (< vocab only when
  // n_sites is not divisible by group_size)
  int last_vocab() const {
    int rem = n_sites % group_size;
    if (rem == 0) return vocab();
    int v = 1;
    for (int i = 0; i < rem; ++i) v *= local_dim;
    return v;
  }
  double bandwidth_bits() const {
    return vq_enabled ? vq_heads * std::log2(double(vq_codebook)) : 0.0;
  }
  void validate() const;
};

// Dead-code bookkeeping for one codebook: per-code usage EMA, consecutive
// below-threshold step counts, and a reservoir of recent pre-quantization
// segments used to reseed stale codes.
struct CodebookState {
  int heads = 0;
  int q = 0;
  int64_t dh = 0;
  double decay = 0.99;
  double threshold = 1e-3;
  int t_dead = 200;
  std::vector<double> usage_ema;  // heads*q
  std::vector<int> below_steps;   // heads*q
  std::vector<double> recent;     // heads * cap * dh ring buffer
  std::vector<int64_t> recent_n;  // per head: segments ever offered
  static constexpr int kReservoir = 256;

  void init(int heads_, int q_, int64_t dh_);
  // picks is row-major over (row, head); prequant is the [rows x d_vq] input
  void observe_step(const std::vector<int>& picks, const Tensor& prequant,
                    Rng& rng);
  // reseed codes below threshold for t_dead consecutive steps; returns count
  int maintain(ad::Parameter& w, Rng& rng);
  double used_fraction() const;
};

struct Block {
  ad::Parameter ln1_g, ln1_b;
  ad::Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  bool has_ffn = true;
  ad::Parameter ln2_g, ln2_b, w1, b1, w2, b2;
  bool has_vq = false;
  ad::Parameter codebook;  // [H*Q x d_hidden/H]
  CodebookState cb;
};

// Per-block VQ activity captured during a training forward pass, consumed by
// the trainer to update codebook usage statistics.
struct VqTrace {
  struct Entry {
    int block = 0;
    std::vector<int> picks;  // row-major (row, head)
    Tensor prequant;         // [rows x d_hidden] attention output
  };
  std::vector<Entry> entries;
};

// The VQ-NQS ansatz: a causal decoder transformer for the normalized
// distribution P(s) and an optional bidirectional encoder for the phase.
// log Psi(s) = 0.5*log P(s) + i*phi(s).
struct VqTransformer {
  ModelConfig cfg;

  ad::Parameter tok_embed;  // [(vocab+1) x d], last row = begin-of-sequence
  ad::Parameter pos_embed;  // [T x d]
  std::vector<Block> blocks;
  ad::Parameter lnf_g, lnf_b, head_w, head_b;

  ad::Parameter ph_tok_embed, ph_pos_embed;
  std::vector<Block> ph_blocks;
  ad::Parameter ph_lnf_g, ph_lnf_b, ph_w, ph_b;

  static VqTransformer init(const ModelConfig& cfg, Rng& rng);

  // stable order: decoder tensors then phase tensors
  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;

  std::vector<int> tokenize(const SpinConfiguration& s) const;
  SpinConfiguration detokenize(const std::vector<int>& tokens) const;

  // --- evaluation paths (no tape) ---
  double log_prob(const SpinConfiguration& s) const;
  std::vector<double> log_prob_batch(
      const std::vector<SpinConfiguration>& batch) const;
  double phase(const SpinConfiguration& s) const;
  std::vector<double> phase_batch(
      const std::vector<SpinConfiguration>& batch) const;
  std::complex<double> log_psi(const SpinConfiguration& s) const;

  // per-row log-probabilities over the vocabulary for a batch of
  // BOS-shifted id rows (exposed for the sampler and the dedup engine)
  Tensor decoder_logprob_rows(const std::vector<int>& ids, int64_t batch,
                              int64_t seq_len) const;

  struct SampleResult {
    std::vector<SpinConfiguration> configs;
    std::vector<double> log_probs;  // recomputed with the evaluation path
  };
  SampleResult sample(int count, Rng& rng) const;

  // --- training graphs (non-const: graphs reference parameters) ---
  ad::Graph::Id build_log_prob(ad::Graph& g,
                               const std::vector<SpinConfiguration>& batch,
                               VqTrace* trace = nullptr,
                               Rng* gumbel_rng = nullptr);  // [B x 1]
  ad::Graph::Id build_phase(ad::Graph& g,
                            const std::vector<SpinConfiguration>& batch);

  // quantized-ops flags per block (true when downstream of at least one VQ)
  bool pre_quantized(int block) const;
  bool cont_quantized(int block) const;
  bool head_quantized() const;
};

// Hard multi-head VQ over rows of x (no tape): returns codebook rows; picks
// row-major over (row, head). Logs vq_distance FLOPs. Matches the training
// op's selection exactly (squared-distance argmin, ties to lowest index).
Tensor vq_apply_rows(const ad::Parameter& codebook, const Tensor& x, int heads,
                     std::vector<int>* picks_out = nullptr);

}  // namespace vqnqs
