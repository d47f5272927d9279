#pragma once

#include <complex>
#include <functional>

#include "vqnqs/flops.hpp"
#include "vqnqs/hamiltonian.hpp"
#include "vqnqs/model.hpp"

namespace vqnqs {

// Compressed activation stream over K sequences of T token positions:
// location (k, p) maps through I to one of U unique rows of V. Identity keys
// chain through the network; locations sharing a key provably carry equal
// vectors, so per-location work runs on V only.
struct CompressedBatch {
  int64_t K = 0, T = 0;
  std::vector<int32_t> I;     // K*T -> row of V
  Tensor V;                   // [U x width]
  std::vector<uint64_t> ids;  // U identity keys
  std::vector<int32_t> pos;   // U token positions (uniform within a group)

  int64_t U() const { return V.rows(); }
  Tensor expand() const;  // [K*T x width] dense gather
};

// Op kinds admitted by apply_per_location. `attention` is listed so that
// requesting it through the per-location path fails loudly.
enum class LocOp { embed, layer_norm, linear, continuation, output_head,
                   attention };

struct PerLocationOp {
  LocOp kind = LocOp::linear;
  uint64_t tag = 0;        // identity-chain salt; caller folds in block index
  bool quantized = false;  // meters the quantized-ops twin counters
  std::function<Tensor(const Tensor&)> fn;  // row-independent: [U x w] -> [U x w']
};

// Debug mode: every merge is verified against its preimage (shared residual
// row and VQ index tuple / input token); a mismatch means an identity-key
// collision and raises NumericError. Off by default.
void set_merge_verification(bool on);
bool merge_verification();

// Input-layer compression: keys are hash(position, shifted input token); V
// holds token+positional embeddings of unique keys. Every config must differ
// from base in at most 2 sites (connected sets of 2-local Hamiltonians).
CompressedBatch compress_inputs(const VqTransformer& model,
                                const std::vector<SpinConfiguration>& configs,
                                const SpinConfiguration& base);

// Runs op.fn on unique rows only; ids rechained as hash(old id, op tag).
// Logs per-location FLOPs at U rows plus the K*T-row dense shadow.
CompressedBatch apply_per_location(const PerLocationOp& op,
                                   const CompressedBatch& b);

// Expands q/k/v and runs full multi-head attention per sequence (dense cost).
Tensor attention_dense(const CompressedBatch& q, const CompressedBatch& k,
                       const CompressedBatch& v, int n_heads, Mask mask);

// Dense VQ over all K*T attention rows, then merge by
// hash(residual id, VQ index tuple). Returns the continuation input stream:
// V = [U' x 2d] rows (quantized attention || residual).
CompressedBatch requantize(const Tensor& attention_out,
                           const CompressedBatch& residual,
                           const ad::Parameter& codebook, int vq_heads,
                           uint64_t tag);

// Continuation input for blocks without VQ: nothing merges (U' = K*T).
CompressedBatch densify_attention(const Tensor& attention_out,
                                  const CompressedBatch& residual,
                                  uint64_t tag);

// Full compressed forward passes over a connected set (base = configs[0]'s
// reference for the difference bound). Results match the dense evaluation
// paths row for row.
std::vector<double> dedup_log_prob(const VqTransformer& model,
                                   const std::vector<SpinConfiguration>& configs,
                                   const SpinConfiguration& base);
std::vector<double> dedup_phase(const VqTransformer& model,
                                const std::vector<SpinConfiguration>& configs,
                                const SpinConfiguration& base);

struct LocalEnergyResult {
  std::complex<double> value;
  flops::Ledger ledger;  // dedup counters + dense shadow for the same pass
};

// E_loc(s) = sum over connected s' of H_{s s'} * Psi(s')/Psi(s), evaluated
// through the compressed pipeline.
LocalEnergyResult local_energy_batch(const VqTransformer& model,
                                     const HamiltonianModel& h,
                                     const SpinConfiguration& s);

}  // namespace vqnqs
