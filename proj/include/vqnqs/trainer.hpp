#pragma once

#include <complex>
#include <string>
#include <vector>

#include "vqnqs/dedup.hpp"
#include "vqnqs/hamiltonian.hpp"
#include "vqnqs/model.hpp"

namespace vqnqs {

struct VmcEstimate {
  double energy = 0.0;    // arithmetic mean of Re E_loc over the batch
  double std_err = 0.0;   // sqrt(sample variance / K)
  double variance = 0.0;  // unbiased sample variance of Re E_loc
  std::vector<std::complex<double>> local_energies;
  flops::Ledger ledger;  // summed over the batch
};

struct DistillSettings {
  std::string teacher_checkpoint;  // resolved by the CLI; library takes models
  int batch_size = 512;
};

struct TrainConfig {
  int samples_per_step = 512;
  int steps = 200;
  std::string optimizer = "adam";  // "adam" | "sgd"
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double learning_rate = 1e-3;
  bool cosine_decay = true;
  double grad_clip = 0.0;  // global-norm cap; 0 disables
  uint64_t seed = 0;
  double vq_tau_start = 1.0;  // surrogate softmax temperature schedule
  double vq_tau_end = 1.0;
  bool vq_gumbel = false;
  int checkpoint_every = 0;  // steps between checkpoints; 0 = final only
  int log_every = 1;
  std::string out_dir;  // empty = in-memory trace only
  DistillSettings distill;

  void validate() const;
};

// Plain first-order optimizer over a fixed parameter set.
class Optimizer {
 public:
  Optimizer(std::vector<ad::Parameter*> params, const TrainConfig& cfg);
  // Global-norm clipping; no-op when max_norm <= 0. Returns the pre-clip norm.
  double clip(double max_norm);
  void step(double lr);
  void zero_grad();

 private:
  std::vector<ad::Parameter*> params_;
  bool adam_ = true;
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Cosine-decayed learning rate / geometric VQ temperature for step `t`.
double scheduled_lr(const TrainConfig& cfg, int step);
double scheduled_tau(const TrainConfig& cfg, int step);

// Worker pool width: VQNQS_WORKERS env override, default 1.
int worker_count();

// Local energies for an explicit configuration batch. Samples fan out over
// workers; results and ledgers reduce in index order, so the output is
// independent of the worker count. Throws NumericError naming the offending
// configuration when an E_loc is non-finite.
std::vector<std::complex<double>> local_energies(
    const VqTransformer& model, const HamiltonianModel& h,
    const std::vector<SpinConfiguration>& batch,
    flops::Ledger* ledger = nullptr);

// Born-sampled energy estimate over k_samples direct samples.
VmcEstimate estimate_energy(const VqTransformer& model,
                            const HamiltonianModel& h, int k_samples,
                            Rng& rng);

// One stochastic gradient accumulation: samples, evaluates local energies,
// and adds dE/dtheta to the parameter grad fields (zeroed first). The
// surrogate sum_i [Re(E_i - Ebar) log P_i + 2 Im(E_i - Ebar) phi_i] / K
// has the score-function gradient as its tape derivative. Returns the
// estimate; `trace` receives per-block VQ activity for codebook upkeep.
VmcEstimate vmc_gradient(VqTransformer& model, const HamiltonianModel& h,
                         int k_samples, double vq_tau, bool gumbel, Rng& rng,
                         VqTrace* trace = nullptr);

// Full-enumeration (exact-expectation) energy and gradient for small systems:
// every configuration enters with its Born weight, so the result is the
// derivative of the variational energy itself. Accumulates into grads and
// returns the energy. Amplitude networks only (phase must be disabled).
double exact_energy_gradient(VqTransformer& model, const HamiltonianModel& h);

// Variational energy of the current model by full enumeration (no gradient).
double enumerated_energy(const VqTransformer& model, const HamiltonianModel& h);

// Samples, accumulates the gradient, clips, applies the optimizer, and runs
// codebook usage bookkeeping. One iteration of train_vmc.
VmcEstimate gradient_step(VqTransformer& model, const HamiltonianModel& h,
                          const TrainConfig& cfg, int step, Optimizer& opt,
                          Rng& rng, double* grad_norm = nullptr);

struct StepRecord {
  int step = 0;
  double energy = 0.0;
  double std_err = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  double codebook_usage = 1.0;  // mean used fraction over VQ blocks
};

struct TrainResult {
  std::vector<StepRecord> trace;
  std::string checkpoint_path;  // final checkpoint when out_dir is set
};

TrainResult train_vmc(VqTransformer& model, const HamiltonianModel& h,
                      const TrainConfig& cfg);

struct DistillResult {
  std::vector<double> loss_trace;
  double final_loss = 0.0;
  std::string checkpoint_path;
};

// Teacher -> student transfer: repeatedly sample a batch from the teacher and
// minimize the mean squared difference of log-amplitudes (0.5 log P).
DistillResult distill(const VqTransformer& teacher, VqTransformer& student,
                      const TrainConfig& cfg);

}  // namespace vqnqs
