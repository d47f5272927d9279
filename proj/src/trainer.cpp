#include "vqnqs/trainer.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <thread>

#include "json.hpp"
#include "vqnqs/checkpoint.hpp"
#include "vqnqs/exact.hpp"

namespace vqnqs {

namespace {

std::string config_string(const SpinConfiguration& s) {
  std::string out;
  out.reserve(s.size());
  for (uint8_t v : s) out.push_back(v ? '1' : '0');
  return out;
}

std::string step_path(const std::string& out_dir, int step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step_%06d.ckpt", step);
  return out_dir + "/ckpt/" + buf;
}

// mean used fraction over VQ-carrying blocks after maintenance
double codebook_usage(const VqTransformer& model) {
  double acc = 0.0;
  int n = 0;
  for (const auto& blk : model.blocks)
    if (blk.has_vq) {
      acc += blk.cb.used_fraction();
      ++n;
    }
  return n ? acc / n : 1.0;
}

void codebook_upkeep(VqTransformer& model, const VqTrace& trace, Rng& rng) {
  for (const auto& e : trace.entries)
    model.blocks[e.block].cb.observe_step(e.picks, e.prequant, rng);
  for (auto& blk : model.blocks)
    if (blk.has_vq) blk.cb.maintain(blk.codebook, rng);
}

}  // namespace

void TrainConfig::validate() const {
  if (samples_per_step < 2) throw ConfigError("samples_per_step must be >= 2");
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
  if (optimizer != "adam" && optimizer != "sgd")
    throw ConfigError("optimizer must be 'adam' or 'sgd', got '" + optimizer +
                      "'");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
    throw ConfigError("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("adam_eps must be > 0");
  if (grad_clip < 0) throw ConfigError("grad_clip must be >= 0");
  if (!(vq_tau_start > 0) || !(vq_tau_end > 0))
    throw ConfigError("vq temperatures must be > 0");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
  if (distill.batch_size < 2)
    throw ConfigError("distill batch_size must be >= 2");
}

Optimizer::Optimizer(std::vector<ad::Parameter*> params,
                     const TrainConfig& cfg)
    : params_(std::move(params)),
      adam_(cfg.optimizer == "adam"),
      beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.adam_eps) {
  if (!adam_ && cfg.optimizer != "sgd")
    throw ConfigError("unknown optimizer '" + cfg.optimizer + "'");
  if (adam_)
    for (auto* p : params_) {
      m_.emplace_back(Tensor::zeros(p->value.shape));
      v_.emplace_back(Tensor::zeros(p->value.shape));
    }
}

double Optimizer::clip(double max_norm) {
  double ss = 0.0;
  for (auto* p : params_)
    for (double g : p->grad.data) ss += g * g;
  const double norm = std::sqrt(ss);
  if (max_norm > 0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto* p : params_)
      for (double& g : p->grad.data) g *= scale;
  }
  return norm;
}

void Optimizer::step(double lr) {
  ++t_;
  if (!adam_) {
    for (auto* p : params_)
      for (size_t i = 0; i < p->value.data.size(); ++i)
        p->value.data[i] -= lr * p->grad.data[i];
    return;
  }
  const double c1 = 1.0 - std::pow(beta1_, double(t_));
  const double c2 = 1.0 - std::pow(beta2_, double(t_));
  for (size_t k = 0; k < params_.size(); ++k) {
    auto* p = params_[k];
    auto& m = m_[k].data;
    auto& v = v_[k].data;
    for (size_t i = 0; i < p->value.data.size(); ++i) {
      const double g = p->grad.data[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      p->value.data[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

void Optimizer::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

double scheduled_lr(const TrainConfig& cfg, int step) {
  if (!cfg.cosine_decay || cfg.steps <= 1) return cfg.learning_rate;
  const double x = double(step) / double(cfg.steps);
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * x));
}

double scheduled_tau(const TrainConfig& cfg, int step) {
  if (cfg.steps <= 1 || cfg.vq_tau_start == cfg.vq_tau_end)
    return cfg.vq_tau_start;
  const double x = double(step) / double(cfg.steps - 1);
  return cfg.vq_tau_start * std::pow(cfg.vq_tau_end / cfg.vq_tau_start, x);
}

int worker_count() {
  static const int w = [] {
    const char* e = std::getenv("VQNQS_WORKERS");
    if (!e) return 1;
    const int v = std::atoi(e);
    return v < 1 ? 1 : (v > 64 ? 64 : v);
  }();
  return w;
}

std::vector<std::complex<double>> local_energies(
    const VqTransformer& model, const HamiltonianModel& h,
    const std::vector<SpinConfiguration>& batch, flops::Ledger* ledger) {
  std::vector<std::complex<double>> out(batch.size());
  const int workers =
      std::max(1, std::min<int>(worker_count(), int(batch.size())));
  std::vector<flops::Ledger> parts(workers);

  auto run = [&](int w) {
    for (size_t i = size_t(w); i < batch.size(); i += size_t(workers)) {
      auto r = local_energy_batch(model, h, batch[i]);
      out[i] = r.value;
      parts[w] += r.ledger;
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (auto& t : pool) t.join();
  }
  for (size_t i = 0; i < out.size(); ++i)
    if (!std::isfinite(out[i].real()) || !std::isfinite(out[i].imag()))
      throw NumericError("non-finite local energy at configuration " +
                         config_string(batch[i]));
  if (ledger)
    for (const auto& part : parts) *ledger += part;
  return out;
}

namespace {

void fill_stats(VmcEstimate& est) {
  const size_t k = est.local_energies.size();
  double mean = 0.0;
  for (const auto& e : est.local_energies) mean += e.real();
  mean /= double(k);
  double var = 0.0;
  for (const auto& e : est.local_energies) {
    const double d = e.real() - mean;
    var += d * d;
  }
  var = k > 1 ? var / double(k - 1) : 0.0;
  est.energy = mean;
  est.variance = var;
  est.std_err = std::sqrt(var / double(k));
}

}  // namespace

VmcEstimate estimate_energy(const VqTransformer& model,
                            const HamiltonianModel& h, int k_samples,
                            Rng& rng) {
  if (k_samples < 1) throw ConfigError("k_samples must be >= 1");
  VmcEstimate est;
  auto sr = model.sample(k_samples, rng);
  est.local_energies = local_energies(model, h, sr.configs, &est.ledger);
  fill_stats(est);
  return est;
}

VmcEstimate vmc_gradient(VqTransformer& model, const HamiltonianModel& h,
                         int k_samples, double vq_tau, bool gumbel, Rng& rng,
                         VqTrace* trace) {
  if (k_samples < 2) throw ConfigError("k_samples must be >= 2");
  for (auto* p : model.parameters()) p->zero_grad();

  VmcEstimate est;
  auto sr = model.sample(k_samples, rng);
  est.local_energies = local_energies(model, h, sr.configs, &est.ledger);
  fill_stats(est);

  std::complex<double> cmean = 0.0;
  for (const auto& e : est.local_energies) cmean += e;
  cmean /= double(k_samples);

  std::vector<double> wa(k_samples), wb(k_samples);
  for (int i = 0; i < k_samples; ++i) {
    const auto d = est.local_energies[i] - cmean;
    wa[i] = d.real() / double(k_samples);
    wb[i] = 2.0 * d.imag() / double(k_samples);
  }

  model.cfg.vq_temperature = vq_tau;
  model.cfg.vq_gumbel = gumbel;
  ad::Graph g;
  auto lp = model.build_log_prob(g, sr.configs, trace, gumbel ? &rng : nullptr);
  auto root = g.weighted_sum(lp, wa);
  if (model.cfg.phase_enabled) {
    auto ph = model.build_phase(g, sr.configs);
    root = g.add(root, g.weighted_sum(ph, wb));
  }
  g.backward(root);
  return est;
}

double enumerated_energy(const VqTransformer& model,
                         const HamiltonianModel& h) {
  const int n = model.cfg.n_sites;
  if (n != h.n_sites()) throw ConfigError("model/system size mismatch");
  if (n > 20) throw CapabilityError("enumeration limited to 20 sites");
  const uint64_t dim = 1ull << n;
  std::vector<SpinConfiguration> all(dim);
  for (uint64_t i = 0; i < dim; ++i) all[i] = index_to_config(i, n);
  auto lp = model.log_prob_batch(all);
  std::vector<double> psi(dim);
  for (uint64_t i = 0; i < dim; ++i) psi[i] = std::exp(0.5 * lp[i]);
  return rayleigh_quotient(h, psi);
}

double exact_energy_gradient(VqTransformer& model, const HamiltonianModel& h) {
  if (model.cfg.phase_enabled)
    throw CapabilityError(
        "exact-expectation gradient supports amplitude networks only");
  const int n = model.cfg.n_sites;
  if (n != h.n_sites()) throw ConfigError("model/system size mismatch");
  if (n > 16) throw CapabilityError("exact gradient limited to 16 sites");
  const uint64_t dim = 1ull << n;

  std::vector<SpinConfiguration> all(dim);
  for (uint64_t i = 0; i < dim; ++i) all[i] = index_to_config(i, n);
  auto lp = model.log_prob_batch(all);
  std::vector<double> psi(dim);
  for (uint64_t i = 0; i < dim; ++i) psi[i] = std::exp(0.5 * lp[i]);
  std::vector<double> hpsi;
  apply_hamiltonian(h, psi, hpsi);
  double energy = 0.0;
  for (uint64_t i = 0; i < dim; ++i) energy += psi[i] * hpsi[i];
  double norm = 0.0;
  for (uint64_t i = 0; i < dim; ++i) norm += psi[i] * psi[i];
  energy /= norm;

  // d/dtheta sum_s P(s) E_loc(s) = sum_s P(s) (E_loc(s) - E) dlogP(s)
  for (auto* p : model.parameters()) p->zero_grad();
  const uint64_t chunk = 512;
  for (uint64_t a = 0; a < dim; a += chunk) {
    const uint64_t b = std::min(dim, a + chunk);
    std::vector<SpinConfiguration> part(all.begin() + a, all.begin() + b);
    std::vector<double> w(b - a);
    for (uint64_t i = a; i < b; ++i)
      w[i - a] = (psi[i] * hpsi[i] - energy * psi[i] * psi[i]) / norm;
    ad::Graph g;
    auto ids = model.build_log_prob(g, part);
    g.backward(g.weighted_sum(ids, std::move(w)));
  }
  return energy;
}

VmcEstimate gradient_step(VqTransformer& model, const HamiltonianModel& h,
                          const TrainConfig& cfg, int step, Optimizer& opt,
                          Rng& rng, double* grad_norm) {
  VqTrace trace;
  auto est = vmc_gradient(model, h, cfg.samples_per_step,
                          scheduled_tau(cfg, step), cfg.vq_gumbel, rng, &trace);
  const double gn = opt.clip(cfg.grad_clip);
  if (!std::isfinite(gn))
    throw NumericError("non-finite gradient norm at step " +
                       std::to_string(step));
  opt.step(scheduled_lr(cfg, step));
  codebook_upkeep(model, trace, rng);
  if (grad_norm) *grad_norm = gn;
  return est;
}

TrainResult train_vmc(VqTransformer& model, const HamiltonianModel& h,
                      const TrainConfig& cfg) {
  cfg.validate();
  TrainResult result;
  Rng rng(cfg.seed);
  Optimizer opt(model.parameters(), cfg);

  std::ofstream log;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir + "/ckpt");
    log.open(cfg.out_dir + "/log.ndjson");
    if (!log) throw ConfigError("cannot open " + cfg.out_dir + "/log.ndjson");
  }

  for (int step = 0; step < cfg.steps; ++step) {
    double gn = 0.0;
    auto est = gradient_step(model, h, cfg, step, opt, rng, &gn);
    StepRecord rec;
    rec.step = step;
    rec.energy = est.energy;
    rec.std_err = est.std_err;
    rec.grad_norm = gn;
    rec.lr = scheduled_lr(cfg, step);
    rec.codebook_usage = codebook_usage(model);
    result.trace.push_back(rec);

    if (log.is_open() && step % cfg.log_every == 0) {
      nlohmann::json j;
      j["step"] = rec.step;
      j["energy"] = rec.energy;
      j["std_err"] = rec.std_err;
      j["grad_norm"] = rec.grad_norm;
      j["lr"] = rec.lr;
      j["codebook_usage"] = rec.codebook_usage;
      log << j.dump() << '\n';
    }
    if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 &&
        (step + 1) % cfg.checkpoint_every == 0)
      save_checkpoint(model, step_path(cfg.out_dir, step + 1));
  }
  if (!cfg.out_dir.empty()) {
    result.checkpoint_path = cfg.out_dir + "/ckpt/final.ckpt";
    save_checkpoint(model, result.checkpoint_path);
  }
  return result;
}

DistillResult distill(const VqTransformer& teacher, VqTransformer& student,
                      const TrainConfig& cfg) {
  cfg.validate();
  if (teacher.cfg.n_sites != student.cfg.n_sites)
    throw ConfigError("teacher and student operate on different systems");
  DistillResult result;
  Rng rng(cfg.seed);
  Optimizer opt(student.parameters(), cfg);

  std::ofstream log;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir + "/ckpt");
    log.open(cfg.out_dir + "/log.ndjson");
    if (!log) throw ConfigError("cannot open " + cfg.out_dir + "/log.ndjson");
  }

  const int batch = cfg.distill.batch_size;
  for (int step = 0; step < cfg.steps; ++step) {
    auto sr = teacher.sample(batch, rng);
    Tensor target({int64_t(batch), 1});
    for (int i = 0; i < batch; ++i) target.at(i, 0) = 0.5 * sr.log_probs[i];

    opt.zero_grad();
    student.cfg.vq_temperature = scheduled_tau(cfg, step);
    student.cfg.vq_gumbel = cfg.vq_gumbel;
    ad::Graph g;
    VqTrace trace;
    auto lp = student.build_log_prob(g, sr.configs, &trace,
                                     cfg.vq_gumbel ? &rng : nullptr);
    auto diff = g.sub(g.scale(lp, 0.5), g.constant(std::move(target)));
    auto loss = g.scale(g.sum_all(g.mul(diff, diff)), 1.0 / double(batch));
    g.backward(loss);
    const double lv = g.value(loss).at(0, 0);
    if (!std::isfinite(lv))
      throw NumericError("non-finite distillation loss at step " +
                         std::to_string(step));
    opt.clip(cfg.grad_clip);
    opt.step(scheduled_lr(cfg, step));
    codebook_upkeep(student, trace, rng);
    result.loss_trace.push_back(lv);

    if (log.is_open() && step % cfg.log_every == 0) {
      nlohmann::json j;
      j["step"] = step;
      j["loss"] = lv;
      j["lr"] = scheduled_lr(cfg, step);
      j["codebook_usage"] = codebook_usage(student);
      log << j.dump() << '\n';
    }
  }
  result.final_loss = result.loss_trace.back();
  if (!cfg.out_dir.empty()) {
    result.checkpoint_path = cfg.out_dir + "/ckpt/final.ckpt";
    save_checkpoint(student, result.checkpoint_path);
  }
  return result;
}

}  // namespace vqnqs
