#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "vqnqs/checkpoint.hpp"
#include "vqnqs/exact.hpp"
#include "vqnqs/trainer.hpp"

using namespace vqnqs;

namespace {

ModelConfig small_cfg(int n_sites, bool vq = true) {
  ModelConfig cfg;
  cfg.n_sites = n_sites;
  cfg.group_size = 2;
  cfg.d_hidden = 16;
  cfg.n_heads = 2;
  cfg.n_blocks = 1;
  cfg.vq_enabled = vq;
  cfg.vq_heads = 2;
  cfg.vq_codebook = 8;
  return cfg;
}

HamiltonianModel tfim_chain(int n, double j = 1.0, double gamma = 1.0) {
  HamiltonianModel h;
  h.kind = HamiltonianModel::Kind::tfim;
  h.lattice = build_lattice(Lattice::Kind::chain1d, {n});
  h.J = j;
  h.Gamma = gamma;
  return h;
}

std::vector<double> flat_grads(VqTransformer& m) {
  std::vector<double> out;
  for (auto* p : m.parameters())
    out.insert(out.end(), p->grad.data.begin(), p->grad.data.end());
  return out;
}

double rel_norm_diff(const std::vector<double>& a,
                     const std::vector<double>& b) {
  double d2 = 0.0, b2 = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    d2 += (a[i] - b[i]) * (a[i] - b[i]);
    b2 += b[i] * b[i];
  }
  return std::sqrt(d2) / std::max(std::sqrt(b2), 1e-300);
}

}  // namespace

TEST_CASE("exact-expectation gradient matches the Rayleigh-quotient tape") {
  const int n = 6;
  HamiltonianModel h = tfim_chain(n);
  ModelConfig cfg = small_cfg(n);
  Rng rng(41);
  auto m = VqTransformer::init(cfg, rng);

  const double e_est = exact_energy_gradient(m, h);
  auto grad_estimator = flat_grads(m);

  // independent tape: E = psi^T H psi - E * psi^T psi with psi = exp(lp/2)
  const uint64_t dim = 1ull << n;
  std::vector<SpinConfiguration> all(dim);
  for (uint64_t i = 0; i < dim; ++i) all[i] = index_to_config(i, n);
  Tensor hd = Tensor::zeros({int64_t(dim), int64_t(dim)});
  std::vector<IndexedEntry> row;
  for (uint64_t i = 0; i < dim; ++i) {
    connected_set_indexed(h, i, row);
    for (const auto& e : row) hd.at(i, int64_t(e.index)) += e.coeff;
  }
  for (auto* p : m.parameters()) p->zero_grad();
  ad::Graph g;
  auto lp = m.build_log_prob(g, all);
  auto psi = g.exp(g.scale(lp, 0.5));
  auto hpsi = g.matmul(g.constant(hd), psi);
  auto num = g.dot(psi, hpsi);
  auto den = g.dot(psi, psi);
  const double e_tape = g.value(num).at(0, 0) / g.value(den).at(0, 0);
  g.backward(g.sub(num, g.scale(den, e_tape)));
  auto grad_tape = flat_grads(m);

  CHECK(std::abs(e_est - e_tape) < 1e-9);
  CHECK(rel_norm_diff(grad_estimator, grad_tape) < 1e-6);

  // energy agrees with the quotient over eval-path amplitudes
  auto lpv = m.log_prob_batch(all);
  std::vector<double> psiv(dim);
  for (uint64_t i = 0; i < dim; ++i) psiv[i] = std::exp(0.5 * lpv[i]);
  CHECK(std::abs(e_est - rayleigh_quotient(h, psiv)) < 1e-9);
}

TEST_CASE("gradient scales linearly with the Hamiltonian") {
  const int n = 6;
  ModelConfig cfg = small_cfg(n);
  Rng rng(42);
  auto m = VqTransformer::init(cfg, rng);
  const double e1 = exact_energy_gradient(m, tfim_chain(n, 1.0, 1.0));
  auto g1 = flat_grads(m);
  const double e2 = exact_energy_gradient(m, tfim_chain(n, 2.0, 2.0));
  auto g2 = flat_grads(m);
  CHECK(e2 == doctest::Approx(2.0 * e1).epsilon(1e-12));
  for (auto& v : g1) v *= 2.0;
  CHECK(rel_norm_diff(g2, g1) < 1e-12);
}

TEST_CASE("classical local energies are the diagonal matrix elements") {
  const int n = 8;
  HamiltonianModel h = tfim_chain(n, 1.0, /*gamma=*/0.0);
  ModelConfig cfg = small_cfg(n);
  Rng rng(43);
  auto m = VqTransformer::init(cfg, rng);
  Rng srng(7);
  auto est = estimate_energy(m, h, 32, srng);
  REQUIRE(est.local_energies.size() == 32);

  Rng srng2(7);
  auto sr = m.sample(32, srng2);
  double mean = 0.0;
  for (int i = 0; i < 32; ++i) {
    double diag = 0.0;
    for (auto [a, b] : h.lattice.bonds) {
      const double za = sr.configs[i][a] ? 1.0 : -1.0;
      const double zb = sr.configs[i][b] ? 1.0 : -1.0;
      diag -= h.J * za * zb;
    }
    CHECK(est.local_energies[i].real() == doctest::Approx(diag).epsilon(1e-12));
    CHECK(est.local_energies[i].imag() == 0.0);
    mean += diag;
  }
  CHECK(est.energy == doctest::Approx(mean / 32.0).epsilon(1e-12));
}

TEST_CASE("lookup-table eigenstate ansatz has zero-variance local energies") {
  // TFIM chain: strictly positive ground state, no sector zeros
  {
    HamiltonianModel h = tfim_chain(10);
    auto gs = ground_state(h, 1e-13);
    REQUIRE(gs.residual < 5e-13);
    const uint64_t dim = 1ull << 10;
    double max_amp = 0.0;
    for (double a : gs.amplitudes) max_amp = std::max(max_amp, std::abs(a));
    std::vector<IndexedEntry> row;
    int tested = 0;
    for (uint64_t s = 0; s < dim && tested < 200; s += 7) {
      if (std::abs(gs.amplitudes[s]) < 1e-3 * max_amp) continue;
      connected_set_indexed(h, s, row);
      double eloc = 0.0;
      for (const auto& e : row)
        eloc += e.coeff * gs.amplitudes[e.index] / gs.amplitudes[s];
      CHECK(std::abs(eloc - gs.energy) < 1e-9);
      ++tested;
    }
    CHECK(tested > 50);
  }
  // Heisenberg grid: amplitudes vanish outside the ground Sz sector
  {
    HamiltonianModel h;
    h.kind = HamiltonianModel::Kind::heisenberg;
    h.lattice = build_lattice(Lattice::Kind::grid2d, {2, 3});
    auto gs = ground_state(h, 1e-13);
    REQUIRE(gs.residual < 5e-13);
    double max_amp = 0.0;
    for (double a : gs.amplitudes) max_amp = std::max(max_amp, std::abs(a));
    std::vector<IndexedEntry> row;
    int tested = 0;
    for (uint64_t s = 0; s < 64; ++s) {
      if (std::abs(gs.amplitudes[s]) < 1e-3 * max_amp) continue;
      connected_set_indexed(h, s, row);
      double eloc = 0.0;
      for (const auto& e : row)
        eloc += e.coeff * gs.amplitudes[e.index] / gs.amplitudes[s];
      CHECK(std::abs(eloc - gs.energy) < 1e-9);
      ++tested;
    }
    CHECK(tested >= 10);
  }
}

TEST_CASE("energy estimates and training runs are seed-deterministic") {
  const int n = 6;
  HamiltonianModel h = tfim_chain(n);
  ModelConfig cfg = small_cfg(n);

  auto make = [&] { Rng r(44); return VqTransformer::init(cfg, r); };
  auto m1 = make();
  Rng r1(5), r2(5);
  auto e1 = estimate_energy(m1, h, 16, r1);
  auto e2 = estimate_energy(m1, h, 16, r2);
  CHECK(e1.energy == e2.energy);
  CHECK(e1.std_err == e2.std_err);

  TrainConfig tc;
  tc.samples_per_step = 8;
  tc.steps = 3;
  tc.seed = 9;
  tc.learning_rate = 1e-3;
  auto ma = make();
  auto mb = make();
  auto ra = train_vmc(ma, h, tc);
  auto rb = train_vmc(mb, h, tc);
  REQUIRE(ra.trace.size() == rb.trace.size());
  for (size_t i = 0; i < ra.trace.size(); ++i) {
    CHECK(ra.trace[i].energy == rb.trace[i].energy);
    CHECK(ra.trace[i].grad_norm == rb.trace[i].grad_norm);
    CHECK(ra.trace[i].codebook_usage == rb.trace[i].codebook_usage);
  }
  // and the trained parameters themselves are bitwise equal
  auto pa = ma.parameters();
  auto pb = mb.parameters();
  for (size_t i = 0; i < pa.size(); ++i)
    CHECK(pa[i]->value.data == pb[i]->value.data);
}

TEST_CASE("optimizers, clipping, and schedules behave as specified") {
  TrainConfig cfg;
  cfg.optimizer = "sgd";
  ad::Parameter x("x", Tensor::full({1}, 3.0));
  Optimizer sgd({&x}, cfg);
  x.grad.fill(2.0);
  sgd.step(0.5);
  CHECK(x.value.data[0] == doctest::Approx(2.0).epsilon(1e-15));

  // clip rescales to the cap and reports the pre-clip norm
  x.grad.fill(4.0);
  const double norm = sgd.clip(1.0);
  CHECK(norm == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(x.grad.data[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(sgd.clip(0.0) == doctest::Approx(1.0).epsilon(1e-12));

  // adam drives a quadratic bowl toward its minimum
  TrainConfig acfg;
  acfg.optimizer = "adam";
  ad::Parameter y("y", Tensor::full({1}, 1.0));
  Optimizer adam({&y}, acfg);
  for (int i = 0; i < 400; ++i) {
    y.grad.data[0] = y.value.data[0];
    adam.step(0.05);
  }
  CHECK(std::abs(y.value.data[0]) < 1e-2);

  TrainConfig bad;
  bad.optimizer = "lbfgs";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  TrainConfig bad2;
  bad2.samples_per_step = 1;
  CHECK_THROWS_AS(bad2.validate(), ConfigError);
  TrainConfig bad3;
  bad3.learning_rate = 0.0;
  CHECK_THROWS_AS(bad3.validate(), ConfigError);

  TrainConfig sch;
  sch.steps = 100;
  sch.learning_rate = 1e-2;
  CHECK(scheduled_lr(sch, 0) == doctest::Approx(1e-2));
  CHECK(scheduled_lr(sch, 50) == doctest::Approx(5e-3));
  CHECK(scheduled_lr(sch, 99) < 1e-5);
  sch.cosine_decay = false;
  CHECK(scheduled_lr(sch, 99) == doctest::Approx(1e-2));
  sch.vq_tau_start = 4.0;
  sch.vq_tau_end = 1.0;
  CHECK(scheduled_tau(sch, 0) == doctest::Approx(4.0));
  CHECK(scheduled_tau(sch, 99) == doctest::Approx(1.0));
}

TEST_CASE("non-finite network parameters abort with the offending config") {
  const int n = 4;
  HamiltonianModel h = tfim_chain(n);
  ModelConfig cfg = small_cfg(n);
  Rng rng(45);
  auto m = VqTransformer::init(cfg, rng);
  auto lp = m.log_prob_batch({{0, 0, 0, 0}});
  (void)lp;
  m.head_b.value.data[0] = std::numeric_limits<double>::quiet_NaN();
  std::vector<SpinConfiguration> batch = {{0, 0, 0, 0}};
  CHECK_THROWS(local_energies(m, h, batch));
}

TEST_CASE("a student copy of its teacher starts at zero distillation loss") {
  const int n = 6;
  ModelConfig cfg = small_cfg(n, /*vq=*/false);
  Rng r1(46), r2(46);
  auto teacher = VqTransformer::init(cfg, r1);
  auto student = VqTransformer::init(cfg, r2);
  TrainConfig tc;
  tc.steps = 1;
  tc.distill.batch_size = 32;
  tc.seed = 3;
  auto res = distill(teacher, student, tc);
  REQUIRE(res.loss_trace.size() == 1);
  CHECK(res.loss_trace[0] < 1e-12);
}

TEST_CASE("distillation moves a fresh student toward the teacher") {
  const int n = 6;
  ModelConfig tcfg = small_cfg(n, /*vq=*/false);
  Rng rt(47);
  auto teacher = VqTransformer::init(tcfg, rt);
  ModelConfig scfg = small_cfg(n, /*vq=*/true);
  scfg.vq_heads = 1;
  scfg.vq_codebook = 16;
  Rng rs(48);
  auto student = VqTransformer::init(scfg, rs);
  TrainConfig tc;
  tc.steps = 150;
  tc.distill.batch_size = 64;
  tc.learning_rate = 3e-3;
  tc.seed = 4;
  auto res = distill(teacher, student, tc);
  const double first = res.loss_trace.front();
  CHECK(res.final_loss < 0.5 * first);

  ModelConfig other = small_cfg(8);
  Rng ro(49);
  auto mismatched = VqTransformer::init(other, ro);
  CHECK_THROWS_AS(distill(teacher, mismatched, tc), ConfigError);
}

TEST_CASE("training writes a parseable log and loadable checkpoints") {
  const int n = 4;
  HamiltonianModel h = tfim_chain(n);
  ModelConfig cfg = small_cfg(n);
  Rng rng(50);
  auto m = VqTransformer::init(cfg, rng);
  const std::string dir = "/tmp/vqnqs_trainer_test";
  std::filesystem::remove_all(dir);
  TrainConfig tc;
  tc.samples_per_step = 8;
  tc.steps = 4;
  tc.seed = 11;
  tc.checkpoint_every = 2;
  tc.out_dir = dir;
  auto res = train_vmc(m, h, tc);
  CHECK(std::filesystem::exists(dir + "/ckpt/step_000002.ckpt"));
  CHECK(std::filesystem::exists(dir + "/ckpt/step_000004.ckpt"));
  REQUIRE(std::filesystem::exists(res.checkpoint_path));

  std::ifstream log(dir + "/log.ndjson");
  REQUIRE(log.good());
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j.contains("energy"));
    CHECK(j.contains("grad_norm"));
    CHECK(j.contains("codebook_usage"));
    CHECK(j["step"] == lines);
    ++lines;
  }
  CHECK(lines == 4);

  auto restored = load_checkpoint(res.checkpoint_path);
  SpinConfiguration probe = {1, 0, 1, 1};
  CHECK(restored.log_prob(probe) == m.log_prob(probe));
  std::filesystem::remove_all(dir);
}

TEST_CASE("a short VMC run lowers the variational energy") {
  const int n = 4;
  HamiltonianModel h = tfim_chain(n);
  ModelConfig cfg = small_cfg(n, /*vq=*/false);
  Rng rng(51);
  auto m = VqTransformer::init(cfg, rng);
  const double e0 = ground_state(h).energy;
  const double before = enumerated_energy(m, h);
  TrainConfig tc;
  tc.samples_per_step = 64;
  tc.steps = 150;
  tc.learning_rate = 5e-3;
  tc.seed = 12;
  train_vmc(m, h, tc);
  const double after = enumerated_energy(m, h);
  CHECK(after < before);
  CHECK((after - e0) / std::abs(e0) < 5e-2);
  CHECK(after >= e0 - 1e-9);  // variational bound
}
