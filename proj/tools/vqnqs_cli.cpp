#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vqnqs/bench.hpp"
#include "vqnqs/checkpoint.hpp"
#include "vqnqs/config.hpp"
#include "vqnqs/exact.hpp"
#include "vqnqs/trainer.hpp"

namespace {

using namespace vqnqs;
using nlohmann::json;

// seed streams: model init and measurement derive from the master seed so a
// run directory's config.json pins every stream
uint64_t init_seed(const RunConfig& c) { return hash_combine(c.seed, 1); }
uint64_t measure_seed(const RunConfig& c) { return hash_combine(c.seed, 2); }

void prepare_run_dir(const RunConfig& cfg) {
  std::filesystem::create_directories(cfg.out_dir);
  write_resolved_config(cfg, cfg.out_dir + "/config.json");
}

int run_ed(const RunConfig& cfg) {
  HamiltonianModel h = cfg.system.build();
  const auto t0 = std::chrono::steady_clock::now();
  DenseGroundState gs = ground_state(h);
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  json rec = {{"system", system_name(h)},
              {"n_sites", h.lattice.sites},
              {"energy", gs.energy},
              {"energy_per_site", gs.per_site_energy},
              {"residual", gs.residual},
              {"iterations", gs.iterations},
              {"wall_time_s", wall}};
  std::ofstream out(cfg.out_dir + "/report.json");
  out << rec.dump(2) << '\n';
  std::printf("%s  E0 = %.12f  per-site %.12f  (residual %.2e)\n",
              system_name(h).c_str(), gs.energy, gs.per_site_energy,
              gs.residual);
  return 0;
}

int run_train(const RunConfig& cfg) {
  HamiltonianModel h = cfg.system.build();
  Rng rng(init_seed(cfg));
  VqTransformer model = VqTransformer::init(cfg.model, rng);
  TrainResult res = train_vmc(model, h, cfg.train);
  if (!res.trace.empty()) {
    const StepRecord& last = res.trace.back();
    std::printf("trained %zu steps  E = %.8f ± %.1e\n", res.trace.size(),
                last.energy, last.std_err);
  }
  std::printf("checkpoint: %s\n", res.checkpoint_path.c_str());
  return 0;
}

int run_distill(const RunConfig& cfg) {
  VqTransformer teacher =
      load_checkpoint(cfg.train.distill.teacher_checkpoint);
  Rng rng(init_seed(cfg));
  VqTransformer student = VqTransformer::init(cfg.model, rng);
  DistillResult res = distill(teacher, student, cfg.train);
  std::printf("distilled %d steps  final loss %.3e\n", cfg.train.steps,
              res.final_loss);
  std::printf("checkpoint: %s\n", res.checkpoint_path.c_str());
  return 0;
}

int run_measure(const RunConfig& cfg, const std::string& ckpt) {
  VqTransformer model = load_checkpoint(ckpt);
  HamiltonianModel h = cfg.system.build();
  if (model.cfg.n_sites != h.lattice.sites)
    throw ConfigError("checkpoint is for " +
                      std::to_string(model.cfg.n_sites) +
                      " sites but the system has " +
                      std::to_string(h.lattice.sites));
  double ref = std::numeric_limits<double>::quiet_NaN();
  if (h.lattice.sites <= 16) ref = ground_state(h).per_site_energy;
  Rng rng(measure_seed(cfg));
  MeasurementReport rep = measure_flops(
      model, h, cfg.measure.samples_per_batch, cfg.measure.batches, rng, ref);
  emit_table({rep}, cfg.out_dir);
  std::printf("%s %s  savings ×%.2f (quantized ×%.2f)  E/N = %.6f\n",
              rep.system.c_str(), rep.model_bits.c_str(), rep.total_savings,
              rep.quantized_ops_savings, rep.energy_per_site);
  std::printf("report: %s/report.csv\n", cfg.out_dir.c_str());
  return 0;
}

int run_sweep(const RunConfig& cfg, const std::vector<int>& sizes) {
  SweepResult sweep =
      scaling_sweep(cfg.model, sizes, cfg.measure.samples_per_batch,
                    cfg.measure.batches, measure_seed(cfg));
  emit_table(sweep.reports, cfg.out_dir);
  emit_scaling(sweep, cfg.out_dir + "/scaling.json");
  for (size_t i = 0; i < sweep.sizes.size(); ++i)
    std::printf("N=%-4d  dedup FLOPs/batch %.3e  savings ×%.2f\n",
                sweep.sizes[i], sweep.series.at("reuse")[i],
                sweep.reports[i].total_savings);
  std::printf("scaling: %s/scaling.json\n", cfg.out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vector-quantized neural-quantum-state toolkit"};
  app.require_subcommand(1);

  std::string config_path, teacher, ckpt;
  std::vector<int> sizes = {16, 32, 64, 128};

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path,
                    "run configuration (structured text or resolved .json)")
        ->required();
  };
  CLI::App* ed = app.add_subcommand("ed", "exact ground state via sparse diagonalization");
  add_config(ed);
  CLI::App* tr = app.add_subcommand("vmc-train", "variational Monte Carlo training");
  add_config(tr);
  CLI::App* di = app.add_subcommand("distill", "fit a quantized student to a teacher's amplitudes");
  add_config(di);
  di->add_option("--teacher", teacher, "teacher checkpoint (overrides config)");
  CLI::App* me = app.add_subcommand("measure", "per-batch FLOP measurement for a checkpointed model");
  add_config(me);
  me->add_option("--ckpt", ckpt, "model checkpoint to measure")->required();
  CLI::App* sw = app.add_subcommand("sweep", "FLOP scaling across chain sizes");
  add_config(sw);
  sw->add_option("--sizes", sizes, "ascending chain sizes")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    RunConfig cfg = load_run_config(config_path);
    if (di->parsed()) {
      if (!teacher.empty()) cfg.train.distill.teacher_checkpoint = teacher;
      if (cfg.train.distill.teacher_checkpoint.empty()) {
        std::fprintf(stderr, "distill needs --teacher or train.distill.teacher_checkpoint\n");
        return 2;
      }
    }
    prepare_run_dir(cfg);
    if (ed->parsed()) return run_ed(cfg);
    if (tr->parsed()) return run_train(cfg);
    if (di->parsed()) return run_distill(cfg);
    if (me->parsed()) return run_measure(cfg, ckpt);
    if (sw->parsed()) return run_sweep(cfg, sizes);
    return 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
