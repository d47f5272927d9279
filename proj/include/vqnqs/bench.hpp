#pragma once

#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "vqnqs/hamiltonian.hpp"
#include "vqnqs/model.hpp"

namespace vqnqs {

// One measured (system, model) cell: FLOP totals summed over all batches
// (per-batch averages are totals / batches), the class breakdown of the
// executed count, and the energy estimate over every sampled configuration.
struct MeasurementReport {
  std::string system;
  std::string model_bits;  // "baseline" or e.g. "12b"
  int n_sites = 0;
  int batches = 0;
  int samples_per_batch = 0;
  int64_t flops_dense = 0;
  int64_t flops_dedup = 0;
  int64_t per_location = 0;  // executed per-location work
  int64_t attention = 0;
  int64_t vq_distance = 0;
  int64_t other = 0;
  int64_t quantized_dense = 0;  // shadow/executed per-location work
  int64_t quantized_dedup = 0;  // downstream of a quantizer
  double total_savings = 1.0;
  double quantized_ops_savings = 1.0;
  double energy = 0.0;
  double energy_per_site = 0.0;
  double reference_energy =
      std::numeric_limits<double>::quiet_NaN();  // per-site; NaN = unknown
  double relative_error =
      std::numeric_limits<double>::quiet_NaN();  // on per-site energy
};

// Samples `batches` batches of `samples_per_batch` configurations and runs
// the local-energy engine on each sample under the FLOP ledger. Models with
// quantizers run compressed (executed vs dense-shadow counts); baselines run
// dense, so their savings are exactly 1 by regime definition.
MeasurementReport measure_flops(
    const VqTransformer& model, const HamiltonianModel& h,
    int samples_per_batch, int batches, Rng& rng,
    double reference_per_site = std::numeric_limits<double>::quiet_NaN());

struct PolyFit {
  std::vector<double> coeffs;  // coeffs[k] multiplies N^k
  double rms_residual = 0.0;
  bool reduced_degree = false;  // true when points < requested degree + 1
};

PolyFit fit_polynomial(const std::vector<double>& n,
                       const std::vector<double>& y, int degree);
double poly_eval(const PolyFit& fit, double n);

struct SweepResult {
  std::vector<int> sizes;
  std::vector<MeasurementReport> reports;
  // per-batch average FLOPs per size for each series
  std::map<std::string, std::vector<double>> series;
  std::map<std::string, PolyFit> fits;
};

// Measures transverse-field Ising chains of the given sizes with models built
// from the template config, then fits cubic polynomials (degree reduced and
// flagged when there are fewer than four sizes) to the series
// {no_reuse, reuse, reuse_minus_attention, reuse_minus_attention_minus_vq}.
// `prepare` (optional) adapts each model before measurement, e.g. brief
// training so codebook usage is realistic.
SweepResult scaling_sweep(
    const ModelConfig& tmpl, const std::vector<int>& sizes,
    int samples_per_batch, int batches, uint64_t seed,
    const std::function<void(VqTransformer&, const HamiltonianModel&)>&
        prepare = {});

// Writes report.csv and report.json under `dir` with a stable column order
// and deterministic formatting (energies 6 decimals, errors like "2.8e-05").
void emit_table(const std::vector<MeasurementReport>& reports,
                const std::string& dir);

// Writes sizes, series, and fit coefficients as JSON to `path`.
void emit_scaling(const SweepResult& sweep, const std::string& path);

// Parses a report.csv produced by emit_table (round-trip checks, tooling).
std::vector<MeasurementReport> parse_report_csv(const std::string& path);

std::string system_name(const HamiltonianModel& h);
std::string model_bits_label(const ModelConfig& cfg);

}  // namespace vqnqs
