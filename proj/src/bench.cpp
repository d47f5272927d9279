#include "vqnqs/bench.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "vqnqs/dedup.hpp"

namespace vqnqs {

namespace {

// dense-path local energy for baseline measurement (no compression regime)
std::complex<double> dense_local_energy(const VqTransformer& model,
                                        const HamiltonianModel& h,
                                        const SpinConfiguration& s) {
  ConnectedSet cs = connected_set(h, s);
  std::vector<SpinConfiguration> configs;
  configs.reserve(cs.entries.size());
  for (const auto& e : cs.entries) configs.push_back(e.config);
  auto lp = model.log_prob_batch(configs);
  std::vector<double> ph;
  if (model.cfg.phase_enabled) ph = model.phase_batch(configs);
  std::complex<double> acc = 0.0;
  for (size_t k = 0; k < cs.entries.size(); ++k) {
    const double mag = cs.entries[k].coeff * std::exp(0.5 * (lp[k] - lp[0]));
    const double dphi = model.cfg.phase_enabled ? ph[k] - ph[0] : 0.0;
    acc += mag * std::complex<double>(std::cos(dphi), std::sin(dphi));
  }
  return acc;
}

std::string format_double(const char* fmt, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), fmt, v);
  return buf;
}

}  // namespace

std::string system_name(const HamiltonianModel& h) {
  std::string kind =
      h.kind == HamiltonianModel::Kind::tfim ? "tfim" : "heisenberg";
  std::string dims;
  for (size_t i = 0; i < h.lattice.dims.size(); ++i) {
    if (i) dims += "x";
    dims += std::to_string(h.lattice.dims[i]);
  }
  return kind + " " + dims;
}

std::string model_bits_label(const ModelConfig& cfg) {
  if (!cfg.vq_enabled) return "baseline";
  const double bits = cfg.bandwidth_bits();
  if (bits == std::floor(bits))
    return std::to_string(int64_t(bits)) + "b";
  return format_double("%.1fb", bits);
}

MeasurementReport measure_flops(const VqTransformer& model,
                                const HamiltonianModel& h,
                                int samples_per_batch, int batches, Rng& rng,
                                double reference_per_site) {
  if (samples_per_batch < 1 || batches < 1)
    throw ConfigError("measurement needs at least one sample and one batch");
  if (model.cfg.n_sites != h.n_sites())
    throw ConfigError("model/system size mismatch");

  MeasurementReport rep;
  rep.system = system_name(h);
  rep.model_bits = model_bits_label(model.cfg);
  rep.n_sites = h.n_sites();
  rep.batches = batches;
  rep.samples_per_batch = samples_per_batch;

  flops::Ledger total;
  double esum = 0.0;
  int64_t count = 0;
  for (int b = 0; b < batches; ++b) {
    auto sr = model.sample(samples_per_batch, rng);
    for (const auto& s : sr.configs) {
      if (model.cfg.vq_enabled) {
        auto r = local_energy_batch(model, h, s);
        total += r.ledger;
        esum += r.value.real();
      } else {
        flops::Ledger led;
        {
          flops::LedgerScope scope(&led);
          esum += dense_local_energy(model, h, s).real();
        }
        total += led;
      }
      ++count;
    }
  }
  rep.flops_dense = total.total_dense();
  rep.flops_dedup = total.total_dedup();
  rep.per_location = total.per_location_unique;
  rep.attention = total.attention;
  rep.vq_distance = total.vq_distance;
  rep.other = total.other;
  rep.quantized_dense = total.per_location_dense_quantized;
  rep.quantized_dedup = total.per_location_unique_quantized;
  rep.total_savings = double(rep.flops_dense) / double(rep.flops_dedup);
  rep.quantized_ops_savings =
      rep.quantized_dedup > 0
          ? double(rep.quantized_dense) / double(rep.quantized_dedup)
          : 1.0;
  rep.energy = esum / double(count);
  rep.energy_per_site = rep.energy / double(rep.n_sites);
  rep.reference_energy = reference_per_site;
  rep.relative_error =
      std::isfinite(reference_per_site)
          ? std::abs(rep.energy_per_site - reference_per_site) /
                std::abs(reference_per_site)
          : std::numeric_limits<double>::quiet_NaN();
  return rep;
}

PolyFit fit_polynomial(const std::vector<double>& n,
                       const std::vector<double>& y, int degree) {
  if (n.size() != y.size() || n.empty())
    throw UsageError("polynomial fit needs matching nonempty inputs");
  PolyFit fit;
  int deg = degree;
  if (int(n.size()) < degree + 1) {
    deg = int(n.size()) - 1;
    fit.reduced_degree = true;
  }
  const int cols = deg + 1;
  Eigen::MatrixXd a(n.size(), cols);
  Eigen::VectorXd b(n.size());
  for (size_t r = 0; r < n.size(); ++r) {
    double p = 1.0;
    for (int c = 0; c < cols; ++c) {
      a(r, c) = p;
      p *= n[r];
    }
    b(r) = y[r];
  }
  Eigen::VectorXd x = a.colPivHouseholderQr().solve(b);
  fit.coeffs.assign(x.data(), x.data() + cols);
  double ss = 0.0;
  for (size_t r = 0; r < n.size(); ++r) {
    const double d = poly_eval(fit, n[r]) - y[r];
    ss += d * d;
  }
  fit.rms_residual = std::sqrt(ss / double(n.size()));
  return fit;
}

double poly_eval(const PolyFit& fit, double n) {
  double acc = 0.0;
  for (size_t k = fit.coeffs.size(); k-- > 0;) acc = acc * n + fit.coeffs[k];
  return acc;
}

SweepResult scaling_sweep(
    const ModelConfig& tmpl, const std::vector<int>& sizes,
    int samples_per_batch, int batches, uint64_t seed,
    const std::function<void(VqTransformer&, const HamiltonianModel&)>&
        prepare) {
  if (sizes.empty()) throw UsageError("scaling sweep needs at least one size");
  for (size_t i = 1; i < sizes.size(); ++i)
    if (sizes[i] <= sizes[i - 1])
      throw UsageError("scaling sweep sizes must be ascending");

  SweepResult out;
  out.sizes = sizes;
  const char* names[] = {"no_reuse", "reuse", "reuse_minus_attention",
                         "reuse_minus_attention_minus_vq"};
  for (const char* name : names) out.series[name] = {};

  for (int n : sizes) {
    HamiltonianModel h;
    h.kind = HamiltonianModel::Kind::tfim;
    h.lattice = build_lattice(Lattice::Kind::chain1d, {n});
    ModelConfig cfg = tmpl;
    cfg.n_sites = n;
    cfg.validate();
    Rng init_rng(hash_combine(seed, uint64_t(n)));
    auto model = VqTransformer::init(cfg, init_rng);
    if (prepare) prepare(model, h);
    Rng mrng(hash_combine(seed + 1, uint64_t(n)));
    auto rep = measure_flops(model, h, samples_per_batch, batches, mrng);
    const double inv = 1.0 / double(batches);
    out.series["no_reuse"].push_back(double(rep.flops_dense) * inv);
    out.series["reuse"].push_back(double(rep.flops_dedup) * inv);
    out.series["reuse_minus_attention"].push_back(
        double(rep.flops_dedup - rep.attention) * inv);
    out.series["reuse_minus_attention_minus_vq"].push_back(
        double(rep.flops_dedup - rep.attention - rep.vq_distance) * inv);
    out.reports.push_back(std::move(rep));
  }

  std::vector<double> ns(sizes.begin(), sizes.end());
  for (auto& [name, values] : out.series)
    out.fits[name] = fit_polynomial(ns, values, 3);
  return out;
}

namespace {

const char* kCsvHeader =
    "system,model,n_sites,batches,samples_per_batch,energy,energy_per_site,"
    "reference_energy,relative_error,total_savings,quantized_ops_savings,"
    "flops_dense,flops_dedup,per_location,attention,vq_distance,other,"
    "quantized_dense,quantized_dedup";

std::string csv_row(const MeasurementReport& r) {
  std::string row = r.system + "," + r.model_bits + "," +
                    std::to_string(r.n_sites) + "," +
                    std::to_string(r.batches) + "," +
                    std::to_string(r.samples_per_batch) + "," +
                    format_double("%.6f", r.energy) + "," +
                    format_double("%.6f", r.energy_per_site) + ",";
  row += std::isfinite(r.reference_energy)
             ? format_double("%.6f", r.reference_energy)
             : "";
  row += ",";
  row += std::isfinite(r.relative_error)
             ? format_double("%.1e", r.relative_error)
             : "";
  row += "," + format_double("%.6f", r.total_savings) + "," +
         format_double("%.6f", r.quantized_ops_savings) + "," +
         std::to_string(r.flops_dense) + "," + std::to_string(r.flops_dedup) +
         "," + std::to_string(r.per_location) + "," +
         std::to_string(r.attention) + "," + std::to_string(r.vq_distance) +
         "," + std::to_string(r.other) + "," +
         std::to_string(r.quantized_dense) + "," +
         std::to_string(r.quantized_dedup);
  return row;
}

nlohmann::json report_json(const MeasurementReport& r) {
  nlohmann::json j;
  j["system"] = r.system;
  j["model"] = r.model_bits;
  j["n_sites"] = r.n_sites;
  j["batches"] = r.batches;
  j["samples_per_batch"] = r.samples_per_batch;
  j["energy"] = r.energy;
  j["energy_per_site"] = r.energy_per_site;
  if (std::isfinite(r.reference_energy)) {
    j["reference_energy"] = r.reference_energy;
    j["relative_error"] = r.relative_error;
  }
  j["total_savings"] = r.total_savings;
  j["quantized_ops_savings"] = r.quantized_ops_savings;
  j["flops_dense"] = r.flops_dense;
  j["flops_dedup"] = r.flops_dedup;
  j["breakdown"] = {{"per_location", r.per_location},
                    {"attention", r.attention},
                    {"vq_distance", r.vq_distance},
                    {"other", r.other}};
  j["quantized_dense"] = r.quantized_dense;
  j["quantized_dedup"] = r.quantized_dedup;
  j["flop_convention"] = "analytic shape counts, multiply-add = 2";
  return j;
}

}  // namespace

void emit_table(const std::vector<MeasurementReport>& reports,
                const std::string& dir) {
  if (reports.empty()) throw UsageError("emit_table needs at least one report");
  std::filesystem::create_directories(dir);

  const std::string csv_path = dir + "/report.csv";
  std::ofstream csv(csv_path);
  if (!csv) throw ConfigError("cannot open " + csv_path);
  csv << kCsvHeader << '\n';
  for (const auto& r : reports) csv << csv_row(r) << '\n';
  if (!csv.good()) throw ConfigError("write failed for " + csv_path);

  const std::string json_path = dir + "/report.json";
  std::ofstream js(json_path);
  if (!js) throw ConfigError("cannot open " + json_path);
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) arr.push_back(report_json(r));
  js << arr.dump(2) << '\n';
  if (!js.good()) throw ConfigError("write failed for " + json_path);
}

void emit_scaling(const SweepResult& sweep, const std::string& path) {
  nlohmann::json j;
  j["sizes"] = sweep.sizes;
  for (const auto& [name, values] : sweep.series) j["series"][name] = values;
  for (const auto& [name, fit] : sweep.fits) {
    j["fits"][name] = {{"coeffs", fit.coeffs},
                       {"rms_residual", fit.rms_residual},
                       {"reduced_degree", fit.reduced_degree}};
  }
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open " + path);
  out << j.dump(2) << '\n';
  if (!out.good()) throw ConfigError("write failed for " + path);
}

std::vector<MeasurementReport> parse_report_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("empty report at " + path);
  if (line != kCsvHeader) throw ConfigError("unexpected header in " + path);

  std::vector<MeasurementReport> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    // a trailing empty cell is not returned by getline; normalize
    while (f.size() < 19) f.push_back("");
    MeasurementReport r;
    r.system = f[0];
    r.model_bits = f[1];
    r.n_sites = std::stoi(f[2]);
    r.batches = std::stoi(f[3]);
    r.samples_per_batch = std::stoi(f[4]);
    r.energy = std::stod(f[5]);
    r.energy_per_site = std::stod(f[6]);
    r.reference_energy = f[7].empty()
                             ? std::numeric_limits<double>::quiet_NaN()
                             : std::stod(f[7]);
    r.relative_error = f[8].empty()
                           ? std::numeric_limits<double>::quiet_NaN()
                           : std::stod(f[8]);
    r.total_savings = std::stod(f[9]);
    r.quantized_ops_savings = std::stod(f[10]);
    r.flops_dense = std::stoll(f[11]);
    r.flops_dedup = std::stoll(f[12]);
    r.per_location = std::stoll(f[13]);
    r.attention = std::stoll(f[14]);
    r.vq_distance = std::stoll(f[15]);
    r.other = std::stoll(f[16]);
    r.quantized_dense = std::stoll(f[17]);
    r.quantized_dedup = std::stoll(f[18]);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace vqnqs
