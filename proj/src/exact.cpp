#include "vqnqs/exact.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <string>

#include "vqnqs/rng.hpp"

namespace vqnqs {

void apply_hamiltonian(const HamiltonianModel& model,
                       const std::vector<double>& x, std::vector<double>& y) {
  const size_t dim = x.size();
  y.assign(dim, 0.0);
  std::vector<IndexedEntry> row;
  row.reserve(model.n_sites() + model.lattice.bonds.size() + 1);
  for (uint64_t s = 0; s < dim; ++s) {
    connected_set_indexed(model, s, row);
    double acc = 0.0;
    for (const IndexedEntry& e : row) acc += e.coeff * x[e.index];
    y[s] = acc;
  }
}

double rayleigh_quotient(const HamiltonianModel& model,
                         const std::vector<double>& amplitudes) {
  const uint64_t dim = uint64_t{1} << model.n_sites();
  check(amplitudes.size() == dim, "amplitude vector has wrong length");
  std::vector<IndexedEntry> row;
  row.reserve(model.n_sites() + model.lattice.bonds.size() + 1);
  double num = 0.0, den = 0.0;
  for (uint64_t s = 0; s < dim; ++s) {
    connected_set_indexed(model, s, row);
    double hx = 0.0;
    for (const IndexedEntry& e : row) hx += e.coeff * amplitudes[e.index];
    num += amplitudes[s] * hx;
    den += amplitudes[s] * amplitudes[s];
  }
  if (den <= 0.0) throw ConfigError("rayleigh_quotient of zero vector");
  return num / den;
}

namespace {

double norm2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void axpy(double a, const std::vector<double>& x, std::vector<double>& y) {
  for (size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

}  // namespace

DenseGroundState ground_state(const HamiltonianModel& model, double tol) {
  const int n = model.n_sites();
  if (n > 20)
    throw CapabilityError("exact solve limited to 20 sites, got " +
                          std::to_string(n));
  const uint64_t dim = uint64_t{1} << n;
  const int block = n >= 18 ? 30 : 50;
  const int max_matvecs = 10000;

  Rng rng(0x5eedULL);
  std::vector<double> v(dim);
  for (double& x : v) x = rng.gaussian();
  {
    const double nv = norm2(v);
    for (double& x : v) x /= nv;
  }

  DenseGroundState gs;
  std::vector<std::vector<double>> q;
  std::vector<double> w(dim), hv(dim);
  int matvecs = 0;
  double theta = 0.0, residual = 1e300;

  while (matvecs < max_matvecs) {
    // Lanczos block with full reorthogonalization from the current vector.
    q.assign(1, v);
    std::vector<double> alpha, beta;
    int m = 0;
    for (int j = 0; j < block && matvecs < max_matvecs; ++j) {
      apply_hamiltonian(model, q[j], w);
      ++matvecs;
      const double a = dot(w, q[j]);
      alpha.push_back(a);
      axpy(-a, q[j], w);
      if (j > 0) axpy(-beta[j - 1], q[j - 1], w);
      // two rounds of classical Gram-Schmidt against the whole block
      for (int round = 0; round < 2; ++round)
        for (const auto& qi : q) axpy(-dot(w, qi), qi, w);
      const double b = norm2(w);
      m = j + 1;
      if (b < 1e-13) break;  // invariant subspace reached
      beta.push_back(b);
      std::vector<double> next = w;
      for (double& x : next) x /= b;
      q.push_back(std::move(next));
    }

    // lowest Ritz pair of the tridiagonal projection
    Eigen::MatrixXd t = Eigen::MatrixXd::Zero(m, m);
    for (int i = 0; i < m; ++i) {
      t(i, i) = alpha[i];
      if (i + 1 < m) {
        t(i, i + 1) = beta[i];
        t(i + 1, i) = beta[i];
      }
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(t);
    const Eigen::VectorXd y = es.eigenvectors().col(0);
    theta = es.eigenvalues()(0);

    std::vector<double> ritz(dim, 0.0);
    for (int i = 0; i < m; ++i) axpy(y(i), q[i], ritz);
    {
      const double nr = norm2(ritz);
      for (double& x : ritz) x /= nr;
    }
    apply_hamiltonian(model, ritz, hv);
    ++matvecs;
    theta = dot(ritz, hv);
    std::vector<double> r = hv;
    axpy(-theta, ritz, r);
    residual = norm2(r);
    v = std::move(ritz);
    if (residual < tol) break;
  }

  if (residual >= tol && residual >= 1e-8)
    throw NumericError("eigensolver stalled at residual " +
                       std::to_string(residual));

  // sign fix: largest-magnitude amplitude positive
  double best = 0.0;
  for (double x : v)
    if (std::abs(x) > std::abs(best)) best = x;
  if (best < 0.0)
    for (double& x : v) x = -x;

  gs.energy = theta;
  gs.per_site_energy = theta / static_cast<double>(n);
  gs.amplitudes = std::move(v);
  gs.residual = residual;
  gs.iterations = matvecs;
  return gs;
}

}  // namespace vqnqs
