#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Dense>
#include <complex>
#include <map>

#include "vqnqs/hamiltonian.hpp"

using namespace vqnqs;

namespace {

using CMat = Eigen::MatrixXcd;

// Independent dense construction by Kronecker products of single-site
// operators, used as an oracle against the row enumeration.
CMat kron(const CMat& a, const CMat& b) {
  CMat out(a.rows() * b.rows(), a.cols() * b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

// site operator embedded at position `site` of n sites, with site 0 acting
// on the least-significant index factor (matching the little-endian basis)
CMat embed(const CMat& op, int site, int n) {
  CMat out = CMat::Identity(1, 1);
  for (int i = 0; i < n; ++i)
    out = kron(i == site ? op : CMat::Identity(2, 2), out);
  return out;
}

CMat pauli_x() {
  CMat m(2, 2);
  m << 0, 1, 1, 0;
  return m;
}
CMat pauli_y() {
  CMat m(2, 2);
  m << 0, std::complex<double>(0, -1), std::complex<double>(0, 1), 0;
  return m;
}
CMat pauli_z() {
  // basis order: index 0 = down (z=-1), index 1 = up (z=+1)
  CMat m(2, 2);
  m << -1, 0, 0, 1;
  return m;
}

CMat dense_oracle(const HamiltonianModel& model) {
  const int n = model.n_sites();
  const int dim = 1 << n;
  CMat h = CMat::Zero(dim, dim);
  if (model.kind == HamiltonianModel::Kind::tfim) {
    for (const auto& [i, j] : model.lattice.bonds)
      h -= model.J * (embed(pauli_z(), i, n) * embed(pauli_z(), j, n));
    for (int i = 0; i < n; ++i) h -= model.Gamma * embed(pauli_x(), i, n);
  } else {
    for (const auto& [i, j] : model.lattice.bonds)
      h += 0.25 * (embed(pauli_x(), i, n) * embed(pauli_x(), j, n) +
                   embed(pauli_y(), i, n) * embed(pauli_y(), j, n) +
                   embed(pauli_z(), i, n) * embed(pauli_z(), j, n));
    if (model.marshall) {
      Eigen::VectorXcd u(dim);
      for (int s = 0; s < dim; ++s)
        u(s) = marshall_sign(model.lattice, index_to_config(s, n));
      h = u.asDiagonal() * h * u.asDiagonal();
    }
  }
  return h;
}

Eigen::MatrixXd dense_from_rows(const HamiltonianModel& model) {
  const int n = model.n_sites();
  const int dim = 1 << n;
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(dim, dim);
  for (int s = 0; s < dim; ++s) {
    ConnectedSet cs = connected_set(model, index_to_config(s, n));
    for (const auto& e : cs.entries)
      h(s, static_cast<int>(config_to_index(e.config))) += e.coeff;
  }
  return h;
}

}  // namespace

TEST_CASE("lattice construction") {
  Lattice chain = build_lattice(Lattice::Kind::chain1d, {4});
  REQUIRE(chain.bonds.size() == 3);
  CHECK(chain.bonds[0] == std::pair<int, int>(0, 1));
  CHECK(chain.bonds[1] == std::pair<int, int>(1, 2));
  CHECK(chain.bonds[2] == std::pair<int, int>(2, 3));

  Lattice g22 = build_lattice(Lattice::Kind::grid2d, {2, 2});
  REQUIRE(g22.bonds.size() == 4);
  CHECK(g22.bonds[0] == std::pair<int, int>(0, 1));
  CHECK(g22.bonds[1] == std::pair<int, int>(2, 3));
  CHECK(g22.bonds[2] == std::pair<int, int>(0, 2));
  CHECK(g22.bonds[3] == std::pair<int, int>(1, 3));

  Lattice g44 = build_lattice(Lattice::Kind::grid2d, {4, 4});
  CHECK(g44.bonds.size() == 24);

  // bipartite: every bond connects different sublattices
  for (const Lattice* lat : {&chain, &g22, &g44})
    for (const auto& [i, j] : lat->bonds)
      CHECK(lat->sublattice[i] != lat->sublattice[j]);

  CHECK_THROWS_AS(build_lattice(Lattice::Kind::chain1d, {0}), ConfigError);
  CHECK_THROWS_AS(build_lattice(Lattice::Kind::grid2d, {2, -1}), ConfigError);
}

TEST_CASE("tfim connected set on two aligned spins") {
  HamiltonianModel m;
  m.kind = HamiltonianModel::Kind::tfim;
  m.lattice = build_lattice(Lattice::Kind::chain1d, {2});
  m.J = 1.0;
  m.Gamma = 1.0;
  SpinConfiguration s = {1, 1};
  ConnectedSet cs = connected_set(m, s);
  REQUIRE(cs.entries.size() == 3);
  CHECK(cs.entries[0].config == s);
  CHECK(cs.entries[0].coeff == doctest::Approx(-1.0));
  CHECK(cs.entries[1].config == SpinConfiguration{0, 1});
  CHECK(cs.entries[1].coeff == doctest::Approx(-1.0));
  CHECK(cs.entries[2].config == SpinConfiguration{1, 0});
  CHECK(cs.entries[2].coeff == doctest::Approx(-1.0));
}

TEST_CASE("heisenberg connected set on an anti-aligned pair") {
  HamiltonianModel m;
  m.kind = HamiltonianModel::Kind::heisenberg;
  m.lattice = build_lattice(Lattice::Kind::chain1d, {2});
  m.marshall = false;
  SpinConfiguration s = {1, 0};
  ConnectedSet cs = connected_set(m, s);
  REQUIRE(cs.entries.size() == 2);
  CHECK(cs.entries[0].coeff == doctest::Approx(-0.25));
  CHECK(cs.entries[1].config == SpinConfiguration{0, 1});
  CHECK(cs.entries[1].coeff == doctest::Approx(0.5));

  m.marshall = true;
  ConnectedSet csm = connected_set(m, s);
  CHECK(csm.entries[0].coeff == doctest::Approx(-0.25));
  CHECK(csm.entries[1].coeff == doctest::Approx(-0.5));
}

TEST_CASE("entry counts") {
  HamiltonianModel tfim;
  tfim.kind = HamiltonianModel::Kind::tfim;
  tfim.lattice = build_lattice(Lattice::Kind::chain1d, {6});
  for (uint64_t s : {0ULL, 13ULL, 63ULL}) {
    ConnectedSet cs = connected_set(tfim, index_to_config(s, 6));
    CHECK(cs.entries.size() == 7);  // N + 1
  }

  HamiltonianModel heis;
  heis.kind = HamiltonianModel::Kind::heisenberg;
  heis.lattice = build_lattice(Lattice::Kind::grid2d, {2, 3});
  for (uint64_t s = 0; s < 64; ++s) {
    SpinConfiguration c = index_to_config(s, 6);
    int anti = 0;
    for (const auto& [i, j] : heis.lattice.bonds)
      if (c[i] != c[j]) ++anti;
    ConnectedSet cs = connected_set(heis, c);
    CHECK(static_cast<int>(cs.entries.size()) == 1 + anti);
  }
}

TEST_CASE("marshall sign examples") {
  Lattice chain = build_lattice(Lattice::Kind::chain1d, {2});
  CHECK(marshall_sign(chain, {1, 1}) == 1);
  CHECK(marshall_sign(chain, {0, 1}) == -1);

  Lattice grid = build_lattice(Lattice::Kind::grid2d, {2, 2});
  // A = sites with even coordinate parity = {0, 3}
  CHECK(grid.sublattice[0] == 0);
  CHECK(grid.sublattice[3] == 0);
  CHECK(marshall_sign(grid, {0, 0, 0, 0}) == 1);
}

TEST_CASE("dense matrix equals kronecker oracle") {
  std::vector<HamiltonianModel> models;
  {
    HamiltonianModel m;
    m.kind = HamiltonianModel::Kind::tfim;
    m.lattice = build_lattice(Lattice::Kind::chain1d, {6});
    m.J = 1.3;
    m.Gamma = 0.7;
    models.push_back(m);
  }
  for (bool marshall : {false, true}) {
    HamiltonianModel m;
    m.kind = HamiltonianModel::Kind::heisenberg;
    m.lattice = build_lattice(Lattice::Kind::grid2d, {2, 3});
    m.marshall = marshall;
    models.push_back(m);
  }
  for (const auto& m : models) {
    Eigen::MatrixXd h = dense_from_rows(m);
    CMat oracle = dense_oracle(m);
    CHECK(oracle.imag().cwiseAbs().maxCoeff() < 1e-14);
    CHECK((h - oracle.real()).cwiseAbs().maxCoeff() < 1e-12);
    // row-level hermiticity
    CHECK((h - h.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("marshall rotation makes off-diagonals nonpositive") {
  HamiltonianModel m;
  m.kind = HamiltonianModel::Kind::heisenberg;
  m.lattice = build_lattice(Lattice::Kind::grid2d, {2, 4});
  m.marshall = true;
  Eigen::MatrixXd h = dense_from_rows(m);
  for (int i = 0; i < h.rows(); ++i)
    for (int j = 0; j < h.cols(); ++j)
      if (i != j) CHECK(h(i, j) <= 0.0);
}

TEST_CASE("indexed rows agree with configuration rows") {
  HamiltonianModel m;
  m.kind = HamiltonianModel::Kind::heisenberg;
  m.lattice = build_lattice(Lattice::Kind::grid2d, {2, 3});
  m.marshall = true;
  std::vector<IndexedEntry> row;
  for (uint64_t s = 0; s < 64; ++s) {
    connected_set_indexed(m, s, row);
    ConnectedSet cs = connected_set(m, index_to_config(s, 6));
    REQUIRE(row.size() == cs.entries.size());
    std::map<uint64_t, double> got, want;
    for (const auto& e : row) got[e.index] += e.coeff;
    for (const auto& e : cs.entries) want[config_to_index(e.config)] += e.coeff;
    CHECK(got == want);
  }
}

TEST_CASE("configuration index round trip") {
  SpinConfiguration s = {1, 0, 1, 1};
  CHECK(config_to_index(s) == 0b1101);
  CHECK(index_to_config(0b1101, 4) == s);
}
