#include "vqnqs/hamiltonian.hpp"

namespace vqnqs {

Lattice build_lattice(Lattice::Kind kind, const std::vector<int>& dims) {
  Lattice lat;
  lat.kind = kind;
  lat.dims = dims;
  if (kind == Lattice::Kind::chain1d) {
    if (dims.size() != 1 || dims[0] <= 0)
      throw ConfigError("chain1d needs one positive dimension");
    const int l = dims[0];
    lat.sites = l;
    for (int i = 0; i + 1 < l; ++i) lat.bonds.emplace_back(i, i + 1);
    lat.sublattice.resize(l);
    for (int i = 0; i < l; ++i) lat.sublattice[i] = static_cast<uint8_t>(i % 2);
  } else {
    if (dims.size() != 2 || dims[0] <= 0 || dims[1] <= 0)
      throw ConfigError("grid2d needs two positive dimensions");
    const int lx = dims[0], ly = dims[1];
    lat.sites = lx * ly;
    // horizontal bonds in row-major order, then vertical
    for (int y = 0; y < ly; ++y)
      for (int x = 0; x + 1 < lx; ++x)
        lat.bonds.emplace_back(y * lx + x, y * lx + x + 1);
    for (int y = 0; y + 1 < ly; ++y)
      for (int x = 0; x < lx; ++x)
        lat.bonds.emplace_back(y * lx + x, (y + 1) * lx + x);
    lat.sublattice.resize(lat.sites);
    for (int y = 0; y < ly; ++y)
      for (int x = 0; x < lx; ++x)
        lat.sublattice[y * lx + x] = static_cast<uint8_t>((x + y) % 2);
  }
  return lat;
}

namespace {
inline int zval(uint8_t v) { return 2 * static_cast<int>(v) - 1; }
}  // namespace

ConnectedSet connected_set(const HamiltonianModel& model,
                           const SpinConfiguration& s) {
  const int n = model.n_sites();
  check(static_cast<int>(s.size()) == n, "configuration size != site count");
  ConnectedSet cs;
  cs.base = s;
  if (model.kind == HamiltonianModel::Kind::tfim) {
    double diag = 0.0;
    for (const auto& [i, j] : model.lattice.bonds)
      diag += static_cast<double>(zval(s[i]) * zval(s[j]));
    cs.entries.reserve(n + 1);
    cs.entries.push_back({s, -model.J * diag});
    for (int i = 0; i < n; ++i) {
      SpinConfiguration f = s;
      f[i] = static_cast<uint8_t>(1 - f[i]);
      cs.entries.push_back({std::move(f), -model.Gamma});
    }
  } else {
    double diag = 0.0;
    const double off = model.marshall ? -0.5 : 0.5;
    cs.entries.push_back({s, 0.0});
    for (const auto& [i, j] : model.lattice.bonds) {
      diag += 0.25 * static_cast<double>(zval(s[i]) * zval(s[j]));
      if (s[i] != s[j]) {
        SpinConfiguration f = s;
        f[i] = static_cast<uint8_t>(1 - f[i]);
        f[j] = static_cast<uint8_t>(1 - f[j]);
        cs.entries.push_back({std::move(f), off});
      }
    }
    cs.entries[0].coeff = diag;
  }
  return cs;
}

int marshall_sign(const Lattice& lattice, const SpinConfiguration& s) {
  int downs_on_a = 0;
  for (size_t i = 0; i < s.size(); ++i)
    if (lattice.sublattice[i] == 0 && s[i] == 0) ++downs_on_a;
  return (downs_on_a % 2 == 0) ? 1 : -1;
}

void connected_set_indexed(const HamiltonianModel& model, uint64_t s,
                           std::vector<IndexedEntry>& out) {
  out.clear();
  const int n = model.n_sites();
  if (model.kind == HamiltonianModel::Kind::tfim) {
    double diag = 0.0;
    for (const auto& [i, j] : model.lattice.bonds) {
      const int zi = 2 * static_cast<int>((s >> i) & 1) - 1;
      const int zj = 2 * static_cast<int>((s >> j) & 1) - 1;
      diag += static_cast<double>(zi * zj);
    }
    out.push_back({s, -model.J * diag});
    for (int i = 0; i < n; ++i)
      out.push_back({s ^ (uint64_t{1} << i), -model.Gamma});
  } else {
    double diag = 0.0;
    const double off = model.marshall ? -0.5 : 0.5;
    out.push_back({s, 0.0});
    for (const auto& [i, j] : model.lattice.bonds) {
      const uint64_t bi = (s >> i) & 1, bj = (s >> j) & 1;
      diag += 0.25 * static_cast<double>((2 * static_cast<int>(bi) - 1) *
                                         (2 * static_cast<int>(bj) - 1));
      if (bi != bj)
        out.push_back({s ^ (uint64_t{1} << i) ^ (uint64_t{1} << j), off});
    }
    out[0].coeff = diag;
  }
}

uint64_t config_to_index(const SpinConfiguration& s) {
  uint64_t idx = 0;
  for (size_t i = 0; i < s.size(); ++i)
    idx |= static_cast<uint64_t>(s[i] & 1) << i;
  return idx;
}

SpinConfiguration index_to_config(uint64_t idx, int n_sites) {
  SpinConfiguration s(n_sites);
  for (int i = 0; i < n_sites; ++i)
    s[i] = static_cast<uint8_t>((idx >> i) & 1);
  return s;
}

}  // namespace vqnqs
