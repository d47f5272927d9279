#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "vqnqs/common.hpp"

namespace vqnqs {

// Local states are {0, ..., d-1} with d=2 throughout: 0 = down, 1 = up.
// z_i = 2*value_i - 1.
using SpinConfiguration = std::vector<uint8_t>;

constexpr int kLocalDim = 2;

struct Lattice {
  enum class Kind { chain1d, grid2d };
  Kind kind = Kind::chain1d;
  std::vector<int> dims;                      // (L) or (Lx, Ly)
  int sites = 0;
  std::vector<std::pair<int, int>> bonds;     // ordered (i, j), i < j
  std::vector<uint8_t> sublattice;            // 0 = A, 1 = B
};

Lattice build_lattice(Lattice::Kind kind, const std::vector<int>& dims);

struct HamiltonianModel {
  enum class Kind { tfim, heisenberg };
  Kind kind = Kind::tfim;
  Lattice lattice;
  double J = 1.0;       // tfim only
  double Gamma = 1.0;   // tfim only
  bool marshall = true; // heisenberg only

  int n_sites() const { return lattice.sites; }
};

struct ConnectedEntry {
  SpinConfiguration config;
  double coeff;
};

// Sparse row of H at a base configuration: the s' with H_{s,s'} != 0.
// The diagonal entry is always first, even when its coefficient is zero.
struct ConnectedSet {
  SpinConfiguration base;
  std::vector<ConnectedEntry> entries;
};

ConnectedSet connected_set(const HamiltonianModel& model,
                           const SpinConfiguration& s);

// (-1)^{number of down spins on sublattice A}
int marshall_sign(const Lattice& lattice, const SpinConfiguration& s);

// Bit-coded fast path for the eigensolver: configurations as little-endian
// basis indices (bit i = site i). Appends nothing; overwrites `out`.
struct IndexedEntry {
  uint64_t index;
  double coeff;
};
void connected_set_indexed(const HamiltonianModel& model, uint64_t s,
                           std::vector<IndexedEntry>& out);

uint64_t config_to_index(const SpinConfiguration& s);
SpinConfiguration index_to_config(uint64_t idx, int n_sites);

}  // namespace vqnqs
