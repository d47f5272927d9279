#pragma once

#include <vector>

#include "vqnqs/hamiltonian.hpp"

namespace vqnqs {

struct DenseGroundState {
  double energy = 0.0;
  double per_site_energy = 0.0;
  std::vector<double> amplitudes;  // length 2^N, unit norm, sign-fixed
  double residual = 0.0;           // ||H psi - E psi||_2 at return
  int iterations = 0;              // matrix-vector products consumed
};

// Lowest eigenpair via restarted Lanczos on the sparse row oracle. Never
// materializes the matrix; memory is O(block_size * 2^N). `tol` is the
// target residual norm; the default satisfies the 1e-8 contract with slack.
DenseGroundState ground_state(const HamiltonianModel& model,
                              double tol = 1e-10);

// Psi^T H Psi / Psi^T Psi over connected-set rows.
double rayleigh_quotient(const HamiltonianModel& model,
                         const std::vector<double>& amplitudes);

// y = H x through the row oracle (exposed for tests and refinement).
void apply_hamiltonian(const HamiltonianModel& model,
                       const std::vector<double>& x, std::vector<double>& y);

}  // namespace vqnqs
