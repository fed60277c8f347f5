#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "csmud/dictionary.hpp"

namespace csmud::recovery {

struct SolverParams {
  int max_iterations = 100;
  // Gradient step for IHT/BIHT; defaults to 1/sigma_max^2 of the dictionary.
  std::optional<double> step_size;
  double residual_tol = 1e-8;     // stop when ||y - S x|| falls below
  double rel_change_tol = 1e-6;   // stop when ||dx|| / ||x|| falls below
};

struct RecoveryResult {
  std::vector<int> support_users;  // sorted block indices claimed active
  Eigen::VectorXcd x_hat;          // full-length estimate, zeros off support
  double residual_norm = 0.0;      // ||y - S x_hat||, recomputed on exit
  double solver_residual_norm = 0.0;  // last residual the solver tracked
  int iterations = 0;
  double elapsed_seconds = 0.0;
  bool used_pseudo_inverse = false;   // a refit hit a rank-deficient system
  bool divergence_detected = false;   // iterative solver returned best iterate
};

// Per-block squared l2 energies of a stacked coefficient vector.
Eigen::VectorXd block_energies(const Eigen::VectorXcd& x, int block_size);

// Indices of the n largest-energy blocks, sorted ascending. Ties go to the
// lower index; n = 0 yields an empty set.
std::vector<int> detect_support(const Eigen::VectorXcd& x, int block_size,
                                int n);

// Orthogonal matching pursuit over individual columns. `sparsity` is the
// number of columns to select (n active users => n * L columns).
RecoveryResult omp_solve(const Dictionary& dict, const Eigen::VectorXcd& y,
                         int sparsity, const SolverParams& params = {});

// Block OMP: greedy over whole user blocks, scored by the energy of the
// residual's projection onto each block span, with a joint least-squares
// refit of the selected blocks every iteration.
RecoveryResult bomp_solve(const Dictionary& dict, const Eigen::VectorXcd& y,
                          int n_blocks, const SolverParams& params = {});

// Iterative hard thresholding, x <- H_s(x + mu S^H (y - S x)), keeping the
// `sparsity` largest-magnitude entries.
RecoveryResult iht_solve(const Dictionary& dict, const Eigen::VectorXcd& y,
                         int sparsity, const SolverParams& params = {});

// Block IHT: same iteration with the threshold keeping the `n_blocks`
// largest-energy blocks.
RecoveryResult biht_solve(const Dictionary& dict, const Eigen::VectorXcd& y,
                          int n_blocks, const SolverParams& params = {});

// Exhaustive support search: least-squares fit of every C(K, n_blocks)
// support, minimum residual wins, first win on ties (lexicographic
// enumeration). Refuses instances with more than 1e6 candidate supports.
RecoveryResult brute_force_oracle(const Dictionary& dict,
                                  const Eigen::VectorXcd& y, int n_blocks);

// Whether the oracle would accept the instance: C(user_count, n_blocks)
// within its enumeration budget.
bool oracle_enumerable(int user_count, int n_blocks);

struct MmseResult {
  Eigen::VectorXcd x_hat;
  bool used_pseudo_inverse = false;
};

// Ridge-regularized estimate on a fixed support:
//   x_S = (S_S^H S_S + (noise_var / prior_var) I)^-1 S_S^H y.
// noise_var = 0 degenerates to plain least squares (pseudo-inverse when the
// subdictionary is rank deficient).
MmseResult mmse_estimate(const Dictionary& dict, const Eigen::VectorXcd& y,
                         const std::vector<int>& support_users,
                         double noise_var, double prior_var);

}  // namespace csmud::recovery
