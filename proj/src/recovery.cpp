#include "csmud/recovery.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace csmud::recovery {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Eigen::MatrixXcd gather_columns(const Dictionary& dict,
                                const std::vector<int>& cols) {
  Eigen::MatrixXcd sub(dict.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i)
    sub.col(static_cast<Eigen::Index>(i)) = dict.matrix().col(cols[i]);
  return sub;
}

std::vector<int> block_columns(const std::vector<int>& blocks, int L) {
  std::vector<int> cols;
  cols.reserve(blocks.size() * static_cast<std::size_t>(L));
  for (int b : blocks)
    for (int j = 0; j < L; ++j) cols.push_back(b * L + j);
  return cols;
}

// Least-squares refit on a column subset; reports rank deficiency.
Eigen::VectorXcd least_squares(const Eigen::MatrixXcd& A,
                               const Eigen::VectorXcd& y,
                               bool* rank_deficient) {
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXcd> cod(A);
  if (rank_deficient && cod.rank() < A.cols()) *rank_deficient = true;
  return cod.solve(y);
}

Eigen::VectorXcd scatter(const std::vector<int>& cols,
                         const Eigen::VectorXcd& coeffs, Eigen::Index size) {
  Eigen::VectorXcd x = Eigen::VectorXcd::Zero(size);
  for (std::size_t i = 0; i < cols.size(); ++i)
    x[cols[i]] = coeffs[static_cast<Eigen::Index>(i)];
  return x;
}

// Keep the `s` largest-magnitude entries, ties to the lower index.
void hard_threshold(Eigen::VectorXcd& v, int s) {
  const Eigen::Index size = v.size();
  if (s >= size) return;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(size));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + s, order.end(),
                    [&](Eigen::Index a, Eigen::Index b) {
                      const double ea = std::norm(v[a]);
                      const double eb = std::norm(v[b]);
                      return ea != eb ? ea > eb : a < b;
                    });
  Eigen::VectorXcd out = Eigen::VectorXcd::Zero(size);
  for (int i = 0; i < s; ++i) out[order[i]] = v[order[i]];
  v.swap(out);
}

// Keep the `n` largest-energy blocks, ties to the lower block index.
void block_hard_threshold(Eigen::VectorXcd& v, int block_size, int n) {
  const auto keep = detect_support(v, block_size, n);
  Eigen::VectorXcd out = Eigen::VectorXcd::Zero(v.size());
  for (int b : keep)
    out.segment(static_cast<Eigen::Index>(b) * block_size, block_size) =
        v.segment(static_cast<Eigen::Index>(b) * block_size, block_size);
  v.swap(out);
}

void validate_measurement(const Dictionary& dict, const Eigen::VectorXcd& y) {
  if (y.size() != dict.rows())
    throw std::invalid_argument("measurement length does not match dictionary");
}

// Shared IHT/BIHT loop; `threshold` projects onto the sparsity model.
template <typename Threshold>
RecoveryResult iterative_threshold(const Dictionary& dict,
                                   const Eigen::VectorXcd& y,
                                   const SolverParams& params,
                                   Threshold&& threshold) {
  const auto t0 = Clock::now();
  validate_measurement(dict, y);
  const double sn = dict.spectral_norm();
  const double mu = params.step_size.value_or(1.0 / (sn * sn));

  RecoveryResult result;
  Eigen::VectorXcd x = Eigen::VectorXcd::Zero(dict.cols());
  Eigen::VectorXcd best = x;
  double prev_norm = y.norm();
  double best_norm = prev_norm;
  int rising = 0;

  for (int it = 1; it <= params.max_iterations; ++it) {
    result.iterations = it;
    Eigen::VectorXcd cand =
        x + mu * (dict.matrix().adjoint() * (y - dict.matrix() * x));
    threshold(cand);
    const double res_norm = (y - dict.matrix() * cand).norm();
    if (res_norm < best_norm) {
      best_norm = res_norm;
      best = cand;
    }
    rising = res_norm > prev_norm ? rising + 1 : 0;
    if (rising >= 10) {
      result.divergence_detected = true;
      x = best;
      prev_norm = best_norm;
      break;
    }
    const double dx = (cand - x).norm();
    const double x_norm = x.norm();
    x = std::move(cand);
    prev_norm = res_norm;
    if (res_norm <= params.residual_tol) break;
    if (x_norm > 0.0 && dx <= params.rel_change_tol * x_norm) break;
  }

  result.x_hat = std::move(x);
  result.solver_residual_norm = prev_norm;
  result.residual_norm = (y - dict.matrix() * result.x_hat).norm();
  result.elapsed_seconds = seconds_since(t0);
  return result;
}

// C(n, k) with saturation above the enumeration budget.
double binomial_capped(int n, int k, double cap) {
  double c = 1.0;
  for (int i = 1; i <= k; ++i) {
    c *= static_cast<double>(n - k + i) / i;
    if (c > cap) return cap + 1.0;
  }
  return c;
}

}  // namespace

bool oracle_enumerable(int user_count, int n_blocks) {
  return n_blocks >= 0 && n_blocks <= user_count &&
         binomial_capped(user_count, n_blocks, 1e6) <= 1e6;
}

Eigen::VectorXd block_energies(const Eigen::VectorXcd& x, int block_size) {
  if (block_size < 1 || x.size() % block_size != 0)
    throw std::invalid_argument("signal length not divisible by block size");
  const Eigen::Index K = x.size() / block_size;
  Eigen::VectorXd e(K);
  for (Eigen::Index k = 0; k < K; ++k)
    e[k] = x.segment(k * block_size, block_size).squaredNorm();
  return e;
}

std::vector<int> detect_support(const Eigen::VectorXcd& x, int block_size,
                                int n) {
  if (n == 0) return {};
  const Eigen::VectorXd e = block_energies(x, block_size);
  if (n < 0 || n > e.size())
    throw std::invalid_argument("support size out of range");
  std::vector<int> order(static_cast<std::size_t>(e.size()));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + n, order.end(),
                    [&](int a, int b) {
                      return e[a] != e[b] ? e[a] > e[b] : a < b;
                    });
  std::vector<int> support(order.begin(), order.begin() + n);
  std::sort(support.begin(), support.end());
  return support;
}

RecoveryResult omp_solve(const Dictionary& dict, const Eigen::VectorXcd& y,
                         int sparsity, const SolverParams& params) {
  const auto t0 = Clock::now();
  validate_measurement(dict, y);
  if (sparsity < 0 || sparsity > dict.cols())
    throw std::invalid_argument("OMP sparsity out of range");

  RecoveryResult result;
  std::vector<int> selected;
  std::vector<char> in_set(static_cast<std::size_t>(dict.cols()), 0);
  Eigen::VectorXcd r = y;
  Eigen::VectorXcd coeffs;

  for (int it = 0; it < sparsity; ++it) {
    int best_col = -1;
    double best_score = -1.0;
    const Eigen::VectorXcd corr = dict.matrix().adjoint() * r;
    for (int j = 0; j < dict.cols(); ++j) {
      if (in_set[j]) continue;
      const double score = std::abs(corr[j]) / dict.column_norms()[j];
      if (score > best_score) {
        best_score = score;
        best_col = j;
      }
    }
    selected.push_back(best_col);
    in_set[best_col] = 1;
    result.iterations = it + 1;

    coeffs = least_squares(gather_columns(dict, selected), y,
                           &result.used_pseudo_inverse);
    r = y - gather_columns(dict, selected) * coeffs;
    if (r.norm() <= params.residual_tol) break;
  }

  result.x_hat = scatter(selected, coeffs, dict.cols());
  result.solver_residual_norm = r.norm();
  result.residual_norm = (y - dict.matrix() * result.x_hat).norm();
  result.support_users =
      detect_support(result.x_hat, dict.block_size(),
                     std::min<int>(sparsity / dict.block_size(),
                                   dict.user_count()));
  result.elapsed_seconds = seconds_since(t0);
  return result;
}

RecoveryResult bomp_solve(const Dictionary& dict, const Eigen::VectorXcd& y,
                          int n_blocks, const SolverParams& params) {
  const auto t0 = Clock::now();
  validate_measurement(dict, y);
  if (n_blocks < 0 || n_blocks > dict.user_count())
    throw std::invalid_argument("BOMP block count out of range");
  const int L = dict.block_size();

  RecoveryResult result;
  std::vector<int> selected;
  std::vector<char> in_set(static_cast<std::size_t>(dict.user_count()), 0);
  Eigen::VectorXcd r = y;
  Eigen::VectorXcd coeffs;

  for (int it = 0; it < n_blocks; ++it) {
    int best_block = -1;
    double best_score = -1.0;
    for (int k = 0; k < dict.user_count(); ++k) {
      if (in_set[k]) continue;
      // Projection energy of the residual onto the block span. Raw block
      // correlation is biased when the shifted-pilot columns of a block
      // overlap, so score in the orthonormalized basis.
      const double score = (dict.block_basis(k).adjoint() * r).norm();
      if (score > best_score) {
        best_score = score;
        best_block = k;
      }
    }
    selected.push_back(best_block);
    in_set[best_block] = 1;
    result.iterations = it + 1;

    const auto cols = block_columns(selected, L);
    coeffs = least_squares(gather_columns(dict, cols), y,
                           &result.used_pseudo_inverse);
    r = y - gather_columns(dict, cols) * coeffs;
    if (r.norm() <= params.residual_tol) break;
  }

  result.x_hat = scatter(block_columns(selected, L), coeffs, dict.cols());
  result.solver_residual_norm = r.norm();
  result.residual_norm = (y - dict.matrix() * result.x_hat).norm();
  result.support_users = selected;
  std::sort(result.support_users.begin(), result.support_users.end());
  result.elapsed_seconds = seconds_since(t0);
  return result;
}

RecoveryResult iht_solve(const Dictionary& dict, const Eigen::VectorXcd& y,
                         int sparsity, const SolverParams& params) {
  if (sparsity < 0 || sparsity > dict.cols())
    throw std::invalid_argument("IHT sparsity out of range");
  RecoveryResult result = iterative_threshold(
      dict, y, params, [&](Eigen::VectorXcd& v) { hard_threshold(v, sparsity); });
  result.support_users =
      detect_support(result.x_hat, dict.block_size(),
                     std::min<int>(sparsity / dict.block_size(),
                                   dict.user_count()));
  return result;
}

RecoveryResult biht_solve(const Dictionary& dict, const Eigen::VectorXcd& y,
                          int n_blocks, const SolverParams& params) {
  if (n_blocks < 0 || n_blocks > dict.user_count())
    throw std::invalid_argument("BIHT block count out of range");
  RecoveryResult result = iterative_threshold(
      dict, y, params, [&](Eigen::VectorXcd& v) {
        block_hard_threshold(v, dict.block_size(), n_blocks);
      });
  result.support_users =
      detect_support(result.x_hat, dict.block_size(), n_blocks);
  return result;
}

RecoveryResult brute_force_oracle(const Dictionary& dict,
                                  const Eigen::VectorXcd& y, int n_blocks) {
  const auto t0 = Clock::now();
  validate_measurement(dict, y);
  const int K = dict.user_count();
  if (n_blocks < 0 || n_blocks > K)
    throw std::invalid_argument("oracle block count out of range");
  if (!oracle_enumerable(K, n_blocks))
    throw std::invalid_argument(
        "oracle support enumeration exceeds 1e6 candidates");
  const int L = dict.block_size();

  RecoveryResult result;
  if (n_blocks == 0) {
    result.x_hat = Eigen::VectorXcd::Zero(dict.cols());
    result.solver_residual_norm = result.residual_norm = y.norm();
    result.elapsed_seconds = seconds_since(t0);
    return result;
  }

  std::vector<int> combo(static_cast<std::size_t>(n_blocks));
  std::iota(combo.begin(), combo.end(), 0);
  std::vector<int> best_combo;
  Eigen::VectorXcd best_coeffs;
  double best_norm = std::numeric_limits<double>::infinity();
  bool best_rank_deficient = false;

  while (true) {
    result.iterations += 1;
    const auto cols = block_columns(combo, L);
    const Eigen::MatrixXcd sub = gather_columns(dict, cols);
    bool rank_deficient = false;
    const Eigen::VectorXcd coeffs = least_squares(sub, y, &rank_deficient);
    const double res_norm = (y - sub * coeffs).norm();
    if (res_norm < best_norm) {
      best_norm = res_norm;
      best_combo = combo;
      best_coeffs = coeffs;
      best_rank_deficient = rank_deficient;
    }

    // Advance to the next combination in lexicographic order.
    int i = n_blocks - 1;
    while (i >= 0 && combo[i] == K - n_blocks + i) --i;
    if (i < 0) break;
    ++combo[i];
    for (int j = i + 1; j < n_blocks; ++j) combo[j] = combo[j - 1] + 1;
  }

  result.support_users = best_combo;
  result.x_hat = scatter(block_columns(best_combo, L), best_coeffs,
                         dict.cols());
  result.used_pseudo_inverse = best_rank_deficient;
  result.solver_residual_norm = best_norm;
  result.residual_norm = (y - dict.matrix() * result.x_hat).norm();
  result.elapsed_seconds = seconds_since(t0);
  return result;
}

MmseResult mmse_estimate(const Dictionary& dict, const Eigen::VectorXcd& y,
                         const std::vector<int>& support_users,
                         double noise_var, double prior_var) {
  validate_measurement(dict, y);
  if (prior_var <= 0.0) throw std::invalid_argument("prior_var must be > 0");
  if (noise_var < 0.0) throw std::invalid_argument("noise_var must be >= 0");
  for (int k : support_users)
    if (k < 0 || k >= dict.user_count())
      throw std::invalid_argument("support index out of range");

  MmseResult result;
  result.x_hat = Eigen::VectorXcd::Zero(dict.cols());
  if (support_users.empty()) return result;

  const auto cols = block_columns(support_users, dict.block_size());
  const Eigen::MatrixXcd A = gather_columns(dict, cols);
  Eigen::VectorXcd coeffs;
  const double ridge = noise_var / prior_var;
  if (ridge > 0.0) {
    Eigen::MatrixXcd gram = A.adjoint() * A;
    gram.diagonal().array() += ridge;
    coeffs = gram.llt().solve(A.adjoint() * y);
  } else {
    coeffs = least_squares(A, y, &result.used_pseudo_inverse);
  }
  for (std::size_t i = 0; i < cols.size(); ++i)
    result.x_hat[cols[i]] = coeffs[static_cast<Eigen::Index>(i)];
  return result;
}

}  // namespace csmud::recovery
