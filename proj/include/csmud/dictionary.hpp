#pragma once

#include <Eigen/Dense>

namespace csmud {

// Stacked pilot-convolution matrix: M x (K*L) complex, column block k is
// the Toeplitz convolution matrix of user k's pilot. Column norms, block
// Frobenius norms, and a power-iteration estimate of the spectral norm are
// computed once at construction; solvers treat the object as read-only.
class Dictionary {
 public:
  Dictionary() = default;
  Dictionary(Eigen::MatrixXcd matrix, int block_size);

  const Eigen::MatrixXcd& matrix() const { return matrix_; }
  int block_size() const { return block_size_; }
  int user_count() const { return user_count_; }
  int rows() const { return static_cast<int>(matrix_.rows()); }
  int cols() const { return static_cast<int>(matrix_.cols()); }

  // Column view of user k's L columns.
  auto block(int k) const {
    return matrix_.middleCols(static_cast<Eigen::Index>(k) * block_size_,
                              block_size_);
  }

  const Eigen::VectorXd& column_norms() const { return column_norms_; }
  const Eigen::VectorXd& block_frobenius_norms() const { return block_frob_; }

  // Orthonormal basis of user k's column span (thin QR, blocks are full
  // column rank for nonzero pilots). ||basis^H r|| is the energy of the
  // projection of r onto the block, the block matched-filter statistic.
  auto block_basis(int k) const {
    return basis_.middleCols(static_cast<Eigen::Index>(k) * block_size_,
                             block_size_);
  }

  // Largest singular value (power iteration on S^H S, 50 iterations,
  // relative tolerance 1e-6).
  double spectral_norm() const { return spectral_norm_; }

 private:
  Eigen::MatrixXcd matrix_;
  Eigen::MatrixXcd basis_;
  int block_size_ = 1;
  int user_count_ = 0;
  Eigen::VectorXd column_norms_;
  Eigen::VectorXd block_frob_;
  double spectral_norm_ = 0.0;
};

}  // namespace csmud
