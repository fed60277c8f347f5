#include "csmud/dictionary.hpp"

#include <cmath>
#include <stdexcept>

namespace csmud {

namespace {

double estimate_spectral_norm(const Eigen::MatrixXcd& A) {
  if (A.size() == 0) return 0.0;
  const Eigen::Index n = A.cols();
  Eigen::VectorXcd v = Eigen::VectorXcd::Constant(n, 1.0 / std::sqrt(double(n)));
  double lambda = 0.0;  // dominant eigenvalue of A^H A
  for (int it = 0; it < 50; ++it) {
    Eigen::VectorXcd w = A.adjoint() * (A * v);
    const double norm = w.norm();
    if (norm == 0.0) return 0.0;
    if (it > 0 && std::abs(norm - lambda) <= 1e-6 * norm) {
      lambda = norm;
      break;
    }
    lambda = norm;
    v = w / norm;
  }
  return std::sqrt(lambda);
}

}  // namespace

Dictionary::Dictionary(Eigen::MatrixXcd matrix, int block_size)
    : matrix_(std::move(matrix)), block_size_(block_size) {
  if (block_size_ < 1) throw std::invalid_argument("block_size must be >= 1");
  if (matrix_.cols() % block_size_ != 0)
    throw std::invalid_argument("dictionary width not divisible by block size");
  user_count_ = static_cast<int>(matrix_.cols()) / block_size_;
  column_norms_.resize(matrix_.cols());
  for (Eigen::Index j = 0; j < matrix_.cols(); ++j)
    column_norms_[j] = matrix_.col(j).norm();
  block_frob_.resize(user_count_);
  for (int k = 0; k < user_count_; ++k) block_frob_[k] = block(k).norm();
  basis_.resize(matrix_.rows(), matrix_.cols());
  const Eigen::MatrixXcd thin =
      Eigen::MatrixXcd::Identity(matrix_.rows(), block_size_);
  for (int k = 0; k < user_count_; ++k) {
    const Eigen::HouseholderQR<Eigen::MatrixXcd> qr(block(k));
    basis_.middleCols(static_cast<Eigen::Index>(k) * block_size_,
                      block_size_) = qr.householderQ() * thin;
  }
  spectral_norm_ = estimate_spectral_norm(matrix_);
}

}  // namespace csmud
