#pragma once

// Finite-difference gradient oracle shared by the unit tests, the
// acceptance runner, and the CLI self-check. Probes
// Network<double>::loss() around the current parameters and compares the
// central difference against the analytic gradient from
// loss_and_backward().
//
// ReLU gates, block masks, and pool argmaxes make the loss piecewise
// smooth; a coordinate whose perturbation flips any such decision sits on
// a kink where the central difference is meaningless. Those coordinates
// are detected via the activation fingerprint and skipped.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "csmud/neural.hpp"

namespace csmud::gradcheck {

struct FdReport {
  std::size_t checked = 0;
  std::size_t skipped = 0;
  double max_rel_err = 0.0;
};

inline FdReport fd_gradient_check(
    csmud::neural::Network<double>& net, const std::vector<double>& X,
    int batch, const std::vector<std::vector<std::int32_t>>& active,
    double eps = 1e-6, double denom_floor = 1e-4) {
  net.loss_and_backward(X, batch, active);
  const std::vector<double> grad = net.gradients();
  const std::vector<double> theta = net.trainable_params();

  net.loss(X, batch, active);
  const std::uint64_t base_fp = net.activation_fingerprint();

  FdReport report;
  std::vector<double> probe = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    probe[i] = theta[i] + eps;
    net.set_trainable_params(probe);
    const double up = net.loss(X, batch, active);
    const std::uint64_t fp_up = net.activation_fingerprint();

    probe[i] = theta[i] - eps;
    net.set_trainable_params(probe);
    const double down = net.loss(X, batch, active);
    const std::uint64_t fp_down = net.activation_fingerprint();

    probe[i] = theta[i];
    if (fp_up != base_fp || fp_down != base_fp) {
      ++report.skipped;
      continue;
    }
    const double fd = (up - down) / (2.0 * eps);
    const double denom =
        std::max({std::abs(fd), std::abs(grad[i]), denom_floor});
    report.max_rel_err =
        std::max(report.max_rel_err, std::abs(fd - grad[i]) / denom);
    ++report.checked;
  }
  net.set_trainable_params(theta);
  return report;
}

}  // namespace csmud::gradcheck
