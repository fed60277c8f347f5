#include "csmud/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>

#include "csmud/gradcheck.hpp"
#include "csmud/kernels.hpp"
#include "csmud/neural.hpp"
#include "csmud/recovery.hpp"
#include "csmud/rng.hpp"
#include "csmud/sysmodel.hpp"

namespace csmud::selfcheck {

namespace {

// Whole block passes iff any entry is positive; serial and parallel kernels
// agree bit for bit.
CheckResult truth_table_check() {
  CheckResult r{"block activation truth table", true, "L=1..4 exhaustive"};
  const std::vector<double> values = {-1.0, 0.0, 0.5};
  for (int L = 1; L <= 4 && r.passed; ++L) {
    const int count = static_cast<int>(std::pow(values.size(), L));
    std::vector<double> X(static_cast<std::size_t>(count) * L);
    for (int p = 0; p < count; ++p) {
      int rem = p;
      for (int l = 0; l < L; ++l) {
        X[static_cast<std::size_t>(p) * L + l] =
            values[static_cast<std::size_t>(rem) % values.size()];
        rem /= static_cast<int>(values.size());
      }
    }
    std::vector<double> Y(X.size()), Yp(X.size());
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(count)),
        maskp(static_cast<std::size_t>(count));
    kernels::serial::block_activation_forward(count, L, L, X.data(), Y.data(),
                                              mask.data());
    kernels::block_activation_forward(count, L, L, X.data(), Yp.data(),
                                      maskp.data());
    for (int p = 0; p < count && r.passed; ++p) {
      const std::size_t row = static_cast<std::size_t>(p) * L;
      const bool pass_through =
          *std::max_element(X.begin() + static_cast<std::ptrdiff_t>(row),
                            X.begin() + static_cast<std::ptrdiff_t>(row + L)) >
          0.0;
      if (mask[static_cast<std::size_t>(p)] != (pass_through ? 1 : 0) ||
          maskp[static_cast<std::size_t>(p)] !=
              mask[static_cast<std::size_t>(p)])
        r.passed = false;
      for (int l = 0; l < L; ++l) {
        const double expect = pass_through ? X[row + l] : 0.0;
        if (Y[row + l] != expect || Yp[row + l] != Y[row + l])
          r.passed = false;
      }
    }
    if (!r.passed) r.detail = "mismatch at L=" + std::to_string(L);
  }
  return r;
}

CheckResult gradient_check() {
  CheckResult r{"gradient vs central finite differences", true, ""};
  double worst = 0.0;
  std::size_t checked = 0;
  for (int trial = 0; trial < 4 && r.passed; ++trial) {
    neural::NetworkShape shape;
    shape.arch = trial % 2 == 0 ? neural::Arch::brnn : neural::Arch::dnn;
    shape.users = 4;
    shape.block_size = 2;
    shape.measurement_len = 5;
    shape.relu_layers = 1;
    shape.residual_blocks = 1;
    neural::Network<double> net(shape, 7000 + static_cast<std::uint64_t>(trial));

    Rng rng(300 + static_cast<std::uint64_t>(trial));
    const int batch = 4;
    std::vector<double> X(static_cast<std::size_t>(batch) *
                          shape.input_width());
    for (auto& v : X) v = rng.normal(1.0);
    std::vector<std::vector<std::int32_t>> active(batch);
    for (auto& a : active) {
      const auto users = sysmodel::sample_activity(
          shape.users, 1 + static_cast<int>(rng.below(2)), rng);
      a.assign(users.begin(), users.end());
    }

    const auto rep = gradcheck::fd_gradient_check(net, X, batch, active, 1e-5);
    worst = std::max(worst, rep.max_rel_err);
    checked += rep.checked;
    if (rep.checked == 0 || rep.max_rel_err >= 1e-5) r.passed = false;
  }
  std::ostringstream detail;
  detail << "max rel err " << worst << " over " << checked << " coordinates";
  r.detail = detail.str();
  return r;
}

CheckResult oracle_check() {
  CheckResult r{"oracle micro-comparison", true, ""};
  SystemConfig cfg;
  cfg.K = 6;
  cfg.Ns = 6;
  cfg.L = 2;
  cfg.n = 2;
  cfg.seed = 123;
  const Dictionary dict = sysmodel::dictionary_for(cfg);

  const int trials = 25;
  int oracle_ok = 0, bomp_match = 0;
  for (int t = 0; t < trials; ++t) {
    Rng rng(derive_seed(cfg.seed, 4000 + static_cast<std::uint64_t>(t)));
    const auto gt = sysmodel::make_ground_truth(
        cfg.K, cfg.L, sysmodel::sample_activity(cfg.K, cfg.n, rng),
        sysmodel::sample_channel(cfg.K, cfg.L, rng));
    const auto meas = sysmodel::synthesize_measurement(dict, gt.x, 0.0, rng);
    const auto oracle = recovery::brute_force_oracle(dict, meas.y, cfg.n);
    if (oracle.residual_norm < 1e-9) ++oracle_ok;
    if (recovery::bomp_solve(dict, meas.y, cfg.n).support_users ==
        oracle.support_users)
      ++bomp_match;
  }
  std::ostringstream detail;
  detail << "oracle residual<1e-9 " << oracle_ok << "/" << trials
         << ", bomp match " << bomp_match << "/" << trials;
  r.detail = detail.str();
  // Deterministic seeded battery: the oracle must always land on the true
  // noiseless residual; BOMP is greedy, a small miss allowance suffices.
  r.passed = oracle_ok == trials && bomp_match >= trials - 3;
  return r;
}

}  // namespace

std::vector<CheckResult> run_embedded_checks() {
  return {truth_table_check(), gradient_check(), oracle_check()};
}

}  // namespace csmud::selfcheck
