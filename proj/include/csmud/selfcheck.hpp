#pragma once

#include <string>
#include <vector>

namespace csmud::selfcheck {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Built-in sanity battery behind `csmud check`: the block-activation truth
// table, finite-difference gradient probes of both architectures, and an
// oracle-vs-BOMP comparison on noiseless data. Pure computation, touches
// no files.
std::vector<CheckResult> run_embedded_checks();

}  // namespace csmud::selfcheck
