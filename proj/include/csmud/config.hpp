#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace csmud {

// Invalid configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Required dataset/model file absent (CLI exit code 3).
struct MissingArtifactError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Corrupt or mismatched on-disk container.
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Scenario dimensions shared by every module.
//   K      users
//   Ns     pilot symbols per user
//   L      channel taps per user (block size)
//   n      active users (train/val draw exactly n; test draws 1..n)
struct SystemConfig {
  int K = 20;
  int Ns = 16;
  int L = 3;
  int n = 2;
  double snr_db = 10.0;
  std::uint64_t seed = 1;

  int measurement_len() const { return Ns + L - 1; }
  int signal_len() const { return K * L; }
  bool underdetermined() const {
    return static_cast<double>(K) > static_cast<double>(measurement_len()) / L;
  }

  void validate() const;
};

bool operator==(const SystemConfig& a, const SystemConfig& b);

void to_json(nlohmann::json& j, const SystemConfig& c);
void from_json(const nlohmann::json& j, SystemConfig& c);

}  // namespace csmud
