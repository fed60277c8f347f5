#include "csmud/config.hpp"

#include <cmath>

namespace csmud {

void SystemConfig::validate() const {
  if (K < 1) throw ConfigError("system.K must be >= 1");
  if (Ns < 1) throw ConfigError("system.Ns must be >= 1");
  if (L < 1) throw ConfigError("system.L must be >= 1");
  if (n < 0 || n > K) throw ConfigError("system.n must be in [0, K]");
  if (!std::isfinite(snr_db)) throw ConfigError("system.snr_db must be finite");
}

bool operator==(const SystemConfig& a, const SystemConfig& b) {
  return a.K == b.K && a.Ns == b.Ns && a.L == b.L && a.n == b.n &&
         a.snr_db == b.snr_db && a.seed == b.seed;
}

void to_json(nlohmann::json& j, const SystemConfig& c) {
  j = nlohmann::json{{"K", c.K},         {"Ns", c.Ns},
                     {"L", c.L},         {"n", c.n},
                     {"snr_db", c.snr_db}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SystemConfig& c) {
  j.at("K").get_to(c.K);
  j.at("Ns").get_to(c.Ns);
  j.at("L").get_to(c.L);
  j.at("n").get_to(c.n);
  j.at("snr_db").get_to(c.snr_db);
  j.at("seed").get_to(c.seed);
}

}  // namespace csmud
