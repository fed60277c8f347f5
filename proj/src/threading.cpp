#include "csmud/threading.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace csmud {

namespace {
std::atomic<int> g_max_threads{0};
}

void set_max_threads(int n) { g_max_threads.store(n < 0 ? 0 : n); }

int max_threads() { return g_max_threads.load(); }

int resolved_threads() {
#ifdef _OPENMP
  const int n = g_max_threads.load();
  return n > 0 ? n : omp_get_max_threads();
#else
  return 1;
#endif
}

bool parallelism_supported() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

}  // namespace csmud
