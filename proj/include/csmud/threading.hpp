#pragma once

namespace csmud {

// Global worker-count control for the OpenMP kernels. 0 means "use the
// OpenMP runtime default". Dataset generation and bench trials honor the
// same setting. Results are bit-identical for any worker count: parallel
// loops only partition independent work items, reductions keep the serial
// accumulation order.
void set_max_threads(int n);
int max_threads();

// Effective worker count for a parallel region (resolves 0 to the runtime
// default, 1 when OpenMP is unavailable).
int resolved_threads();

bool parallelism_supported();

}  // namespace csmud
