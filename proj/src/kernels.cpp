#include "csmud/kernels.hpp"

#include <cmath>

#include "csmud/threading.hpp"

namespace csmud::kernels {

namespace {

// Shared inner product of the dense kernels. The simd reduction fixes one
// lane-combination order at compile time, so results are reproducible run
// to run, and routing both the serial and the OpenMP kernels through this
// one (non-inlined) instantiation keeps them bit-identical by construction.
template <typename Scalar>
__attribute__((noinline)) Scalar dot_product(const Scalar* a, const Scalar* b,
                                             int n) {
  Scalar acc = Scalar(0);
#pragma omp simd reduction(+ : acc)
  for (int i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace

// ---------------------------------------------------------------------------
// Serial reference. Plain loops, no tricks; the OpenMP versions below must
// reproduce these bit for bit.
// ---------------------------------------------------------------------------

namespace serial {

template <typename Scalar>
void dense_forward(int batch, int in_dim, int out_dim, const Scalar* X,
                   const Scalar* W, const Scalar* bias, Scalar* Y) {
  for (int b = 0; b < batch; ++b) {
    const Scalar* x = X + static_cast<std::int64_t>(b) * in_dim;
    Scalar* y = Y + static_cast<std::int64_t>(b) * out_dim;
    for (int o = 0; o < out_dim; ++o) {
      const Scalar* w = W + static_cast<std::int64_t>(o) * in_dim;
      y[o] = bias[o] + dot_product(w, x, in_dim);
    }
  }
}

template <typename Scalar>
void dense_backward_input(int batch, int in_dim, int out_dim, const Scalar* dY,
                          const Scalar* W, Scalar* dX) {
  for (int b = 0; b < batch; ++b) {
    const Scalar* gy = dY + static_cast<std::int64_t>(b) * out_dim;
    Scalar* gx = dX + static_cast<std::int64_t>(b) * in_dim;
    for (int i = 0; i < in_dim; ++i) gx[i] = Scalar(0);
    for (int o = 0; o < out_dim; ++o) {
      const Scalar g = gy[o];
      const Scalar* w = W + static_cast<std::int64_t>(o) * in_dim;
      for (int i = 0; i < in_dim; ++i) gx[i] += g * w[i];
    }
  }
}

template <typename Scalar>
void dense_backward_params(int batch, int in_dim, int out_dim, const Scalar* X,
                           const Scalar* dY, Scalar* dW, Scalar* db) {
  for (int o = 0; o < out_dim; ++o) {
    Scalar* gw = dW + static_cast<std::int64_t>(o) * in_dim;
    for (int i = 0; i < in_dim; ++i) gw[i] = Scalar(0);
    Scalar gb = Scalar(0);
    for (int b = 0; b < batch; ++b) {
      const Scalar g = dY[static_cast<std::int64_t>(b) * out_dim + o];
      gb += g;
      const Scalar* x = X + static_cast<std::int64_t>(b) * in_dim;
      for (int i = 0; i < in_dim; ++i) gw[i] += g * x[i];
    }
    db[o] = gb;
  }
}

template <typename Scalar>
void relu_forward(std::int64_t n, const Scalar* X, Scalar* Y) {
  for (std::int64_t i = 0; i < n; ++i) Y[i] = X[i] > Scalar(0) ? X[i] : Scalar(0);
}

template <typename Scalar>
void relu_backward(std::int64_t n, const Scalar* X, const Scalar* dY,
                   Scalar* dX) {
  for (std::int64_t i = 0; i < n; ++i)
    dX[i] = X[i] > Scalar(0) ? dY[i] : Scalar(0);
}

template <typename Scalar>
void block_activation_forward(int batch, int width, int block, const Scalar* X,
                              Scalar* Y, std::uint8_t* mask) {
  const int nblocks = width / block;
  for (int b = 0; b < batch; ++b) {
    const Scalar* x = X + static_cast<std::int64_t>(b) * width;
    Scalar* y = Y + static_cast<std::int64_t>(b) * width;
    std::uint8_t* m = mask + static_cast<std::int64_t>(b) * nblocks;
    for (int k = 0; k < nblocks; ++k) {
      const Scalar* xb = x + k * block;
      bool active = false;
      for (int j = 0; j < block; ++j) active = active || xb[j] > Scalar(0);
      m[k] = active ? 1 : 0;
      Scalar* yb = y + k * block;
      for (int j = 0; j < block; ++j) yb[j] = active ? xb[j] : Scalar(0);
    }
  }
}

template <typename Scalar>
void block_activation_backward(int batch, int width, int block,
                               const std::uint8_t* mask, const Scalar* dY,
                               Scalar* dX) {
  const int nblocks = width / block;
  for (int b = 0; b < batch; ++b) {
    const Scalar* gy = dY + static_cast<std::int64_t>(b) * width;
    Scalar* gx = dX + static_cast<std::int64_t>(b) * width;
    const std::uint8_t* m = mask + static_cast<std::int64_t>(b) * nblocks;
    for (int k = 0; k < nblocks; ++k)
      for (int j = 0; j < block; ++j)
        gx[k * block + j] = m[k] ? gy[k * block + j] : Scalar(0);
  }
}

template <typename Scalar>
void block_max_pool_forward(int batch, int width, int block, const Scalar* X,
                            Scalar* Y, std::int32_t* argmax) {
  const int nblocks = width / block;
  for (int b = 0; b < batch; ++b) {
    const Scalar* x = X + static_cast<std::int64_t>(b) * width;
    Scalar* y = Y + static_cast<std::int64_t>(b) * nblocks;
    std::int32_t* am = argmax + static_cast<std::int64_t>(b) * nblocks;
    for (int k = 0; k < nblocks; ++k) {
      int best = k * block;
      Scalar v = x[best];
      for (int j = 1; j < block; ++j) {
        if (x[k * block + j] > v) {
          v = x[k * block + j];
          best = k * block + j;
        }
      }
      y[k] = v;
      am[k] = best;
    }
  }
}

template <typename Scalar>
void block_max_pool_backward(int batch, int width, int block,
                             const std::int32_t* argmax, const Scalar* dY,
                             Scalar* dX) {
  const int nblocks = width / block;
  for (int b = 0; b < batch; ++b) {
    Scalar* gx = dX + static_cast<std::int64_t>(b) * width;
    for (int i = 0; i < width; ++i) gx[i] = Scalar(0);
    const Scalar* gy = dY + static_cast<std::int64_t>(b) * nblocks;
    const std::int32_t* am = argmax + static_cast<std::int64_t>(b) * nblocks;
    for (int k = 0; k < nblocks; ++k) gx[am[k]] = gy[k];
  }
}

template <typename Scalar>
void batch_norm_forward_train(int batch, int width, const Scalar* X,
                              const Scalar* gamma, const Scalar* beta,
                              Scalar eps, Scalar momentum, Scalar* running_mean,
                              Scalar* running_var, Scalar* Y, Scalar* x_hat,
                              Scalar* batch_mean, Scalar* batch_var) {
  for (int f = 0; f < width; ++f) {
    Scalar mean = Scalar(0);
    for (int b = 0; b < batch; ++b)
      mean += X[static_cast<std::int64_t>(b) * width + f];
    mean /= Scalar(batch);
    Scalar var = Scalar(0);
    for (int b = 0; b < batch; ++b) {
      const Scalar d = X[static_cast<std::int64_t>(b) * width + f] - mean;
      var += d * d;
    }
    var /= Scalar(batch);
    batch_mean[f] = mean;
    batch_var[f] = var;
    running_mean[f] = momentum * running_mean[f] + (Scalar(1) - momentum) * mean;
    running_var[f] = momentum * running_var[f] + (Scalar(1) - momentum) * var;
    const Scalar inv_sigma = Scalar(1) / std::sqrt(var + eps);
    for (int b = 0; b < batch; ++b) {
      const std::int64_t idx = static_cast<std::int64_t>(b) * width + f;
      const Scalar xh = (X[idx] - mean) * inv_sigma;
      x_hat[idx] = xh;
      Y[idx] = gamma[f] * xh + beta[f];
    }
  }
}

template <typename Scalar>
void batch_norm_forward_infer(int batch, int width, const Scalar* X,
                              const Scalar* gamma, const Scalar* beta,
                              Scalar eps, const Scalar* running_mean,
                              const Scalar* running_var, Scalar* Y) {
  for (int f = 0; f < width; ++f) {
    const Scalar scale = gamma[f] / std::sqrt(running_var[f] + eps);
    const Scalar shift = beta[f] - scale * running_mean[f];
    for (int b = 0; b < batch; ++b) {
      const std::int64_t idx = static_cast<std::int64_t>(b) * width + f;
      Y[idx] = scale * X[idx] + shift;
    }
  }
}

template <typename Scalar>
void batch_norm_backward(int batch, int width, const Scalar* x_hat,
                         const Scalar* gamma, const Scalar* batch_var,
                         Scalar eps, const Scalar* dY, Scalar* dX,
                         Scalar* dgamma, Scalar* dbeta) {
  for (int f = 0; f < width; ++f) {
    Scalar sum_dy = Scalar(0);
    Scalar sum_dy_xhat = Scalar(0);
    for (int b = 0; b < batch; ++b) {
      const std::int64_t idx = static_cast<std::int64_t>(b) * width + f;
      sum_dy += dY[idx];
      sum_dy_xhat += dY[idx] * x_hat[idx];
    }
    dbeta[f] = sum_dy;
    dgamma[f] = sum_dy_xhat;
    const Scalar inv_sigma = Scalar(1) / std::sqrt(batch_var[f] + eps);
    const Scalar scale = gamma[f] * inv_sigma / Scalar(batch);
    for (int b = 0; b < batch; ++b) {
      const std::int64_t idx = static_cast<std::int64_t>(b) * width + f;
      dX[idx] = scale * (Scalar(batch) * dY[idx] - sum_dy -
                         x_hat[idx] * sum_dy_xhat);
    }
  }
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP versions. Partition over rows (or features for the per-feature
// kernels); every reduction runs in the same order as the serial code.
// ---------------------------------------------------------------------------

template <typename Scalar>
void dense_forward(int batch, int in_dim, int out_dim, const Scalar* X,
                   const Scalar* W, const Scalar* bias, Scalar* Y) {
  const int nt = resolved_threads();
#pragma omp parallel for num_threads(nt) if (nt > 1) schedule(static)
  for (int b = 0; b < batch; ++b) {
    const Scalar* x = X + static_cast<std::int64_t>(b) * in_dim;
    Scalar* y = Y + static_cast<std::int64_t>(b) * out_dim;
    for (int o = 0; o < out_dim; ++o) {
      const Scalar* w = W + static_cast<std::int64_t>(o) * in_dim;
      y[o] = bias[o] + dot_product(w, x, in_dim);
    }
  }
}

template <typename Scalar>
void dense_backward_input(int batch, int in_dim, int out_dim, const Scalar* dY,
                          const Scalar* W, Scalar* dX) {
  const int nt = resolved_threads();
#pragma omp parallel for num_threads(nt) if (nt > 1) schedule(static)
  for (int b = 0; b < batch; ++b) {
    const Scalar* gy = dY + static_cast<std::int64_t>(b) * out_dim;
    Scalar* gx = dX + static_cast<std::int64_t>(b) * in_dim;
    for (int i = 0; i < in_dim; ++i) gx[i] = Scalar(0);
    for (int o = 0; o < out_dim; ++o) {
      const Scalar g = gy[o];
      const Scalar* w = W + static_cast<std::int64_t>(o) * in_dim;
      for (int i = 0; i < in_dim; ++i) gx[i] += g * w[i];
    }
  }
}

template <typename Scalar>
void dense_backward_params(int batch, int in_dim, int out_dim, const Scalar* X,
                           const Scalar* dY, Scalar* dW, Scalar* db) {
  const int nt = resolved_threads();
#pragma omp parallel for num_threads(nt) if (nt > 1) schedule(static)
  for (int o = 0; o < out_dim; ++o) {
    Scalar* gw = dW + static_cast<std::int64_t>(o) * in_dim;
    for (int i = 0; i < in_dim; ++i) gw[i] = Scalar(0);
    Scalar gb = Scalar(0);
    for (int b = 0; b < batch; ++b) {
      const Scalar g = dY[static_cast<std::int64_t>(b) * out_dim + o];
      gb += g;
      const Scalar* x = X + static_cast<std::int64_t>(b) * in_dim;
      for (int i = 0; i < in_dim; ++i) gw[i] += g * x[i];
    }
    db[o] = gb;
  }
}

template <typename Scalar>
void relu_forward(std::int64_t n, const Scalar* X, Scalar* Y) {
  const int nt = resolved_threads();
#pragma omp parallel for num_threads(nt) if (nt > 1) schedule(static)
  for (std::int64_t i = 0; i < n; ++i) Y[i] = X[i] > Scalar(0) ? X[i] : Scalar(0);
}

template <typename Scalar>
void relu_backward(std::int64_t n, const Scalar* X, const Scalar* dY,
                   Scalar* dX) {
  const int nt = resolved_threads();
#pragma omp parallel for num_threads(nt) if (nt > 1) schedule(static)
  for (std::int64_t i = 0; i < n; ++i)
    dX[i] = X[i] > Scalar(0) ? dY[i] : Scalar(0);
}

template <typename Scalar>
void block_activation_forward(int batch, int width, int block, const Scalar* X,
                              Scalar* Y, std::uint8_t* mask) {
  const int nt = resolved_threads();
#pragma omp parallel for num_threads(nt) if (nt > 1) schedule(static)
  for (int b = 0; b < batch; ++b)
    serial::block_activation_forward(1, width, block,
                                     X + static_cast<std::int64_t>(b) * width,
                                     Y + static_cast<std::int64_t>(b) * width,
                                     mask + static_cast<std::int64_t>(b) *
                                                (width / block));
}

template <typename Scalar>
void block_activation_backward(int batch, int width, int block,
                               const std::uint8_t* mask, const Scalar* dY,
                               Scalar* dX) {
  const int nt = resolved_threads();
#pragma omp parallel for num_threads(nt) if (nt > 1) schedule(static)
  for (int b = 0; b < batch; ++b)
    serial::block_activation_backward(
        1, width, block, mask + static_cast<std::int64_t>(b) * (width / block),
        dY + static_cast<std::int64_t>(b) * width,
        dX + static_cast<std::int64_t>(b) * width);
}

template <typename Scalar>
void block_max_pool_forward(int batch, int width, int block, const Scalar* X,
                            Scalar* Y, std::int32_t* argmax) {
  const int nt = resolved_threads();
  const int nblocks = width / block;
#pragma omp parallel for num_threads(nt) if (nt > 1) schedule(static)
  for (int b = 0; b < batch; ++b)
    serial::block_max_pool_forward(
        1, width, block, X + static_cast<std::int64_t>(b) * width,
        Y + static_cast<std::int64_t>(b) * nblocks,
        argmax + static_cast<std::int64_t>(b) * nblocks);
}

template <typename Scalar>
void block_max_pool_backward(int batch, int width, int block,
                             const std::int32_t* argmax, const Scalar* dY,
                             Scalar* dX) {
  const int nt = resolved_threads();
  const int nblocks = width / block;
#pragma omp parallel for num_threads(nt) if (nt > 1) schedule(static)
  for (int b = 0; b < batch; ++b)
    serial::block_max_pool_backward(
        1, width, block, argmax + static_cast<std::int64_t>(b) * nblocks,
        dY + static_cast<std::int64_t>(b) * nblocks,
        dX + static_cast<std::int64_t>(b) * width);
}

template <typename Scalar>
void batch_norm_forward_train(int batch, int width, const Scalar* X,
                              const Scalar* gamma, const Scalar* beta,
                              Scalar eps, Scalar momentum, Scalar* running_mean,
                              Scalar* running_var, Scalar* Y, Scalar* x_hat,
                              Scalar* batch_mean, Scalar* batch_var) {
  const int nt = resolved_threads();
#pragma omp parallel for num_threads(nt) if (nt > 1) schedule(static)
  for (int f = 0; f < width; ++f) {
    Scalar mean = Scalar(0);
    for (int b = 0; b < batch; ++b)
      mean += X[static_cast<std::int64_t>(b) * width + f];
    mean /= Scalar(batch);
    Scalar var = Scalar(0);
    for (int b = 0; b < batch; ++b) {
      const Scalar d = X[static_cast<std::int64_t>(b) * width + f] - mean;
      var += d * d;
    }
    var /= Scalar(batch);
    batch_mean[f] = mean;
    batch_var[f] = var;
    running_mean[f] = momentum * running_mean[f] + (Scalar(1) - momentum) * mean;
    running_var[f] = momentum * running_var[f] + (Scalar(1) - momentum) * var;
    const Scalar inv_sigma = Scalar(1) / std::sqrt(var + eps);
    for (int b = 0; b < batch; ++b) {
      const std::int64_t idx = static_cast<std::int64_t>(b) * width + f;
      const Scalar xh = (X[idx] - mean) * inv_sigma;
      x_hat[idx] = xh;
      Y[idx] = gamma[f] * xh + beta[f];
    }
  }
}

template <typename Scalar>
void batch_norm_forward_infer(int batch, int width, const Scalar* X,
                              const Scalar* gamma, const Scalar* beta,
                              Scalar eps, const Scalar* running_mean,
                              const Scalar* running_var, Scalar* Y) {
  const int nt = resolved_threads();
#pragma omp parallel for num_threads(nt) if (nt > 1) schedule(static)
  for (int f = 0; f < width; ++f) {
    const Scalar scale = gamma[f] / std::sqrt(running_var[f] + eps);
    const Scalar shift = beta[f] - scale * running_mean[f];
    for (int b = 0; b < batch; ++b) {
      const std::int64_t idx = static_cast<std::int64_t>(b) * width + f;
      Y[idx] = scale * X[idx] + shift;
    }
  }
}

template <typename Scalar>
void batch_norm_backward(int batch, int width, const Scalar* x_hat,
                         const Scalar* gamma, const Scalar* batch_var,
                         Scalar eps, const Scalar* dY, Scalar* dX,
                         Scalar* dgamma, Scalar* dbeta) {
  const int nt = resolved_threads();
#pragma omp parallel for num_threads(nt) if (nt > 1) schedule(static)
  for (int f = 0; f < width; ++f) {
    Scalar sum_dy = Scalar(0);
    Scalar sum_dy_xhat = Scalar(0);
    for (int b = 0; b < batch; ++b) {
      const std::int64_t idx = static_cast<std::int64_t>(b) * width + f;
      sum_dy += dY[idx];
      sum_dy_xhat += dY[idx] * x_hat[idx];
    }
    dbeta[f] = sum_dy;
    dgamma[f] = sum_dy_xhat;
    const Scalar inv_sigma = Scalar(1) / std::sqrt(batch_var[f] + eps);
    const Scalar scale = gamma[f] * inv_sigma / Scalar(batch);
    for (int b = 0; b < batch; ++b) {
      const std::int64_t idx = static_cast<std::int64_t>(b) * width + f;
      dX[idx] = scale * (Scalar(batch) * dY[idx] - sum_dy -
                         x_hat[idx] * sum_dy_xhat);
    }
  }
}

// Explicit instantiations for the two supported precisions.
#define CSMUD_INSTANTIATE_KERNELS(NS, S)                                       \
  template void NS::dense_forward<S>(int, int, int, const S*, const S*,        \
                                     const S*, S*);                            \
  template void NS::dense_backward_input<S>(int, int, int, const S*, const S*, \
                                            S*);                               \
  template void NS::dense_backward_params<S>(int, int, int, const S*,          \
                                             const S*, S*, S*);                \
  template void NS::relu_forward<S>(std::int64_t, const S*, S*);               \
  template void NS::relu_backward<S>(std::int64_t, const S*, const S*, S*);    \
  template void NS::block_activation_forward<S>(int, int, int, const S*, S*,   \
                                                std::uint8_t*);                \
  template void NS::block_activation_backward<S>(int, int, int,               \
                                                 const std::uint8_t*,          \
                                                 const S*, S*);                \
  template void NS::block_max_pool_forward<S>(int, int, int, const S*, S*,     \
                                              std::int32_t*);                  \
  template void NS::block_max_pool_backward<S>(int, int, int,                  \
                                               const std::int32_t*, const S*,  \
                                               S*);                            \
  template void NS::batch_norm_forward_train<S>(int, int, const S*, const S*,  \
                                                const S*, S, S, S*, S*, S*,    \
                                                S*, S*, S*);                   \
  template void NS::batch_norm_forward_infer<S>(int, int, const S*, const S*,  \
                                                const S*, S, const S*,         \
                                                const S*, S*);                 \
  template void NS::batch_norm_backward<S>(int, int, const S*, const S*,       \
                                           const S*, S, const S*, S*, S*, S*);

CSMUD_INSTANTIATE_KERNELS(serial, float)
CSMUD_INSTANTIATE_KERNELS(serial, double)
CSMUD_INSTANTIATE_KERNELS(csmud::kernels, float)
CSMUD_INSTANTIATE_KERNELS(csmud::kernels, double)

#undef CSMUD_INSTANTIATE_KERNELS

}  // namespace csmud::kernels
