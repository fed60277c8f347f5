#pragma once

#include <cstdint>

namespace csmud::kernels {

// Batched layer primitives used by the neural engine. All matrices are
// row-major flat arrays; a batch is rows x width with one sample per row.
//
// Every kernel exists twice: the serial reference under kernels::serial
// and the OpenMP version in this namespace. The parallel versions split
// independent output elements across threads and never reorder a
// reduction, so both variants produce bit-identical results; the unit
// tests assert that and the kernel_bench tool times the two against each
// other.

namespace serial {

// Y[b,o] = sum_i X[b,i] * W[o,i] + bias[o]
template <typename Scalar>
void dense_forward(int batch, int in_dim, int out_dim, const Scalar* X,
                   const Scalar* W, const Scalar* bias, Scalar* Y);

// dX[b,i] = sum_o dY[b,o] * W[o,i]
template <typename Scalar>
void dense_backward_input(int batch, int in_dim, int out_dim, const Scalar* dY,
                          const Scalar* W, Scalar* dX);

// dW[o,i] = sum_b dY[b,o] * X[b,i];  db[o] = sum_b dY[b,o]
template <typename Scalar>
void dense_backward_params(int batch, int in_dim, int out_dim, const Scalar* X,
                           const Scalar* dY, Scalar* dW, Scalar* db);

template <typename Scalar>
void relu_forward(std::int64_t n, const Scalar* X, Scalar* Y);

template <typename Scalar>
void relu_backward(std::int64_t n, const Scalar* X, const Scalar* dY,
                   Scalar* dX);

// Whole block passes unchanged iff its max element is > 0, else zeros.
// mask has one entry per (row, block).
template <typename Scalar>
void block_activation_forward(int batch, int width, int block, const Scalar* X,
                              Scalar* Y, std::uint8_t* mask);

template <typename Scalar>
void block_activation_backward(int batch, int width, int block,
                               const std::uint8_t* mask, const Scalar* dY,
                               Scalar* dX);

// Y[b,k] = max over block k; argmax records the first maximal index.
template <typename Scalar>
void block_max_pool_forward(int batch, int width, int block, const Scalar* X,
                            Scalar* Y, std::int32_t* argmax);

template <typename Scalar>
void block_max_pool_backward(int batch, int width, int block,
                             const std::int32_t* argmax, const Scalar* dY,
                             Scalar* dX);

// Training-mode batch norm. Per-feature batch mean / biased variance;
// saves the normalized activations for the backward pass and updates the
// running statistics in place with the given momentum.
template <typename Scalar>
void batch_norm_forward_train(int batch, int width, const Scalar* X,
                              const Scalar* gamma, const Scalar* beta,
                              Scalar eps, Scalar momentum, Scalar* running_mean,
                              Scalar* running_var, Scalar* Y, Scalar* x_hat,
                              Scalar* batch_mean, Scalar* batch_var);

template <typename Scalar>
void batch_norm_forward_infer(int batch, int width, const Scalar* X,
                              const Scalar* gamma, const Scalar* beta,
                              Scalar eps, const Scalar* running_mean,
                              const Scalar* running_var, Scalar* Y);

// Exact gradient through the batch statistics.
template <typename Scalar>
void batch_norm_backward(int batch, int width, const Scalar* x_hat,
                         const Scalar* gamma, const Scalar* batch_var,
                         Scalar eps, const Scalar* dY, Scalar* dX,
                         Scalar* dgamma, Scalar* dbeta);

}  // namespace serial

template <typename Scalar>
void dense_forward(int batch, int in_dim, int out_dim, const Scalar* X,
                   const Scalar* W, const Scalar* bias, Scalar* Y);

template <typename Scalar>
void dense_backward_input(int batch, int in_dim, int out_dim, const Scalar* dY,
                          const Scalar* W, Scalar* dX);

template <typename Scalar>
void dense_backward_params(int batch, int in_dim, int out_dim, const Scalar* X,
                           const Scalar* dY, Scalar* dW, Scalar* db);

template <typename Scalar>
void relu_forward(std::int64_t n, const Scalar* X, Scalar* Y);

template <typename Scalar>
void relu_backward(std::int64_t n, const Scalar* X, const Scalar* dY,
                   Scalar* dX);

template <typename Scalar>
void block_activation_forward(int batch, int width, int block, const Scalar* X,
                              Scalar* Y, std::uint8_t* mask);

template <typename Scalar>
void block_activation_backward(int batch, int width, int block,
                               const std::uint8_t* mask, const Scalar* dY,
                               Scalar* dX);

template <typename Scalar>
void block_max_pool_forward(int batch, int width, int block, const Scalar* X,
                            Scalar* Y, std::int32_t* argmax);

template <typename Scalar>
void block_max_pool_backward(int batch, int width, int block,
                             const std::int32_t* argmax, const Scalar* dY,
                             Scalar* dX);

template <typename Scalar>
void batch_norm_forward_train(int batch, int width, const Scalar* X,
                              const Scalar* gamma, const Scalar* beta,
                              Scalar eps, Scalar momentum, Scalar* running_mean,
                              Scalar* running_var, Scalar* Y, Scalar* x_hat,
                              Scalar* batch_mean, Scalar* batch_var);

template <typename Scalar>
void batch_norm_forward_infer(int batch, int width, const Scalar* X,
                              const Scalar* gamma, const Scalar* beta,
                              Scalar eps, const Scalar* running_mean,
                              const Scalar* running_var, Scalar* Y);

template <typename Scalar>
void batch_norm_backward(int batch, int width, const Scalar* x_hat,
                         const Scalar* gamma, const Scalar* batch_var,
                         Scalar eps, const Scalar* dY, Scalar* dX,
                         Scalar* dgamma, Scalar* dbeta);

}  // namespace csmud::kernels
