#pragma once

// Naive loop oracles. They read tensor data directly and never call the
// library's ops, so they stay independent of the code paths they check.
// Used by the unit tests, the acceptance suite and `balr verify`.

#include <cstdint>
#include <vector>

#include "balr/tensor.hpp"

namespace balr::reference {

/// Direct nested-loop convolution; returns data of shape [N, C_out, H_out, W_out].
std::vector<double> conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::int64_t stride,
                           std::int64_t padding, std::int64_t groups);

/// C = A * B for row-major A [m x k], B [k x n].
std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, std::int64_t m,
                           std::int64_t k, std::int64_t n);

/// Materializes W = U V^T (m x n) and returns x W^T for x [rows x n].
std::vector<double> lowrank_dense(const Tensor& x, const Tensor& u, const Tensor& v);

/// s * W_up * gelu(W_down * x) with both W materialized densely.
std::vector<double> adapter_dense(const Tensor& x, const Tensor& u_down, const Tensor& v_down, const Tensor& u_up,
                                  const Tensor& v_up, double s);

/// Per-token sum of rank-1 outer products: M[t, c] = (1/R) sum_r A[t, r] B[c, r].
std::vector<double> reconstruct_sum(const Tensor& a, const Tensor& b);

/// Rotates each adjacent pair (2j, 2j+1) of `row` by t * base^(-2j/R).
std::vector<double> rope_row(const std::vector<double>& row, std::int64_t position, double base = 10000.0);

/// O(n^2) attention over factored inputs with explicitly materialized
/// weights w_ts = (u_t . k_s) / sum_s' (u_t . k_s'), u = phi(A_Q G),
/// k = phi(A_K), G = B_Q^T B_K / (R_Q R_K), values v_s = A_V[s] B_V^T / R_V.
/// A_Q/A_K are taken as given (already rotated). Returns [n_q x d].
struct DenseAttention {
  std::vector<double> output;
  std::vector<double> weights;  // n_q x n_kv
  std::vector<double> values;   // n_kv x d
};
DenseAttention factored_attention_dense(const Tensor& a_q, const Tensor& a_k, const Tensor& a_v, const Tensor& b_q,
                                        const Tensor& b_k, const Tensor& b_v);

/// Textbook multi-head softmax attention with explicit loops.
/// x [n x d]; weights are [d x d] applied as x W; returns [n x d].
std::vector<double> mhsa(const Tensor& x, const Tensor& w_q, const Tensor& w_k, const Tensor& w_v, const Tensor& w_o,
                         std::int64_t heads);

}  // namespace balr::reference
