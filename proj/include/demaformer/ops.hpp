#pragma once

#include <cstddef>
#include <vector>

#include "demaformer/rng.hpp"
#include "demaformer/tensor.hpp"

namespace demaformer {

inline constexpr double kLayerNormEpsilon = 1e-5;

// Weight is stored [out_dim x in_dim]; forward computes x * W^T + b per row.
struct LinearParams {
    Tensor weight;
    Tensor bias;

    std::size_t in_dim() const { return weight.cols(); }
    std::size_t out_dim() const { return weight.rows(); }

    // Uniform weights in +-sqrt(1/in_dim), zero bias.
    static LinearParams init(std::size_t in_dim, std::size_t out_dim, Rng& rng,
                             bool requires_grad = true);
    static LinearParams identity(std::size_t dim, bool requires_grad = false);
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor affine(const Tensor& x, double scale, double shift);  // scale*x + shift
Tensor absolute(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// Numerically stable sigmoid clamped to the open interval (0,1); used for
// constrained coefficients that must never touch the boundary exactly.
Tensor open_sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor log_elem(const Tensor& x);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);     // [n x k] * [k x m]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [n x k] * [m x k]^T
Tensor linear_forward(const Tensor& x, const LinearParams& p);

// ---- row-structured ----
Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& x, std::size_t row_begin, std::size_t row_end);
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& indices);
Tensor max_pool_rows(const Tensor& x);  // elementwise max over rows -> vector

// ---- reductions ----
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Cosine similarity of two equal-size tensors viewed as flat vectors,
// clamped to [-1,1]; zero-norm operands yield 0 with zero gradient.
Tensor cosine(const Tensor& a, const Tensor& b);

// Damped-EMA recurrence over the rows of g:
//   l_i = alpha (.) g_i + (1 - alpha (.) delta) (.) l_{i-1},   l_0 = 0.
// alpha and delta are length-d vectors; an undefined delta means delta == 1
// (plain EMA, the no-damping ablation). Fused forward and adjoint.
Tensor dema_scan(const Tensor& g, const Tensor& alpha, const Tensor& delta);

}  // namespace demaformer
