#pragma once

#include <string>
#include <utility>
#include <vector>

#include "demaformer/ops.hpp"

namespace demaformer {

// Damped exponential moving average over a length-L sequence in dimension d:
//   g_i = in_proj(x_i)
//   l_i = alpha (.) g_i + (1 - alpha (.) delta) (.) l_{i-1},   l_0 = 0
//   x'_i = out_proj(l_i)
// alpha and delta live in (0,1)^d via a sigmoid of unconstrained raws; both
// are learnable. damping == false pins delta to 1 (plain EMA).
struct DemaParams {
    Tensor alpha_raw;  // [d]
    Tensor delta_raw;  // [d]; unused when damping == false
    LinearParams in_proj;
    LinearParams out_proj;
    bool damping = true;

    static DemaParams init(std::size_t d, Rng& rng, bool damping = true);

    Tensor effective_alpha() const { return open_sigmoid(alpha_raw); }
    Tensor effective_delta() const;  // undefined tensor when damping is off

    void collect(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix) const;
};

// One DEMA attention block. Q and K live in the key space d_K, the value
// projection keeps Z in dimension d so the gated output mix is elementwise
// well-formed against the block input.
struct DemaAttentionParams {
    DemaParams dema;
    LinearParams z_proj;       // d -> d
    LinearParams q_proj;       // d -> d_K
    LinearParams k_proj;       // d -> d_K
    LinearParams v_proj;       // d -> d
    LinearParams lambda_proj;  // d -> d
    LinearParams p_left;       // d -> d
    LinearParams p_right;      // d -> d

    std::size_t d = 0;
    std::size_t d_k = 0;
    // use_dema == false drops the recurrence and gating entirely and the
    // block becomes plain softmax attention with value v_proj(X).
    bool use_dema = true;

    static DemaAttentionParams init(std::size_t d, std::size_t d_k, Rng& rng,
                                    bool use_dema = true, bool damping = true);

    void collect(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix) const;
};

Tensor dema_forward(const Tensor& x, const DemaParams& p);
Tensor dema_attention(const Tensor& x, const DemaAttentionParams& p);

}  // namespace demaformer
