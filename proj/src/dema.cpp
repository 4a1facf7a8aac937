#include "demaformer/dema.hpp"

#include <cmath>

namespace demaformer {

DemaParams DemaParams::init(std::size_t d, Rng& rng, bool damping) {
    DemaParams p;
    std::vector<double> a(d), dl(d);
    for (double& v : a) v = rng.normal();
    for (double& v : dl) v = rng.normal();
    p.alpha_raw = Tensor({d}, std::move(a), true);
    p.delta_raw = Tensor({d}, std::move(dl), damping);
    p.in_proj = LinearParams::init(d, d, rng);
    p.out_proj = LinearParams::init(d, d, rng);
    p.damping = damping;
    return p;
}

Tensor DemaParams::effective_delta() const {
    if (!damping) return Tensor();
    return open_sigmoid(delta_raw);
}

void DemaParams::collect(std::vector<std::pair<std::string, Tensor>>& out,
                         const std::string& prefix) const {
    out.emplace_back(prefix + ".alpha_raw", alpha_raw);
    if (damping) out.emplace_back(prefix + ".delta_raw", delta_raw);
    out.emplace_back(prefix + ".in_proj.weight", in_proj.weight);
    out.emplace_back(prefix + ".in_proj.bias", in_proj.bias);
    out.emplace_back(prefix + ".out_proj.weight", out_proj.weight);
    out.emplace_back(prefix + ".out_proj.bias", out_proj.bias);
}

DemaAttentionParams DemaAttentionParams::init(std::size_t d, std::size_t d_k, Rng& rng,
                                              bool use_dema, bool damping) {
    DemaAttentionParams p;
    p.d = d;
    p.d_k = d_k;
    p.use_dema = use_dema;
    if (use_dema) {
        p.dema = DemaParams::init(d, rng, damping);
        p.z_proj = LinearParams::init(d, d, rng);
        p.lambda_proj = LinearParams::init(d, d, rng);
        p.p_left = LinearParams::init(d, d, rng);
        p.p_right = LinearParams::init(d, d, rng);
    }
    p.q_proj = LinearParams::init(d, d_k, rng);
    p.k_proj = LinearParams::init(d, d_k, rng);
    p.v_proj = LinearParams::init(d, d, rng);
    return p;
}

void DemaAttentionParams::collect(std::vector<std::pair<std::string, Tensor>>& out,
                                  const std::string& prefix) const {
    auto linear = [&](const std::string& name, const LinearParams& lp) {
        out.emplace_back(prefix + "." + name + ".weight", lp.weight);
        out.emplace_back(prefix + "." + name + ".bias", lp.bias);
    };
    if (use_dema) {
        dema.collect(out, prefix + ".dema");
        linear("z_proj", z_proj);
    }
    linear("q_proj", q_proj);
    linear("k_proj", k_proj);
    linear("v_proj", v_proj);
    if (use_dema) {
        linear("lambda_proj", lambda_proj);
        linear("p_left", p_left);
        linear("p_right", p_right);
    }
}

Tensor dema_forward(const Tensor& x, const DemaParams& p) {
    DMF_CHECK(x.ndim() == 2 && x.rows() >= 1, "dema_forward: nonempty sequence required");
    Tensor g = linear_forward(x, p.in_proj);
    Tensor l = dema_scan(g, p.effective_alpha(), p.effective_delta());
    return linear_forward(l, p.out_proj);
}

Tensor dema_attention(const Tensor& x, const DemaAttentionParams& p) {
    DMF_CHECK(x.ndim() == 2 && x.rows() >= 1, "dema_attention: nonempty sequence required");
    DMF_CHECK(x.cols() == p.q_proj.in_dim(), "dema_attention: input dimension mismatch");
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.d_k));

    Tensor q = linear_forward(x, p.q_proj);
    Tensor k = linear_forward(x, p.k_proj);

    if (!p.use_dema) {
        Tensor scores = softmax_rows(affine(matmul_nt(q, k), scale, 0.0));
        return matmul(scores, linear_forward(x, p.v_proj));
    }

    Tensor x_ema = dema_forward(x, p.dema);
    Tensor z = silu(linear_forward(x_ema, p.z_proj));
    Tensor v = linear_forward(z, p.v_proj);
    Tensor z_attn = matmul(softmax_rows(affine(matmul_nt(q, k), scale, 0.0)), v);
    Tensor lambda = sigmoid(linear_forward(x_ema, p.lambda_proj));
    Tensor p_mix =
        silu(add(linear_forward(x_ema, p.p_left), linear_forward(mul(z, z_attn), p.p_right)));
    // H = lambda (.) P + (1 - lambda) (.) X
    return add(mul(lambda, p_mix), mul(affine(lambda, -1.0, 1.0), x));
}

}  // namespace demaformer
