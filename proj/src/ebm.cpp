#include "demaformer/ebm.hpp"

#include <cmath>

namespace demaformer {

void EbmConfig::validate() const {
    DMF_CHECK(langevin_steps >= 1, "ebm config: langevin_steps must be >= 1");
    DMF_CHECK(gamma > 0.0, "ebm config: gamma must be positive");
    DMF_CHECK(alpha_min > 0.0 && alpha_min <= 1.0, "ebm config: alpha_min must be in (0,1]");
    DMF_CHECK(lambda_nll >= 0.0, "ebm config: lambda_nll must be nonnegative");
}

Tensor energy(EnergyKind kind, const Tensor& rep, const EnergyContext& ctx) {
    DMF_CHECK(rep.ndim() == 2 && rep.rows() == 1, "energy: representation must be [1 x d]");
    switch (kind) {
        case EnergyKind::Salience: {
            DMF_CHECK(ctx.salience_head != nullptr, "energy: salience head missing from context");
            DMF_CHECK(ctx.salience_head->out_dim() == 1, "energy: salience head must be d -> 1");
            return affine(sum(linear_forward(rep, *ctx.salience_head)), -1.0, 0.0);
        }
        case EnergyKind::ElementwiseCosine: {
            DMF_CHECK(ctx.query_rows.defined() && ctx.query_rows.rows() >= 1,
                      "energy: query rows missing from context");
            const std::size_t l_q = ctx.query_rows.rows();
            Tensor acc;
            for (std::size_t j = 0; j < l_q; ++j) {
                Tensor c = cosine(rep, slice_rows(ctx.query_rows, j, j + 1));
                acc = acc.defined() ? add(acc, c) : c;
            }
            return affine(acc, -1.0 / static_cast<double>(l_q), 0.0);
        }
        case EnergyKind::PooledCosine: {
            DMF_CHECK(ctx.query_rows.defined() && ctx.query_rows.rows() >= 1,
                      "energy: query rows missing from context");
            return affine(cosine(rep, max_pool_rows(ctx.query_rows)), -1.0, 0.0);
        }
    }
    DMF_CHECK(false, "energy: unknown kind");
    return Tensor();
}

double energy_value(EnergyKind kind, const std::vector<double>& rep, const EnergyContext& ctx) {
    Tensor r({1, rep.size()}, rep);
    return energy(kind, r, ctx).item();
}

EnergyGrad make_energy_input_grad(EnergyKind kind, const EnergyContext& ctx) {
    if (kind == EnergyKind::Salience) {
        // E = -(w . o + b): the input gradient is the constant -w.
        DMF_CHECK(ctx.salience_head != nullptr, "energy grad: salience head missing");
        DMF_CHECK(ctx.salience_head->out_dim() == 1, "energy grad: salience head must be d -> 1");
        std::vector<double> neg_w = ctx.salience_head->weight.values();
        bool finite = true;
        for (double& v : neg_w) {
            v = -v;
            finite = finite && std::isfinite(v);
        }
        return [neg_w, finite](const std::vector<double>& o, std::vector<double>& g) {
            (void)o;
            g = neg_w;
            return finite;
        };
    }
    // Cosine kinds: differentiate through the tape against a frozen copy of
    // the context.
    DMF_CHECK(ctx.query_rows.defined(), "energy grad: query rows missing");
    Tensor frozen({ctx.query_rows.rows(), ctx.query_rows.cols()}, ctx.query_rows.values());
    return [kind, frozen](const std::vector<double>& o, std::vector<double>& g) {
        Tensor rep({1, o.size()}, o, true);
        Tape tape;
        Tape::Scope scope(&tape);
        EnergyContext frozen_ctx;
        frozen_ctx.query_rows = frozen;
        Tensor e = energy(kind, rep, frozen_ctx);
        if (!std::isfinite(e.item())) return false;
        tape.backward(e);
        g = rep.grad();
        for (double v : g)
            if (!std::isfinite(v)) return false;
        return true;
    };
}

void langevin_step(std::vector<double>& o, const std::vector<double>& grad, double gamma,
                   Rng& rng) {
    const double sigma = std::sqrt(gamma);
    for (std::size_t i = 0; i < o.size(); ++i)
        o[i] += -0.5 * gamma * grad[i] + sigma * rng.normal();
}

std::optional<std::vector<double>> langevin_sample(const std::vector<double>& o0,
                                                   const EnergyGrad& grad_fn,
                                                   const EbmConfig& cfg, Rng& rng) {
    std::vector<double> o = o0;
    std::vector<double> g(o.size());
    for (int k = 0; k < cfg.langevin_steps; ++k) {
        if (!grad_fn(o, g) || g.size() != o.size()) return std::nullopt;
        langevin_step(o, g, cfg.gamma, rng);
    }
    return o;
}

std::vector<double> langevin_sample_linear(const std::vector<double>& o0,
                                           const std::vector<double>& constant_grad,
                                           const EbmConfig& cfg, Rng& rng) {
    DMF_CHECK(o0.size() == constant_grad.size(), "langevin_sample_linear: size mismatch");
    const double k = static_cast<double>(cfg.langevin_steps);
    const double sigma = std::sqrt(k * cfg.gamma);
    std::vector<double> o = o0;
    for (std::size_t i = 0; i < o.size(); ++i)
        o[i] += -0.5 * cfg.gamma * k * constant_grad[i] + sigma * rng.normal();
    return o;
}

std::vector<std::size_t> select_positives(const std::vector<double>& gt_salience, double rho) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < gt_salience.size(); ++i)
        if (gt_salience[i] > rho) out.push_back(i);
    return out;
}

double alpha_neg(int n_epoch, double alpha_min) {
    DMF_CHECK(n_epoch >= 0, "alpha_neg: epoch must be nonnegative");
    return std::max(1.0 / (1.0 + 0.5 * static_cast<double>(n_epoch)), alpha_min);
}

namespace {

Tensor mean_energy(const std::vector<Tensor>& reps, EnergyKind kind, const EnergyContext& ctx) {
    Tensor acc;
    for (const Tensor& r : reps) {
        Tensor e = energy(kind, r, ctx);
        acc = acc.defined() ? add(acc, e) : e;
    }
    return affine(acc, 1.0 / static_cast<double>(reps.size()), 0.0);
}

}  // namespace

Tensor nll_loss(const std::vector<Tensor>& positives,
                const std::vector<std::vector<double>>& negatives, EnergyKind kind,
                const EnergyContext& ctx, const EbmConfig& cfg, int n_epoch) {
    if (positives.empty()) return Tensor::scalar(0.0);
    Tensor pos_mean = mean_energy(positives, kind, ctx);
    if (negatives.empty()) return pos_mean;

    std::vector<Tensor> neg_reps;
    neg_reps.reserve(negatives.size());
    for (const auto& values : negatives) neg_reps.emplace_back(Tensor({1, values.size()}, values));
    Tensor neg_mean = mean_energy(neg_reps, kind, ctx);

    const double alpha = alpha_neg(n_epoch, cfg.alpha_min);
    return sub(pos_mean, affine(neg_mean, alpha, 0.0));
}

namespace {

struct TrapezoidResult {
    double z = 0.0;
    double feature_expectation = 0.0;
};

TrapezoidResult trapezoid_model_expectation(double theta,
                                            const std::function<double(double)>& feature,
                                            const Grid1d& grid) {
    DMF_CHECK(grid.points >= 3 && grid.hi > grid.lo, "cd oracle: bad grid");
    const double h = (grid.hi - grid.lo) / static_cast<double>(grid.points - 1);
    double z = 0.0, num = 0.0;
    for (std::size_t i = 0; i < grid.points; ++i) {
        const double o = grid.lo + h * static_cast<double>(i);
        const double f = feature(o);
        const double w = (i == 0 || i + 1 == grid.points) ? 0.5 : 1.0;
        const double density = std::exp(-theta * f);
        z += w * density;
        num += w * f * density;
    }
    return {z * h, num * h};
}

}  // namespace

CdGradients cd_gradient_oracle_1d(double theta, const std::function<double(double)>& feature,
                                  const std::vector<double>& data, Grid1d grid,
                                  const CdSamplerOptions& opts) {
    DMF_CHECK(!data.empty(), "cd oracle: data samples required");

    TrapezoidResult tr = trapezoid_model_expectation(theta, feature, grid);
    for (int attempt = 0; attempt < 4 && tr.z < 1e-300; ++attempt) {
        grid.lo *= 2.0;
        grid.hi *= 2.0;
        grid.points = grid.points * 2 - 1;
        tr = trapezoid_model_expectation(theta, feature, grid);
    }
    if (tr.z < 1e-300) throw std::runtime_error("cd oracle: partition function underflow");

    double data_mean = 0.0;
    for (double o : data) data_mean += feature(o);
    data_mean /= static_cast<double>(data.size());

    // Langevin chain against E(o) = theta f(o); f' by central differences.
    const double fd_h = 1e-6;
    auto grad_e = [&](double o) {
        return theta * (feature(o + fd_h) - feature(o - fd_h)) / (2.0 * fd_h);
    };
    Rng rng(opts.seed);
    std::vector<double> o{0.0};
    std::vector<double> g(1);
    for (int k = 0; k < opts.burn_in; ++k) {
        g[0] = grad_e(o[0]);
        langevin_step(o, g, opts.gamma, rng);
    }
    double chain_mean = 0.0;
    for (std::size_t k = 0; k < opts.samples; ++k) {
        g[0] = grad_e(o[0]);
        langevin_step(o, g, opts.gamma, rng);
        chain_mean += feature(o[0]);
    }
    chain_mean /= static_cast<double>(opts.samples);

    CdGradients out;
    out.model_expectation = tr.feature_expectation / tr.z;
    out.chain_expectation = chain_mean;
    out.exact_grad = data_mean - out.model_expectation;
    out.cd_grad = data_mean - chain_mean;
    return out;
}

}  // namespace demaformer
