#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "demaformer/ops.hpp"

namespace demaformer {

struct EbmConfig {
    int langevin_steps = 100;  // K
    double gamma = 0.1;        // noise variance per coordinate and step
    double rho = 4.0;          // groundtruth-salience threshold for positives
    double alpha_min = 0.1;    // floor of the decaying negative weight
    double lambda_nll = 0.1;   // weight of the NLL term in the total objective

    void validate() const;
};

enum class EnergyKind { Salience, ElementwiseCosine, PooledCosine };

// What an energy evaluation may reference besides the representation itself:
// the salience head for the Salience kind, the encoder outputs at the query
// token rows for the cosine kinds.
struct EnergyContext {
    const LinearParams* salience_head = nullptr;
    Tensor query_rows;  // [L_q x d]
};

// Energy of a single representation (shape [1 x d]), differentiable through
// the tape with respect to both the representation and the context.
//   Salience:          E = -s_hat(rep)
//   ElementwiseCosine: E = -(1/L_q) sum_j cos(rep, query_row_j)
//   PooledCosine:      E = -cos(rep, maxpool(query_rows))
Tensor energy(EnergyKind kind, const Tensor& rep, const EnergyContext& ctx);

double energy_value(EnergyKind kind, const std::vector<double>& rep, const EnergyContext& ctx);

// Gradient of the energy with respect to the representation, with all
// context frozen at its current values. Returns false on non-finite output.
using EnergyGrad = std::function<bool(const std::vector<double>&, std::vector<double>&)>;
EnergyGrad make_energy_input_grad(EnergyKind kind, const EnergyContext& ctx);

// One Langevin update in place: o <- o - (gamma/2) grad + eps,
// eps ~ N(0, gamma) per coordinate.
void langevin_step(std::vector<double>& o, const std::vector<double>& grad, double gamma,
                   Rng& rng);

// K update steps from o0; the returned sample is treated as a constant with
// respect to model parameters. Empty result when the energy gradient turns
// non-finite (the caller drops that chain and reports).
std::optional<std::vector<double>> langevin_sample(const std::vector<double>& o0,
                                                   const EnergyGrad& grad_fn,
                                                   const EbmConfig& cfg, Rng& rng);

// Endpoint of the same chain when the energy gradient is the constant g
// (linear energy): o0 - K (gamma/2) g + sum of K i.i.d. N(0, gamma) steps,
// drawn as one N(0, K gamma) variate per coordinate. Distributionally
// identical to langevin_sample with far fewer draws.
std::vector<double> langevin_sample_linear(const std::vector<double>& o0,
                                           const std::vector<double>& constant_grad,
                                           const EbmConfig& cfg, Rng& rng);

// Indices with groundtruth salience strictly above rho.
std::vector<std::size_t> select_positives(const std::vector<double>& gt_salience, double rho);

// alpha = max(1 / (1 + n_epoch/2), alpha_min)
double alpha_neg(int n_epoch, double alpha_min);

// L_NLL = mean E(o+) - alpha_neg * mean E(o-). Positives are live tape
// representations; negatives are detached sample values. Zero when no
// positives exist.
Tensor nll_loss(const std::vector<Tensor>& positives,
                const std::vector<std::vector<double>>& negatives, EnergyKind kind,
                const EnergyContext& ctx, const EbmConfig& cfg, int n_epoch);

// ---- 1-D exponential-family oracle for the CD gradient ----

struct Grid1d {
    double lo = -8.0;
    double hi = 8.0;
    std::size_t points = 4001;
};

struct CdSamplerOptions {
    double gamma = 0.06;
    int burn_in = 1000;
    std::size_t samples = 100000;
    std::uint64_t seed = 1;
};

struct CdGradients {
    double exact_grad = 0.0;         // mean_data[f] - E_model[f] (trapezoid)
    double cd_grad = 0.0;            // mean_data[f] - mean_chain[f] (Langevin)
    double model_expectation = 0.0;  // E_model[f]
    double chain_expectation = 0.0;  // mean_chain[f]
};

// For E_theta(o) = theta * f(o): the exact NLL gradient via trapezoid
// integration of f e^{-E} / Z against the Langevin contrastive-divergence
// estimate. Widens the grid when Z underflows, then fails.
CdGradients cd_gradient_oracle_1d(double theta, const std::function<double(double)>& feature,
                                  const std::vector<double>& data, Grid1d grid,
                                  const CdSamplerOptions& opts = {});

}  // namespace demaformer
