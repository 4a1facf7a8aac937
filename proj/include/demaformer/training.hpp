#pragma once

#include <string>
#include <vector>

#include "demaformer/data.hpp"
#include "demaformer/ebm.hpp"
#include "demaformer/metrics.hpp"
#include "demaformer/model.hpp"

namespace demaformer {

struct LossWeights {
    double lambda1 = 1.0 / 3.0;  // center
    double lambda2 = 0.01;       // width
    double lambda3 = 1.0 / 3.0;  // offset
    double lambda_nll = 0.1;

    void validate() const;
};

// Which residual the offset term uses:
//   Direct:         |co - co_hat|
//   CenterRelative: |co - (co_hat - c_hat)|
enum class OffsetResidual { Direct, CenterRelative };

// Groundtruth-to-position pairing. Each groundtruth goes to
// floor(center * L_v) clamped into range; on collision, to the nearest free
// position inside the groundtruth span, else the nearest free position
// overall (ties toward the smaller index).
struct TargetAssignment {
    std::vector<std::size_t> position_of_gt;
    std::vector<bool> matched;  // length L_v
};

TargetAssignment assign_targets(const std::vector<GtLocalization>& gts, std::size_t l_v);

// L_match = -(1/L_m) sum_i (s_hat - l1 |c - c_hat| - l2 |w - w_hat| - l3 |co - co_hat|)
// over matched positions. Zero scalar when there is no groundtruth.
Tensor matching_loss(const HeadOutputs& heads, const std::vector<GtLocalization>& gts,
                     const TargetAssignment& assignment, const LossWeights& weights,
                     OffsetResidual offset_residual = OffsetResidual::Direct);

struct ComponentLosses {
    Tensor salience;  // -mean s_hat
    Tensor center;    // mean |c - c_hat|
    Tensor width;     // mean |w - w_hat|
    Tensor offset;    // mean |co - co_hat|
};

ComponentLosses component_losses(const HeadOutputs& heads, const std::vector<GtLocalization>& gts,
                                 const TargetAssignment& assignment,
                                 OffsetResidual offset_residual = OffsetResidual::Direct);

// L = L_match + lambda_nll * L_NLL
Tensor total_loss(const Tensor& l_match, const Tensor& l_nll, double lambda_nll);

struct AdamConfig {
    double lr = 1e-3;
    double weight_decay = 1e-4;  // decoupled
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam(std::vector<Tensor> params, AdamConfig cfg = {});

    // Applies one update from the accumulated gradients. Returns false (and
    // leaves parameters untouched) when any gradient is non-finite.
    bool step();

    int steps_taken() const { return steps_; }
    int steps_skipped() const { return skipped_; }

private:
    std::vector<Tensor> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    int steps_ = 0;
    int skipped_ = 0;
};

// Global L2 clip; returns the pre-clip norm.
double clip_gradient_norm(const std::vector<Tensor>& params, double max_norm);

struct FitOptions {
    int epochs = 200;
    std::uint64_t seed = 1;
    std::size_t batch_size = 32;  // samples per optimizer step (gradient mean)
    AdamConfig adam;
    LossWeights loss;
    EbmConfig ebm;
    EnergyKind energy = EnergyKind::Salience;
    OffsetResidual offset_residual = OffsetResidual::Direct;
    bool clip_gradients = true;
    double clip_norm = 1.0;
    // Stop once the held-out rank1@0.5 stays at or above this value for
    // `early_stop_patience` consecutive epochs. Negative disables.
    double early_stop_metric = -1.0;
    int early_stop_patience = 2;
};

struct EpochStats {
    int epoch = 0;
    double l_match = 0.0;
    double l_nll = 0.0;
    double total = 0.0;
    double rank1_05 = 0.0;
};

struct TrainingReport {
    std::vector<EpochStats> epochs;
    bool diverged = false;
    std::string message;
    int langevin_failures = 0;
    int skipped_steps = 0;
};

// Mini-batch training over a seed-shuffled order each epoch: gradients are
// averaged over batch_size samples per Adam step. The NLL term is active
// when loss.lambda_nll > 0 and a sample has positives; negatives come from
// one Langevin chain per video position, detached from the graph. eval_set
// drives the per-epoch rank1@0.5 column (falls back to the training set
// when empty).
TrainingReport fit(Model& model, const std::vector<GroundingSample>& train,
                   const std::vector<GroundingSample>& eval_set, const FitOptions& opts);

// Held-out evaluation: forward every sample, keep the top-L_m spans, score
// against the groundtruth.
MetricsReport evaluate_model(const Model& model, const std::vector<GroundingSample>& samples,
                             const EvalConfig& cfg);

std::string training_csv(const TrainingReport& report);

}  // namespace demaformer
