#pragma once

#include <memory>
#include <string>

#include "demaformer/training.hpp"

namespace demaformer {

// Optimizer-schedule knobs (Adam constants stay fixed in AdamConfig).
struct TrainOptions {
    double lr = 1e-3;
    double weight_decay = 1e-4;
    std::size_t batch_size = 32;
    bool grad_clip = true;
    double clip_norm = 1.0;
    double early_stop_rank1 = -1.0;  // negative disables
    int early_stop_patience = 2;
};

// Everything one run needs, parsed from a JSON config file. Unknown keys are
// rejected at every nesting level; every field has a default.
struct RunConfig {
    ModelConfig model;
    EbmConfig ebm;
    LossWeights loss;
    SynthConfig synth;
    EvalConfig eval;
    TrainOptions train;
    int epochs = 200;
    std::uint64_t seed = 1;
    EnergyKind energy_kind = EnergyKind::Salience;
    AblationFlags ablations;

    static RunConfig from_json_text(const std::string& text);
    static RunConfig from_json_file(const std::string& path);
    std::string to_json_text() const;

    void validate() const;
    FitOptions fit_options() const;
};

std::string energy_kind_name(EnergyKind kind);
EnergyKind energy_kind_from_name(const std::string& name);

// Parameter checkpoint: the run config plus every named tensor
// (shape + row-major values) as JSON.
void save_params(const Model& model, const RunConfig& cfg, const std::string& path);

struct SavedModel {
    RunConfig config;
    std::unique_ptr<Model> model;
};

SavedModel load_params(const std::string& path);

}  // namespace demaformer
