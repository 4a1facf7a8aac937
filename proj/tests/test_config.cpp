#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "demaformer/config.hpp"

using namespace demaformer;

TEST_CASE("empty config yields the documented defaults") {
    RunConfig cfg = RunConfig::from_json_text("{}");
    CHECK(cfg.model.d == 32);
    CHECK(cfg.model.d_k == 256);
    CHECK(cfg.model.n_enc == 2);
    CHECK(cfg.model.n_dec == 2);
    CHECK(cfg.model.top_moments_test == 10);
    CHECK(cfg.ebm.langevin_steps == 100);
    CHECK(cfg.ebm.gamma == 0.1);
    CHECK(cfg.ebm.rho == 4.0);
    CHECK(cfg.ebm.alpha_min == 0.1);
    CHECK(cfg.ebm.lambda_nll == 0.1);
    CHECK(cfg.loss.lambda1 == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(cfg.loss.lambda2 == 0.01);
    CHECK(cfg.loss.lambda3 == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(cfg.loss.lambda_nll == 0.1);
    CHECK(cfg.synth.l_v == 32);
    CHECK(cfg.synth.l_q == 8);
    CHECK(cfg.synth.snr == 5.0);
    CHECK(cfg.train.lr == 1e-3);
    CHECK(cfg.train.weight_decay == 1e-4);
    CHECK(cfg.epochs == 200);
    CHECK(cfg.energy_kind == EnergyKind::Salience);
    CHECK(cfg.eval.tau == 4.0);
    CHECK_FALSE(cfg.ablations.no_damping);
    CHECK_FALSE(cfg.ablations.no_dema);
    CHECK_FALSE(cfg.ablations.no_ebm);
    // the synthetic feature dims follow the model's raw dims
    CHECK(cfg.synth.d_v == cfg.model.d_v);
    CHECK(cfg.synth.d_q == cfg.model.d_q);
    CHECK(cfg.synth.d_a == cfg.model.d_a);
}

TEST_CASE("unknown keys are rejected at every level") {
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"modle": {}})"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"model": {"dd": 3}})"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"ebm": {"K": 10}})"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"ablations": {"no_ema": true}})"), ConfigError);
}

TEST_CASE("invalid values are rejected") {
    CHECK_THROWS_AS(RunConfig::from_json_text("not json"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"ebm": {"k": 0}})"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"ebm": {"gamma": -1.0}})"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"ebm": {"alpha_min": 0.0}})"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"epochs": 0})"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"energy_kind": "softmax"})"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"synth": {"n_moments": 40}})"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"eval": {"mus": [1.5]}})"), ConfigError);
}

TEST_CASE("explicit settings and round-trip") {
    const char* text = R"({
        "model": {"d": 16, "d_k": 8, "n_enc": 1, "n_dec": 1, "d_v": 10, "d_q": 6, "d_a": 5},
        "ebm": {"k": 25, "gamma": 0.05, "rho": 2.5},
        "loss": {"lambda_nll": 0.2},
        "synth": {"l_v": 12, "l_q": 3, "n_moments": 1, "snr": 4.0, "seed": 9},
        "eval": {"ks": [1], "mus": [0.5], "tau": 2.0},
        "train": {"lr": 0.01, "early_stop_rank1": 0.9},
        "epochs": 7,
        "seed": 5,
        "energy_kind": "pooled_cosine",
        "ablations": {"no_damping": true}
    })";
    RunConfig cfg = RunConfig::from_json_text(text);
    CHECK(cfg.model.d == 16);
    CHECK(cfg.ebm.langevin_steps == 25);
    CHECK(cfg.ebm.lambda_nll == 0.2);  // mirrored from the loss section
    CHECK(cfg.synth.d_v == 10);
    CHECK(cfg.energy_kind == EnergyKind::PooledCosine);
    CHECK(cfg.ablations.no_damping);
    CHECK(cfg.train.early_stop_rank1 == 0.9);

    RunConfig again = RunConfig::from_json_text(cfg.to_json_text());
    CHECK(again.to_json_text() == cfg.to_json_text());

    FitOptions opts = cfg.fit_options();
    CHECK(opts.epochs == 7);
    CHECK(opts.adam.lr == 0.01);
    CHECK(opts.energy == EnergyKind::PooledCosine);
    CHECK(opts.offset_residual == OffsetResidual::Direct);
}

TEST_CASE("no_ebm zeroes the NLL weight in fit options") {
    RunConfig cfg = RunConfig::from_json_text(R"({"ablations": {"no_ebm": true}})");
    CHECK(cfg.fit_options().loss.lambda_nll == 0.0);
    RunConfig variant = RunConfig::from_json_text(R"({"ablations": {"offset_variant": true}})");
    CHECK(variant.fit_options().offset_residual == OffsetResidual::CenterRelative);
}

TEST_CASE("params file round-trips the model exactly") {
    const char* text = R"({
        "model": {"d": 8, "d_k": 5, "n_enc": 1, "n_dec": 1, "d_v": 5, "d_q": 4, "d_a": 3},
        "synth": {"l_v": 6, "l_q": 3, "n_moments": 1, "snr": 5.0, "seed": 2}
    })";
    RunConfig cfg = RunConfig::from_json_text(text);
    Model model(cfg.model, cfg.ablations, 77);

    const auto path =
        (std::filesystem::temp_directory_path() / "demaformer_params_test.json").string();
    save_params(model, cfg, path);
    SavedModel loaded = load_params(path);

    auto original = model.named_parameters();
    auto restored = loaded.model->named_parameters();
    REQUIRE(original.size() == restored.size());
    for (std::size_t i = 0; i < original.size(); ++i) {
        CHECK(original[i].first == restored[i].first);
        CHECK(original[i].second.values() == restored[i].second.values());
    }

    auto samples = gen_synthetic(cfg.synth, 1);
    auto a = model.forward(samples[0].video, samples[0].audio, samples[0].text);
    auto b = loaded.model->forward(samples[0].video, samples[0].audio, samples[0].text);
    CHECK(a.heads.salience.values() == b.heads.salience.values());
    std::filesystem::remove(path);
}
