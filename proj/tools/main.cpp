#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include <CLI11.hpp>

#include "demaformer/config.hpp"
#include "demaformer/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace demaformer;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

void check_data_dims(const RunConfig& cfg, const std::vector<GroundingSample>& data) {
    if (data.empty()) throw std::runtime_error("dataset is empty");
    const GroundingSample& s = data.front();
    if (s.video.cols() != cfg.model.d_v || s.audio.cols() != cfg.model.d_a ||
        s.text.cols() != cfg.model.d_q)
        throw ConfigError("dataset feature dimensions do not match the model config");
}

// Deterministic 80/20 split by seed.
void split_dataset(const std::vector<GroundingSample>& all, std::uint64_t seed,
                   std::vector<GroundingSample>& train, std::vector<GroundingSample>& heldout) {
    std::vector<std::size_t> order(all.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = Rng(seed).fork(0x5F17);
    rng.shuffle(order);
    const std::size_t n_train = (all.size() * 4) / 5;
    for (std::size_t i = 0; i < all.size(); ++i)
        (i < n_train ? train : heldout).push_back(all[order[i]]);
}

int cmd_gen_data(const std::string& config_path, const std::string& out_path, std::size_t n) {
    RunConfig cfg = RunConfig::from_json_file(config_path);
    auto samples = gen_synthetic(cfg.synth, n);
    save_manifest(samples, out_path);
    std::cout << "wrote " << samples.size() << " samples to " << out_path << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_path,
              const std::string& out_dir) {
    RunConfig cfg = RunConfig::from_json_file(config_path);
    auto data = load_manifest(data_path);
    check_data_dims(cfg, data);

    std::vector<GroundingSample> train_set, heldout;
    split_dataset(data, cfg.seed, train_set, heldout);
    if (train_set.empty()) throw std::runtime_error("training split is empty");

    Model model(cfg.model, cfg.ablations, Rng(cfg.seed).fork(0x30DE1).seed());
    TrainingReport report = fit(model, train_set, heldout, cfg.fit_options());
    if (report.diverged) throw std::runtime_error("training diverged: " + report.message);

    fs::create_directories(out_dir);
    save_params(model, cfg, (fs::path(out_dir) / "params.json").string());
    write_text(fs::path(out_dir) / "training.csv", training_csv(report));
    const auto& eval_set = heldout.empty() ? train_set : heldout;
    MetricsReport metrics = evaluate_model(model, eval_set, cfg.eval);
    write_text(fs::path(out_dir) / "metrics.json", metrics_to_json(metrics));

    std::cout << "trained " << report.epochs.size() << " epochs; held-out rank1@0.5 = "
              << (report.epochs.empty() ? 0.0 : report.epochs.back().rank1_05) << "\n";
    if (report.langevin_failures > 0)
        std::cerr << "warning: " << report.langevin_failures << " Langevin chains aborted\n";
    if (report.skipped_steps > 0)
        std::cerr << "warning: " << report.skipped_steps
                  << " optimizer steps skipped (non-finite gradients)\n";
    return 0;
}

int cmd_eval(const std::string& params_path, const std::string& data_path,
             const std::string& out_dir) {
    SavedModel saved = load_params(params_path);
    auto data = load_manifest(data_path);
    check_data_dims(saved.config, data);

    std::vector<std::vector<Span>> preds, gts;
    std::vector<std::vector<double>> pred_sal, gt_sal;
    for (const GroundingSample& s : data) {
        auto fwd = saved.model->forward(s.video, s.audio, s.text);
        preds.push_back(
            top_moments(spans_from_heads(fwd.heads), saved.config.model.top_moments_test));
        gts.push_back(gt_spans(s));
        pred_sal.push_back(fwd.heads.salience.values());
        gt_sal.push_back(s.salience);
    }

    fs::create_directories(out_dir);
    save_predictions(data, preds, (fs::path(out_dir) / "predictions.jsonl").string());
    MetricsReport metrics = evaluate(preds, gts, pred_sal, gt_sal, saved.config.eval);
    write_text(fs::path(out_dir) / "metrics.json", metrics_to_json(metrics));
    std::cout << metrics_to_json(metrics);
    return 0;
}

int cmd_sample(const std::string& params_path, const std::string& data_path, std::size_t index,
               int steps, const std::string& out_path) {
    SavedModel saved = load_params(params_path);
    auto data = load_manifest(data_path);
    check_data_dims(saved.config, data);
    if (index >= data.size()) throw std::runtime_error("sample index out of range");
    const GroundingSample& s = data[index];

    auto fwd = saved.model->forward(s.video, s.audio, s.text);
    EnergyContext ctx;
    ctx.salience_head = &saved.model->salience_head();
    if (saved.config.energy_kind != EnergyKind::Salience)
        ctx.query_rows = slice_rows(fwd.encoder_out, fwd.l_video, fwd.l_video + fwd.l_query);

    const int k = steps > 0 ? steps : saved.config.ebm.langevin_steps;
    EnergyGrad grad_fn = make_energy_input_grad(saved.config.energy_kind, ctx);
    Rng rng = Rng(saved.config.seed).fork(0x5A7E);

    const std::size_t d = fwd.decoder_out.cols();
    std::vector<std::vector<double>> chains(fwd.l_video, std::vector<double>(d));
    for (std::size_t i = 0; i < fwd.l_video; ++i)
        for (std::size_t j = 0; j < d; ++j) chains[i][j] = fwd.decoder_out.at(i, j);

    auto mean_energy = [&] {
        double acc = 0.0;
        for (const auto& o : chains) acc += energy_value(saved.config.energy_kind, o, ctx);
        return acc / static_cast<double>(chains.size());
    };

    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write " + out_path);
    out << "step,mean_energy\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "0,%.17g\n", mean_energy());
    out << buf;
    std::vector<double> g(d);
    for (int step = 1; step <= k; ++step) {
        for (auto& o : chains) {
            if (!grad_fn(o, g)) throw std::runtime_error("non-finite energy gradient");
            langevin_step(o, g, saved.config.ebm.gamma, rng);
        }
        std::snprintf(buf, sizeof(buf), "%d,%.17g\n", step, mean_energy());
        out << buf;
    }
    std::cout << "wrote energy trace (" << k << " steps) to " << out_path << "\n";
    return 0;
}

int cmd_gradcheck(const std::string& config_path) {
    RunConfig cfg = RunConfig::from_json_file(config_path);
    auto samples = gen_synthetic(cfg.synth, 1);
    const GroundingSample& s = samples.front();
    Model model(cfg.model, cfg.ablations, Rng(cfg.seed).fork(0x30DE1).seed());

    const FitOptions opts = cfg.fit_options();
    const bool with_nll = opts.loss.lambda_nll > 0.0;

    // Both sample sets fixed up front so the objective is a deterministic
    // function of the parameters with the energy differentiated at the
    // sample points.
    std::vector<std::vector<double>> negatives;
    std::vector<Tensor> positives;
    if (with_nll) {
        auto fwd = model.forward(s.video, s.audio, s.text);
        EnergyContext ctx;
        ctx.salience_head = &model.salience_head();
        if (opts.energy != EnergyKind::Salience)
            ctx.query_rows = slice_rows(fwd.encoder_out, fwd.l_video, fwd.l_video + fwd.l_query);
        EnergyGrad grad_fn = make_energy_input_grad(opts.energy, ctx);
        Rng rng(cfg.seed);
        for (std::size_t i = 0; i < fwd.l_video; ++i) {
            std::vector<double> o0(fwd.decoder_out.cols());
            for (std::size_t j = 0; j < o0.size(); ++j) o0[j] = fwd.decoder_out.at(i, j);
            if (auto drawn = langevin_sample(o0, grad_fn, opts.ebm, rng))
                negatives.push_back(std::move(*drawn));
        }
        for (std::size_t idx : select_positives(s.salience, opts.ebm.rho)) {
            std::vector<double> values(fwd.decoder_out.cols());
            for (std::size_t j = 0; j < values.size(); ++j) values[j] = fwd.decoder_out.at(idx, j);
            positives.emplace_back(Tensor({1, values.size()}, std::move(values)));
        }
    }

    auto loss_fn = [&]() {
        auto fwd = model.forward(s.video, s.audio, s.text);
        TargetAssignment assignment = assign_targets(s.gt, fwd.l_video);
        Tensor l_match =
            matching_loss(fwd.heads, s.gt, assignment, opts.loss, opts.offset_residual);
        if (!with_nll || positives.empty()) return l_match;
        EnergyContext ctx;
        ctx.salience_head = &model.salience_head();
        if (opts.energy != EnergyKind::Salience)
            ctx.query_rows = slice_rows(fwd.encoder_out, fwd.l_video, fwd.l_video + fwd.l_query);
        Tensor l_nll = nll_loss(positives, negatives, opts.energy, ctx, opts.ebm, 0);
        return total_loss(l_match, l_nll, opts.loss.lambda_nll);
    };

    GradCheckReport report = finite_diff_check_report(loss_fn, model.parameters());
    std::printf("gradcheck: max rel err = %.6g (worst at %s)\n", report.max_rel_err,
                report.worst.empty() ? "-" : report.worst.c_str());
    return report.max_rel_err < 1e-4 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DemaFormer: damped-EMA attention grounding model with energy-based training"};
    app.require_subcommand(1);

    std::string config_path, data_path, params_path, out_path;
    std::size_t n_samples = 250;
    std::size_t index = 0;
    int steps = 0;

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset manifest");
    gen->add_option("--config", config_path, "run config JSON")->required();
    gen->add_option("--out", out_path, "output manifest path")->required();
    gen->add_option("--n", n_samples, "number of samples");

    CLI::App* train = app.add_subcommand("train", "train a model on a manifest");
    train->add_option("--config", config_path, "run config JSON")->required();
    train->add_option("--data", data_path, "dataset manifest")->required();
    train->add_option("--out", out_path, "output directory")->required();

    CLI::App* eval = app.add_subcommand("eval", "evaluate a trained model");
    eval->add_option("--params", params_path, "params file from train")->required();
    eval->add_option("--data", data_path, "dataset manifest")->required();
    eval->add_option("--out", out_path, "output directory")->required();

    CLI::App* sample = app.add_subcommand("sample", "run Langevin sampling on one sample");
    sample->add_option("--params", params_path, "params file from train")->required();
    sample->add_option("--data", data_path, "dataset manifest")->required();
    sample->add_option("--index", index, "sample index");
    sample->add_option("--steps", steps, "Langevin steps (default: config K)");
    sample->add_option("--out", out_path, "output CSV path")->required();

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
    gradcheck->add_option("--config", config_path, "run config JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, out_path, n_samples);
        if (train->parsed()) return cmd_train(config_path, data_path, out_path);
        if (eval->parsed()) return cmd_eval(params_path, data_path, out_path);
        if (sample->parsed()) return cmd_sample(params_path, data_path, index, steps, out_path);
        if (gradcheck->parsed()) return cmd_gradcheck(config_path);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
