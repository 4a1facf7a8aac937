#include "demaformer/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace demaformer {

using nlohmann::json;

namespace {

void reject_unknown_keys(const json& obj, const std::set<std::string>& allowed,
                         const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (const auto& [key, value] : obj.items())
        if (!allowed.contains(key)) throw ConfigError(where + ": unknown key \"" + key + "\"");
}

template <typename T>
void read(const json& obj, const char* key, T& into) {
    if (obj.contains(key)) {
        try {
            into = obj.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(std::string("bad value for \"") + key + "\": " + e.what());
        }
    }
}

}  // namespace

std::string energy_kind_name(EnergyKind kind) {
    switch (kind) {
        case EnergyKind::Salience: return "salience";
        case EnergyKind::ElementwiseCosine: return "elementwise_cosine";
        case EnergyKind::PooledCosine: return "pooled_cosine";
    }
    return "salience";
}

EnergyKind energy_kind_from_name(const std::string& name) {
    if (name == "salience") return EnergyKind::Salience;
    if (name == "elementwise_cosine") return EnergyKind::ElementwiseCosine;
    if (name == "pooled_cosine") return EnergyKind::PooledCosine;
    throw ConfigError("unknown energy_kind \"" + name + "\"");
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    reject_unknown_keys(root, {"model", "ebm", "loss", "synth", "eval", "train", "epochs", "seed",
                               "energy_kind", "ablations"},
                        "config");

    RunConfig cfg;
    if (root.contains("model")) {
        const json& m = root["model"];
        reject_unknown_keys(m, {"d", "d_k", "n_enc", "n_dec", "d_v", "d_q", "d_a", "l_m_test"},
                            "config.model");
        read(m, "d", cfg.model.d);
        read(m, "d_k", cfg.model.d_k);
        read(m, "n_enc", cfg.model.n_enc);
        read(m, "n_dec", cfg.model.n_dec);
        read(m, "d_v", cfg.model.d_v);
        read(m, "d_q", cfg.model.d_q);
        read(m, "d_a", cfg.model.d_a);
        read(m, "l_m_test", cfg.model.top_moments_test);
    }
    if (root.contains("ebm")) {
        const json& e = root["ebm"];
        reject_unknown_keys(e, {"k", "gamma", "rho", "alpha_min"}, "config.ebm");
        read(e, "k", cfg.ebm.langevin_steps);
        read(e, "gamma", cfg.ebm.gamma);
        read(e, "rho", cfg.ebm.rho);
        read(e, "alpha_min", cfg.ebm.alpha_min);
    }
    if (root.contains("loss")) {
        const json& l = root["loss"];
        reject_unknown_keys(l, {"lambda1", "lambda2", "lambda3", "lambda_nll"}, "config.loss");
        read(l, "lambda1", cfg.loss.lambda1);
        read(l, "lambda2", cfg.loss.lambda2);
        read(l, "lambda3", cfg.loss.lambda3);
        read(l, "lambda_nll", cfg.loss.lambda_nll);
    }
    if (root.contains("synth")) {
        const json& s = root["synth"];
        reject_unknown_keys(s, {"l_v", "l_q", "n_moments", "snr", "seed"}, "config.synth");
        read(s, "l_v", cfg.synth.l_v);
        read(s, "l_q", cfg.synth.l_q);
        read(s, "n_moments", cfg.synth.n_moments);
        read(s, "snr", cfg.synth.snr);
        read(s, "seed", cfg.synth.seed);
    }
    if (root.contains("eval")) {
        const json& e = root["eval"];
        reject_unknown_keys(e, {"ks", "mus", "tau"}, "config.eval");
        read(e, "ks", cfg.eval.ks);
        read(e, "mus", cfg.eval.mus);
        read(e, "tau", cfg.eval.tau);
    }
    if (root.contains("train")) {
        const json& t = root["train"];
        reject_unknown_keys(t,
                            {"lr", "weight_decay", "batch_size", "grad_clip", "clip_norm",
                             "early_stop_rank1", "early_stop_patience"},
                            "config.train");
        read(t, "lr", cfg.train.lr);
        read(t, "batch_size", cfg.train.batch_size);
        read(t, "weight_decay", cfg.train.weight_decay);
        read(t, "grad_clip", cfg.train.grad_clip);
        read(t, "clip_norm", cfg.train.clip_norm);
        read(t, "early_stop_rank1", cfg.train.early_stop_rank1);
        read(t, "early_stop_patience", cfg.train.early_stop_patience);
    }
    read(root, "epochs", cfg.epochs);
    read(root, "seed", cfg.seed);
    if (root.contains("energy_kind"))
        cfg.energy_kind = energy_kind_from_name(root["energy_kind"].get<std::string>());
    if (root.contains("ablations")) {
        const json& a = root["ablations"];
        reject_unknown_keys(a, {"no_damping", "no_dema", "no_ebm", "offset_variant"},
                            "config.ablations");
        read(a, "no_damping", cfg.ablations.no_damping);
        read(a, "no_dema", cfg.ablations.no_dema);
        read(a, "no_ebm", cfg.ablations.no_ebm);
        read(a, "offset_variant", cfg.ablations.offset_variant);
    }

    // The synthetic features must land in the model's input projections.
    cfg.synth.d_v = cfg.model.d_v;
    cfg.synth.d_q = cfg.model.d_q;
    cfg.synth.d_a = cfg.model.d_a;
    cfg.ebm.lambda_nll = cfg.loss.lambda_nll;

    cfg.validate();
    return cfg;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_json_text(buf.str());
}

std::string RunConfig::to_json_text() const {
    json root;
    root["model"] = {{"d", model.d},       {"d_k", model.d_k}, {"n_enc", model.n_enc},
                     {"n_dec", model.n_dec}, {"d_v", model.d_v}, {"d_q", model.d_q},
                     {"d_a", model.d_a},   {"l_m_test", model.top_moments_test}};
    root["ebm"] = {{"k", ebm.langevin_steps},
                   {"gamma", ebm.gamma},
                   {"rho", ebm.rho},
                   {"alpha_min", ebm.alpha_min}};
    root["loss"] = {{"lambda1", loss.lambda1},
                    {"lambda2", loss.lambda2},
                    {"lambda3", loss.lambda3},
                    {"lambda_nll", loss.lambda_nll}};
    root["synth"] = {{"l_v", synth.l_v},
                     {"l_q", synth.l_q},
                     {"n_moments", synth.n_moments},
                     {"snr", synth.snr},
                     {"seed", synth.seed}};
    root["eval"] = {{"ks", eval.ks}, {"mus", eval.mus}, {"tau", eval.tau}};
    root["train"] = {{"lr", train.lr},
                     {"weight_decay", train.weight_decay},
                     {"batch_size", train.batch_size},
                     {"grad_clip", train.grad_clip},
                     {"clip_norm", train.clip_norm},
                     {"early_stop_rank1", train.early_stop_rank1},
                     {"early_stop_patience", train.early_stop_patience}};
    root["epochs"] = epochs;
    root["seed"] = seed;
    root["energy_kind"] = energy_kind_name(energy_kind);
    root["ablations"] = {{"no_damping", ablations.no_damping},
                         {"no_dema", ablations.no_dema},
                         {"no_ebm", ablations.no_ebm},
                         {"offset_variant", ablations.offset_variant}};
    return root.dump(2) + "\n";
}

void RunConfig::validate() const {
    try {
        model.validate();
        ebm.validate();
        loss.validate();
        synth.validate();
        eval.validate();
        DMF_CHECK(epochs >= 1, "epochs must be >= 1");
        DMF_CHECK(train.lr > 0.0, "train.lr must be positive");
        DMF_CHECK(train.weight_decay >= 0.0, "train.weight_decay must be nonnegative");
        DMF_CHECK(train.batch_size >= 1, "train.batch_size must be >= 1");
        DMF_CHECK(train.clip_norm > 0.0, "train.clip_norm must be positive");
        DMF_CHECK(train.early_stop_patience >= 1, "train.early_stop_patience must be >= 1");
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

FitOptions RunConfig::fit_options() const {
    FitOptions opts;
    opts.epochs = epochs;
    opts.seed = seed;
    opts.adam.lr = train.lr;
    opts.adam.weight_decay = train.weight_decay;
    opts.batch_size = train.batch_size;
    opts.loss = loss;
    if (ablations.no_ebm) opts.loss.lambda_nll = 0.0;
    opts.ebm = ebm;
    opts.energy = energy_kind;
    opts.offset_residual =
        ablations.offset_variant ? OffsetResidual::CenterRelative : OffsetResidual::Direct;
    opts.clip_gradients = train.grad_clip;
    opts.clip_norm = train.clip_norm;
    opts.early_stop_metric = train.early_stop_rank1;
    opts.early_stop_patience = train.early_stop_patience;
    return opts;
}

void save_params(const Model& model, const RunConfig& cfg, const std::string& path) {
    json root;
    root["format"] = "demaformer-params-v1";
    root["config"] = json::parse(cfg.to_json_text());
    json params = json::object();
    for (const auto& [name, tensor] : model.named_parameters()) {
        params[name] = {{"shape", tensor.shape()}, {"values", tensor.values()}};
    }
    root["params"] = std::move(params);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write params file: " + path);
    out << root.dump() << "\n";
}

SavedModel load_params(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open params file: " + path);
    json root;
    try {
        in >> root;
    } catch (const json::exception& e) {
        throw std::runtime_error("params file is not valid JSON: " + std::string(e.what()));
    }
    if (!root.contains("format") || root["format"] != "demaformer-params-v1")
        throw std::runtime_error("unrecognized params file format");

    SavedModel out;
    out.config = RunConfig::from_json_text(root.at("config").dump());
    out.model = std::make_unique<Model>(out.config.model, out.config.ablations, /*seed=*/0);

    const json& params = root.at("params");
    std::size_t expected = 0;
    for (auto& [name, tensor] : out.model->named_parameters()) {
        ++expected;
        if (!params.contains(name))
            throw std::runtime_error("params file missing tensor \"" + name + "\"");
        const json& entry = params.at(name);
        const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
        auto values = entry.at("values").get<std::vector<double>>();
        if (shape != tensor.shape() || values.size() != tensor.size())
            throw std::runtime_error("params file shape mismatch for \"" + name + "\"");
        std::copy(values.begin(), values.end(), tensor.values().begin());
    }
    if (params.size() != expected)
        throw std::runtime_error("params file contains unknown tensors");
    return out;
}

}  // namespace demaformer
