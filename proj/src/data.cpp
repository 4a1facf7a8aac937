#include "demaformer/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

namespace demaformer {

using nlohmann::json;

void GroundingSample::validate(const std::string& where) const {
    auto fail = [&](const std::string& what) {
        throw std::runtime_error(where + ": " + what);
    };
    if (!video.defined() || video.ndim() != 2 || video.rows() == 0) fail("video matrix is empty");
    if (!audio.defined() || audio.ndim() != 2) fail("audio matrix is missing");
    if (!text.defined() || text.ndim() != 2 || text.rows() == 0) fail("text matrix is empty");
    if (audio.rows() != video.rows()) fail("audio length differs from video length");
    if (salience.size() != video.rows()) fail("salience length differs from video length");
    if (gt.empty()) fail("gt is empty");
    if (gt.size() > video.rows()) fail("gt count exceeds video length");
    for (const auto& loc : gt) {
        if (!(loc.center >= 0.0 && loc.center <= 1.0)) fail("gt center out of [0,1]");
        if (!(loc.width >= 0.0 && loc.width <= 1.0)) fail("gt width out of [0,1]");
        if (!std::isfinite(loc.offset)) fail("gt offset not finite");
    }
    for (double s : salience)
        if (!std::isfinite(s)) fail("salience not finite");
    auto all_finite = [](const Tensor& t) {
        for (double v : t.values())
            if (!std::isfinite(v)) return false;
        return true;
    };
    if (!all_finite(video)) fail("video contains non-finite values");
    if (!all_finite(audio)) fail("audio contains non-finite values");
    if (!all_finite(text)) fail("text contains non-finite values");
}

std::vector<Span> gt_spans(const GroundingSample& sample) {
    std::vector<Span> out;
    out.reserve(sample.gt.size());
    for (const auto& loc : sample.gt) {
        Span s;
        s.start = std::clamp(loc.center + loc.offset - loc.width / 2.0, 0.0, 1.0);
        s.end = std::clamp(loc.center + loc.offset + loc.width / 2.0, 0.0, 1.0);
        s.score = 1.0;
        out.push_back(s);
    }
    return out;
}

void SynthConfig::validate() const {
    DMF_CHECK(l_v >= 2 && l_q >= 1, "synth config: l_v >= 2 and l_q >= 1 required");
    DMF_CHECK(d_v >= 1 && d_q >= 1 && d_a >= 1, "synth config: feature dims must be positive");
    DMF_CHECK(n_moments >= 1 && n_moments < l_v, "synth config: need 1 <= n_moments < l_v");
    DMF_CHECK(snr >= 0.0, "synth config: snr must be nonnegative");
}

Tensor signature_matrix(const SynthConfig& cfg) {
    Rng rng = Rng(cfg.seed).fork(0x5157u);  // dataset-level stream, disjoint from samples
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_q));
    Tensor w({cfg.d_v, cfg.d_q});
    for (std::size_t i = 0; i < w.size(); ++i) w.at(i) = scale * rng.normal();
    return w;
}

std::vector<double> signature_carrier(const SynthConfig& cfg) {
    Rng rng = Rng(cfg.seed).fork(0xCA44u);
    std::vector<double> b(cfg.d_v);
    double norm2 = 0.0;
    for (double& v : b) {
        v = rng.normal();
        norm2 += v * v;
    }
    for (double& v : b) v /= std::sqrt(norm2);
    return b;
}

namespace {

// n_moments disjoint [start, start+len) index ranges with at least one free
// moment between them. Lengths are drawn first; the remaining slack is
// split into gaps, so any draw whose lengths fit can be placed.
std::vector<std::pair<std::size_t, std::size_t>> place_spans(const SynthConfig& cfg, Rng& rng) {
    const std::size_t n = cfg.n_moments;
    const std::size_t fit_cap = (cfg.l_v - (n - 1)) / n;
    const std::size_t cap = std::max<std::size_t>(2, std::min(cfg.l_v / 4, fit_cap));
    for (int attempt = 0; attempt < 100; ++attempt) {
        std::vector<std::size_t> lens(n);
        std::size_t total = 0;
        for (std::size_t& l : lens) {
            l = 2 + rng.integer(cap - 1);
            total += l;
        }
        if (total + (n - 1) > cfg.l_v) continue;
        const std::size_t slack = cfg.l_v - total - (n - 1);
        std::vector<std::size_t> cuts(n);
        for (std::size_t& c : cuts) c = rng.integer(slack + 1);
        std::sort(cuts.begin(), cuts.end());
        std::vector<std::pair<std::size_t, std::size_t>> spans;
        std::size_t pos = 0, prev_cut = 0;
        for (std::size_t i = 0; i < n; ++i) {
            pos += cuts[i] - prev_cut + (i > 0 ? 1 : 0);
            prev_cut = cuts[i];
            spans.emplace_back(pos, lens[i]);
            pos += lens[i];
        }
        return spans;
    }
    throw std::runtime_error("gen_synthetic: failed to place non-overlapping spans");
}

}  // namespace

std::vector<GroundingSample> gen_synthetic(const SynthConfig& cfg, std::size_t n_samples) {
    cfg.validate();
    const Tensor w_sig = signature_matrix(cfg);
    const std::vector<double> carrier = signature_carrier(cfg);
    Rng base(cfg.seed);

    std::vector<GroundingSample> samples;
    samples.reserve(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) {
        Rng rng = base.fork(s + 1);
        GroundingSample sample;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "sample_%04zu", s);
        sample.id = buf;

        std::vector<double> query(cfg.d_q);
        for (double& v : query) v = rng.normal();

        sample.text = Tensor({cfg.l_q, cfg.d_q});
        for (std::size_t i = 0; i < cfg.l_q; ++i)
            for (std::size_t j = 0; j < cfg.d_q; ++j)
                sample.text.at(i, j) = query[j] + 0.1 * rng.normal();

        sample.video = Tensor({cfg.l_v, cfg.d_v});
        for (std::size_t i = 0; i < sample.video.size(); ++i) sample.video.at(i) = rng.normal();
        sample.audio = Tensor({cfg.l_v, cfg.d_a});
        for (std::size_t i = 0; i < sample.audio.size(); ++i) sample.audio.at(i) = rng.normal();

        // Unit-norm signature: the query projected through the dataset's
        // affine map. The carrier is the map's offset; it makes relevance
        // linearly visible against a fresh network the way pre-extracted
        // features are, while the query term carries the grounding signal.
        std::vector<double> sig(cfg.d_v, 0.0);
        double norm2 = 0.0;
        for (std::size_t i = 0; i < cfg.d_v; ++i) {
            for (std::size_t j = 0; j < cfg.d_q; ++j) sig[i] += w_sig.at(i, j) * query[j];
            norm2 += sig[i] * sig[i];
        }
        const double inv_norm = norm2 > 0.0 ? 1.0 / std::sqrt(norm2) : 0.0;
        norm2 = 0.0;
        for (std::size_t i = 0; i < cfg.d_v; ++i) {
            sig[i] = sig[i] * inv_norm + carrier[i];
            norm2 += sig[i] * sig[i];
        }
        for (double& v : sig) v /= std::sqrt(norm2);

        sample.salience.assign(cfg.l_v, 0.0);
        for (const auto& [start, len] : place_spans(cfg, rng)) {
            for (std::size_t i = start; i < start + len; ++i) {
                for (std::size_t j = 0; j < cfg.d_v; ++j)
                    sample.video.at(i, j) += cfg.snr * sig[j];
                sample.salience[i] = cfg.snr;
            }
            GtLocalization loc;
            loc.center = (static_cast<double>(start) + static_cast<double>(len) / 2.0) /
                         static_cast<double>(cfg.l_v);
            loc.width = static_cast<double>(len) / static_cast<double>(cfg.l_v);
            loc.offset = 0.0;
            sample.gt.push_back(loc);
        }
        sample.validate("gen_synthetic(" + sample.id + ")");
        samples.push_back(std::move(sample));
    }
    return samples;
}

namespace {

Tensor matrix_from_json(const json& rows, std::size_t line, const char* field) {
    if (!rows.is_array() || rows.empty() || !rows[0].is_array())
        throw std::runtime_error("line " + std::to_string(line) + ": " + field +
                                 " must be a nonempty array of arrays");
    const std::size_t r = rows.size(), c = rows[0].size();
    Tensor out({r, c});
    for (std::size_t i = 0; i < r; ++i) {
        if (!rows[i].is_array() || rows[i].size() != c)
            throw std::runtime_error("line " + std::to_string(line) + ": " + field +
                                     " has ragged rows");
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) = rows[i][j].get<double>();
    }
    return out;
}

json matrix_to_json(const Tensor& m) {
    json rows = json::array();
    for (std::size_t i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (std::size_t j = 0; j < m.cols(); ++j) row.push_back(m.at(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace

std::vector<GroundingSample> load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest: " + path);
    std::vector<GroundingSample> samples;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw std::runtime_error("line " + std::to_string(line_no) +
                                     ": malformed JSON: " + e.what());
        }
        try {
            GroundingSample s;
            s.id = j.at("id").get<std::string>();
            s.video = matrix_from_json(j.at("video"), line_no, "video");
            s.audio = matrix_from_json(j.at("audio"), line_no, "audio");
            s.text = matrix_from_json(j.at("text"), line_no, "text");
            for (const auto& g : j.at("gt")) {
                GtLocalization loc;
                loc.center = g.at("c").get<double>();
                loc.width = g.at("w").get<double>();
                loc.offset = g.at("co").get<double>();
                s.gt.push_back(loc);
            }
            s.salience = j.at("salience").get<std::vector<double>>();
            s.validate("line " + std::to_string(line_no));
            samples.push_back(std::move(s));
        } catch (const json::exception& e) {
            throw std::runtime_error("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (samples.empty())
        std::cerr << "warning: manifest " << path << " contains no samples\n";
    return samples;
}

void save_manifest(const std::vector<GroundingSample>& samples, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest: " + path);
    for (const GroundingSample& s : samples) {
        json j;
        j["id"] = s.id;
        j["video"] = matrix_to_json(s.video);
        j["audio"] = matrix_to_json(s.audio);
        j["text"] = matrix_to_json(s.text);
        json gts = json::array();
        for (const auto& loc : s.gt) gts.push_back({{"c", loc.center}, {"w", loc.width}, {"co", loc.offset}});
        j["gt"] = std::move(gts);
        j["salience"] = s.salience;
        out << j.dump() << "\n";
    }
}

void save_predictions(const std::vector<GroundingSample>& samples,
                      const std::vector<std::vector<Span>>& spans, const std::string& path) {
    DMF_CHECK(samples.size() == spans.size(), "save_predictions: sample count mismatch");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write predictions: " + path);
    char num[96];
    for (std::size_t s = 0; s < samples.size(); ++s) {
        std::vector<Span> sorted = spans[s];
        std::stable_sort(sorted.begin(), sorted.end(), [](const Span& a, const Span& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.start < b.start;
        });
        out << "{\"id\": " << json(samples[s].id).dump() << ", \"moments\": [";
        for (std::size_t i = 0; i < sorted.size(); ++i) {
            if (i) out << ", ";
            std::snprintf(num, sizeof(num), "[%.17g, %.17g, %.17g]", sorted[i].start,
                          sorted[i].end, sorted[i].score);
            out << num;
        }
        out << "]}\n";
    }
}

std::vector<std::pair<std::string, std::vector<Span>>> load_predictions(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open predictions: " + path);
    std::vector<std::pair<std::string, std::vector<Span>>> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            std::vector<Span> spans;
            for (const auto& m : j.at("moments")) {
                Span s;
                s.start = m.at(0).get<double>();
                s.end = m.at(1).get<double>();
                s.score = m.at(2).get<double>();
                spans.push_back(s);
            }
            out.emplace_back(j.at("id").get<std::string>(), std::move(spans));
        } catch (const json::exception& e) {
            throw std::runtime_error("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace demaformer
