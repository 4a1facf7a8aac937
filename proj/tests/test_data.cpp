#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "demaformer/data.hpp"
#include "demaformer/metrics.hpp"
#include "oracles.hpp"

using namespace demaformer;

namespace {

SynthConfig small_config() {
    SynthConfig cfg;
    cfg.l_v = 16;
    cfg.l_q = 4;
    cfg.d_v = 10;
    cfg.d_q = 6;
    cfg.d_a = 5;
    cfg.n_moments = 2;
    cfg.snr = 5.0;
    cfg.seed = 21;
    return cfg;
}

std::filesystem::path temp_file(const char* name) {
    return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("gen_synthetic basic structure") {
    SUBCASE("zero snr leaves no signal") {
        SynthConfig cfg = small_config();
        cfg.snr = 0.0;
        auto samples = gen_synthetic(cfg, 5);
        for (const auto& s : samples)
            for (double v : s.salience) CHECK(v == 0.0);
    }
    SUBCASE("one moment gives exactly one contiguous salient run") {
        SynthConfig cfg = small_config();
        cfg.n_moments = 1;
        auto samples = gen_synthetic(cfg, 20);
        for (const auto& s : samples) {
            REQUIRE(s.gt.size() == 1);
            int transitions = 0;
            bool inside = false;
            for (double v : s.salience) {
                const bool now = v > 0.0;
                if (now != inside) {
                    ++transitions;
                    inside = now;
                }
            }
            if (inside) ++transitions;
            CHECK(transitions == 2);  // one rise, one fall
        }
    }
    SUBCASE("generator invariants hold over 1000 samples") {
        SynthConfig cfg = small_config();
        auto samples = gen_synthetic(cfg, 1000);
        REQUIRE(samples.size() == 1000);
        for (const auto& s : samples) {
            CHECK(s.gt.size() == cfg.n_moments);
            for (const auto& loc : s.gt) {
                CHECK(loc.center >= 0.0);
                CHECK(loc.center <= 1.0);
                CHECK(loc.width > 0.0);
                CHECK(loc.width <= 1.0);
                CHECK(loc.offset == 0.0);
            }
            // spans do not overlap
            auto spans = gt_spans(s);
            std::sort(spans.begin(), spans.end(),
                      [](const Span& a, const Span& b) { return a.start < b.start; });
            for (std::size_t i = 1; i < spans.size(); ++i)
                CHECK(spans[i].start >= spans[i - 1].end - 1e-12);
            // salience straddles the default threshold construction
            std::size_t salient = 0;
            for (double v : s.salience) {
                CHECK((v == 0.0 || v == cfg.snr));
                salient += v > 0.0;
            }
            CHECK(salient >= 2 * cfg.n_moments);
        }
    }
    SUBCASE("deterministic under the seed") {
        SynthConfig cfg = small_config();
        auto a = gen_synthetic(cfg, 10);
        auto b = gen_synthetic(cfg, 10);
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].id == b[i].id);
            CHECK(a[i].video.values() == b[i].video.values());
            CHECK(a[i].audio.values() == b[i].audio.values());
            CHECK(a[i].text.values() == b[i].text.values());
            CHECK(a[i].salience == b[i].salience);
        }
    }
}

TEST_CASE("manifest round-trip is the identity") {
    SynthConfig cfg = small_config();
    auto samples = gen_synthetic(cfg, 8);
    const auto path = temp_file("demaformer_manifest_test.jsonl");
    save_manifest(samples, path.string());
    auto loaded = load_manifest(path.string());
    REQUIRE(loaded.size() == samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        CHECK(loaded[i].id == samples[i].id);
        CHECK(loaded[i].video.values() == samples[i].video.values());
        CHECK(loaded[i].audio.values() == samples[i].audio.values());
        CHECK(loaded[i].text.values() == samples[i].text.values());
        CHECK(loaded[i].salience == samples[i].salience);
        REQUIRE(loaded[i].gt.size() == samples[i].gt.size());
        for (std::size_t g = 0; g < samples[i].gt.size(); ++g) {
            CHECK(loaded[i].gt[g].center == samples[i].gt[g].center);
            CHECK(loaded[i].gt[g].width == samples[i].gt[g].width);
            CHECK(loaded[i].gt[g].offset == samples[i].gt[g].offset);
        }
    }
    std::filesystem::remove(path);
}

TEST_CASE("manifest error reporting") {
    SUBCASE("empty file loads as an empty dataset") {
        const auto path = temp_file("demaformer_empty.jsonl");
        std::ofstream(path.string()).close();
        CHECK(load_manifest(path.string()).empty());
        std::filesystem::remove(path);
    }
    SUBCASE("invalid width names the field and the line") {
        const auto path = temp_file("demaformer_badwidth.jsonl");
        {
            std::ofstream out(path.string());
            out << R"({"id":"x","video":[[1.0]],"audio":[[1.0]],"text":[[1.0]],)"
                << R"("gt":[{"c":0.5,"w":1.5,"co":0.0}],"salience":[0.0]})" << "\n";
        }
        try {
            load_manifest(path.string());
            FAIL("expected a rejection");
        } catch (const std::runtime_error& e) {
            const std::string msg = e.what();
            CHECK(msg.find("width") != std::string::npos);
            CHECK(msg.find("line 1") != std::string::npos);
        }
        std::filesystem::remove(path);
    }
    SUBCASE("malformed JSON names the line") {
        const auto path = temp_file("demaformer_badjson.jsonl");
        {
            std::ofstream out(path.string());
            out << R"({"id":"ok","video":[[1.0]],"audio":[[1.0]],"text":[[1.0]],)"
                << R"("gt":[{"c":0.5,"w":0.5,"co":0.0}],"salience":[0.0]})" << "\n";
            out << "{not json\n";
        }
        try {
            load_manifest(path.string());
            FAIL("expected a rejection");
        } catch (const std::runtime_error& e) {
            CHECK(std::string(e.what()).find("line 2") != std::string::npos);
        }
        std::filesystem::remove(path);
    }
}

TEST_CASE("prediction files") {
    SynthConfig cfg = small_config();
    auto samples = gen_synthetic(cfg, 2);
    const auto path = temp_file("demaformer_preds.jsonl");

    SUBCASE("empty prediction lists serialize as empty arrays") {
        save_predictions(samples, {{}, {}}, path.string());
        std::ifstream in(path.string());
        std::string line;
        std::getline(in, line);
        CHECK(line.find("\"moments\": []") != std::string::npos);
    }
    SUBCASE("round-trip through the reader preserves values and order") {
        std::vector<std::vector<Span>> spans(2);
        Rng rng(5);
        for (auto& list : spans)
            for (int i = 0; i < 4; ++i) {
                Span s;
                s.start = rng.uniform();
                s.end = std::min(1.0, s.start + rng.uniform() * 0.3);
                s.score = rng.normal();
                list.push_back(s);
            }
        save_predictions(samples, spans, path.string());
        auto loaded = load_predictions(path.string());
        REQUIRE(loaded.size() == 2);
        for (std::size_t s = 0; s < 2; ++s) {
            CHECK(loaded[s].first == samples[s].id);
            // reader sees score-descending order with exact values
            auto sorted = spans[s];
            std::stable_sort(sorted.begin(), sorted.end(),
                             [](const Span& a, const Span& b) { return a.score > b.score; });
            REQUIRE(loaded[s].second.size() == sorted.size());
            for (std::size_t i = 0; i < sorted.size(); ++i) {
                CHECK(loaded[s].second[i].start == sorted[i].start);
                CHECK(loaded[s].second[i].end == sorted[i].end);
                CHECK(loaded[s].second[i].score == sorted[i].score);
            }
        }
    }
    SUBCASE("scores carry 17 significant digits") {
        std::vector<std::vector<Span>> spans(2);
        Span s;
        s.start = 1.0 / 3.0;
        s.end = 2.0 / 3.0;
        s.score = 1.0 / 3.0;
        spans[0].push_back(s);
        save_predictions(samples, spans, path.string());
        std::ifstream in(path.string());
        std::string line;
        std::getline(in, line);
        CHECK(line.find("0.33333333333333331") != std::string::npos);
    }
    std::filesystem::remove(path);
}

TEST_CASE("high-snr data is solvable by a correlation detector") {
    SynthConfig cfg = small_config();
    cfg.snr = 5.0;
    auto samples = gen_synthetic(cfg, 50);
    const Tensor w_sig = signature_matrix(cfg);
    const std::vector<double> carrier = signature_carrier(cfg);

    std::vector<std::vector<Span>> preds, gts;
    for (const auto& s : samples) {
        // estimate the query vector from the noisy tokens, apply the
        // dataset's affine signature map, normalize
        std::vector<double> u(cfg.d_q, 0.0);
        for (std::size_t i = 0; i < s.text.rows(); ++i)
            for (std::size_t j = 0; j < cfg.d_q; ++j) u[j] += s.text.at(i, j);
        for (double& v : u) v /= static_cast<double>(s.text.rows());
        std::vector<double> sig(cfg.d_v, 0.0);
        double norm2 = 0.0;
        for (std::size_t i = 0; i < cfg.d_v; ++i) {
            for (std::size_t j = 0; j < cfg.d_q; ++j) sig[i] += w_sig.at(i, j) * u[j];
            norm2 += sig[i] * sig[i];
        }
        for (std::size_t i = 0; i < cfg.d_v; ++i)
            sig[i] = sig[i] / std::sqrt(norm2) + carrier[i];
        norm2 = 0.0;
        for (double v : sig) norm2 += v * v;
        for (double& v : sig) v /= std::sqrt(norm2);

        // threshold per-moment correlations, emit runs as spans
        std::vector<Span> spans;
        bool inside = false;
        std::size_t run_start = 0;
        for (std::size_t i = 0; i <= cfg.l_v; ++i) {
            double corr = 0.0;
            if (i < cfg.l_v)
                for (std::size_t j = 0; j < cfg.d_v; ++j) corr += s.video.at(i, j) * sig[j];
            const bool now = i < cfg.l_v && corr > cfg.snr / 2.0;
            if (now && !inside) {
                inside = true;
                run_start = i;
            } else if (!now && inside) {
                inside = false;
                Span sp;
                sp.start = static_cast<double>(run_start) / static_cast<double>(cfg.l_v);
                sp.end = static_cast<double>(i) / static_cast<double>(cfg.l_v);
                sp.score = static_cast<double>(i - run_start);
                spans.push_back(sp);
            }
        }
        preds.push_back(top_moments(spans, 10));
        gts.push_back(gt_spans(s));
    }
    CHECK(rank_k_at_mu(preds, gts, 1, 0.5) == 1.0);
}
