#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "demaformer/model.hpp"

namespace demaformer {

// One groundtruth localization in normalized video time. The span it
// describes is (center + offset - width/2, center + offset + width/2).
struct GtLocalization {
    double center = 0.0;
    double width = 0.0;
    double offset = 0.0;
};

// One video-query instance: raw feature matrices plus supervision.
struct GroundingSample {
    std::string id;
    Tensor video;  // [L_v x d_v]
    Tensor audio;  // [L_v x d_a]
    Tensor text;   // [L_q x d_q]
    std::vector<GtLocalization> gt;
    std::vector<double> salience;  // length L_v

    std::size_t l_video() const { return video.rows(); }
    std::size_t l_query() const { return text.rows(); }

    // Throws with a message naming the violated field; `where` prefixes the
    // message (e.g. "line 12").
    void validate(const std::string& where) const;
};

std::vector<Span> gt_spans(const GroundingSample& sample);

struct SynthConfig {
    std::size_t l_v = 32;
    std::size_t l_q = 8;
    std::size_t d_v = 40;
    std::size_t d_q = 20;
    std::size_t d_a = 16;
    std::size_t n_moments = 2;
    double snr = 5.0;
    std::uint64_t seed = 7;

    void validate() const;
};

// The dataset-level affine map from query space to video-feature space used
// to inject the query signature into relevant moments: linear part and unit
// offset (carrier). Derived from the seed, so detectors and tests can
// reconstruct them.
Tensor signature_matrix(const SynthConfig& cfg);
std::vector<double> signature_carrier(const SynthConfig& cfg);

// Synthetic grounding task: background features are standard normal, each
// sample carries n_moments non-overlapping spans whose video rows receive
// snr times the (unit-norm) projected query signature; groundtruth salience
// is snr inside spans and 0 outside; offsets are 0.
std::vector<GroundingSample> gen_synthetic(const SynthConfig& cfg, std::size_t n_samples);

// JSONL manifest, one sample per line:
//   {"id": str, "video": [[...]...], "audio": [[...]...], "text": [[...]...],
//    "gt": [{"c": f, "w": f, "co": f}...], "salience": [f...]}
std::vector<GroundingSample> load_manifest(const std::string& path);
void save_manifest(const std::vector<GroundingSample>& samples, const std::string& path);

// Predictions JSONL, one object per sample, moments sorted score-descending,
// reals printed with 17 significant digits:
//   {"id": str, "moments": [[start, end, score], ...]}
void save_predictions(const std::vector<GroundingSample>& samples,
                      const std::vector<std::vector<Span>>& spans, const std::string& path);
std::vector<std::pair<std::string, std::vector<Span>>> load_predictions(const std::string& path);

}  // namespace demaformer
