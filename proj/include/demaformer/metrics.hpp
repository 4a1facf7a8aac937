#pragma once

#include <map>
#include <string>
#include <vector>

#include "demaformer/model.hpp"

namespace demaformer {

struct EvalConfig {
    std::vector<int> ks = {1, 5};
    std::vector<double> mus = {0.5, 0.7, 0.75};
    double tau = 4.0;  // groundtruth-salience threshold for Hit@1

    void validate() const;
};

// Intersection over union of two spans; 0 when the union is empty, except
// that two identical zero-length spans count as a perfect match.
double iou(const Span& a, const Span& b);

// Fraction of samples whose top-k predictions contain at least one span with
// IoU strictly above mu against any groundtruth. Predictions are expected
// score-descending; samples with no predictions count as misses.
double rank_k_at_mu(const std::vector<std::vector<Span>>& preds,
                    const std::vector<std::vector<Span>>& gts, int k, double mu);

struct MapResult {
    double value = 0.0;
    std::size_t skipped = 0;  // samples with no groundtruth
};

// Mean over samples of all-point average precision. A ranked prediction is
// correct when it can be greedily matched (highest score first, best IoU,
// one use per groundtruth) to a groundtruth with IoU strictly above mu.
MapResult map_at_mu(const std::vector<std::vector<Span>>& preds,
                    const std::vector<std::vector<Span>>& gts, double mu);

// Per sample: 1 if the groundtruth salience at the predicted-salience argmax
// (earliest index on ties) is >= tau; averaged over samples.
double hit_at_1(const std::vector<std::vector<double>>& pred_salience,
                const std::vector<std::vector<double>>& gt_salience, double tau);

struct MetricsReport {
    std::map<std::string, double> values;
};

MetricsReport evaluate(const std::vector<std::vector<Span>>& preds,
                       const std::vector<std::vector<Span>>& gts,
                       const std::vector<std::vector<double>>& pred_salience,
                       const std::vector<std::vector<double>>& gt_salience,
                       const EvalConfig& cfg);

// Flat JSON object, e.g. {"hit@1": ..., "map@0.5": ..., "rank1@0.5": ...}.
std::string metrics_to_json(const MetricsReport& report);

}  // namespace demaformer
