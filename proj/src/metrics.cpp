#include "demaformer/metrics.hpp"

#include <algorithm>
#include <cstdio>

#include <json.hpp>

namespace demaformer {

void EvalConfig::validate() const {
    DMF_CHECK(!ks.empty() && !mus.empty(), "eval config: ks and mus must be nonempty");
    for (int k : ks) DMF_CHECK(k >= 1, "eval config: k must be >= 1");
    for (double mu : mus) DMF_CHECK(mu > 0.0 && mu <= 1.0, "eval config: mu must be in (0,1]");
}

double iou(const Span& a, const Span& b) {
    const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
    const double uni = (a.end - a.start) + (b.end - b.start) - inter;
    if (uni <= 0.0) return (a.start == b.start && a.end == b.end) ? 1.0 : 0.0;
    return inter / uni;
}

double rank_k_at_mu(const std::vector<std::vector<Span>>& preds,
                    const std::vector<std::vector<Span>>& gts, int k, double mu) {
    DMF_CHECK(preds.size() == gts.size(), "rank_k_at_mu: sample count mismatch");
    DMF_CHECK(k >= 1, "rank_k_at_mu: k must be >= 1");
    if (preds.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t s = 0; s < preds.size(); ++s) {
        const std::size_t considered = std::min<std::size_t>(k, preds[s].size());
        bool hit = false;
        for (std::size_t i = 0; i < considered && !hit; ++i)
            for (const Span& gt : gts[s])
                if (iou(preds[s][i], gt) > mu) {
                    hit = true;
                    break;
                }
        hits += hit ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

MapResult map_at_mu(const std::vector<std::vector<Span>>& preds,
                    const std::vector<std::vector<Span>>& gts, double mu) {
    DMF_CHECK(preds.size() == gts.size(), "map_at_mu: sample count mismatch");
    MapResult out;
    double ap_sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t s = 0; s < preds.size(); ++s) {
        if (gts[s].empty()) {
            ++out.skipped;
            continue;
        }
        std::vector<bool> used(gts[s].size(), false);
        std::size_t correct = 0;
        double ap = 0.0;
        for (std::size_t r = 0; r < preds[s].size(); ++r) {
            double best = mu;
            std::size_t best_gt = gts[s].size();
            for (std::size_t g = 0; g < gts[s].size(); ++g) {
                if (used[g]) continue;
                const double v = iou(preds[s][r], gts[s][g]);
                if (v > best) {
                    best = v;
                    best_gt = g;
                }
            }
            if (best_gt < gts[s].size()) {
                used[best_gt] = true;
                ++correct;
                ap += static_cast<double>(correct) / static_cast<double>(r + 1);
            }
        }
        ap_sum += ap / static_cast<double>(gts[s].size());
        ++counted;
    }
    out.value = counted == 0 ? 0.0 : ap_sum / static_cast<double>(counted);
    return out;
}

double hit_at_1(const std::vector<std::vector<double>>& pred_salience,
                const std::vector<std::vector<double>>& gt_salience, double tau) {
    DMF_CHECK(pred_salience.size() == gt_salience.size(), "hit_at_1: sample count mismatch");
    if (pred_salience.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t s = 0; s < pred_salience.size(); ++s) {
        DMF_CHECK(!pred_salience[s].empty() && pred_salience[s].size() == gt_salience[s].size(),
                  "hit_at_1: salience length mismatch");
        std::size_t arg = 0;
        for (std::size_t i = 1; i < pred_salience[s].size(); ++i)
            if (pred_salience[s][i] > pred_salience[s][arg]) arg = i;
        if (gt_salience[s][arg] >= tau) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(pred_salience.size());
}

namespace {

std::string threshold_key(double mu) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", mu);
    return buf;
}

}  // namespace

MetricsReport evaluate(const std::vector<std::vector<Span>>& preds,
                       const std::vector<std::vector<Span>>& gts,
                       const std::vector<std::vector<double>>& pred_salience,
                       const std::vector<std::vector<double>>& gt_salience,
                       const EvalConfig& cfg) {
    cfg.validate();
    MetricsReport report;
    for (int k : cfg.ks)
        for (double mu : cfg.mus)
            report.values["rank" + std::to_string(k) + "@" + threshold_key(mu)] =
                rank_k_at_mu(preds, gts, k, mu);
    double map_sum = 0.0;
    for (double mu : cfg.mus) {
        const double v = map_at_mu(preds, gts, mu).value;
        report.values["map@" + threshold_key(mu)] = v;
        map_sum += v;
    }
    report.values["map_avg"] = map_sum / static_cast<double>(cfg.mus.size());
    report.values["hit@1"] = hit_at_1(pred_salience, gt_salience, cfg.tau);
    return report;
}

std::string metrics_to_json(const MetricsReport& report) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [key, value] : report.values) j[key] = value;
    return j.dump(2) + "\n";
}

}  // namespace demaformer
