#include "demaformer/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace demaformer {

void LossWeights::validate() const {
    DMF_CHECK(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda3 >= 0.0 && lambda_nll >= 0.0,
              "loss weights must be nonnegative");
}

TargetAssignment assign_targets(const std::vector<GtLocalization>& gts, std::size_t l_v) {
    DMF_CHECK(l_v >= 1, "assign_targets: l_v must be positive");
    DMF_CHECK(gts.size() <= l_v, "assign_targets: more groundtruths than positions");
    TargetAssignment out;
    out.matched.assign(l_v, false);
    out.position_of_gt.reserve(gts.size());

    auto clamp_idx = [&](double x) {
        const double f = std::floor(x);
        return static_cast<std::size_t>(std::clamp(f, 0.0, static_cast<double>(l_v - 1)));
    };

    for (const GtLocalization& gt : gts) {
        DMF_CHECK(gt.center >= 0.0 && gt.center <= 1.0, "assign_targets: center out of [0,1]");
        const std::size_t want = clamp_idx(gt.center * static_cast<double>(l_v));
        std::size_t chosen = l_v;
        if (!out.matched[want]) {
            chosen = want;
        } else {
            // nearest free inside the groundtruth span, ties to the smaller index
            const std::size_t lo = clamp_idx((gt.center - gt.width / 2.0) * static_cast<double>(l_v));
            const std::size_t hi = clamp_idx((gt.center + gt.width / 2.0) * static_cast<double>(l_v));
            std::size_t best_dist = l_v + 1;
            for (std::size_t j = lo; j <= hi; ++j) {
                if (out.matched[j]) continue;
                const std::size_t dist = j > want ? j - want : want - j;
                if (dist < best_dist) {
                    best_dist = dist;
                    chosen = j;
                }
            }
            if (chosen == l_v) {
                // nearest free anywhere
                best_dist = l_v + 1;
                for (std::size_t j = 0; j < l_v; ++j) {
                    if (out.matched[j]) continue;
                    const std::size_t dist = j > want ? j - want : want - j;
                    if (dist < best_dist) {
                        best_dist = dist;
                        chosen = j;
                    }
                }
            }
        }
        DMF_CHECK(chosen < l_v, "assign_targets: no free position");
        out.matched[chosen] = true;
        out.position_of_gt.push_back(chosen);
    }
    return out;
}

namespace {

struct GatheredHeads {
    Tensor salience, center, offset, width;          // predictions at matched rows
    Tensor t_center, t_width, t_offset;              // targets, constant [L_m x 1]
};

GatheredHeads gather_matched(const HeadOutputs& heads, const std::vector<GtLocalization>& gts,
                             const TargetAssignment& assignment) {
    const std::size_t n = gts.size();
    DMF_CHECK(assignment.position_of_gt.size() == n, "matching loss: assignment size mismatch");
    GatheredHeads g;
    g.salience = gather_rows(heads.salience, assignment.position_of_gt);
    g.center = gather_rows(heads.center, assignment.position_of_gt);
    g.offset = gather_rows(heads.offset, assignment.position_of_gt);
    g.width = gather_rows(heads.width, assignment.position_of_gt);
    std::vector<double> tc(n), tw(n), to(n);
    for (std::size_t i = 0; i < n; ++i) {
        tc[i] = gts[i].center;
        tw[i] = gts[i].width;
        to[i] = gts[i].offset;
    }
    g.t_center = Tensor({n, 1}, std::move(tc));
    g.t_width = Tensor({n, 1}, std::move(tw));
    g.t_offset = Tensor({n, 1}, std::move(to));
    return g;
}

Tensor offset_residual_of(const GatheredHeads& g, OffsetResidual mode) {
    if (mode == OffsetResidual::CenterRelative)
        return absolute(sub(sub(g.offset, g.center), g.t_offset));
    return absolute(sub(g.offset, g.t_offset));
}

}  // namespace

Tensor matching_loss(const HeadOutputs& heads, const std::vector<GtLocalization>& gts,
                     const TargetAssignment& assignment, const LossWeights& weights,
                     OffsetResidual offset_residual) {
    if (gts.empty()) return Tensor::scalar(0.0);
    GatheredHeads g = gather_matched(heads, gts, assignment);
    Tensor penalty = add(affine(absolute(sub(g.center, g.t_center)), weights.lambda1, 0.0),
                         add(affine(absolute(sub(g.width, g.t_width)), weights.lambda2, 0.0),
                             affine(offset_residual_of(g, offset_residual), weights.lambda3, 0.0)));
    return affine(mean(sub(g.salience, penalty)), -1.0, 0.0);
}

ComponentLosses component_losses(const HeadOutputs& heads, const std::vector<GtLocalization>& gts,
                                 const TargetAssignment& assignment,
                                 OffsetResidual offset_residual) {
    DMF_CHECK(!gts.empty(), "component_losses: empty groundtruth");
    GatheredHeads g = gather_matched(heads, gts, assignment);
    ComponentLosses out;
    out.salience = affine(mean(g.salience), -1.0, 0.0);
    out.center = mean(absolute(sub(g.center, g.t_center)));
    out.width = mean(absolute(sub(g.width, g.t_width)));
    out.offset = mean(offset_residual_of(g, offset_residual));
    return out;
}

Tensor total_loss(const Tensor& l_match, const Tensor& l_nll, double lambda_nll) {
    return add(l_match, affine(l_nll, lambda_nll, 0.0));
}

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

bool Adam::step() {
    for (const Tensor& p : params_)
        for (double g : p.grad())
            if (!std::isfinite(g)) {
                ++skipped_;
                return false;
            }
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, steps_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, steps_);
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& p = params_[pi];
        const std::vector<double>& g = p.grad();
        for (std::size_t i = 0; i < p.size(); ++i) {
            m_[pi][i] = cfg_.beta1 * m_[pi][i] + (1.0 - cfg_.beta1) * g[i];
            v_[pi][i] = cfg_.beta2 * v_[pi][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double m_hat = m_[pi][i] / bc1;
            const double v_hat = v_[pi][i] / bc2;
            p.at(i) -= cfg_.lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps) +
                                  cfg_.weight_decay * p.at(i));
        }
    }
    return true;
}

double clip_gradient_norm(const std::vector<Tensor>& params, double max_norm) {
    double norm2 = 0.0;
    for (const Tensor& p : params)
        for (double g : p.grad()) norm2 += g * g;
    const double norm = std::sqrt(norm2);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (Tensor p : params)
            for (double& g : p.grad()) g *= scale;
    }
    return norm;
}

MetricsReport evaluate_model(const Model& model, const std::vector<GroundingSample>& samples,
                             const EvalConfig& cfg) {
    std::vector<std::vector<Span>> preds, gts;
    std::vector<std::vector<double>> pred_sal, gt_sal;
    for (const GroundingSample& s : samples) {
        auto fwd = model.forward(s.video, s.audio, s.text);
        preds.push_back(top_moments(spans_from_heads(fwd.heads), model.config().top_moments_test));
        gts.push_back(gt_spans(s));
        pred_sal.push_back(fwd.heads.salience.values());
        gt_sal.push_back(s.salience);
    }
    return evaluate(preds, gts, pred_sal, gt_sal, cfg);
}

namespace {

double rank1_at_half(const Model& model, const std::vector<GroundingSample>& samples) {
    std::vector<std::vector<Span>> preds, gts;
    for (const GroundingSample& s : samples) {
        auto fwd = model.forward(s.video, s.audio, s.text);
        preds.push_back(top_moments(spans_from_heads(fwd.heads), model.config().top_moments_test));
        gts.push_back(gt_spans(s));
    }
    return rank_k_at_mu(preds, gts, 1, 0.5);
}

}  // namespace

TrainingReport fit(Model& model, const std::vector<GroundingSample>& train,
                   const std::vector<GroundingSample>& eval_set, const FitOptions& opts) {
    DMF_CHECK(!train.empty(), "fit: training set is empty");
    opts.loss.validate();
    opts.ebm.validate();

    TrainingReport report;
    Rng rng(opts.seed);
    std::vector<Tensor> params = model.parameters();
    Adam optimizer(params, opts.adam);

    const bool ebm_active = opts.loss.lambda_nll > 0.0 && !model.ablations().no_ebm;
    const std::vector<GroundingSample>& metric_set = eval_set.empty() ? train : eval_set;

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    const std::size_t batch = std::max<std::size_t>(1, opts.batch_size);
    int met_streak = 0;
    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        rng.shuffle(order);
        double sum_match = 0.0, sum_nll = 0.0, sum_total = 0.0;
        std::size_t in_batch = 0;
        for (std::size_t oi = 0; oi < order.size(); ++oi) {
            const GroundingSample& sample = train[order[oi]];
            if (in_batch == 0) model.zero_grad();
            Tape tape;
            Tape::Scope scope(&tape);

            auto fwd = model.forward(sample.video, sample.audio, sample.text);
            TargetAssignment assignment = assign_targets(sample.gt, fwd.l_video);
            Tensor l_match =
                matching_loss(fwd.heads, sample.gt, assignment, opts.loss, opts.offset_residual);

            Tensor total = l_match;
            double l_nll_value = 0.0;
            if (ebm_active) {
                std::vector<std::size_t> pos_idx = select_positives(sample.salience, opts.ebm.rho);
                if (!pos_idx.empty()) {
                    EnergyContext ctx;
                    ctx.salience_head = &model.salience_head();
                    if (opts.energy != EnergyKind::Salience)
                        ctx.query_rows =
                            slice_rows(fwd.encoder_out, fwd.l_video, fwd.l_video + fwd.l_query);

                    std::vector<std::vector<double>> negatives;
                    negatives.reserve(fwd.l_video);
                    const std::size_t d = fwd.decoder_out.cols();
                    if (opts.energy == EnergyKind::Salience) {
                        // linear energy: constant gradient, one-shot endpoint
                        std::vector<double> g = model.salience_head().weight.values();
                        bool finite = true;
                        for (double& v : g) {
                            v = -v;
                            finite = finite && std::isfinite(v);
                        }
                        for (std::size_t i = 0; i < fwd.l_video; ++i) {
                            std::vector<double> o0(d);
                            for (std::size_t j = 0; j < d; ++j) o0[j] = fwd.decoder_out.at(i, j);
                            if (finite)
                                negatives.push_back(
                                    langevin_sample_linear(o0, g, opts.ebm, rng));
                            else
                                ++report.langevin_failures;
                        }
                    } else {
                        EnergyGrad grad_fn = make_energy_input_grad(opts.energy, ctx);
                        for (std::size_t i = 0; i < fwd.l_video; ++i) {
                            std::vector<double> o0(d);
                            for (std::size_t j = 0; j < d; ++j) o0[j] = fwd.decoder_out.at(i, j);
                            auto sampled = langevin_sample(o0, grad_fn, opts.ebm, rng);
                            if (sampled)
                                negatives.push_back(std::move(*sampled));
                            else
                                ++report.langevin_failures;
                        }
                    }

                    // Positives enter as fixed sample points: the CD gradient
                    // differentiates the energy at the samples, never through
                    // the network that produced them.
                    std::vector<Tensor> positives;
                    positives.reserve(pos_idx.size());
                    for (std::size_t idx : pos_idx) {
                        std::vector<double> values(d);
                        for (std::size_t j = 0; j < d; ++j)
                            values[j] = fwd.decoder_out.at(idx, j);
                        positives.emplace_back(Tensor({1, d}, std::move(values)));
                    }

                    Tensor l_nll =
                        nll_loss(positives, negatives, opts.energy, ctx, opts.ebm, epoch);
                    l_nll_value = l_nll.item();
                    total = total_loss(l_match, l_nll, opts.loss.lambda_nll);
                }
            }

            const double total_value = total.item();
            if (!std::isfinite(total_value)) {
                report.diverged = true;
                report.message = "loss diverged at epoch " + std::to_string(epoch);
                return report;
            }
            tape.backward(total);

            ++in_batch;
            if (in_batch == batch || oi + 1 == order.size()) {
                const double inv_b = 1.0 / static_cast<double>(in_batch);
                for (Tensor p : params)
                    for (double& g : p.grad()) g *= inv_b;
                if (opts.clip_gradients) clip_gradient_norm(params, opts.clip_norm);
                optimizer.step();
                in_batch = 0;
            }

            sum_match += l_match.item();
            sum_nll += l_nll_value;
            sum_total += total_value;
        }

        EpochStats stats;
        stats.epoch = epoch;
        const double inv_n = 1.0 / static_cast<double>(train.size());
        stats.l_match = sum_match * inv_n;
        stats.l_nll = sum_nll * inv_n;
        stats.total = sum_total * inv_n;
        stats.rank1_05 = rank1_at_half(model, metric_set);
        report.epochs.push_back(stats);

        if (opts.early_stop_metric >= 0.0) {
            met_streak = stats.rank1_05 >= opts.early_stop_metric ? met_streak + 1 : 0;
            if (met_streak >= opts.early_stop_patience) break;
        }
    }
    report.skipped_steps = optimizer.steps_skipped();
    return report;
}

std::string training_csv(const TrainingReport& report) {
    std::ostringstream out;
    out << "epoch,l_match,l_nll,total,rank1_05\n";
    char buf[160];
    for (const EpochStats& e : report.epochs) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.l_match,
                      e.l_nll, e.total, e.rank1_05);
        out << buf;
    }
    return out.str();
}

}  // namespace demaformer
