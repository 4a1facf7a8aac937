#include <doctest.h>

#include <cmath>

#include "demaformer/config.hpp"
#include "demaformer/gradcheck.hpp"
#include "demaformer/training.hpp"
#include "oracles.hpp"

using namespace demaformer;

namespace {

HeadOutputs heads_from(std::vector<double> s, std::vector<double> c, std::vector<double> co,
                       std::vector<double> w) {
    const std::size_t n = s.size();
    HeadOutputs h;
    h.salience = Tensor({n, 1}, std::move(s));
    h.center = Tensor({n, 1}, std::move(c));
    h.offset = Tensor({n, 1}, std::move(co));
    h.width = Tensor({n, 1}, std::move(w));
    return h;
}

GtLocalization gt_of(double c, double w, double co = 0.0) {
    GtLocalization g;
    g.center = c;
    g.width = w;
    g.offset = co;
    return g;
}

}  // namespace

TEST_CASE("assign_targets floor rule, clamping, and collisions") {
    SUBCASE("centers map to floor(c * L_v)") {
        auto a = assign_targets({gt_of(0.05, 0.1), gt_of(0.55, 0.1)}, 10);
        CHECK(a.position_of_gt == std::vector<std::size_t>{0, 5});
        CHECK(a.matched[0]);
        CHECK(a.matched[5]);
    }
    SUBCASE("center 1.0 clamps to the last position") {
        auto a = assign_targets({gt_of(1.0, 0.2)}, 10);
        CHECK(a.position_of_gt == std::vector<std::size_t>{9});
    }
    SUBCASE("colliding centers fall to the nearest free slot") {
        auto a = assign_targets({gt_of(0.51, 0.0), gt_of(0.52, 0.0)}, 10);
        CHECK(a.position_of_gt[0] == 5);
        CHECK(a.position_of_gt[1] == 4);  // tie between 4 and 6 resolves low
    }
    SUBCASE("too many groundtruths is fatal") {
        CHECK_THROWS_AS(assign_targets({gt_of(0.1, 0), gt_of(0.2, 0), gt_of(0.3, 0)}, 2),
                        std::invalid_argument);
    }
    SUBCASE("random instances agree with the reference and stay injective") {
        Rng rng(91);
        for (int trial = 0; trial < 200; ++trial) {
            const std::size_t l_v = 2 + rng.integer(12);
            const std::size_t n = 1 + rng.integer(l_v);
            std::vector<GtLocalization> gts;
            for (std::size_t i = 0; i < n; ++i)
                gts.push_back(gt_of(rng.uniform(), rng.uniform() * 0.4));
            auto got = assign_targets(gts, l_v);
            auto ref = oracle::assign_reference(gts, l_v);
            CHECK(got.position_of_gt == ref);
            std::vector<bool> seen(l_v, false);
            for (std::size_t p : got.position_of_gt) {
                CHECK(p < l_v);
                CHECK_FALSE(seen[p]);
                seen[p] = true;
            }
        }
    }
}

TEST_CASE("matching_loss values") {
    LossWeights w;
    SUBCASE("perfect regression with unit salience gives -1") {
        auto h = heads_from({1.0, 0.0}, {0.3, 0.9}, {0.0, 0.0}, {0.2, 0.1});
        auto a = assign_targets({gt_of(0.3, 0.2)}, 2);
        REQUIRE(a.position_of_gt[0] == 0);
        CHECK(matching_loss(h, {gt_of(0.3, 0.2)}, a, w).item() == doctest::Approx(-1.0).epsilon(1e-15));
    }
    SUBCASE("single center miss of 0.3 at lambda1 = 1/3 costs 0.1") {
        auto h = heads_from({0.0}, {0.5}, {0.0}, {0.1});
        std::vector<GtLocalization> gts{gt_of(0.2, 0.1)};
        TargetAssignment a;
        a.position_of_gt = {0};
        a.matched = {true};
        CHECK(matching_loss(h, gts, a, w).item() == doctest::Approx(0.1).epsilon(1e-12));
    }
    SUBCASE("empty groundtruth gives zero") {
        auto h = heads_from({1.0}, {0.5}, {0.0}, {0.1});
        TargetAssignment a;
        a.matched = {false};
        CHECK(matching_loss(h, {}, a, w).item() == 0.0);
    }
    SUBCASE("random instances match an independently coded formula") {
        Rng rng(47);
        for (int trial = 0; trial < 100; ++trial) {
            const std::size_t l_v = 4 + rng.integer(8);
            const std::size_t n = 1 + rng.integer(3);
            std::vector<double> s(l_v), c(l_v), co(l_v), wd(l_v);
            for (std::size_t i = 0; i < l_v; ++i) {
                s[i] = rng.normal();
                c[i] = rng.uniform();
                co[i] = rng.normal();
                wd[i] = rng.uniform();
            }
            std::vector<GtLocalization> gts;
            for (std::size_t i = 0; i < n; ++i)
                gts.push_back(gt_of(rng.uniform(), rng.uniform() * 0.3, 0.1 * rng.normal()));
            auto a = assign_targets(gts, l_v);
            auto h = heads_from(s, c, co, wd);
            const double got = matching_loss(h, gts, a, w).item();
            const double ref = oracle::matching_loss_reference(s, c, co, wd, gts,
                                                               a.position_of_gt, w.lambda1,
                                                               w.lambda2, w.lambda3);
            CHECK(std::fabs(got - ref) < 1e-12);
        }
    }
}

TEST_CASE("component losses and the decomposition identity") {
    LossWeights w;
    SUBCASE("perfect prediction leaves only the salience term") {
        auto h = heads_from({2.0}, {0.4}, {0.0}, {0.2});
        std::vector<GtLocalization> gts{gt_of(0.4, 0.2)};
        TargetAssignment a;
        a.position_of_gt = {0};
        a.matched = {true};
        auto parts = component_losses(h, gts, a);
        CHECK(parts.salience.item() == -2.0);
        CHECK(parts.center.item() == 0.0);
        CHECK(parts.width.item() == 0.0);
        CHECK(parts.offset.item() == 0.0);
    }
    SUBCASE("identity L_match = L_s + l1 L_c + l2 L_w + l3 L_co on random inputs") {
        Rng rng(53);
        for (int trial = 0; trial < 100; ++trial) {
            const std::size_t l_v = 3 + rng.integer(8);
            const std::size_t n = 1 + rng.integer(3);
            std::vector<double> s(l_v), c(l_v), co(l_v), wd(l_v);
            for (std::size_t i = 0; i < l_v; ++i) {
                s[i] = rng.normal();
                c[i] = rng.uniform();
                co[i] = rng.normal();
                wd[i] = rng.uniform();
            }
            std::vector<GtLocalization> gts;
            for (std::size_t i = 0; i < n; ++i)
                gts.push_back(gt_of(rng.uniform(), rng.uniform() * 0.3, 0.05 * rng.normal()));
            auto a = assign_targets(gts, l_v);
            auto h = heads_from(s, c, co, wd);
            auto parts = component_losses(h, gts, a);
            const double combined = parts.salience.item() + w.lambda1 * parts.center.item() +
                                    w.lambda2 * parts.width.item() +
                                    w.lambda3 * parts.offset.item();
            CHECK(std::fabs(matching_loss(h, gts, a, w).item() - combined) < 1e-12);
        }
    }
}

TEST_CASE("total_loss") {
    CHECK(total_loss(Tensor::scalar(1.0), Tensor::scalar(2.0), 0.1).item() ==
          doctest::Approx(1.2).epsilon(1e-15));
    CHECK(total_loss(Tensor::scalar(0.7), Tensor::scalar(123.0), 0.0).item() == 0.7);
    // monotone in l_nll for positive weight
    double previous = -1e300;
    for (double nll : {-2.0, 0.0, 1.0, 5.0}) {
        const double v = total_loss(Tensor::scalar(0.5), Tensor::scalar(nll), 0.1).item();
        CHECK(v > previous);
        previous = v;
    }
}

TEST_CASE("adam optimizer") {
    SUBCASE("zero gradients leave parameters unchanged without decay") {
        Tensor p({3}, {1.0, -2.0, 3.0}, true);
        p.zero_grad();
        AdamConfig cfg;
        cfg.weight_decay = 0.0;
        Adam opt({p}, cfg);
        CHECK(opt.step());
        CHECK(p.at(0) == 1.0);
        CHECK(p.at(1) == -2.0);
        CHECK(p.at(2) == 3.0);
    }
    SUBCASE("first step with unit gradient moves by about -lr") {
        Tensor p({1}, {0.0}, true);
        p.grad()[0] = 1.0;
        AdamConfig cfg;
        cfg.weight_decay = 0.0;
        Adam opt({p}, cfg);
        CHECK(opt.step());
        CHECK(std::fabs(p.at(0) + cfg.lr) < 1e-9);
    }
    SUBCASE("non-finite gradients skip the step") {
        Tensor p({1}, {1.0}, true);
        p.grad()[0] = std::nan("");
        Adam opt({p});
        CHECK_FALSE(opt.step());
        CHECK(p.at(0) == 1.0);
        CHECK(opt.steps_skipped() == 1);
    }
    SUBCASE("converges on a quadratic to 1e-6 within 5000 steps") {
        Tensor p({1}, {3.0}, true);
        AdamConfig cfg;
        cfg.lr = 0.01;
        cfg.weight_decay = 0.0;
        Adam opt({p}, cfg);
        const double target = -0.75;
        for (int step = 0; step < 5000; ++step) {
            p.zero_grad();
            p.grad()[0] = p.at(0) - target;  // d/dp of 0.5 (p - target)^2
            opt.step();
        }
        CHECK(std::fabs(p.at(0) - target) < 1e-6);
    }
}

TEST_CASE("whole objective passes the finite-difference check on a tiny model") {
    ModelConfig mc;
    mc.d = 8;
    mc.d_k = 5;
    mc.n_enc = 1;
    mc.n_dec = 1;
    mc.d_v = 5;
    mc.d_q = 4;
    mc.d_a = 3;
    Model model(mc, {}, 7);

    SynthConfig sc;
    sc.l_v = 6;
    sc.l_q = 3;
    sc.d_v = 5;
    sc.d_q = 4;
    sc.d_a = 3;
    sc.n_moments = 2;
    sc.snr = 5.0;
    sc.seed = 31;
    auto samples = gen_synthetic(sc, 1);
    const GroundingSample& s = samples.front();

    EbmConfig ebm;
    ebm.rho = 2.5;
    LossWeights lw;

    // both sample sets held fixed: the NLL term differentiates the energy at
    // the sample points only
    std::vector<std::vector<double>> negatives;
    std::vector<Tensor> positives;
    {
        auto fwd = model.forward(s.video, s.audio, s.text);
        EnergyContext ctx;
        ctx.salience_head = &model.salience_head();
        EnergyGrad grad_fn = make_energy_input_grad(EnergyKind::Salience, ctx);
        Rng rng(5);
        EbmConfig short_cfg = ebm;
        short_cfg.langevin_steps = 10;
        for (std::size_t i = 0; i < fwd.l_video; ++i) {
            std::vector<double> o0(fwd.decoder_out.cols());
            for (std::size_t j = 0; j < o0.size(); ++j) o0[j] = fwd.decoder_out.at(i, j);
            negatives.push_back(*langevin_sample(o0, grad_fn, short_cfg, rng));
        }
        for (std::size_t idx : select_positives(s.salience, ebm.rho)) {
            std::vector<double> values(fwd.decoder_out.cols());
            for (std::size_t j = 0; j < values.size(); ++j) values[j] = fwd.decoder_out.at(idx, j);
            positives.emplace_back(Tensor({1, values.size()}, values));
        }
    }
    REQUIRE(!positives.empty());

    auto f = [&] {
        auto fwd = model.forward(s.video, s.audio, s.text);
        auto assignment = assign_targets(s.gt, fwd.l_video);
        Tensor l_match = matching_loss(fwd.heads, s.gt, assignment, lw);
        EnergyContext ctx;
        ctx.salience_head = &model.salience_head();
        Tensor l_nll = nll_loss(positives, negatives, EnergyKind::Salience, ctx, ebm, 0);
        return total_loss(l_match, l_nll, lw.lambda_nll);
    };
    CHECK(finite_diff_check(f, model.parameters()) < 1e-4);
}

TEST_CASE("fit drives the matching loss down and replays deterministically") {
    ModelConfig mc;
    mc.d = 8;
    mc.d_k = 5;
    mc.n_enc = 1;
    mc.n_dec = 1;
    mc.d_v = 5;
    mc.d_q = 4;
    mc.d_a = 3;

    SynthConfig sc;
    sc.l_v = 6;
    sc.l_q = 3;
    sc.d_v = 5;
    sc.d_q = 4;
    sc.d_a = 3;
    sc.n_moments = 2;
    sc.snr = 5.0;
    sc.seed = 11;
    auto samples = gen_synthetic(sc, 1);

    FitOptions opts;
    opts.epochs = 200;
    opts.seed = 3;
    opts.loss.lambda_nll = 0.0;  // matching loss only
    opts.clip_gradients = false;

    Model model(mc, {}, 19);
    auto report = fit(model, samples, {}, opts);
    REQUIRE(report.epochs.size() == 200);
    CHECK_FALSE(report.diverged);
    for (std::size_t i = 0; i + 50 < report.epochs.size(); ++i)
        CHECK(report.epochs[i + 50].l_match < report.epochs[i].l_match);

    // bit-identical replay, including final parameters
    Model m1(mc, {}, 19), m2(mc, {}, 19);
    FitOptions short_opts = opts;
    short_opts.epochs = 20;
    auto r1 = fit(m1, samples, {}, short_opts);
    auto r2 = fit(m2, samples, {}, short_opts);
    CHECK(training_csv(r1) == training_csv(r2));
    auto p1 = m1.parameters(), p2 = m2.parameters();
    REQUIRE(p1.size() == p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i)
        for (std::size_t j = 0; j < p1[i].size(); ++j) CHECK(p1[i].at(j) == p2[i].at(j));
}
