#include <gtest/gtest.h>

#include "rcp/gradcheck.hpp"
#include "rcp/objectives.hpp"
#include "rcp/repair.hpp"

using namespace rcp;

namespace {
RunConfig small_cfg() {
    RunConfig cfg;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.adapter_bottleneck_dim = 2;
    cfg.n_vision = 6;
    cfg.task_n_regions = 1;
    cfg.max_len = 32;
    return cfg;
}
}  // namespace

TEST(EncodeContext, NothingPrunedGuard) {
    RunConfig cfg = small_cfg();
    Rng rng(1);
    ContextEncoderParams enc = ContextEncoderParams::init(cfg, rng);
    const std::size_t N = 5, d = cfg.d_model;
    Tensor m = Tensor::from({N}, std::vector<double>(N, 1.0));
    Tensor P = Tensor::randn({N, d}, rng, 1.0, false);
    Tensor h = Tensor::randn({N, d}, rng, 1.0, false);
    auto [e_mask, e_pruned] = encode_context(enc, m, P, h);
    for (double v : e_pruned.data()) EXPECT_EQ(v, 0.0);
    // guard branch must be independent of the hidden states
    Tensor h2 = Tensor::randn({N, d}, rng, 1.0, false);
    auto [e_mask2, e_pruned2] = encode_context(enc, m, P, h2);
    EXPECT_EQ(e_pruned2.data(), e_pruned.data());
    EXPECT_EQ(e_mask2.data(), e_mask.data());
}

TEST(EncodeContext, IdenticalRowsCollapseToProjection) {
    RunConfig cfg = small_cfg();
    Rng rng(2);
    ContextEncoderParams enc = ContextEncoderParams::init(cfg, rng);
    const std::size_t N = 4, d = cfg.d_model;
    std::vector<double> prow(d);
    for (double& v : prow) v = rng.normal();
    std::vector<double> pdata;
    for (std::size_t i = 0; i < N; ++i) pdata.insert(pdata.end(), prow.begin(), prow.end());
    Tensor m = Tensor::from({N}, std::vector<double>(N, 1.0));
    Tensor P = Tensor::from({N, d}, pdata);
    Tensor h = Tensor::randn({N, d}, rng, 1.0, false);
    auto [e_mask, e_pruned] = encode_context(enc, m, P, h);
    Tensor expect = matmul(Tensor::from({1, d}, prow), enc.w_mask);
    for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(e_mask.data()[j], expect.data()[j], 1e-12);
}

TEST(EncodeContext, MatchesLoopOracle) {
    RunConfig cfg = small_cfg();
    Rng rng(3);
    ContextEncoderParams enc = ContextEncoderParams::init(cfg, rng);
    const std::size_t N = 6, d = cfg.d_model;
    std::vector<double> mv = {1.0, 0.0, 1.0, 1.0, 0.0, 1.0};
    Tensor m = Tensor::from({N}, mv);
    Tensor P = Tensor::randn({N, d}, rng, 1.0, false);
    Tensor h = Tensor::randn({N, d}, rng, 1.0, false);
    auto [e_mask, e_pruned] = encode_context(enc, m, P, h);

    // oracle: literal formulas
    std::vector<double> logits(N);
    for (std::size_t i = 0; i < N; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j)
            acc += enc.query.data()[j] * mv[i] * P.data()[i * d + j];
        logits[i] = acc;
    }
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double z = 0.0;
    std::vector<double> att(N);
    for (std::size_t i = 0; i < N; ++i) {
        att[i] = std::exp(logits[i] - mx);
        z += att[i];
    }
    for (double& v : att) v /= z;
    std::vector<double> pooled(d, 0.0);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < d; ++j) pooled[j] += att[i] * mv[i] * P.data()[i * d + j];
    for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) acc += pooled[k] * enc.w_mask.data()[k * d + j];
        ASSERT_NEAR(e_mask.data()[j], acc, 1e-12);
    }

    double wsum = 0.0;
    std::vector<double> hmean(d, 0.0);
    for (std::size_t i = 0; i < N; ++i) {
        const double w = 1.0 - mv[i];
        wsum += w;
        for (std::size_t j = 0; j < d; ++j) hmean[j] += w * h.data()[i * d + j];
    }
    for (double& v : hmean) v /= wsum;
    for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) acc += hmean[k] * enc.w_pruned.data()[k * d + j];
        ASSERT_NEAR(e_pruned.data()[j], acc, 1e-12);
    }
}

TEST(BuildConditioning, AdditiveIdentity) {
    RunConfig cfg = small_cfg();
    Rng rng(4);
    AdapterSiteParams site = AdapterSiteParams::init(cfg, rng);
    for (double& v : site.w_query.values_mut()) v = 0.0;
    const std::size_t d = cfg.d_model, L = 3;
    std::vector<RepairContextEntry> ctx = {
        {Tensor::zeros({1, d}), Tensor::zeros({1, d}), 1}};
    Tensor x = Tensor::randn({L, d}, rng, 1.0, false);
    Tensor cond = build_conditioning(site, x, ctx);
    for (double v : cond.data()) EXPECT_EQ(v, 0.0);
}

TEST(BuildConditioning, SingleLayerReducesToSum) {
    RunConfig cfg = small_cfg();
    Rng rng(5);
    AdapterSiteParams site = AdapterSiteParams::init(cfg, rng);
    const std::size_t d = cfg.d_model, L = 4;
    Tensor em = Tensor::randn({1, d}, rng, 1.0, false);
    Tensor ep = Tensor::randn({1, d}, rng, 1.0, false);
    std::vector<RepairContextEntry> ctx = {{em, ep, 1}};
    Tensor x = Tensor::randn({L, d}, rng, 1.0, false);
    Tensor cond = build_conditioning(site, x, ctx);
    Tensor qp = matmul(x, site.w_query);
    for (std::size_t r = 0; r < L; ++r)
        for (std::size_t j = 0; j < d; ++j)
            ASSERT_NEAR(cond.data()[r * d + j],
                        em.data()[j] + ep.data()[j] + qp.data()[r * d + j], 1e-12);
}

TEST(BuildConditioning, TwoLayersAverage) {
    RunConfig cfg = small_cfg();
    Rng rng(6);
    AdapterSiteParams site = AdapterSiteParams::init(cfg, rng);
    const std::size_t d = cfg.d_model, L = 2;
    std::vector<RepairContextEntry> ctx;
    std::vector<double> expect(d, 0.0);
    for (int k = 0; k < 2; ++k) {
        Tensor em = Tensor::randn({1, d}, rng, 1.0, false);
        Tensor ep = Tensor::randn({1, d}, rng, 1.0, false);
        for (std::size_t j = 0; j < d; ++j) expect[j] += 0.5 * (em.data()[j] + ep.data()[j]);
        ctx.push_back({em, ep, static_cast<std::size_t>(k)});
    }
    Tensor x = Tensor::randn({L, d}, rng, 1.0, false);
    Tensor cond = build_conditioning(site, x, ctx);
    Tensor qp = matmul(x, site.w_query);
    for (std::size_t r = 0; r < L; ++r)
        for (std::size_t j = 0; j < d; ++j)
            ASSERT_NEAR(cond.data()[r * d + j], expect[j] + qp.data()[r * d + j], 1e-12);
}

TEST(BuildConditioning, EmptyContextsRejected) {
    RunConfig cfg = small_cfg();
    Rng rng(7);
    AdapterSiteParams site = AdapterSiteParams::init(cfg, rng);
    Tensor x = Tensor::zeros({2, cfg.d_model});
    EXPECT_THROW(build_conditioning(site, x, {}), ConfigError);
}

TEST(FilmCorrection, ZeroAtInitialization) {
    RunConfig cfg = small_cfg();
    Rng rng(8);
    AdapterSiteParams site = AdapterSiteParams::init(cfg, rng);
    Tensor x = Tensor::randn({5, cfg.d_model}, rng, 1.0, false);
    Tensor cond = Tensor::randn({5, cfg.d_model}, rng, 1.0, false);
    Tensor delta = film_correction(site, x, cond);
    for (double v : delta.data()) EXPECT_EQ(v, 0.0);
}

TEST(FilmCorrection, ClosedGateZeroesOutput) {
    RunConfig cfg = small_cfg();
    Rng rng(9);
    AdapterSiteParams site = AdapterSiteParams::init(cfg, rng);
    for (double& v : site.w_up.values_mut()) v = rng.normal();
    for (double& v : site.w_gamma.values_mut()) v = rng.normal();
    site.alpha.values_mut()[0] = 0.0;
    Tensor x = Tensor::randn({5, cfg.d_model}, rng, 1.0, false);
    Tensor cond = Tensor::randn({5, cfg.d_model}, rng, 1.0, false);
    Tensor delta = film_correction(site, x, cond);
    for (double v : delta.data()) EXPECT_EQ(v, 0.0);
}

TEST(FilmCorrection, MatchesComposedOracle) {
    RunConfig cfg = small_cfg();
    Rng rng(10);
    AdapterSiteParams site = AdapterSiteParams::init(cfg, rng);
    // randomize everything, including the zero-initialized maps
    for (Tensor t : {site.w_gamma, site.w_beta, site.w_up})
        for (double& v : t.values_mut()) v = rng.normal() * 0.5;
    site.alpha.values_mut()[0] = 0.7;
    const std::size_t L = 3, d = cfg.d_model, db = cfg.adapter_bottleneck_dim;
    Tensor x = Tensor::randn({L, d}, rng, 1.0, false);
    Tensor cond = Tensor::randn({L, d}, rng, 1.0, false);
    Tensor delta = film_correction(site, x, cond);

    for (std::size_t r = 0; r < L; ++r) {
        std::vector<double> gamma(db), beta(db), z(db);
        for (std::size_t j = 0; j < db; ++j) {
            double g = 0.0, b = 0.0, zz = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                g += cond.data()[r * d + k] * site.w_gamma.data()[k * db + j];
                b += cond.data()[r * d + k] * site.w_beta.data()[k * db + j];
                zz += x.data()[r * d + k] * site.w_down.data()[k * db + j];
            }
            gamma[j] = 1.0 + g;
            beta[j] = b;
            const double c0 = 0.7978845608028654, c1 = 0.044715;
            z[j] = 0.5 * zz * (1.0 + std::tanh(c0 * (zz + c1 * zz * zz * zz)));
        }
        for (std::size_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < db; ++k)
                acc += (gamma[k] * z[k] + beta[k]) * site.w_up.data()[k * d + j];
            ASSERT_NEAR(delta.data()[r * d + j], 0.7 * acc, 1e-12);
        }
    }
}

TEST(ApplyRepair, NoAnswerRegionIsBitwiseIdentity) {
    Rng rng(11);
    Tensor x = Tensor::randn({4, 6}, rng, 1.0, false);
    Tensor delta = Tensor::randn({4, 6}, rng, 1.0, false);
    Tensor out = apply_repair(x, delta, std::vector<bool>(4, false));
    EXPECT_EQ(out.data(), x.data());
}

TEST(ApplyRepair, AnswerRowsShiftByExactlyDelta) {
    Rng rng(12);
    Tensor x = Tensor::randn({4, 6}, rng, 1.0, false);
    Tensor delta = Tensor::randn({4, 6}, rng, 1.0, false);
    std::vector<bool> gate = {false, true, false, true};
    Tensor out = apply_repair(x, delta, gate);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < 6; ++j) {
            if (gate[r])
                EXPECT_EQ(out.data()[r * 6 + j], x.data()[r * 6 + j] + delta.data()[r * 6 + j]);
            else
                EXPECT_EQ(out.data()[r * 6 + j], x.data()[r * 6 + j]);
        }
}

TEST(ApplyRepair, NonAnswerRowsBitwiseStableOverTrials) {
    Rng rng(13);
    for (int trial = 0; trial < 1000; ++trial) {
        Tensor x = Tensor::randn({3, 4}, rng, 2.0, false);
        Tensor delta = Tensor::randn({3, 4}, rng, 2.0, false);
        std::vector<bool> gate = {false, rng.bernoulli(0.5), true};
        Tensor out = apply_repair(x, delta, gate);
        for (std::size_t j = 0; j < 4; ++j) ASSERT_EQ(out.data()[j], x.data()[j]);
    }
}

TEST(AdapterIdentity, FreshInitIsBitwiseIdentityEndToEnd) {
    RunConfig cfg = small_cfg();
    Rng rng(14);
    AdapterSiteParams site = AdapterSiteParams::init(cfg, rng);
    ContextEncoderParams enc = ContextEncoderParams::init(cfg, rng);
    const std::size_t L = 6, d = cfg.d_model, N = 4;
    for (int trial = 0; trial < 100; ++trial) {
        Tensor x = Tensor::randn({L, d}, rng, 1.5, false);
        Tensor m = Tensor::from({N}, {1.0, 0.0, 1.0, 0.0});
        Tensor P = Tensor::randn({N, d}, rng, 1.0, false);
        Tensor h = Tensor::randn({N, d}, rng, 1.0, false);
        auto [em, ep] = encode_context(enc, m, P, h);
        std::vector<RepairContextEntry> ctx = {
            {reshape(em, {1, d}), reshape(ep, {1, d}), 1}};
        Tensor cond = build_conditioning(site, x, ctx);
        Tensor delta = film_correction(site, x, cond);
        std::vector<bool> gate(L, false);
        gate[L - 1] = gate[L - 2] = true;
        Tensor out = apply_repair(x, delta, gate);
        ASSERT_EQ(out.data(), x.data());
    }
}

TEST(AdapterGradients, AllParamsReceiveGradientAfterPerturbation) {
    RunConfig cfg = small_cfg();
    Rng rng(15);
    AdapterSiteParams site = AdapterSiteParams::init(cfg, rng);
    ContextEncoderParams enc = ContextEncoderParams::init(cfg, rng);
    // perturb the zero-initialized maps so every path is live
    for (Tensor t : {site.w_gamma, site.w_beta, site.w_up})
        for (double& v : t.values_mut()) v = rng.normal() * 0.3;

    const std::size_t L = 6, d = cfg.d_model, N = 4;
    Tensor x = Tensor::randn({L, d}, rng, 1.0, false);
    Tensor m = Tensor::from({N}, {1.0, 0.0, 1.0, 1.0});
    Tensor P = Tensor::randn({N, d}, rng, 1.0, false);
    Tensor h = Tensor::randn({N, d}, rng, 1.0, false);
    Tensor target = Tensor::randn({2, d}, rng, 1.0, false);

    auto [em, ep] = encode_context(enc, m, P, h);
    std::vector<RepairContextEntry> ctx = {{reshape(em, {1, d}), reshape(ep, {1, d}), 1}};
    Tensor cond = build_conditioning(site, x, ctx);
    Tensor delta = film_correction(site, x, cond);
    std::vector<bool> gate(L, false);
    gate[L - 1] = gate[L - 2] = true;
    Tensor out = apply_repair(x, delta, gate);
    Tensor answer_rows = slice_rows(out, L - 2, 2);
    Tensor loss = repair_loss(answer_rows, target);

    std::vector<Tensor> params;
    for (const Tensor& t : site.all_params()) params.push_back(t);
    for (const Tensor& t : enc.all_params()) params.push_back(t);
    for (Tensor& p : params) p.zero_grad();
    backward(loss);
    for (std::size_t i = 0; i < params.size(); ++i) {
        double norm = 0.0;
        for (double g : params[i].grad()) norm += g * g;
        EXPECT_GT(norm, 0.0) << "parameter " << i << " received no gradient";
    }
}

TEST(AdapterGradients, RepairPathPassesFiniteDiff) {
    RunConfig cfg = small_cfg();
    Rng rng(16);
    AdapterSiteParams site = AdapterSiteParams::init(cfg, rng);
    ContextEncoderParams enc = ContextEncoderParams::init(cfg, rng);
    for (Tensor t : {site.w_gamma, site.w_beta, site.w_up})
        for (double& v : t.values_mut()) v = rng.normal() * 0.3;
    const std::size_t L = 5, d = cfg.d_model, N = 4;
    Tensor x = Tensor::randn({L, d}, rng, 1.0, false);
    Tensor m = Tensor::param({N}, {0.9, 0.2, 0.7, 0.4});  // soft mask, differentiable
    Tensor P = Tensor::randn({N, d}, rng, 1.0, false);
    Tensor h = Tensor::randn({N, d}, rng, 1.0, false);
    Tensor target = Tensor::randn({2, d}, rng, 1.0, false);
    auto f = [&]() {
        auto [em, ep] = encode_context(enc, m, P, h);
        std::vector<RepairContextEntry> ctx = {{reshape(em, {1, d}), reshape(ep, {1, d}), 1}};
        Tensor cond = build_conditioning(site, x, ctx);
        Tensor delta = film_correction(site, x, cond);
        std::vector<bool> gate(L, false);
        gate[L - 1] = gate[L - 2] = true;
        Tensor out = apply_repair(x, delta, gate);
        return repair_loss(slice_rows(out, L - 2, 2), target);
    };
    std::vector<Tensor> params = site.all_params();
    for (const Tensor& t : enc.all_params()) params.push_back(t);
    params.push_back(m);
    auto report = finite_diff_check(f, params, 1e-5);
    EXPECT_LE(report.max_rel_error, 1e-5);
}
