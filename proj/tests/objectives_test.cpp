#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "rcp/gradcheck.hpp"
#include "rcp/objectives.hpp"

using namespace rcp;

TEST(FeatureMoments, ConstantRows) {
    auto [mu, v] = feature_moments(Tensor::from({2, 2}, {1, 1, 1, 1}));
    EXPECT_EQ(mu.data(), (std::vector<double>{1.0, 1.0}));
    EXPECT_EQ(v.data(), (std::vector<double>{0.0, 0.0}));
}

TEST(FeatureMoments, DirectFormulaEvaluation) {
    auto [mu, v] = feature_moments(Tensor::from({2, 2}, {0, 0, 2, 2}));
    EXPECT_LE(std::fabs(mu.data()[0] - 1.0), 1e-10);
    EXPECT_LE(std::fabs(mu.data()[1] - 1.0), 1e-10);
    EXPECT_LE(std::fabs(v.data()[0] - 1.0), 1e-10);
    EXPECT_LE(std::fabs(v.data()[1] - 1.0), 1e-10);
}

TEST(FeatureMoments, SingleRowZeroVariance) {
    auto [mu, v] = feature_moments(Tensor::from({1, 3}, {4, 5, 6}));
    EXPECT_EQ(v.data(), (std::vector<double>{0.0, 0.0, 0.0}));
}

TEST(FeatureMoments, EmptyRegionThrows) {
    EXPECT_THROW(feature_moments(Tensor::zeros({0, 3})), EmptyRegionError);
}

TEST(RepairLoss, SelfDistanceIsExactlyZero) {
    Rng rng(1);
    Tensor H = Tensor::randn({6, 4}, rng, 2.0, false);
    EXPECT_EQ(repair_loss(H, H).item(), 0.0);
}

TEST(RepairLoss, DirectFormulaEvaluation) {
    // mu terms cancel; std term = (sqrt(1 + 1e-8) - sqrt(1e-8))^2 per feature
    Tensor Hp = Tensor::from({2, 2}, {0, 0, 2, 2});
    Tensor Ho = Tensor::from({2, 2}, {1, 1, 1, 1});
    const double expect_std = std::sqrt(1.0 + 1e-8) - std::sqrt(1e-8);
    const double expect = expect_std * expect_std;
    EXPECT_LE(std::fabs(repair_loss(Hp, Ho).item() - expect), 1e-10);
    EXPECT_NEAR(repair_loss(Hp, Ho).item(), 1.0, 1e-3);
}

TEST(RepairLoss, GradientPassesFiniteDiff) {
    Rng rng(2);
    Tensor Hp = Tensor::randn({8, 4}, rng, 1.0, true);
    Tensor Ho = Tensor::randn({8, 4}, rng, 1.0, false);
    auto f = [&]() { return repair_loss(Hp, Ho); };
    auto report = finite_diff_check(f, {Hp}, 1e-5);
    EXPECT_LE(report.max_rel_error, 1e-5);
}

TEST(RepairLoss, FiniteDiffViaTheOracleOperation) {
    // the finite-difference oracle applied to the repair loss on random
    // 8x4 moments is itself a spec-tabulated case
    Rng rng(3);
    Tensor Hp = Tensor::randn({8, 4}, rng, 1.5, true);
    Tensor Ho = Tensor::randn({8, 4}, rng, 1.5, false);
    auto report = finite_diff_check([&]() { return repair_loss(Hp, Ho); }, {Hp}, 1e-5);
    EXPECT_LE(report.max_rel_error, 1e-6);
}

TEST(RepairLoss, NonNegativeAndZeroOnlyAtMatch) {
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor Hp = Tensor::randn({5, 3}, rng, 1.0, false);
        Tensor Ho = Tensor::randn({5, 3}, rng, 1.0, false);
        ASSERT_GE(repair_loss(Hp, Ho).item(), 0.0);
    }
}

TEST(RepairLoss, RowPermutationInvariant) {
    Rng rng(5);
    Tensor Hp = Tensor::randn({6, 4}, rng, 1.0, false);
    Tensor Ho = Tensor::randn({7, 4}, rng, 1.0, false);
    const double base = repair_loss(Hp, Ho).item();
    std::vector<std::size_t> pp = {3, 1, 5, 0, 4, 2};
    std::vector<std::size_t> po = {6, 2, 0, 5, 1, 4, 3};
    const double permuted = repair_loss(gather_rows(Hp, pp), gather_rows(Ho, po)).item();
    EXPECT_NEAR(base, permuted, 1e-12);
}

TEST(RepairLoss, MeanOnlyDropsStdTerm) {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor Hp = Tensor::randn({6, 4}, rng, 1.0, false);
        Tensor Ho = Tensor::randn({6, 4}, rng, 1.0, false);
        const double full = repair_loss(Hp, Ho, false).item();
        const double mean_only = repair_loss(Hp, Ho, true).item();
        auto [mu_p, v_p] = feature_moments(Hp);
        auto [mu_o, v_o] = feature_moments(Ho);
        Tensor ds = sub(sqrt_t(add_scalar(v_p, 1e-8)), sqrt_t(add_scalar(v_o, 1e-8)));
        const double std_term = mean_all(mul(ds, ds)).item();
        ASSERT_NEAR(full, mean_only + std_term, 1e-12);
    }
}

TEST(RepairLoss, WidthMismatchThrows) {
    EXPECT_THROW(repair_loss(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})), ShapeError);
}

TEST(Retention, CountingExample) {
    EXPECT_DOUBLE_EQ(retention_ratio(Tensor::from({4}, {1, 1, 0, 0})).item(), 0.5);
}

TEST(Retention, DenseAverageIsOne) {
    std::vector<double> per_layer(8, 1.0);
    EXPECT_DOUBLE_EQ(average_retention(per_layer), 1.0);
}

TEST(Retention, EightLayerToyExample) {
    // pruning at layers 2 and 5 with stage retentions 0.5 and 0.25:
    // r_bar = (2*1 + 3*0.5 + 3*0.25) / 8 = 0.53125
    auto per_layer = expand_stage_retention({2, 5}, 8, {0.5, 0.25});
    EXPECT_DOUBLE_EQ(average_retention(per_layer), 0.53125);
}

TEST(Retention, MatchesBruteForceRecount) {
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n_layers = 6 + rng.uniform_int(4);
        std::vector<std::size_t> placements;
        std::size_t p = 1 + rng.uniform_int(2);
        while (p < n_layers) {
            placements.push_back(p);
            p += 1 + rng.uniform_int(3);
        }
        if (placements.empty()) placements.push_back(1);
        std::vector<double> stage_vals;
        double cur = 1.0;
        for (std::size_t g = 0; g < placements.size(); ++g) {
            cur *= 0.2 + 0.8 * rng.uniform();
            stage_vals.push_back(cur);
        }
        auto per_layer = expand_stage_retention(placements, n_layers, stage_vals);
        // brute force: walk layers, carrying the nearest preceding stage value
        double acc = 0.0;
        std::size_t g = 0;
        double current = 1.0;
        for (std::size_t l = 0; l < n_layers; ++l) {
            while (g < placements.size() && placements[g] == l) current = stage_vals[g++];
            acc += current;
        }
        ASSERT_NEAR(average_retention(per_layer), acc / static_cast<double>(n_layers), 1e-12);
    }
}

TEST(SparsityLoss, TargetMet) {
    EXPECT_DOUBLE_EQ(sparsity_loss(Tensor::scalar(0.3), 0.3).item(), 0.0);
}

TEST(SparsityLoss, AbsoluteDifference) {
    EXPECT_LE(std::fabs(sparsity_loss(Tensor::scalar(0.4), 0.3).item() - 0.1), 1e-10);
}

TEST(SparsityLoss, GradientSignTracksSide) {
    for (double rb : {0.4, 0.2}) {
        Tensor r = Tensor::param({1}, {rb});
        Tensor loss = sparsity_loss(r, 0.3);
        r.zero_grad();
        backward(loss);
        EXPECT_EQ(r.grad()[0], rb > 0.3 ? 1.0 : -1.0);
    }
}

TEST(TotalLoss, ZeroComponents) {
    LossWeights w;
    EXPECT_DOUBLE_EQ(
        total_loss(Tensor::scalar(0), Tensor::scalar(0), Tensor::scalar(0), w).item(), 0.0);
}

TEST(TotalLoss, UnitComponentsWithDefaultWeights) {
    LossWeights w;  // 1.5 / 40 / 200
    const double v =
        total_loss(Tensor::scalar(1), Tensor::scalar(1), Tensor::scalar(1), w).item();
    EXPECT_DOUBLE_EQ(v, 241.5);
}

TEST(TotalLoss, WeightScalesGradientContribution) {
    Tensor task = Tensor::param({1}, {0.7});
    LossWeights w1{2.0, 1.0, 1.0}, w2{4.0, 1.0, 1.0};
    task.zero_grad();
    backward(total_loss(task, Tensor::scalar(0), Tensor::scalar(0), w1));
    const double g1 = task.grad()[0];
    task.zero_grad();
    backward(total_loss(task, Tensor::scalar(0), Tensor::scalar(0), w2));
    EXPECT_DOUBLE_EQ(task.grad()[0], 2.0 * g1);
}

TEST(TotalLoss, NonFiniteComponentNamed) {
    LossWeights w;
    Tensor bad = Tensor::scalar(std::numeric_limits<double>::quiet_NaN());
    try {
        total_loss(Tensor::scalar(0), bad, Tensor::scalar(0), w);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("repair"), std::string::npos);
    }
}

TEST(Schedules, EndpointsExact) {
    Schedules s;
    s.tau_start = 1.5;
    s.tau_end = 0.2;
    s.r_star_target = 0.33;
    s.r_star_warmup_frac = 0.3;
    s.lr0 = 5e-5;
    s.lr_min_factor = 0.1;
    EXPECT_DOUBLE_EQ(s.tau_at(0.0), 1.5);
    EXPECT_DOUBLE_EQ(s.tau_at(1.0), 0.2);
    EXPECT_DOUBLE_EQ(s.r_star_at(0.0), 1.0);
    EXPECT_DOUBLE_EQ(s.r_star_at(0.3), 0.33);
    EXPECT_DOUBLE_EQ(s.r_star_at(1.0), 0.33);
    EXPECT_DOUBLE_EQ(s.lr_at(0.0), 5e-5);
    EXPECT_NEAR(s.lr_at(1.0), 5e-6, 1e-18);
    // monotone non-increasing r*
    double prev = 2.0;
    for (int i = 0; i <= 100; ++i) {
        const double v = s.r_star_at(i / 100.0);
        ASSERT_LE(v, prev + 1e-15);
        prev = v;
    }
}
