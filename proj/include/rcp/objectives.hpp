#pragma once

// Training objectives: moment-matching repair loss (normalized squared
// 2-Wasserstein distance between diagonal-Gaussian approximations), absolute
// sparsity loss on the layer-averaged retention, weighted total, and the
// temperature / target-retention / learning-rate schedules.

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "rcp/errors.hpp"
#include "rcp/tensor.hpp"

namespace rcp {

struct LossWeights {
    double lambda_task = 1.5;
    double lambda_repair = 40.0;
    double lambda_sparse = 200.0;
};

// Column mean and second central moment of H[T, D]; the variance is clamped
// to >= 0 before any square root downstream.
inline std::pair<Tensor, Tensor> feature_moments(const Tensor& H) {
    if (H.rank() != 2) throw ShapeError("feature_moments: expected [T, D], got " + shape_str(H.shape()));
    if (H.dim(0) == 0) throw EmptyRegionError("feature_moments: empty token region");
    Tensor mu = mean_rows(H);
    Tensor msq = mean_rows(mul(H, H));
    Tensor v = clamp_min(sub(msq, mul(mu, mu)), 0.0);
    return {mu, v};
}

// (1/D)||mu_p - mu_o||^2 + (1/D)||sqrt(v_p + 1e-8) - sqrt(v_o + 1e-8)||^2.
// The epsilon shift is applied to both operands, so repair_loss(H, H) == 0.
// The teacher side never receives gradient.
inline Tensor repair_loss(const Tensor& H_student, const Tensor& H_teacher,
                          bool mean_only = false) {
    if (H_student.dim(1) != H_teacher.dim(1))
        throw ShapeError("repair_loss: feature widths differ " + shape_str(H_student.shape()) +
                         " vs " + shape_str(H_teacher.shape()));
    Tensor teacher = H_teacher.requires_grad() ? stop_gradient(H_teacher) : H_teacher;
    auto [mu_p, v_p] = feature_moments(H_student);
    auto [mu_o, v_o] = feature_moments(teacher);
    Tensor dmu = sub(mu_p, mu_o);
    Tensor loss = mean_all(mul(dmu, dmu));
    if (!mean_only) {
        Tensor ds = sub(sqrt_t(add_scalar(v_p, 1e-8)), sqrt_t(add_scalar(v_o, 1e-8)));
        loss = add(loss, mean_all(mul(ds, ds)));
    }
    return loss;
}

// r_l for one layer's cumulative mask.
inline Tensor retention_ratio(const Tensor& cumulative_mask) {
    return mean_all(cumulative_mask);
}

// Expand per-stage retention values to all decoder layers: layers before the
// first pruning layer count 1, every other layer inherits the nearest
// preceding stage.
inline std::vector<double> expand_stage_retention(const std::vector<std::size_t>& placements,
                                                  std::size_t n_layers,
                                                  const std::vector<double>& stage_values) {
    if (placements.size() != stage_values.size())
        throw ShapeError("expand_stage_retention: placements/values size mismatch");
    std::vector<double> per_layer(n_layers, 1.0);
    for (std::size_t g = 0; g < placements.size(); ++g) {
        const std::size_t next = g + 1 < placements.size() ? placements[g + 1] : n_layers;
        for (std::size_t l = placements[g]; l < next; ++l) per_layer[l] = stage_values[g];
    }
    return per_layer;
}

inline double average_retention(const std::vector<double>& per_layer) {
    if (per_layer.empty()) throw EmptyRegionError("average_retention: no layers");
    double acc = 0.0;
    for (double v : per_layer) acc += v;
    return acc / static_cast<double>(per_layer.size());
}

// |r_bar - r_star| with subgradient 0 at equality.
inline Tensor sparsity_loss(const Tensor& r_bar, double r_star) {
    if (r_bar.size() != 1) throw ShapeError("sparsity_loss: r_bar must be scalar");
    return abs_t(add_scalar(r_bar, -r_star));
}

inline Tensor total_loss(const Tensor& task, const Tensor& repair, const Tensor& sparse,
                         const LossWeights& w) {
    check_finite(task, "task loss");
    check_finite(repair, "repair loss");
    check_finite(sparse, "sparsity loss");
    return add(add(scale(task, w.lambda_task), scale(repair, w.lambda_repair)),
               scale(sparse, w.lambda_sparse));
}

// Linear tau, linear-then-constant r*, cosine learning rate. Progress t is
// step/(total_steps-1) so both endpoints are met exactly.
struct Schedules {
    double tau_start = 1.5;
    double tau_end = 0.2;
    double r_star_target = 0.33;
    double r_star_warmup_frac = 0.3;
    double lr0 = 5e-5;
    double lr_min_factor = 0.1;

    static double progress(std::size_t step, std::size_t total_steps) {
        if (total_steps <= 1) return 0.0;
        return static_cast<double>(step) / static_cast<double>(total_steps - 1);
    }

    double tau_at(double t) const { return tau_start + (tau_end - tau_start) * t; }

    double r_star_at(double t) const {
        if (r_star_warmup_frac <= 0.0) return r_star_target;
        if (t >= r_star_warmup_frac) return r_star_target;
        return 1.0 + (r_star_target - 1.0) * (t / r_star_warmup_frac);
    }

    double lr_at(double t) const {
        const double lr_min = lr0 * lr_min_factor;
        return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(3.14159265358979323846 * t));
    }
};

}  // namespace rcp
