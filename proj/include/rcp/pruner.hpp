#pragma once

// Residual cross-attention pruner. Retention logits combine three streams:
// the backbone's own attention (log-space, centered over retained tokens),
// a question-conditioned cross-attention score from learnable pruning
// queries, and a per-token MLP score, plus a learnable bias. Masks are
// sampled with a Gumbel-Sigmoid relaxation and a straight-through estimator
// during training and thresholded deterministically at inference; the
// cumulative mask is the running product across pruning layers, so dropped
// tokens never reappear.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "rcp/config.hpp"
#include "rcp/errors.hpp"
#include "rcp/rng.hpp"
#include "rcp/serialize.hpp"
#include "rcp/tensor.hpp"

namespace rcp {

struct PrunerStageParams {
    Tensor queries;      // Q_p, [N_q, d]
    Tensor agg_weights;  // [N_q], softmax-normalized aggregation
    Tensor w_key;        // [d, d] key projection for the pruning queries
    Tensor w_proj, b_proj;  // d -> d_p
    Tensor w_mlp1, b_mlp1;  // d_p -> d_p
    Tensor w_mlp2, b_mlp2;  // d_p -> 1
    Tensor bias;         // [1], shifts the retention logit

    static PrunerStageParams init(const RunConfig& cfg, Rng& rng) {
        const std::size_t d = cfg.d_model, nq = cfg.pruner_n_queries, dp = cfg.pruner_proj_dim;
        const double ws = 1.0 / std::sqrt(static_cast<double>(d));
        const double ps = 1.0 / std::sqrt(static_cast<double>(dp));
        PrunerStageParams p;
        p.queries = Tensor::randn({nq, d}, rng, ws);
        p.agg_weights = Tensor::param({nq}, std::vector<double>(nq, 0.0));
        p.w_key = Tensor::randn({d, d}, rng, ws);
        p.w_proj = Tensor::randn({d, dp}, rng, ws);
        p.b_proj = Tensor::param({dp}, std::vector<double>(dp, 0.0));
        p.w_mlp1 = Tensor::randn({dp, dp}, rng, ps);
        p.b_mlp1 = Tensor::param({dp}, std::vector<double>(dp, 0.0));
        p.w_mlp2 = Tensor::randn({dp, 1}, rng, ps * 0.1);
        p.b_mlp2 = Tensor::param({1}, {0.0});
        p.bias = Tensor::param({1}, {cfg.pruner_bias_init});
        return p;
    }

    std::vector<Tensor> all_params() const {
        return {queries, agg_weights, w_key, w_proj, b_proj,
                w_mlp1, b_mlp1, w_mlp2, b_mlp2, bias};
    }

    void append_named(NamedTensors& out, const std::string& prefix) const {
        out.emplace_back(prefix + "queries", queries);
        out.emplace_back(prefix + "agg_weights", agg_weights);
        out.emplace_back(prefix + "w_key", w_key);
        out.emplace_back(prefix + "w_proj", w_proj);
        out.emplace_back(prefix + "b_proj", b_proj);
        out.emplace_back(prefix + "w_mlp1", w_mlp1);
        out.emplace_back(prefix + "b_mlp1", b_mlp1);
        out.emplace_back(prefix + "w_mlp2", w_mlp2);
        out.emplace_back(prefix + "b_mlp2", b_mlp2);
        out.emplace_back(prefix + "bias", bias);
    }
};

// --- single-example operations ---------------------------------------------

// Q_p' = Q_p + mean of the first q_effective question hidden states.
inline Tensor condition_queries(const Tensor& queries, const Tensor& question_hiddens,
                                std::size_t q_effective) {
    if (q_effective == 0) throw EmptyRegionError("condition_queries: q_effective is zero");
    if (question_hiddens.rank() != 2 || question_hiddens.dim(0) < q_effective)
        throw ShapeError("condition_queries: fewer question rows than q_effective");
    Tensor summary = mean_rows(slice_rows(question_hiddens, 0, q_effective));
    return add(queries, broadcast_rows(summary, queries.dim(0)));
}

// S_a: softmax attention rows of the conditioned queries over the vision
// keys, aggregated by softmax-normalized learnable weights. During training,
// query-wise dropout removes each query with probability `dropout` and
// renormalizes the surviving weights; if every query is dropped the
// undropped weights are used for that pass.
inline Tensor cross_attention_score(const Tensor& conditioned_queries, const Tensor& k_vision,
                                    const Tensor& agg_weights, double dropout, bool training,
                                    Rng* rng) {
    const std::size_t nq = conditioned_queries.dim(0);
    const std::size_t d = conditioned_queries.dim(1);
    if (k_vision.dim(1) != d)
        throw ShapeError("cross_attention_score: key width " + shape_str(k_vision.shape()) +
                         " does not match query width " + shape_str(conditioned_queries.shape()));
    Tensor rows = softmax_lastdim(matmul(conditioned_queries, transpose_last2(k_vision),
                                         1.0 / std::sqrt(static_cast<double>(d))));  // [nq, N]
    Tensor alpha = softmax_lastdim(agg_weights);  // [nq]
    if (training && dropout > 0.0) {
        std::vector<double> keep(nq, 1.0);
        bool any = false;
        for (std::size_t i = 0; i < nq; ++i) {
            keep[i] = rng->bernoulli(dropout) ? 0.0 : 1.0;
            any = any || keep[i] == 1.0;
        }
        if (any) {
            Tensor kept = mul(alpha, Tensor::from({nq}, keep));
            alpha = div_bcast_last(reshape(kept, {1, nq}), sum_lastdim(reshape(kept, {1, nq})));
            alpha = reshape(alpha, {nq});
        }
    }
    return reshape(matmul(reshape(alpha, {1, nq}), rows), {k_vision.dim(0)});
}

// S_t: per-token scalar from proj + two-layer GELU perceptron.
inline Tensor token_score(const PrunerStageParams& p, const Tensor& h_vision) {
    Tensor z = linear(h_vision, p.w_proj, &p.b_proj);
    Tensor h = gelu(linear(z, p.w_mlp1, &p.b_mlp1));
    return reshape(linear(h, p.w_mlp2, &p.b_mlp2), {h_vision.dim(0)});
}

// A_i = log a_i - masked mean of log a over retained tokens.
inline Tensor intrinsic_score(const Tensor& attention, const Tensor& cumulative_mask) {
    detail::check_same_shape(attention, cumulative_mask, "intrinsic_score");
    double retained = 0.0;
    for (double v : cumulative_mask.data()) retained += v;
    if (retained <= 0.0)
        throw NumericError("intrinsic_score: no retained tokens under the cumulative mask");
    Tensor loga = log_t(clamp_min(attention, 1e-9));
    const std::size_t n = attention.size();
    Tensor num = sum_lastdim(reshape(mul(cumulative_mask, loga), {1, n}));
    Tensor den = sum_lastdim(reshape(cumulative_mask, {1, n}));
    Tensor mean = reshape(div(num, den), {1});
    return reshape(sub_bcast_last(reshape(loga, {1, n}), reshape(mean, {1, 1})), {n});
}

// logits = A + S_a + S_t + bias; positions already dropped get the -inf
// sentinel so they can never re-enter.
inline Tensor combine_logits(const Tensor& A, const Tensor& S_a, const Tensor& S_t,
                             const Tensor& bias, const Tensor& cumulative_mask) {
    Tensor logits = add_scalar_tensor(add(add(A, S_a), S_t), bias);
    return add(logits, keep_to_additive(cumulative_mask, false));
}

// Training mask: sigmoid((logits + eps)/tau) with logistic noise, hard
// forward through the straight-through estimator.
inline Tensor sample_mask_train(const Tensor& logits, double tau, Rng& rng) {
    if (tau <= 0.0) throw NumericError("sample_mask_train: tau must be positive");
    Tensor eps = logistic_noise(rng, logits.shape());
    Tensor y_soft = sigmoid(scale(add(logits, eps), 1.0 / tau));
    return straight_through(y_soft);
}

// Inference mask: deterministic threshold, no noise, no gradient.
inline Tensor threshold_mask_infer(const Tensor& logits, double tau) {
    if (tau <= 0.0) throw NumericError("threshold_mask_infer: tau must be positive");
    return threshold_gt(sigmoid(scale(stop_gradient(logits), 1.0 / tau)), 0.5);
}

inline Tensor update_cumulative(const Tensor& previous, const Tensor& layer_mask) {
    return mul(previous, layer_mask);
}

// --- Top-K replacement -------------------------------------------------------

// Per-stage keep fraction f such that the layer-weighted average retention of
// the cumulative budget f, f^2, ... matches the target; bisection, clamped to
// the feasible range.
inline double solve_topk_stage_fraction(const std::vector<std::size_t>& placements,
                                        std::size_t n_layers, double target) {
    if (placements.empty()) return 1.0;
    auto rbar = [&](double f) {
        double acc = static_cast<double>(placements.front());  // layers before stage 1
        double cum = 1.0;
        for (std::size_t g = 0; g < placements.size(); ++g) {
            cum *= f;
            const std::size_t next = g + 1 < placements.size() ? placements[g + 1] : n_layers;
            acc += static_cast<double>(next - placements[g]) * cum;
        }
        return acc / static_cast<double>(n_layers);
    };
    if (rbar(0.0) >= target) return 0.0;
    if (rbar(1.0) <= target) return 1.0;
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (rbar(mid) < target ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

// Keep the `keep_count` highest-scoring currently-alive tokens; ties break
// toward the lower index. Returns a full-length 0/1 vector.
inline std::vector<double> topk_keep_mask(const std::vector<double>& scores,
                                          const std::vector<double>& alive,
                                          std::size_t keep_count) {
    std::vector<std::size_t> alive_idx;
    for (std::size_t i = 0; i < alive.size(); ++i)
        if (alive[i] > 0.5) alive_idx.push_back(i);
    keep_count = std::min(keep_count, alive_idx.size());
    std::stable_sort(alive_idx.begin(), alive_idx.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    std::vector<double> keep(alive.size(), 0.0);
    for (std::size_t i = 0; i < keep_count; ++i) keep[alive_idx[i]] = 1.0;
    return keep;
}

}  // namespace rcp
