#pragma once

// Delayed repair adapter. Pruning layers cache a compact context pair: a
// mask embedding (learnable query attending over keep-masked positional
// encodings) and a pruned-feature embedding (projected mean of the hidden
// states discarded at that layer). Repair sites average all cached contexts,
// fuse them with a per-row query projection, and emit a FiLM-modulated
// bottleneck correction that is added to answer rows only. With zero-
// initialized up-projection and FiLM maps the adapter is exactly the
// identity at initialization.

#include <cstddef>
#include <string>
#include <vector>

#include "rcp/config.hpp"
#include "rcp/errors.hpp"
#include "rcp/serialize.hpp"
#include "rcp/tensor.hpp"

namespace rcp {

// Shared by all repair sites; writes one (e_mask, e_pruned) pair per pruning
// layer, in depth order.
struct ContextEncoderParams {
    Tensor query;     // [1, d]
    Tensor w_mask;    // [d, d]
    Tensor w_pruned;  // [d, d]

    static ContextEncoderParams init(const RunConfig& cfg, Rng& rng) {
        const std::size_t d = cfg.d_model;
        const double ws = 1.0 / std::sqrt(static_cast<double>(d));
        ContextEncoderParams p;
        p.query = Tensor::randn({1, d}, rng, ws);
        p.w_mask = Tensor::randn({d, d}, rng, ws);
        p.w_pruned = Tensor::randn({d, d}, rng, ws);
        return p;
    }

    std::vector<Tensor> all_params() const { return {query, w_mask, w_pruned}; }

    void append_named(NamedTensors& out, const std::string& prefix) const {
        out.emplace_back(prefix + "query", query);
        out.emplace_back(prefix + "w_mask", w_mask);
        out.emplace_back(prefix + "w_pruned", w_pruned);
    }
};

struct AdapterSiteParams {
    Tensor w_query;  // [d, d]   QueryProj
    Tensor w_gamma;  // [d, d_b] zero at init
    Tensor w_beta;   // [d, d_b] zero at init
    Tensor w_down;   // [d, d_b]
    Tensor w_up;     // [d_b, d] zero at init -> identity mapping
    Tensor alpha;    // [1] residual gate, init 1.0

    static AdapterSiteParams init(const RunConfig& cfg, Rng& rng) {
        const std::size_t d = cfg.d_model, db = cfg.adapter_bottleneck_dim;
        const double ws = 1.0 / std::sqrt(static_cast<double>(d));
        AdapterSiteParams p;
        p.w_query = Tensor::randn({d, d}, rng, ws);
        p.w_gamma = Tensor::param({d, db}, std::vector<double>(d * db, 0.0));
        p.w_beta = Tensor::param({d, db}, std::vector<double>(d * db, 0.0));
        p.w_down = Tensor::randn({d, db}, rng, ws);
        p.w_up = Tensor::param({db, d}, std::vector<double>(db * d, 0.0));
        p.alpha = Tensor::param({1}, {1.0});
        return p;
    }

    std::vector<Tensor> all_params() const {
        return {w_query, w_gamma, w_beta, w_down, w_up, alpha};
    }

    void append_named(NamedTensors& out, const std::string& prefix) const {
        out.emplace_back(prefix + "w_query", w_query);
        out.emplace_back(prefix + "w_gamma", w_gamma);
        out.emplace_back(prefix + "w_beta", w_beta);
        out.emplace_back(prefix + "w_down", w_down);
        out.emplace_back(prefix + "w_up", w_up);
        out.emplace_back(prefix + "alpha", alpha);
    }
};

struct RepairContextEntry {
    Tensor e_mask;    // [B, d]
    Tensor e_pruned;  // [B, d]
    std::size_t source_layer = 0;
};

// --- single-example operations (batched forms live in model.hpp) -----------

// e_mask = proj(softmax(q . (m ⊙ P)^T) . (m ⊙ P)): zeroed rows still
// participate in the softmax, exactly as written.
// e_pruned = proj(sum_i (1-m_i) h_i / sum_i (1-m_i)), or zero when nothing
// was pruned.
inline std::pair<Tensor, Tensor> encode_context(const ContextEncoderParams& enc, const Tensor& m,
                                                const Tensor& P, const Tensor& h_vision) {
    const std::size_t N = m.size();
    if (P.dim(0) != N || h_vision.dim(0) != N)
        throw ShapeError("encode_context: mask length " + std::to_string(N) +
                         " does not match P " + shape_str(P.shape()) + " / h " +
                         shape_str(h_vision.shape()));
    const std::size_t d = P.dim(1);
    Tensor masked_pos = mul_bcast_last(P, reshape(m, {N, 1}));
    Tensor att = softmax_lastdim(matmul(enc.query, transpose_last2(masked_pos)));  // [1, N]
    Tensor e_mask = reshape(matmul(matmul(att, masked_pos), enc.w_mask), {d});

    std::vector<double> ones(N, 1.0);
    Tensor inverted = sub(Tensor::from({N}, ones), m);
    Tensor pooled = masked_row_mean(reshape(h_vision, {1, N, d}), reshape(inverted, {1, N}));
    Tensor e_pruned = reshape(matmul(pooled, enc.w_pruned), {d});
    return {e_mask, e_pruned};
}

// cond = mean over cached layers of (e_mask + e_pruned), broadcast to all
// rows, plus QueryProj(x).
inline Tensor build_conditioning(const AdapterSiteParams& site, const Tensor& x,
                                 const std::vector<RepairContextEntry>& contexts) {
    if (contexts.empty())
        throw ConfigError("build_conditioning: no cached pruning context (repair without pruning)");
    Tensor ctx = add(contexts[0].e_mask, contexts[0].e_pruned);  // [B, d]
    for (std::size_t i = 1; i < contexts.size(); ++i)
        ctx = add(ctx, add(contexts[i].e_mask, contexts[i].e_pruned));
    ctx = scale(ctx, 1.0 / static_cast<double>(contexts.size()));
    const std::size_t B = ctx.dim(0);
    const std::size_t L = x.dim(0) / B;
    return add(repeat_rows(ctx, L), matmul(x, site.w_query));
}

// Δh = alpha * Up(gamma ⊙ GELU(Down(x)) + beta), gamma = 1 + W_gamma cond,
// beta = W_beta cond, modulation in the bottleneck width.
inline Tensor film_correction(const AdapterSiteParams& site, const Tensor& x, const Tensor& cond) {
    Tensor gamma = add_scalar(matmul(cond, site.w_gamma), 1.0);
    Tensor beta = matmul(cond, site.w_beta);
    Tensor z = gelu(matmul(x, site.w_down));
    Tensor up = matmul(add(mul(gamma, z), beta), site.w_up);
    return mul_scalar_tensor(up, site.alpha);
}

// h_out = x + g ⊙ Δh; rows with g = 0 are bitwise copies of x.
inline Tensor apply_repair(const Tensor& x, const Tensor& delta, const std::vector<bool>& gate_rows) {
    return add_rows_where(x, delta, gate_rows);
}

}  // namespace rcp
