#pragma once

// Full model wiring: frozen backbone + pruning stages + repair sites.
//
// Three forward modes share one code path where possible:
//   teacher_full:     all tokens, no pruning, no repair
//   student_masked:   fixed length L, pruned vision keys masked with -inf
//                     (training path; differentiable with hard-STE or soft
//                     relaxed masks)
//   student_gathered: pruned vision rows physically removed (inference path,
//                     batch size 1)
//
// Masked and gathered forwards are arranged to agree bitwise on every
// surviving row: pruned keys are skipped rather than added as zeros, the
// pruner's own cross-attention softmax excludes dead keys, and position
// embeddings always use original sequence positions.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "rcp/backbone.hpp"
#include "rcp/config.hpp"
#include "rcp/errors.hpp"
#include "rcp/layout.hpp"
#include "rcp/objectives.hpp"
#include "rcp/pruner.hpp"
#include "rcp/repair.hpp"
#include "rcp/rng.hpp"
#include "rcp/serialize.hpp"
#include "rcp/synthetic.hpp"
#include "rcp/tensor.hpp"

namespace rcp {

struct PluginParams {
    std::vector<PrunerStageParams> pruners;  // one per pruning placement (learned kind)
    ContextEncoderParams encoder;            // shared context encoder (adapter enabled)
    std::vector<AdapterSiteParams> sites;    // one per adapter placement
    bool has_pruner_params = false;
    bool has_adapter = false;

    static PluginParams init(const RunConfig& cfg, Rng& rng) {
        PluginParams p;
        p.has_pruner_params = cfg.pruner_kind == PrunerKind::learned;
        if (p.has_pruner_params)
            for (std::size_t i = 0; i < cfg.pruner_placements.size(); ++i)
                p.pruners.push_back(PrunerStageParams::init(cfg, rng));
        p.has_adapter = cfg.adapter_enabled && !cfg.adapter_placements.empty();
        if (p.has_adapter) {
            p.encoder = ContextEncoderParams::init(cfg, rng);
            for (std::size_t i = 0; i < cfg.adapter_placements.size(); ++i)
                p.sites.push_back(AdapterSiteParams::init(cfg, rng));
        }
        return p;
    }

    std::vector<Tensor> all_params() const {
        std::vector<Tensor> out;
        for (const auto& p : pruners)
            for (const Tensor& t : p.all_params()) out.push_back(t);
        if (has_adapter) {
            for (const Tensor& t : encoder.all_params()) out.push_back(t);
            for (const auto& s : sites)
                for (const Tensor& t : s.all_params()) out.push_back(t);
        }
        return out;
    }

    NamedTensors named() const {
        NamedTensors out;
        for (std::size_t i = 0; i < pruners.size(); ++i)
            pruners[i].append_named(out, "pruner" + std::to_string(i) + ".");
        if (has_adapter) {
            encoder.append_named(out, "encoder.");
            for (std::size_t i = 0; i < sites.size(); ++i)
                sites[i].append_named(out, "site" + std::to_string(i) + ".");
        }
        return out;
    }

    static PluginParams from_named(const NamedTensors& named, const RunConfig& cfg) {
        // regenerate the layout, then splice in stored values as parameters
        Rng dummy(0);
        PluginParams p = init(cfg, dummy);
        NamedTensors expected = p.named();
        if (expected.size() != named.size())
            throw IoError("plug-in checkpoint: expected " + std::to_string(expected.size()) +
                          " tensors, found " + std::to_string(named.size()));
        std::size_t idx = 0;
        auto take = [&](Tensor& dst, const std::string& want) {
            if (named[idx].first != want)
                throw IoError("plug-in checkpoint: expected tensor '" + want + "', found '" +
                              named[idx].first + "'");
            if (named[idx].second.shape() != dst.shape())
                throw IoError("plug-in checkpoint: shape mismatch on '" + want + "'");
            dst = Tensor::param(named[idx].second.shape(), named[idx].second.data());
            ++idx;
        };
        for (std::size_t i = 0; i < p.pruners.size(); ++i) {
            auto& s = p.pruners[i];
            const std::string pre = "pruner" + std::to_string(i) + ".";
            take(s.queries, pre + "queries");
            take(s.agg_weights, pre + "agg_weights");
            take(s.w_key, pre + "w_key");
            take(s.w_proj, pre + "w_proj");
            take(s.b_proj, pre + "b_proj");
            take(s.w_mlp1, pre + "w_mlp1");
            take(s.b_mlp1, pre + "b_mlp1");
            take(s.w_mlp2, pre + "w_mlp2");
            take(s.b_mlp2, pre + "b_mlp2");
            take(s.bias, pre + "bias");
        }
        if (p.has_adapter) {
            take(p.encoder.query, "encoder.query");
            take(p.encoder.w_mask, "encoder.w_mask");
            take(p.encoder.w_pruned, "encoder.w_pruned");
            for (std::size_t i = 0; i < p.sites.size(); ++i) {
                auto& s = p.sites[i];
                const std::string pre = "site" + std::to_string(i) + ".";
                take(s.w_query, pre + "w_query");
                take(s.w_gamma, pre + "w_gamma");
                take(s.w_beta, pre + "w_beta");
                take(s.w_down, pre + "w_down");
                take(s.w_up, pre + "w_up");
                take(s.alpha, pre + "alpha");
            }
        }
        return p;
    }
};

enum class ForwardMode { teacher_full, student_masked, student_gathered };
enum class MaskPolicy { train_hard, train_soft, infer };

struct ForwardOptions {
    ForwardMode mode = ForwardMode::teacher_full;
    MaskPolicy policy = MaskPolicy::infer;
    double tau = 1.0;
    const Rng* run_rng = nullptr;  // base stream; noise/dropout substreams derive from it
    std::uint64_t step = 0;
    bool query_dropout = false;
    bool capture_answer_rows = false;
    bool capture_hidden = false;  // full per-layer hidden states
    // Externally supplied per-stage layer masks over the full vision length
    // (batch size 1): replaces the pruner's own decisions.
    const std::vector<std::vector<double>>* forced_stage_masks = nullptr;
};

struct ForwardResult {
    Tensor logits;  // [B*L_present, vocab]
    std::vector<Tensor> stage_cum;             // cumulative mask after each stage, [B, N] full length
    std::vector<Tensor> stage_layer_masks;     // per-stage layer mask m^(l), [B, N]
    Tensor r_bar;                              // [1], batch-mean layer-averaged retention
    std::vector<Tensor> layer_answer_rows;     // per decoder layer, [B*n_answer, d]
    std::vector<Tensor> layer_hidden;          // per decoder layer, [B*L_present, d]
    std::vector<RepairContextEntry> contexts;  // cached pruning contexts
    std::vector<std::size_t> kept_final;       // gathered mode: surviving vision indices
    std::size_t present_L = 0;
    std::size_t present_vision = 0;
};

struct ModelInput {
    std::size_t B = 0;
    std::vector<std::size_t> token_ids;       // B * L
    Tensor vision;                            // [B*N, d_patch]
    std::vector<std::size_t> q_eff;           // per example
    std::vector<std::size_t> answer_targets;  // B * n_answer
};

inline ModelInput make_model_input(const RunConfig& cfg,
                                   const std::vector<SyntheticExample>& examples,
                                   bool teacher_force_answers = true) {
    ModelInput in;
    in.B = examples.size();
    const std::size_t L = cfg.seq_len(), N = cfg.n_vision, dp = cfg.d_patch();
    in.token_ids.reserve(in.B * L);
    std::vector<double> vis(in.B * N * dp);
    for (std::size_t b = 0; b < in.B; ++b) {
        const auto& ex = examples[b];
        for (std::size_t l = 0; l < L; ++l) {
            std::size_t id = ex.tokens[l];
            if (!teacher_force_answers && l >= L - cfg.n_answer) id = kTokPad;
            in.token_ids.push_back(id);
        }
        std::copy(ex.vision.begin(), ex.vision.end(), vis.begin() + b * N * dp);
        in.q_eff.push_back(ex.q_effective);
        for (std::size_t j = 0; j < cfg.n_answer; ++j) in.answer_targets.push_back(ex.answer[j]);
    }
    in.vision = Tensor::from({in.B * N, dp}, std::move(vis));
    return in;
}

class RcpModel {
public:
    RunConfig cfg;
    BackboneParams backbone;
    PluginParams plugin;

    RcpModel(RunConfig cfg_, BackboneParams backbone_, PluginParams plugin_)
        : cfg(std::move(cfg_)), backbone(std::move(backbone_)), plugin(std::move(plugin_)) {}

    std::vector<Tensor> trainable_params() const { return plugin.all_params(); }

    ForwardResult forward(const ModelInput& in, const ForwardOptions& opt) const {
        if (opt.mode == ForwardMode::student_gathered) {
            if (in.B != 1)
                throw ConfigError("student_gathered forward requires batch size 1");
            return forward_gathered(in, opt);
        }
        return forward_masked(in, opt);
    }

private:
    struct StageOutcome {
        Tensor layer_mask;  // [B, Nv_present]
        Tensor new_cum;     // [B, N] full length (masked mode)
    };

    static std::vector<std::size_t> iota(std::size_t n, std::size_t start = 0) {
        std::vector<std::size_t> v(n);
        for (std::size_t i = 0; i < n; ++i) v[i] = start + i;
        return v;
    }

    Tensor vision_pos_table() const {
        return gather_rows(backbone.pos, iota(cfg.n_vision, cfg.n_system));
    }

    // Retention logits for the present vision tokens. `alive_add` is the
    // additive form of the alive mask over present keys (may be null when
    // every present token is alive).
    Tensor stage_logits(const PrunerStageParams& sp, const Tensor& x, std::size_t B,
                        std::size_t L, const SequenceLayout& lay,
                        const std::vector<std::size_t>& q_eff, const Tensor& prev_probs,
                        const Tensor& alive, const Tensor* alive_add, bool soft,
                        const Tensor* dropout_keep = nullptr) const {
        const std::size_t Nv = lay.n_vision, d = cfg.d_model;

        // intrinsic stream: centered log attention over retained tokens
        Tensor a = aggregate_vision_attention(prev_probs, lay, q_eff);
        Tensor loga = log_t(clamp_min(a, 1e-9));
        Tensor num = sum_lastdim(mul(alive, loga));
        Tensor den = clamp_min(sum_lastdim(alive), 1e-12);
        Tensor A = sub_bcast_last(loga, div(num, den));

        // cross-attention stream: question-conditioned pruning queries
        std::vector<std::size_t> qrow_idx(B * lay.n_question);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < lay.n_question; ++j)
                qrow_idx[b * lay.n_question + j] = b * L + lay.question_start() + j;
        Tensor qrows = reshape(gather_rows(x, qrow_idx), {B, lay.n_question, d});
        std::vector<double> qw(B * lay.n_question, 0.0);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < q_eff[b]; ++j) qw[b * lay.n_question + j] = 1.0;
        Tensor qsum = masked_row_mean(qrows, Tensor::from({B, lay.n_question}, qw));

        const std::size_t nq = cfg.pruner_n_queries;
        Tensor qp = reshape(add(tile_rows(sp.queries, B), repeat_rows(qsum, nq)), {B, nq, d});

        std::vector<std::size_t> vrow_idx(B * Nv);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < Nv; ++i)
                vrow_idx[b * Nv + i] = b * L + lay.vision_start() + i;
        Tensor h_v = gather_rows(x, vrow_idx);  // [B*Nv, d]
        Tensor k_v = reshape(matmul(h_v, sp.w_key), {B, Nv, d});
        Tensor scores = matmul(qp, transpose_last2(k_v), 1.0 / std::sqrt(static_cast<double>(d)));
        // dead keys are excluded from the pruning softmax so masked and
        // gathered scoring agree; an example with no alive tokens left gets an
        // unmasked softmax instead (its logits all carry the -inf sentinel, so
        // the scores cannot matter)
        const Tensor* pruner_add = alive_add;
        Tensor guarded;
        if (alive_add) {
            std::vector<double> bump(alive.size(), 0.0);
            bool need_guard = false;
            for (std::size_t b = 0; b < B; ++b) {
                bool any = false;
                for (std::size_t i = 0; i < Nv; ++i) any = any || alive.data()[b * Nv + i] != 0.0;
                if (!any) {
                    need_guard = true;
                    for (std::size_t i = 0; i < Nv; ++i) bump[b * Nv + i] = 1.0;
                }
            }
            if (need_guard) {
                guarded = keep_to_additive(add(alive, Tensor::from({B, Nv}, bump)), soft);
                pruner_add = &guarded;
            }
        }
        Tensor probs4 = attention_softmax(reshape(scores, {B, nq, 1, Nv}), {0},
                                          std::vector<std::size_t>(Nv, 0), pruner_add, 0);
        Tensor rows = reshape(probs4, {B, nq, Nv});

        Tensor alpha = softmax_lastdim(sp.agg_weights);
        Tensor alphaB = broadcast_rows(alpha, B);  // [B, nq]
        if (dropout_keep) {
            Tensor kept = mul(alphaB, *dropout_keep);
            alphaB = div_bcast_last(kept, sum_lastdim(kept));
        }
        Tensor s_a = reshape(matmul(reshape(alphaB, {B, 1, nq}), rows), {B, Nv});

        // per-token stream
        Tensor z = linear(h_v, sp.w_proj, &sp.b_proj);
        Tensor s_t = reshape(linear(gelu(linear(z, sp.w_mlp1, &sp.b_mlp1)), sp.w_mlp2, &sp.b_mlp2),
                             {B, Nv});

        Tensor logits = add_scalar_tensor(add(add(A, s_a), s_t), sp.bias);
        if (alive_add) logits = add(logits, keep_to_additive(alive, soft));
        return logits;
    }

    // Per-(example, query) dropout keep matrix for one stage; guarantees at
    // least one surviving query per example.
    Tensor draw_dropout_keep(const ForwardOptions& opt, std::size_t layer, std::size_t B) const {
        Rng rng = opt.run_rng->substream(StreamPurpose::query_dropout, opt.step, layer);
        const std::size_t nq = cfg.pruner_n_queries;
        std::vector<double> keep(B * nq, 1.0);
        for (std::size_t b = 0; b < B; ++b) {
            bool any = false;
            for (std::size_t q = 0; q < nq; ++q) {
                keep[b * nq + q] = rng.bernoulli(cfg.pruner_query_dropout) ? 0.0 : 1.0;
                any = any || keep[b * nq + q] == 1.0;
            }
            if (!any)
                for (std::size_t q = 0; q < nq; ++q) keep[b * nq + q] = 1.0;
        }
        return Tensor::from({B, nq}, keep);
    }

    Tensor stage_mask(const Tensor& logits, const ForwardOptions& opt, std::size_t layer) const {
        switch (opt.policy) {
            case MaskPolicy::train_hard: {
                Rng rng = opt.run_rng->substream(StreamPurpose::logistic_noise, opt.step, layer);
                Tensor eps = logistic_noise(rng, logits.shape());
                return straight_through(sigmoid(scale(add(logits, eps), 1.0 / opt.tau)));
            }
            case MaskPolicy::train_soft: {
                Rng rng = opt.run_rng->substream(StreamPurpose::logistic_noise, opt.step, layer);
                Tensor eps = logistic_noise(rng, logits.shape());
                return sigmoid(scale(add(logits, eps), 1.0 / opt.tau));
            }
            case MaskPolicy::infer:
                return threshold_gt(sigmoid(scale(stop_gradient(logits), 1.0 / opt.tau)), 0.5);
        }
        throw Error("unreachable");
    }

    // e_mask from the full-length updated mask, e_pruned from the tokens
    // dropped at this stage (weights restrict to previously-alive rows).
    RepairContextEntry encode_stage_context(const Tensor& full_new_cum, const Tensor& h_v3,
                                            const Tensor& pruned_weights,
                                            std::size_t layer) const {
        const std::size_t B = full_new_cum.dim(0), N = cfg.n_vision, d = cfg.d_model;
        Tensor p3 = reshape(tile_rows(vision_pos_table(), B), {B, N, d});
        Tensor mp = mul_bcast_last(p3, reshape(full_new_cum, {B, N, 1}));
        Tensor q3 = reshape(tile_rows(plugin.encoder.query, B), {B, 1, d});
        Tensor att = softmax_lastdim(matmul(q3, transpose_last2(mp)));
        Tensor e_mask = matmul(reshape(matmul(att, mp), {B, d}), plugin.encoder.w_mask);
        Tensor pooled = masked_row_mean(h_v3, pruned_weights);
        Tensor e_pruned = matmul(pooled, plugin.encoder.w_pruned);
        return {e_mask, e_pruned, layer};
    }

    Tensor apply_adapter(const AdapterSiteParams& site, const Tensor& x,
                         const std::vector<RepairContextEntry>& contexts,
                         const std::vector<bool>& gate_rows) const {
        Tensor cond = build_conditioning(site, x, contexts);
        Tensor delta = film_correction(site, x, cond);
        return apply_repair(x, delta, gate_rows);
    }

    // Per-example layer-averaged retention: layers before the first pruning
    // layer count 1, each stage's cumulative mask covers the layers up to the
    // next stage. Returned as the batch mean.
    Tensor batch_r_bar(const std::vector<Tensor>& stage_cum) const {
        const auto& pl = cfg.pruner_placements;
        const double n_layers = static_cast<double>(cfg.n_layers);
        Tensor per_ex;  // [B, 1]
        for (std::size_t g = 0; g < pl.size(); ++g) {
            const std::size_t next = g + 1 < pl.size() ? pl[g + 1] : cfg.n_layers;
            const double w = static_cast<double>(next - pl[g]);
            Tensor term = scale(mean_lastdim(stage_cum[g]), w / n_layers);
            per_ex = g == 0 ? term : add(per_ex, term);
        }
        per_ex = add_scalar(per_ex, static_cast<double>(pl.front()) / n_layers);
        return mean_all(per_ex);
    }

    ForwardResult forward_masked(const ModelInput& in, const ForwardOptions& opt) const {
        const std::size_t B = in.B, L = cfg.seq_len(), N = cfg.n_vision;
        const bool is_student = opt.mode == ForwardMode::student_masked;
        const bool soft = opt.policy == MaskPolicy::train_soft;

        SequenceBatch sb;
        sb.B = B;
        sb.L = L;
        sb.token_ids = in.token_ids;
        sb.vision = in.vision;
        sb.n_vision_present = N;
        sb.positions = iota(L);
        sb.layout = layout_from_config(cfg, 1);
        sb.q_effective = in.q_eff;
        SequenceLayout lay = sb.layout;

        Tensor x = embed_sequence(backbone, sb);
        Tensor prev_probs;
        Tensor alive = Tensor::from({B, N}, std::vector<double>(B * N, 1.0));
        Tensor alive_add;
        bool have_mask = false;

        ForwardResult res;
        res.present_L = L;
        res.present_vision = N;

        std::vector<std::size_t> answer_idx(B * cfg.n_answer);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < cfg.n_answer; ++j)
                answer_idx[b * cfg.n_answer + j] = b * L + lay.answer_start() + j;
        std::vector<bool> gate_rows;
        if (is_student && plugin.has_adapter) {
            RegionGate gate = build_gate(layout_from_config(cfg, 1));
            gate_rows = gate_as_row_mask(gate, B);
        }

        const double topk_fraction =
            cfg.pruner_kind == PrunerKind::topk
                ? solve_topk_stage_fraction(cfg.pruner_placements, cfg.n_layers,
                                            cfg.target_retention)
                : 1.0;

        std::size_t stage = 0, site = 0;
        for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
            if (is_student && stage < cfg.pruner_placements.size() &&
                cfg.pruner_placements[stage] == layer) {
                std::vector<std::size_t> vrow_idx(B * N);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t i = 0; i < N; ++i)
                        vrow_idx[b * N + i] = b * L + lay.vision_start() + i;

                Tensor layer_mask;
                if (opt.forced_stage_masks) {
                    if (B != 1)
                        throw ConfigError("forced stage masks require batch size 1");
                    if (opt.forced_stage_masks->size() <= stage ||
                        (*opt.forced_stage_masks)[stage].size() != N)
                        throw ShapeError("forced stage mask length does not match n_vision");
                    layer_mask = Tensor::from({1, N}, (*opt.forced_stage_masks)[stage]);
                } else if (cfg.pruner_kind == PrunerKind::topk) {
                    Tensor a = aggregate_vision_attention(prev_probs, lay, in.q_eff);
                    std::vector<double> mvals(B * N, 0.0);
                    for (std::size_t b = 0; b < B; ++b) {
                        std::vector<double> scores(a.data().begin() + b * N,
                                                   a.data().begin() + (b + 1) * N);
                        std::vector<double> alive_b(alive.data().begin() + b * N,
                                                    alive.data().begin() + (b + 1) * N);
                        const double frac = std::pow(topk_fraction, static_cast<double>(stage + 1));
                        const auto keep_count = static_cast<std::size_t>(
                            std::llround(frac * static_cast<double>(N)));
                        std::vector<double> keep = topk_keep_mask(scores, alive_b, keep_count);
                        std::copy(keep.begin(), keep.end(), mvals.begin() + b * N);
                    }
                    layer_mask = Tensor::from({B, N}, mvals);
                } else {
                    Tensor dropout_keep;
                    const bool use_dropout = opt.query_dropout && cfg.pruner_query_dropout > 0.0;
                    if (use_dropout) dropout_keep = draw_dropout_keep(opt, layer, B);
                    Tensor logits = stage_logits(plugin.pruners[stage], x, B, L, lay, in.q_eff,
                                                 prev_probs, alive,
                                                 have_mask ? &alive_add : nullptr, soft,
                                                 use_dropout ? &dropout_keep : nullptr);
                    layer_mask = stage_mask(logits, opt, layer);
                }

                Tensor new_cum = update_cumulative(alive, layer_mask);
                if (plugin.has_adapter) {
                    Tensor ones_bn = Tensor::from({B, N}, std::vector<double>(B * N, 1.0));
                    Tensor pruned_w = mul(alive, sub(ones_bn, layer_mask));
                    Tensor h_v3 = reshape(gather_rows(x, vrow_idx), {B, N, cfg.d_model});
                    res.contexts.push_back(
                        encode_stage_context(new_cum, h_v3, pruned_w, layer));
                }
                alive = new_cum;
                alive_add = keep_to_additive(alive, soft);
                have_mask = true;
                res.stage_cum.push_back(alive);
                res.stage_layer_masks.push_back(layer_mask);
                ++stage;
            }

            DecoderLayerOut out =
                decoder_layer(backbone.layers[layer], x, B, L, cfg.n_heads, sb.positions,
                              have_mask ? &alive_add : nullptr, lay.vision_start());
            x = out.x;
            prev_probs = out.probs;

            if (is_student && plugin.has_adapter && site < cfg.adapter_placements.size() &&
                cfg.adapter_placements[site] == layer) {
                x = apply_adapter(plugin.sites[site], x, res.contexts, gate_rows);
                ++site;
            }

            if (opt.capture_answer_rows)
                res.layer_answer_rows.push_back(gather_rows(x, answer_idx));
            if (opt.capture_hidden) res.layer_hidden.push_back(x);
        }

        res.logits = output_logits(backbone, x);
        if (!res.stage_cum.empty()) res.r_bar = batch_r_bar(res.stage_cum);
        return res;
    }

    ForwardResult forward_gathered(const ModelInput& in, const ForwardOptions& opt) const {
        const std::size_t N = cfg.n_vision, d = cfg.d_model, dp = cfg.d_patch();
        if (opt.policy != MaskPolicy::infer)
            throw ConfigError("student_gathered forward is an inference path");

        std::vector<std::size_t> present = iota(N);  // original vision indices
        std::vector<double> m_full(N, 1.0);

        auto build_batch = [&](const std::vector<std::size_t>& pres) {
            SequenceBatch sb;
            sb.B = 1;
            const std::size_t nv = pres.size();
            sb.L = cfg.n_system + nv + cfg.n_question + cfg.n_answer;
            sb.layout = SequenceLayout{cfg.n_system, nv, cfg.n_question, in.q_eff[0], cfg.n_answer};
            sb.q_effective = in.q_eff;
            sb.n_vision_present = nv;
            sb.token_ids.reserve(sb.L);
            sb.positions.reserve(sb.L);
            const std::size_t L0 = cfg.seq_len();
            for (std::size_t i = 0; i < cfg.n_system; ++i) {
                sb.token_ids.push_back(in.token_ids[i]);
                sb.positions.push_back(i);
            }
            std::vector<double> vis(nv * dp);
            for (std::size_t i = 0; i < nv; ++i) {
                sb.token_ids.push_back(kTokPad);
                sb.positions.push_back(cfg.n_system + pres[i]);
                std::copy(in.vision.data().begin() + pres[i] * dp,
                          in.vision.data().begin() + (pres[i] + 1) * dp, vis.begin() + i * dp);
            }
            sb.vision = Tensor::from({nv, dp}, std::move(vis));
            for (std::size_t i = cfg.n_system + N; i < L0; ++i) {
                sb.token_ids.push_back(in.token_ids[i]);
                sb.positions.push_back(i);
            }
            return sb;
        };

        SequenceBatch sb = build_batch(present);
        Tensor x = embed_sequence(backbone, sb);
        Tensor prev_probs;
        ForwardResult res;

        std::size_t stage = 0, site = 0;
        const double topk_fraction =
            cfg.pruner_kind == PrunerKind::topk
                ? solve_topk_stage_fraction(cfg.pruner_placements, cfg.n_layers,
                                            cfg.target_retention)
                : 1.0;

        for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
            if (stage < cfg.pruner_placements.size() && cfg.pruner_placements[stage] == layer) {
                const std::size_t nv = present.size();
                Tensor layer_mask;  // [1, nv] over present tokens
                if (nv > 0) {
                    if (opt.forced_stage_masks) {
                        if (opt.forced_stage_masks->size() <= stage ||
                            (*opt.forced_stage_masks)[stage].size() != N)
                            throw ShapeError("forced stage mask length does not match n_vision");
                        std::vector<double> mv(nv);
                        for (std::size_t i = 0; i < nv; ++i)
                            mv[i] = (*opt.forced_stage_masks)[stage][present[i]] > 0.5 ? 1.0 : 0.0;
                        layer_mask = Tensor::from({1, nv}, mv);
                    } else if (cfg.pruner_kind == PrunerKind::topk) {
                        Tensor a = aggregate_vision_attention(prev_probs, sb.layout, in.q_eff);
                        std::vector<double> alive_b(nv, 1.0);
                        const double frac =
                            std::pow(topk_fraction, static_cast<double>(stage + 1));
                        const auto keep_count = static_cast<std::size_t>(
                            std::llround(frac * static_cast<double>(N)));
                        layer_mask = Tensor::from(
                            {1, nv},
                            topk_keep_mask(std::vector<double>(a.data()), alive_b, keep_count));
                    } else {
                        Tensor alive = Tensor::from({1, nv}, std::vector<double>(nv, 1.0));
                        Tensor logits =
                            stage_logits(plugin.pruners[stage], x, 1, sb.L, sb.layout, in.q_eff,
                                         prev_probs, alive, nullptr, false);
                        layer_mask = stage_mask(logits, opt, layer);
                    }
                } else {
                    layer_mask = Tensor::zeros({1, 0});
                }

                // full-length cumulative update; present rows are alive by construction
                std::vector<double> new_full(N, 0.0);
                for (std::size_t i = 0; i < nv; ++i)
                    new_full[present[i]] = layer_mask.data()[i];
                if (plugin.has_adapter) {
                    Tensor full_cum = Tensor::from({1, N}, new_full);
                    std::vector<std::size_t> vrow_idx(nv);
                    for (std::size_t i = 0; i < nv; ++i)
                        vrow_idx[i] = sb.layout.vision_start() + i;
                    Tensor h_v3 = nv > 0 ? reshape(gather_rows(x, vrow_idx), {1, nv, d})
                                         : Tensor::zeros({1, 0, d});
                    std::vector<double> pw(nv);
                    for (std::size_t i = 0; i < nv; ++i) pw[i] = 1.0 - layer_mask.data()[i];
                    res.contexts.push_back(encode_stage_context(
                        full_cum, h_v3, Tensor::from({1, nv}, pw), layer));
                }
                m_full = new_full;
                res.stage_cum.push_back(Tensor::from({1, N}, m_full));

                // physically drop the pruned rows
                std::vector<std::size_t> kept_rows;
                std::vector<std::size_t> new_present;
                for (std::size_t i = 0; i < cfg.n_system; ++i) kept_rows.push_back(i);
                for (std::size_t i = 0; i < nv; ++i)
                    if (layer_mask.data()[i] > 0.5) {
                        kept_rows.push_back(cfg.n_system + i);
                        new_present.push_back(present[i]);
                    }
                for (std::size_t i = cfg.n_system + nv; i < sb.L; ++i) kept_rows.push_back(i);
                x = gather_rows(x, kept_rows);
                std::vector<std::size_t> new_positions;
                for (std::size_t r : kept_rows) new_positions.push_back(sb.positions[r]);
                present = new_present;
                sb.L = kept_rows.size();
                sb.positions = new_positions;
                sb.layout.n_vision = present.size();
                sb.n_vision_present = present.size();
                ++stage;
            }

            DecoderLayerOut out = decoder_layer(backbone.layers[layer], x, 1, sb.L, cfg.n_heads,
                                                sb.positions, nullptr, 0);
            x = out.x;
            prev_probs = out.probs;

            if (plugin.has_adapter && site < cfg.adapter_placements.size() &&
                cfg.adapter_placements[site] == layer) {
                std::vector<bool> gate(sb.L, false);
                for (std::size_t i = sb.layout.answer_start(); i < sb.L; ++i) gate[i] = true;
                x = apply_adapter(plugin.sites[site], x, res.contexts, gate);
                ++site;
            }

            if (opt.capture_answer_rows) {
                std::vector<std::size_t> answer_idx;
                for (std::size_t j = 0; j < cfg.n_answer; ++j)
                    answer_idx.push_back(sb.layout.answer_start() + j);
                res.layer_answer_rows.push_back(gather_rows(x, answer_idx));
            }
            if (opt.capture_hidden) res.layer_hidden.push_back(x);
        }

        res.logits = output_logits(backbone, x);
        res.kept_final = present;
        res.present_L = sb.L;
        res.present_vision = present.size();
        if (!res.stage_cum.empty()) res.r_bar = batch_r_bar(res.stage_cum);
        return res;
    }
};

}  // namespace rcp
