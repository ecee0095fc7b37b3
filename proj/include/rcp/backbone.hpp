#pragma once

// Toy frozen transformer decoder: learned token + position embeddings,
// pre-LN causal self-attention blocks, GELU feed-forward, final layer norm
// and vocabulary head. Vision slots take projected patch embeddings instead
// of token embeddings.

#include <cstddef>
#include <string>
#include <vector>

#include "rcp/config.hpp"
#include "rcp/errors.hpp"
#include "rcp/layout.hpp"
#include "rcp/rng.hpp"
#include "rcp/serialize.hpp"
#include "rcp/tensor.hpp"

namespace rcp {

struct BackboneParams {
    Tensor embed;     // [V, d]
    Tensor vis_proj;  // [d_patch, d]
    Tensor pos;       // [max_len, d]

    struct Layer {
        Tensor ln1_g, ln1_b;
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln2_g, ln2_b;
        Tensor wf1, bf1, wf2, bf2;
    };
    std::vector<Layer> layers;
    Tensor lnf_g, lnf_b;
    Tensor wout, bout;

    static BackboneParams init(const RunConfig& cfg, Rng& rng) {
        const std::size_t d = cfg.d_model, dff = cfg.d_ff, V = cfg.vocab_size;
        const double ws = 1.0 / std::sqrt(static_cast<double>(d));
        BackboneParams p;
        p.embed = Tensor::randn({V, d}, rng, 0.1);
        p.vis_proj = Tensor::randn({cfg.d_patch(), d}, rng,
                                   1.0 / std::sqrt(static_cast<double>(cfg.d_patch())));
        p.pos = Tensor::randn({cfg.max_len, d}, rng, 0.1);
        p.layers.resize(cfg.n_layers);
        for (auto& l : p.layers) {
            l.ln1_g = Tensor::param({d}, std::vector<double>(d, 1.0));
            l.ln1_b = Tensor::param({d}, std::vector<double>(d, 0.0));
            l.wq = Tensor::randn({d, d}, rng, ws);
            l.bq = Tensor::param({d}, std::vector<double>(d, 0.0));
            l.wk = Tensor::randn({d, d}, rng, ws);
            l.bk = Tensor::param({d}, std::vector<double>(d, 0.0));
            l.wv = Tensor::randn({d, d}, rng, ws);
            l.bv = Tensor::param({d}, std::vector<double>(d, 0.0));
            l.wo = Tensor::randn({d, d}, rng, ws);
            l.bo = Tensor::param({d}, std::vector<double>(d, 0.0));
            l.ln2_g = Tensor::param({d}, std::vector<double>(d, 1.0));
            l.ln2_b = Tensor::param({d}, std::vector<double>(d, 0.0));
            l.wf1 = Tensor::randn({d, dff}, rng, ws);
            l.bf1 = Tensor::param({dff}, std::vector<double>(dff, 0.0));
            l.wf2 = Tensor::randn({dff, d}, rng, 1.0 / std::sqrt(static_cast<double>(dff)));
            l.bf2 = Tensor::param({d}, std::vector<double>(d, 0.0));
        }
        p.lnf_g = Tensor::param({d}, std::vector<double>(d, 1.0));
        p.lnf_b = Tensor::param({d}, std::vector<double>(d, 0.0));
        p.wout = Tensor::randn({d, V}, rng, ws);
        p.bout = Tensor::param({V}, std::vector<double>(V, 0.0));
        return p;
    }

    std::vector<Tensor> all_params() const {
        std::vector<Tensor> out = {embed, vis_proj, pos};
        for (const auto& l : layers)
            for (const Tensor& t : {l.ln1_g, l.ln1_b, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv,
                                    l.wo, l.bo, l.ln2_g, l.ln2_b, l.wf1, l.bf1, l.wf2, l.bf2})
                out.push_back(t);
        out.push_back(lnf_g);
        out.push_back(lnf_b);
        out.push_back(wout);
        out.push_back(bout);
        return out;
    }

    NamedTensors named() const {
        NamedTensors out;
        out.emplace_back("embed", embed);
        out.emplace_back("vis_proj", vis_proj);
        out.emplace_back("pos", pos);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            const std::string pre = "layer" + std::to_string(i) + ".";
            out.emplace_back(pre + "ln1_g", l.ln1_g);
            out.emplace_back(pre + "ln1_b", l.ln1_b);
            out.emplace_back(pre + "wq", l.wq);
            out.emplace_back(pre + "bq", l.bq);
            out.emplace_back(pre + "wk", l.wk);
            out.emplace_back(pre + "bk", l.bk);
            out.emplace_back(pre + "wv", l.wv);
            out.emplace_back(pre + "bv", l.bv);
            out.emplace_back(pre + "wo", l.wo);
            out.emplace_back(pre + "bo", l.bo);
            out.emplace_back(pre + "ln2_g", l.ln2_g);
            out.emplace_back(pre + "ln2_b", l.ln2_b);
            out.emplace_back(pre + "wf1", l.wf1);
            out.emplace_back(pre + "bf1", l.bf1);
            out.emplace_back(pre + "wf2", l.wf2);
            out.emplace_back(pre + "bf2", l.bf2);
        }
        out.emplace_back("lnf_g", lnf_g);
        out.emplace_back("lnf_b", lnf_b);
        out.emplace_back("wout", wout);
        out.emplace_back("bout", bout);
        return out;
    }

    // Rebuild from a checkpoint; the result is frozen (no gradients).
    static BackboneParams from_named(const NamedTensors& named, const RunConfig& cfg) {
        std::size_t idx = 0;
        auto next = [&](const std::string& want) -> Tensor {
            if (idx >= named.size() || named[idx].first != want)
                throw IoError("backbone checkpoint: expected tensor '" + want + "'");
            return named[idx++].second;
        };
        BackboneParams p;
        p.embed = next("embed");
        p.vis_proj = next("vis_proj");
        p.pos = next("pos");
        p.layers.resize(cfg.n_layers);
        for (std::size_t i = 0; i < cfg.n_layers; ++i) {
            auto& l = p.layers[i];
            const std::string pre = "layer" + std::to_string(i) + ".";
            l.ln1_g = next(pre + "ln1_g");
            l.ln1_b = next(pre + "ln1_b");
            l.wq = next(pre + "wq");
            l.bq = next(pre + "bq");
            l.wk = next(pre + "wk");
            l.bk = next(pre + "bk");
            l.wv = next(pre + "wv");
            l.bv = next(pre + "bv");
            l.wo = next(pre + "wo");
            l.bo = next(pre + "bo");
            l.ln2_g = next(pre + "ln2_g");
            l.ln2_b = next(pre + "ln2_b");
            l.wf1 = next(pre + "wf1");
            l.bf1 = next(pre + "bf1");
            l.wf2 = next(pre + "wf2");
            l.bf2 = next(pre + "bf2");
        }
        p.lnf_g = next("lnf_g");
        p.lnf_b = next("lnf_b");
        p.wout = next("wout");
        p.bout = next("bout");
        if (idx != named.size()) throw IoError("backbone checkpoint: trailing tensors");
        return p;
    }

    // Frozen copy: identical values, gradients disabled.
    BackboneParams frozen() const {
        RunConfig dummy;  // from_named only reads n_layers
        dummy.n_layers = layers.size();
        return from_named(named_detached(), dummy);
    }

    std::string digest() const { return digest_named_tensors(named()); }

private:
    NamedTensors named_detached() const {
        NamedTensors n = named();
        for (auto& [name, t] : n) t = t.detach();
        return n;
    }
};

// Sequence batch in tensor-ready form. In gathered mode the vision segment
// holds only the retained tokens and `positions` keeps their original
// indices, so position embeddings and causality match the masked view.
struct SequenceBatch {
    std::size_t B = 0;
    std::size_t L = 0;                     // present sequence length
    std::vector<std::size_t> token_ids;    // B*L, vision slots hold kTokPad
    Tensor vision;                         // [B*Nv, d_patch]
    std::size_t n_vision_present = 0;      // Nv
    std::vector<std::size_t> positions;    // length L, original positions
    SequenceLayout layout;                 // present segmentation (counts)
    std::vector<std::size_t> q_effective;  // per example
};

inline Tensor embed_sequence(const BackboneParams& p, const SequenceBatch& in) {
    const std::size_t B = in.B, L = in.L, Nv = in.n_vision_present;
    Tensor tok = gather_rows(p.embed, in.token_ids);  // [B*L, d]
    Tensor vis = matmul(in.vision, p.vis_proj);       // [B*Nv, d]
    std::vector<std::size_t> vis_rows(B * Nv);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < Nv; ++i)
            vis_rows[b * Nv + i] = b * L + in.layout.vision_start() + i;
    Tensor base = overwrite_rows(tok, vis, vis_rows);
    std::vector<std::size_t> pos_idx(B * L);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < L; ++l) pos_idx[b * L + l] = in.positions[l];
    return add(base, gather_rows(p.pos, pos_idx));
}

struct DecoderLayerOut {
    Tensor x;      // [B*L, d]
    Tensor probs;  // [B, H, L, L]
};

// One pre-LN decoder block. `key_add` (optional, [B, Nv]) is the additive
// keep-mask over the vision key columns starting at vis_start.
inline DecoderLayerOut decoder_layer(const BackboneParams::Layer& l, const Tensor& x,
                                     std::size_t B, std::size_t L, std::size_t n_heads,
                                     const std::vector<std::size_t>& positions,
                                     const Tensor* key_add, std::size_t vis_start) {
    const std::size_t d = x.dim(1);
    const std::size_t dh = d / n_heads;
    Tensor a_in = layer_norm_lastdim(x, l.ln1_g, l.ln1_b);
    Tensor q4 = split_heads(linear(a_in, l.wq, &l.bq), B, L, n_heads);
    Tensor k4 = split_heads(linear(a_in, l.wk, &l.bk), B, L, n_heads);
    Tensor v4 = split_heads(linear(a_in, l.wv, &l.bv), B, L, n_heads);
    Tensor scores = matmul(q4, transpose_last2(k4), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor probs = attention_softmax(scores, positions, positions, key_add, vis_start);
    Tensor ctx = merge_heads(matmul(probs, v4));
    Tensor x1 = add(x, linear(ctx, l.wo, &l.bo));
    Tensor f_in = layer_norm_lastdim(x1, l.ln2_g, l.ln2_b);
    Tensor x2 = add(x1, linear(gelu(linear(f_in, l.wf1, &l.bf1)), l.wf2, &l.bf2));
    return {x2, probs};
}

inline Tensor output_logits(const BackboneParams& p, const Tensor& x) {
    return linear(layer_norm_lastdim(x, p.lnf_g, p.lnf_b), p.wout, &p.bout);
}

// Mean attention each vision token receives from the heads and the first
// q_effective question rows of one layer's attention weights. Entries for
// already-pruned tokens come back as exact zeros (their keys are masked).
inline Tensor aggregate_vision_attention(const Tensor& probs, const SequenceLayout& layout,
                                         const std::vector<std::size_t>& q_effective) {
    if (probs.rank() != 4) throw ShapeError("aggregate_vision_attention: expected [B,H,L,L]");
    return mean_over_heads_and_rows(probs, layout.question_start(), q_effective,
                                    layout.vision_start(), layout.n_vision);
}

}  // namespace rcp
