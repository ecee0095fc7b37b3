#include <gtest/gtest.h>

#include <cmath>

#include "rcp/backbone.hpp"
#include "rcp/synthetic.hpp"

using namespace rcp;

namespace {

RunConfig tiny_cfg() {
    RunConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 12;
    cfg.n_system = 1;
    cfg.n_vision = 4;
    cfg.n_question = 3;
    cfg.task_filler_max = 0;
    cfg.n_answer = 2;
    cfg.max_len = 16;
    cfg.task_n_regions = 1;
    cfg.pruner_placements = {1};
    cfg.adapter_placements = {1};
    cfg.pruner_proj_dim = 4;
    cfg.adapter_bottleneck_dim = 2;
    cfg.pruner_n_queries = 2;
    return cfg;
}

// Naive loop re-implementation of one pre-LN decoder block, used as the
// hand-computation oracle.
std::vector<double> naive_layer(const BackboneParams::Layer& l, const std::vector<double>& xin,
                                std::size_t L, std::size_t d, std::size_t H) {
    const std::size_t dh = d / H;
    auto ln = [&](const std::vector<double>& v, const Tensor& g, const Tensor& b) {
        std::vector<double> out(v.size());
        for (std::size_t i = 0; i < L; ++i) {
            double mean = 0.0;
            for (std::size_t j = 0; j < d; ++j) mean += v[i * d + j];
            mean /= d;
            double var = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double c = v[i * d + j] - mean;
                var += c * c;
            }
            var /= d;
            const double is = 1.0 / std::sqrt(var + 1e-5);
            for (std::size_t j = 0; j < d; ++j)
                out[i * d + j] = (v[i * d + j] - mean) * is * g.data()[j] + b.data()[j];
        }
        return out;
    };
    auto matvec = [&](const std::vector<double>& v, const Tensor& W, const Tensor& b,
                      std::size_t cols) {
        std::vector<double> out(L * cols, 0.0);
        for (std::size_t i = 0; i < L; ++i)
            for (std::size_t c = 0; c < cols; ++c) {
                double acc = b.data()[c];
                for (std::size_t k = 0; k < d; ++k) acc += v[i * d + k] * W.data()[k * cols + c];
                out[i * cols + c] = acc;
            }
        return out;
    };

    std::vector<double> a_in = ln(xin, l.ln1_g, l.ln1_b);
    std::vector<double> q = matvec(a_in, l.wq, l.bq, d);
    std::vector<double> k = matvec(a_in, l.wk, l.bk, d);
    std::vector<double> v = matvec(a_in, l.wv, l.bv, d);

    std::vector<double> ctx(L * d, 0.0);
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < L; ++i) {
            std::vector<double> s(L, 0.0);
            double mx = -1e300;
            for (std::size_t j = 0; j <= i; ++j) {
                double acc = 0.0;
                for (std::size_t t = 0; t < dh; ++t)
                    acc += q[i * d + h * dh + t] * k[j * d + h * dh + t];
                s[j] = acc / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, s[j]);
            }
            double z = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                s[j] = std::exp(s[j] - mx);
                z += s[j];
            }
            for (std::size_t j = 0; j <= i; ++j)
                for (std::size_t t = 0; t < dh; ++t)
                    ctx[i * d + h * dh + t] += s[j] / z * v[j * d + h * dh + t];
        }

    std::vector<double> x1(xin.size());
    std::vector<double> o = matvec(ctx, l.wo, l.bo, d);
    for (std::size_t i = 0; i < xin.size(); ++i) x1[i] = xin[i] + o[i];

    std::vector<double> f_in = ln(x1, l.ln2_g, l.ln2_b);
    const std::size_t dff = l.bf1.size();
    std::vector<double> f1(L * dff, 0.0);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t c = 0; c < dff; ++c) {
            double acc = l.bf1.data()[c];
            for (std::size_t t = 0; t < d; ++t) acc += f_in[i * d + t] * l.wf1.data()[t * dff + c];
            const double c0 = 0.7978845608028654, c1 = 0.044715;
            f1[i * dff + c] = 0.5 * acc * (1.0 + std::tanh(c0 * (acc + c1 * acc * acc * acc)));
        }
    std::vector<double> out(xin.size());
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t c = 0; c < d; ++c) {
            double acc = l.bf2.data()[c];
            for (std::size_t t = 0; t < dff; ++t) acc += f1[i * dff + t] * l.wf2.data()[t * d + c];
            out[i * d + c] = x1[i * d + c] + acc;
        }
    return out;
}

}  // namespace

TEST(DecoderLayer, MatchesNaiveLoopOracle) {
    RunConfig cfg = tiny_cfg();
    Rng rng(1);
    BackboneParams p = BackboneParams::init(cfg, rng);
    const std::size_t L = 3, d = cfg.d_model;
    Tensor x = Tensor::randn({L, d}, rng, 1.0, false);
    std::vector<std::size_t> pos = {0, 1, 2};
    DecoderLayerOut out = decoder_layer(p.layers[0], x, 1, L, cfg.n_heads, pos, nullptr, 0);
    std::vector<double> expect = naive_layer(p.layers[0], x.data(), L, d, cfg.n_heads);
    for (std::size_t i = 0; i < expect.size(); ++i)
        ASSERT_NEAR(out.x.data()[i], expect[i], 1e-12);
}

TEST(DecoderLayer, SingleHeadTinyCase) {
    RunConfig cfg = tiny_cfg();
    cfg.d_model = 2;
    cfg.n_heads = 1;
    cfg.d_ff = 4;
    Rng rng(2);
    BackboneParams p = BackboneParams::init(cfg, rng);
    Tensor x = Tensor::from({3, 2}, {0.5, -1.0, 2.0, 0.25, -0.75, 1.5});
    std::vector<std::size_t> pos = {0, 1, 2};
    DecoderLayerOut out = decoder_layer(p.layers[0], x, 1, 3, 1, pos, nullptr, 0);
    std::vector<double> expect = naive_layer(p.layers[0], x.data(), 3, 2, 1);
    for (std::size_t i = 0; i < expect.size(); ++i)
        ASSERT_NEAR(out.x.data()[i], expect[i], 1e-12);
}

TEST(DecoderLayer, CausalMaskingHoldsEverywhere) {
    RunConfig cfg = tiny_cfg();
    Rng rng(3);
    BackboneParams p = BackboneParams::init(cfg, rng);
    const std::size_t B = 2, L = 6;
    Tensor x = Tensor::randn({B * L, cfg.d_model}, rng, 1.0, false);
    std::vector<std::size_t> pos = {0, 1, 2, 3, 4, 5};
    DecoderLayerOut out = decoder_layer(p.layers[0], x, B, L, cfg.n_heads, pos, nullptr, 0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < cfg.n_heads; ++h)
            for (std::size_t i = 0; i < L; ++i)
                for (std::size_t j = i + 1; j < L; ++j)
                    ASSERT_EQ(out.probs.data()[((b * cfg.n_heads + h) * L + i) * L + j], 0.0);
}

TEST(DecoderLayer, AttentionRowsSumToOne) {
    RunConfig cfg = tiny_cfg();
    Rng rng(4);
    BackboneParams p = BackboneParams::init(cfg, rng);
    const std::size_t L = 5;
    Tensor x = Tensor::randn({L, cfg.d_model}, rng, 1.0, false);
    std::vector<std::size_t> pos = {0, 1, 2, 3, 4};
    std::vector<double> mv = {1.0, 0.0, 1.0};  // mask some vision keys
    Tensor keep = Tensor::from({1, 3}, mv);
    Tensor add_mask = keep_to_additive(keep, false);
    DecoderLayerOut out = decoder_layer(p.layers[0], x, 1, L, cfg.n_heads, pos, &add_mask, 1);
    for (std::size_t h = 0; h < cfg.n_heads; ++h)
        for (std::size_t i = 0; i < L; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < L; ++j) s += out.probs.data()[(h * L + i) * L + j];
            ASSERT_NEAR(s, 1.0, 1e-12);
            // masked key 2 receives no attention
            ASSERT_EQ(out.probs.data()[(h * L + i) * L + 2], 0.0);
        }
}

TEST(AggregateVisionAttention, UniformAttentionGivesUniformScores) {
    SequenceLayout lay{1, 4, 2, 2, 1};  // L = 8
    const std::size_t L = lay.total();
    Tensor probs = Tensor::full({1, 2, L, L}, 1.0 / static_cast<double>(L));
    Tensor a = aggregate_vision_attention(probs, lay, {2});
    for (double v : a.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 8.0);
}

TEST(AggregateVisionAttention, LinearInHeads) {
    SequenceLayout lay{1, 2, 1, 1, 1};  // L = 5
    const std::size_t L = lay.total();
    std::vector<double> pd(2 * L * L, 0.0);
    // head 0 gives vision columns p=(0.3,0.1), head 1 gives q=(0.5,0.2) on the
    // single question row
    const std::size_t qrow = lay.question_start();
    pd[(0 * L + qrow) * L + 1] = 0.3;
    pd[(0 * L + qrow) * L + 2] = 0.1;
    pd[(1 * L + qrow) * L + 1] = 0.5;
    pd[(1 * L + qrow) * L + 2] = 0.2;
    Tensor probs = Tensor::from({1, 2, L, L}, pd);
    Tensor a = aggregate_vision_attention(probs, lay, {1});
    EXPECT_DOUBLE_EQ(a.data()[0], (0.3 + 0.5) / 2.0);
    EXPECT_DOUBLE_EQ(a.data()[1], (0.1 + 0.2) / 2.0);
}

TEST(Backbone, CheckpointRoundTripPreservesDigest) {
    RunConfig cfg = tiny_cfg();
    Rng rng(5);
    BackboneParams p = BackboneParams::init(cfg, rng);
    const std::string path = "backbone_roundtrip.bin";
    save_named_tensors(path, p.named());
    BackboneParams q = BackboneParams::from_named(load_named_tensors(path), cfg);
    EXPECT_EQ(p.digest(), q.digest());
    // loaded backbone is frozen
    for (const Tensor& t : q.all_params()) EXPECT_FALSE(t.requires_grad());
    std::remove(path.c_str());
}

TEST(Backbone, EmbeddingUsesOriginalPositions) {
    RunConfig cfg = tiny_cfg();
    Rng rng(6);
    BackboneParams p = BackboneParams::init(cfg, rng);
    SequenceBatch sb;
    sb.B = 1;
    sb.L = 3;
    sb.token_ids = {kTokBos, kTokPad, kTokAsk};
    sb.vision = Tensor::randn({1, cfg.d_patch()}, rng, 1.0, false);
    sb.n_vision_present = 1;
    sb.positions = {0, 4, 7};  // gathered-style gaps
    sb.layout = SequenceLayout{1, 1, 1, 1, 0};
    sb.q_effective = {1};
    Tensor h0 = embed_sequence(p, sb);
    // row 2 = embed[ASK] + pos[7]
    for (std::size_t j = 0; j < cfg.d_model; ++j)
        ASSERT_NEAR(h0.data()[2 * cfg.d_model + j],
                    p.embed.data()[kTokAsk * cfg.d_model + j] + p.pos.data()[7 * cfg.d_model + j],
                    1e-15);
}
