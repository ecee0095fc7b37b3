#include <gtest/gtest.h>

#include "rcp/layout.hpp"
#include "rcp/rng.hpp"

using namespace rcp;

TEST(Gate, DefinitionExample) {
    SequenceLayout l{1, 4, 2, 1, 2};
    RegionGate g = build_gate(l);
    EXPECT_EQ(g.g, (std::vector<double>{0, 0, 0, 0, 0, 0, 0, 1, 1}));
}

TEST(Gate, DegenerateLayoutRejected) {
    SequenceLayout l{0, 0, 0, 0, 9};  // answer swallows everything, vision empty
    EXPECT_THROW(build_gate(l), ConfigError);
    SequenceLayout no_answer{1, 4, 2, 1, 0};
    EXPECT_THROW(build_gate(no_answer), EmptyRegionError);
}

TEST(Gate, SumEqualsAnswerCountOverRandomLayouts) {
    Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
        SequenceLayout l;
        l.n_system = 1 + rng.uniform_int(3);
        l.n_vision = 1 + rng.uniform_int(16);
        l.n_question = 1 + rng.uniform_int(6);
        l.q_effective = 1 + rng.uniform_int(l.n_question);
        l.n_answer = 1 + rng.uniform_int(4);
        RegionGate g = build_gate(l);
        double s = 0.0;
        for (double v : g.g) s += v;
        ASSERT_EQ(s, static_cast<double>(l.n_answer));
        ASSERT_EQ(g.g.size(), l.total());
    }
}

TEST(Gate, ConstructionIsIdempotent) {
    SequenceLayout l{2, 8, 4, 2, 2};
    EXPECT_EQ(build_gate(l).g, build_gate(l).g);
}

TEST(AttentionSubblock, SlicingShape) {
    SequenceLayout l{1, 3, 2, 2, 0};
    l.n_answer = 0;  // L = 6
    Tensor attn = Tensor::zeros({1, 6, 6});
    Tensor sub = attention_subblock(attn, l);
    EXPECT_EQ(sub.shape(), (Shape{1, 2, 3}));
}

TEST(AttentionSubblock, UniformConstantPropagation) {
    SequenceLayout l{1, 3, 2, 2, 0};
    Tensor attn = Tensor::full({1, 6, 6}, 1.0 / 6.0);
    Tensor sub = attention_subblock(attn, l);
    for (double v : sub.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 6.0);
}

TEST(AttentionSubblock, MatchesIndexLoopOracle) {
    Rng rng(17);
    SequenceLayout l{2, 5, 3, 2, 2};
    const std::size_t L = l.total(), H = 3;
    Tensor attn = Tensor::randn({H, L, L}, rng, 1.0, false);
    Tensor sub = attention_subblock(attn, l);
    ASSERT_EQ(sub.shape(), (Shape{H, l.q_effective, l.n_vision}));
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t q = 0; q < l.q_effective; ++q)
            for (std::size_t v = 0; v < l.n_vision; ++v) {
                const double expect =
                    attn.data()[(h * L + l.question_start() + q) * L + l.vision_start() + v];
                ASSERT_EQ(sub.data()[(h * l.q_effective + q) * l.n_vision + v], expect);
            }
}

TEST(AttentionSubblock, InconsistentLengthThrows) {
    SequenceLayout l{1, 3, 2, 1, 1};
    Tensor attn = Tensor::zeros({1, 5, 5});  // L should be 7
    EXPECT_THROW(attention_subblock(attn, l), ShapeError);
}
