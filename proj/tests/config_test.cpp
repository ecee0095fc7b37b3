#include <gtest/gtest.h>

#include "rcp/config.hpp"
#include "rcp/serialize.hpp"

using namespace rcp;

TEST(Config, DefaultsValidate) {
    RunConfig c;
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.seq_len(), 76u);
}

TEST(Config, UnknownKeyRejected) {
    try {
        parse_config_text("no.such.key = 3\n");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("no.such.key"), std::string::npos);
    }
}

TEST(Config, InvalidDimsNameTheKey) {
    RunConfig c = parse_config_text("backbone.d_model = 30\nbackbone.n_heads = 4\n");
    try {
        c.validate();
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("backbone.d_model"), std::string::npos);
    }
}

TEST(Config, ResolvedEchoRoundTrips) {
    RunConfig c = parse_config_text(
        "seed = 7\n"
        "pruner.placements = 1,3,6\n"
        "schedule.target_retention = 0.11\n"
        "loss.lambda_repair = 12.5\n"
        "pruner.kind = topk\n"
        "adapter.enabled = false\n");
    RunConfig back = parse_config_text(render_config(c));
    EXPECT_TRUE(c == back);
    EXPECT_EQ(render_config(c), render_config(back));
}

TEST(Config, CommentsAndBlanksIgnored) {
    RunConfig c = parse_config_text("# a comment\n\nseed = 9   # trailing\n");
    EXPECT_EQ(c.seed, 9u);
}

TEST(Config, PlacementOrderingEnforced) {
    RunConfig c = parse_config_text("pruner.placements = 4,2\n");
    EXPECT_THROW(c.validate(), ConfigError);
    c = parse_config_text("pruner.placements = 0,2\n");
    EXPECT_THROW(c.validate(), ConfigError);  // layer 0 has no preceding attention
    c = parse_config_text("adapter.placements = 0\n");
    EXPECT_THROW(c.validate(), ConfigError);  // adapter ahead of first pruner
}

TEST(Serialize, RoundTripBitwise) {
    NamedTensors ts;
    ts.emplace_back("a", Tensor::from({2, 3}, {1.5, -2.25, 0.0, 1e-300, 3.125, 7.0}));
    ts.emplace_back("b", Tensor::from({1}, {42.0}));
    const std::string path = "roundtrip_test.bin";
    save_named_tensors(path, ts);
    NamedTensors back = load_named_tensors(path);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].first, "a");
    EXPECT_EQ(back[0].second.shape(), (Shape{2, 3}));
    EXPECT_EQ(back[0].second.data(), ts[0].second.data());
    EXPECT_EQ(back[1].second.data(), ts[1].second.data());
    std::remove(path.c_str());
}

TEST(Serialize, DigestSensitivity) {
    NamedTensors a, b;
    a.emplace_back("w", Tensor::from({2}, {1.0, 2.0}));
    b.emplace_back("w", Tensor::from({2}, {1.0, 2.0000000001}));
    EXPECT_EQ(digest_named_tensors(a), digest_named_tensors(a));
    EXPECT_NE(digest_named_tensors(a), digest_named_tensors(b));
    EXPECT_EQ(digest_named_tensors(a).size(), 64u);
}

TEST(Serialize, BadMagicRejected) {
    EXPECT_THROW(decode_named_tensors("XXXX garbage"), IoError);
}
