#include <gtest/gtest.h>

#include <cmath>

#include "swinpg/gradcheck.hpp"
#include "swinpg/generator.hpp"
#include "swinpg/losses.hpp"

using namespace swinpg;

namespace {

class GeneratorTest : public ::testing::Test {
protected:
    void SetUp() override { tape().clear(); }
};

Tensor random_image(int64_t n, int64_t size, uint64_t seed) {
    Rng rng(seed);
    return Tensor::uniform({n, 3, size, size}, rng, -1, 1);
}

int64_t linear_count(int64_t in, int64_t out, bool bias) { return in * out + (bias ? out : 0); }

int64_t swin_block_count(int64_t d, int64_t heads, int64_t m) {
    return 4 * d + linear_count(d, 3 * d, true) + linear_count(d, d, true) + (2 * m - 1) * (2 * m - 1) * heads +
           linear_count(d, 4 * d, true) + linear_count(4 * d, d, true);
}

int64_t conv_block_count(int64_t d) { return 2 * (d * d * 9) + 2 * (2 * d); }

/// Parameter count written out layer by layer from the architecture.
int64_t hand_count(const ModelConfig& cfg) {
    const int64_t c = cfg.embed_dim, p = cfg.patch_size;
    int64_t total = linear_count(3 * p * p, c, true) + 2 * c;  // embed + norm
    auto stage = [&](int64_t s, int64_t depth) {
        const int64_t d = c << s, res = (cfg.image_size / p) >> s;
        const int64_t m = std::min(cfg.window_size, res);
        int64_t n = 0;
        for (int64_t i = 0; i < depth; ++i)
            n += cfg.block == BlockKind::swin ? swin_block_count(d, cfg.heads[s], m) : conv_block_count(d);
        return n;
    };
    const int64_t stages = static_cast<int64_t>(cfg.depths.size());
    for (int64_t s = 0; s < stages; ++s) {
        const int64_t d = c << s;
        total += 2 * stage(s, cfg.depths[s]);                             // encoder + decoder
        total += linear_count(2 * d, d, true);                            // skip fusion
        if (s + 1 < stages) total += 2 * (4 * d) + linear_count(4 * d, 2 * d, false);  // merge
        if (s > 0) total += linear_count(d, 2 * d, false) + 2 * (d / 2);  // expand
    }
    total += stage(stages - 1, cfg.bottleneck_depth);
    total += linear_count(c, p * p * c, false) + 2 * c;  // final expand
    total += linear_count(c, 3, true);
    return total;
}

ModelConfig tiny() {
    ModelConfig cfg;
    cfg.image_size = 16;
    cfg.embed_dim = 8;
    cfg.depths = {2, 2};
    cfg.heads = {2, 2};
    cfg.window_size = 2;
    return cfg;
}

}  // namespace

TEST_F(GeneratorTest, StageResolutions) {
    EXPECT_EQ(ModelConfig::desk().stage_resolutions(), (std::vector<int64_t>{16, 8, 4, 2}));
    EXPECT_EQ(ModelConfig::paper().stage_resolutions(), (std::vector<int64_t>{56, 28, 14, 7}));
    EXPECT_EQ(ModelConfig::desk().effective_window(3), 2);
    EXPECT_EQ(ModelConfig::paper().effective_window(3), 7);
    EXPECT_NO_THROW(ModelConfig::paper().validate());
}

TEST_F(GeneratorTest, ValidationNamesFailingStage) {
    auto expect_stage = [](ModelConfig cfg, const std::string& needle) {
        try {
            cfg.validate();
            FAIL() << "expected ConfigError";
        } catch (const ConfigError& e) {
            EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
        }
    };
    auto a = ModelConfig::desk();
    a.image_size = 24;  // 6 -> 3 -> odd at stage 2
    a.window_size = 3;
    expect_stage(a, "stage 2");
    auto b = ModelConfig::desk();
    b.window_size = 3;  // 16 % 3
    expect_stage(b, "stage 0");
    auto c = ModelConfig::desk();
    c.heads = {2, 4, 3, 8};
    expect_stage(c, "stage 2");
    auto d = ModelConfig::desk();
    d.heads = {2};
    EXPECT_THROW(d.validate(), ConfigError);
    auto e = ModelConfig::desk();
    e.image_size = 66;
    EXPECT_THROW(build_generator(e), ConfigError);
}

TEST_F(GeneratorTest, SameSeedSameParameters) {
    auto cfg = ModelConfig::desk();
    cfg.seed = 7;
    auto a = build_generator(cfg);
    auto b = build_generator(cfg);
    EXPECT_EQ(checksum(a), checksum(b));
    cfg.seed = 8;
    auto c = build_generator(cfg);
    EXPECT_NE(checksum(a), checksum(c));
}

TEST_F(GeneratorTest, InitializationConvention) {
    auto g = build_generator(ModelConfig::desk());
    g.visit("", [](const std::string& name, Tensor& t, TensorKind) {
        for (float v : t.data()) ASSERT_TRUE(std::isfinite(v)) << name;
        if (name.ends_with(".bias") || name.ends_with(".beta")) {
            for (float v : t.data()) ASSERT_EQ(v, 0.0f) << name;
        } else if (name.ends_with(".gamma")) {
            for (float v : t.data()) ASSERT_EQ(v, 1.0f) << name;
        } else {
            for (float v : t.data()) ASSERT_LE(std::abs(v), 0.04f + 1e-6f) << name;  // truncated at 2 std
        }
    });
}

TEST_F(GeneratorTest, ParameterCountMatchesHandLedger) {
    auto cfg = ModelConfig::desk();
    auto g = build_generator(cfg);
    EXPECT_EQ(count_parameters(g), hand_count(cfg));
    EXPECT_EQ(count_parameters(g), 6323835);  // frozen regression value, see README
    cfg.block = BlockKind::conv;
    auto h = build_generator(cfg);
    EXPECT_EQ(count_parameters(h), hand_count(cfg));
    EXPECT_NE(count_parameters(h), count_parameters(g));
    auto t = tiny();
    auto k = build_generator(t);
    EXPECT_EQ(count_parameters(k), hand_count(t));
}

TEST_F(GeneratorTest, ForwardShapeAndRange) {
    auto g = build_generator(ModelConfig::desk());
    auto x = random_image(2, 64, 1);
    auto y = generator_forward(g, x);
    ASSERT_EQ(y.shape(), x.shape());
    for (float v : y.data()) {
        ASSERT_GT(v, -1.0f);
        ASSERT_LT(v, 1.0f);
    }
    auto y2 = generator_forward(g, x);
    for (int64_t i = 0; i < y.numel(); ++i) ASSERT_EQ(y[i], y2[i]);
}

TEST_F(GeneratorTest, ZeroHeadGivesZeroOutput) {
    auto g = build_generator(tiny());
    for (auto* t : {&g.head.weight, &g.head.bias})
        for (auto& v : t->mutable_data()) v = 0.0f;
    auto y = generator_forward(g, random_image(1, 16, 2));
    for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST_F(GeneratorTest, WrongInputSizeThrows) {
    auto g = build_generator(tiny());
    EXPECT_THROW(generator_forward(g, random_image(1, 32, 3)), DimensionError);
    EXPECT_THROW(generator_forward(g, Tensor({1, 1, 16, 16})), DimensionError);
}

TEST_F(GeneratorTest, SkipConnectionsCarryEncoderFeatures) {
    // Zeroing the decoder-side half of every fusion weight leaves the output
    // a function of the skips alone; it must still depend on the input.
    auto g = build_generator(tiny());
    for (auto& f : g.fuse) {
        const int64_t d = f.weight.dim(1);
        for (int64_t i = 0; i < d; ++i)
            for (int64_t o = 0; o < d; ++o) f.weight.mutable_data()[i * d + o] = 0.0f;
    }
    auto a = generator_forward(g, random_image(1, 16, 4));
    auto b = generator_forward(g, random_image(1, 16, 5));
    double diff = 0;
    for (int64_t i = 0; i < a.numel(); ++i) diff += std::abs(a[i] - b[i]);
    EXPECT_GT(diff, 1e-3);
}

TEST_F(GeneratorTest, GradientReachesEveryParameter) {
    for (auto kind : {BlockKind::swin, BlockKind::conv}) {
        tape().clear();
        auto cfg = ModelConfig::desk();
        cfg.block = kind;
        auto g = build_generator(cfg);
        auto x = random_image(2, 64, 6);
        auto target = random_image(2, 64, 7);
        backward(loss_l1(generator_forward(g, x), target));
        g.visit("", [](const std::string& name, Tensor& t, TensorKind k) {
            if (k != TensorKind::parameter) return;
            ASSERT_TRUE(t.has_grad()) << name;
            bool nonzero = false;
            for (float v : t.grad()) nonzero |= v != 0.0f;
            EXPECT_TRUE(nonzero) << name;
        });
    }
}

TEST_F(GeneratorTest, ConvAblationKeepsInterfaceShapes) {
    auto cfg = ModelConfig::desk();
    cfg.block = BlockKind::conv;
    auto g = build_generator(cfg);
    auto y = generator_forward(g, random_image(2, 64, 8));
    EXPECT_EQ(y.shape(), (Shape{2, 3, 64, 64}));
    EXPECT_TRUE(g.encoder[0].swin.empty());
    EXPECT_EQ(g.encoder[0].conv.size(), 2u);
}

TEST_F(GeneratorTest, ConvBlockZeroWeightsIsIdentity) {
    Rng rng(9);
    auto b = ConvBlock<float>::make(32, 16, 16, rng);
    for (auto* t : {&b.conv1.weight, &b.conv2.weight})
        for (auto& v : t->mutable_data()) v = 0.0f;
    Rng xr(10);
    auto x = Tensor::uniform({2, 256, 32}, xr, -1, 1);
    auto y = conv_block_forward(x, b, NormMode::train);
    ASSERT_EQ(y.shape(), x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST_F(GeneratorTest, ConvBlockGradcheck) {
    for (uint64_t seed : {0, 1, 2}) EXPECT_TRUE(gradcheck("conv_block", seed).passed) << seed;
}

TEST_F(GeneratorTest, GeneratorGradcheck) {
    auto r = gradcheck("generator", 0);
    EXPECT_TRUE(r.passed) << r.max_relative_error;
}
