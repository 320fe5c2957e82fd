#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "swinpg/gradcheck.hpp"
#include "swinpg/swin.hpp"

using namespace swinpg;

namespace {

class SwinTest : public ::testing::Test {
protected:
    void SetUp() override { tape().clear(); }
};

Tensor random_tensor(Shape shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    return Tensor::uniform(std::move(shape), rng, lo, hi);
}

void fill(Tensor& t, float v) {
    for (auto& x : t.mutable_data()) x = v;
}

/// A token's pre-shift row wrapped around the image edge iff r + shift >= H.
/// Two tokens come from the same region iff both axes agree on wrapping.
std::vector<int> wrap_labels(int64_t h, int64_t w, int64_t m, int64_t shift, int64_t window_index) {
    const int64_t per_row = w / m;
    const int64_t r0 = (window_index / per_row) * m, c0 = (window_index % per_row) * m;
    std::vector<int> labels;
    for (int64_t i = 0; i < m * m; ++i) {
        const bool wr = r0 + i / m + shift >= h;
        const bool wc = c0 + i % m + shift >= w;
        labels.push_back(int(wr) * 2 + int(wc));
    }
    return labels;
}

/// Straight-line attention for one window, restricted to same-label pairs.
std::vector<double> brute_attention(const Tensor& x, int64_t window_row, const WindowAttention<float>& p,
                                    const std::vector<int>& labels, bool use_bias) {
    const int64_t n = x.dim(1), c = x.dim(2), hd = p.head_dim();
    const auto* xs = x.data().data() + window_row * n * c;
    const auto wq = p.qkv.weight.data();
    const auto bq = p.qkv.bias.data();
    std::vector<double> qkv(static_cast<std::size_t>(n * 3 * c));
    for (int64_t t = 0; t < n; ++t)
        for (int64_t o = 0; o < 3 * c; ++o) {
            double s = bq[o];
            for (int64_t i = 0; i < c; ++i) s += double(xs[t * c + i]) * wq[i * 3 * c + o];
            qkv[t * 3 * c + o] = s;
        }
    const int64_t m = p.window, span = 2 * m - 1;
    std::vector<double> heads_out(static_cast<std::size_t>(n * c), 0.0);
    for (int64_t h = 0; h < p.heads; ++h)
        for (int64_t i = 0; i < n; ++i) {
            std::vector<double> logit(static_cast<std::size_t>(n), -INFINITY);
            double mx = -INFINITY;
            for (int64_t j = 0; j < n; ++j) {
                if (labels[i] != labels[j]) continue;
                double s = 0;
                for (int64_t d = 0; d < hd; ++d) s += qkv[i * 3 * c + h * hd + d] * qkv[j * 3 * c + c + h * hd + d];
                s /= std::sqrt(double(hd));
                if (use_bias) {
                    const int64_t dr = i / m - j / m, dc = i % m - j % m;
                    s += p.bias_table.data()[((dr + m - 1) * span + dc + m - 1) * p.heads + h];
                }
                logit[j] = s;
                mx = std::max(mx, s);
            }
            double z = 0;
            for (auto& l : logit) z += (l = std::exp(l - mx));
            for (int64_t j = 0; j < n; ++j)
                for (int64_t d = 0; d < hd; ++d) heads_out[i * c + h * hd + d] += logit[j] / z * qkv[j * 3 * c + 2 * c + h * hd + d];
        }
    std::vector<double> out(static_cast<std::size_t>(n * c));
    for (int64_t t = 0; t < n; ++t)
        for (int64_t o = 0; o < c; ++o) {
            double s = p.proj.bias.data()[o];
            for (int64_t i = 0; i < c; ++i) s += heads_out[t * c + i] * p.proj.weight.data()[i * c + o];
            out[t * c + o] = s;
        }
    return out;
}

WindowAttention<float> random_attention(int64_t dim, int64_t heads, int64_t window, uint64_t seed) {
    Rng rng(seed);
    auto p = WindowAttention<float>::make(dim, heads, window, rng);
    for (auto* t : {&p.qkv.weight, &p.qkv.bias, &p.proj.weight, &p.proj.bias, &p.bias_table})
        for (auto& v : t->mutable_data()) v = static_cast<float>(rng.uniform(-0.5, 0.5));
    return p;
}

}  // namespace

// ---------------------------------------------------------------- partition

TEST_F(SwinTest, PartitionShapes) {
    EXPECT_EQ(window_partition(Tensor({1, 8, 8, 3}), 4).shape(), (Shape{4, 16, 3}));
    EXPECT_EQ(window_partition(Tensor({1, 4, 4, 3}), 4).shape(), (Shape{1, 16, 3}));
    EXPECT_EQ(WindowGrid::make(224, 224, 7).num_windows(), 1024);
    EXPECT_THROW(window_partition(Tensor({1, 6, 8, 3}), 4), DimensionError);
    EXPECT_THROW(window_reverse(Tensor({3, 16, 3}), 4, 8, 8), DimensionError);
}

TEST_F(SwinTest, PartitionTokenOrder) {
    // window w, token t -> pixel (row, col) in row-major window / token order
    auto x = Tensor({1, 4, 6, 1});
    for (int64_t i = 0; i < 24; ++i) x.mutable_data()[i] = float(i);
    auto w = window_partition(x, 2);
    for (int64_t win = 0; win < 6; ++win)
        for (int64_t t = 0; t < 4; ++t) {
            const int64_t r = (win / 3) * 2 + t / 2, c = (win % 3) * 2 + t % 2;
            EXPECT_EQ(w[win * 4 + t], float(r * 6 + c));
        }
}

TEST_F(SwinTest, ReverseOfPartitionIsBitExact) {
    for (auto [h, w, m] : std::vector<std::tuple<int, int, int>>{{8, 8, 4}, {8, 8, 2}, {6, 9, 3}, {4, 4, 4}, {5, 5, 1}}) {
        auto x = random_tensor({2, h, w, 3}, uint64_t(h * 100 + w * 10 + m));
        auto y = window_reverse(window_partition(x, m), m, h, w);
        ASSERT_EQ(y.shape(), x.shape());
        for (int64_t i = 0; i < x.numel(); ++i) ASSERT_EQ(y[i], x[i]);
    }
}

TEST_F(SwinTest, PartitionReverseGradcheckIsExact) {
    for (uint64_t seed : {0, 1, 2}) EXPECT_EQ(gradcheck("window_partition", seed).max_relative_error, 0.0);
}

// ---------------------------------------------------------------- relative index

TEST_F(SwinTest, RelativeIndexSmallCases) {
    EXPECT_EQ(build_relative_index(1), (std::vector<int32_t>{0}));
    auto idx = build_relative_index(2);
    EXPECT_EQ(idx.size(), 16u);
    EXPECT_EQ(std::set<int32_t>(idx.begin(), idx.end()).size(), 9u);
    Rng rng(0);
    EXPECT_EQ(WindowAttention<float>::make(8, 2, 7, rng).bias_table.dim(0), 169);
    EXPECT_THROW(build_relative_index(0), ContractError);
}

TEST_F(SwinTest, RelativeIndexEncodesOffsetsAndIsAntisymmetric) {
    for (int64_t m : {1, 2, 3, 7}) {
        const auto idx = build_relative_index(m);
        const int64_t n = m * m, span = 2 * m - 1;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < n; ++j) {
                const int32_t a = idx[i * n + j], b = idx[j * n + i];
                ASSERT_GE(a, 0);
                ASSERT_LT(a, span * span);
                const int64_t dr = a / span - (m - 1), dc = a % span - (m - 1);
                EXPECT_EQ(dr, i / m - j / m);
                EXPECT_EQ(dc, i % m - j % m);
                EXPECT_EQ(b / span - (m - 1), -dr);
                EXPECT_EQ(b % span - (m - 1), -dc);
            }
    }
}

// ---------------------------------------------------------------- shift mask

TEST_F(SwinTest, ZeroShiftMaskIsZero) {
    auto mask = build_shift_mask<float>(8, 8, 4, 0);
    EXPECT_EQ(mask.shape(), (Shape{4, 16, 16}));
    for (float v : mask.data()) EXPECT_EQ(v, 0.0f);
    EXPECT_THROW(build_shift_mask<float>(8, 8, 4, 4), ContractError);
    EXPECT_THROW(build_shift_mask<float>(8, 8, 4, -1), ContractError);
}

TEST_F(SwinTest, ShiftMaskMatchesWrapOracle) {
    for (auto [h, m, s] : std::vector<std::tuple<int, int, int>>{{4, 2, 1}, {8, 4, 2}, {6, 3, 1}, {8, 2, 1}}) {
        auto mask = build_shift_mask<float>(h, h, m, s);
        const int64_t nw = (h / m) * (h / m), n = m * m;
        int negatives = 0;
        for (int64_t w = 0; w < nw; ++w) {
            const auto labels = wrap_labels(h, h, m, s, w);
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < n; ++j) {
                    const float expect = labels[i] == labels[j] ? 0.0f : -100.0f;
                    ASSERT_EQ(mask[(w * n + i) * n + j], expect) << h << " " << m << " " << s;
                    negatives += expect != 0.0f;
                }
        }
        EXPECT_GT(negatives, 0);
    }
}

TEST_F(SwinTest, CornerWindowMaskOnFourByFour) {
    // H=W=4, M=2, shift 1: the bottom-right window holds four tokens from
    // four different pre-shift regions, so only the diagonal is unmasked.
    auto mask = build_shift_mask<float>(4, 4, 2, 1);
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 4; ++j) EXPECT_EQ(mask[(3 * 4 + i) * 4 + j], i == j ? 0.0f : -100.0f);
    for (int64_t e = 0; e < 16; ++e) EXPECT_EQ(mask[e], 0.0f);  // top-left window untouched
}

// ---------------------------------------------------------------- attention

TEST_F(SwinTest, SingleTokenAttentionIsProjectedValue) {
    auto p = random_attention(4, 2, 1, 1);
    auto x = random_tensor({3, 1, 4}, 2);
    auto y = window_attention(x, p, Tensor());
    for (int64_t b = 0; b < 3; ++b)
        for (int64_t o = 0; o < 4; ++o) {
            double v_proj = p.proj.bias[o];
            for (int64_t i = 0; i < 4; ++i) {
                double v = p.qkv.bias[8 + i];
                for (int64_t k = 0; k < 4; ++k) v += double(x[b * 4 + k]) * p.qkv.weight[k * 12 + 8 + i];
                v_proj += v * p.proj.weight[i * 4 + o];
            }
            EXPECT_NEAR(y[b * 4 + o], v_proj, 1e-5);
        }
}

TEST_F(SwinTest, WholeImageWindowEqualsDenseAttention) {
    auto p = random_attention(8, 2, 4, 3);
    fill(p.bias_table, 0.0f);
    auto x = random_tensor({2, 16, 8}, 4);
    auto y = window_attention(x, p, Tensor());
    const std::vector<int> same(16, 0);
    for (int64_t b = 0; b < 2; ++b) {
        auto expect = brute_attention(x, b, p, same, false);
        for (int64_t i = 0; i < 16 * 8; ++i) EXPECT_NEAR(y[b * 128 + i], expect[i], 1e-5);
    }
}

TEST_F(SwinTest, BiasTableEntersLogits) {
    auto p = random_attention(8, 2, 2, 5);
    auto x = random_tensor({3, 4, 8}, 6);
    auto y = window_attention(x, p, Tensor());
    const std::vector<int> same(4, 0);
    for (int64_t b = 0; b < 3; ++b) {
        auto expect = brute_attention(x, b, p, same, true);
        for (int64_t i = 0; i < 4 * 8; ++i) EXPECT_NEAR(y[b * 32 + i], expect[i], 1e-5);
    }
}

TEST_F(SwinTest, IdenticalKeysAverageValues) {
    Rng rng(7);
    auto p = WindowAttention<float>::make(4, 1, 2, rng);
    fill(p.bias_table, 0.0f);
    fill(p.qkv.weight, 0.0f);
    fill(p.qkv.bias, 0.0f);
    fill(p.proj.bias, 0.0f);
    fill(p.proj.weight, 0.0f);
    for (int64_t i = 0; i < 4; ++i) {
        p.qkv.weight.mutable_data()[i * 12 + i] = 1.0f;      // q = x
        p.qkv.weight.mutable_data()[i * 12 + 8 + i] = 1.0f;  // v = x, k = 0
        p.proj.weight.mutable_data()[i * 4 + i] = 1.0f;
    }
    auto x = random_tensor({1, 4, 4}, 8);
    auto y = window_attention(x, p, Tensor());
    for (int64_t c = 0; c < 4; ++c) {
        const double mean = (x[c] + x[4 + c] + x[8 + c] + x[12 + c]) / 4.0;
        for (int64_t t = 0; t < 4; ++t) EXPECT_NEAR(y[t * 4 + c], mean, 1e-6);
    }
}

TEST_F(SwinTest, MaskedAttentionEqualsPerRegionAttention) {
    for (auto [h, m, s] : std::vector<std::tuple<int, int, int>>{{4, 2, 1}, {8, 4, 2}, {6, 3, 1}, {8, 2, 1}}) {
        auto p = random_attention(8, 2, m, uint64_t(h * 10 + m));
        auto mask = build_shift_mask<float>(h, h, m, s);
        const int64_t nw = (h / m) * (h / m), n = m * m;
        auto x = random_tensor({2 * nw, n, 8}, uint64_t(h + m + s));
        auto y = window_attention(x, p, mask);
        for (int64_t b = 0; b < 2 * nw; ++b) {
            auto expect = brute_attention(x, b, p, wrap_labels(h, h, m, s, b % nw), true);
            for (int64_t i = 0; i < n * 8; ++i) ASSERT_NEAR(y[b * n * 8 + i], expect[i], 1e-5) << h << " " << m;
        }
    }
}

TEST_F(SwinTest, AttentionRejectsWrongWidth) {
    auto p = random_attention(8, 2, 2, 9);
    EXPECT_THROW(window_attention(Tensor({1, 4, 6}), p, Tensor()), DimensionError);
    Rng rng(0);
    EXPECT_THROW(WindowAttention<float>::make(6, 4, 2, rng), DimensionError);
}

TEST_F(SwinTest, WindowAttentionGradcheck) {
    for (uint64_t seed : {0, 1, 2}) EXPECT_TRUE(gradcheck("window_attention", seed).passed) << seed;
}

// ---------------------------------------------------------------- block

TEST_F(SwinTest, ZeroProjectionsMakeBlockIdentity) {
    Rng rng(10);
    auto b = SwinBlock<float>::make(8, 2, 4, 4, 2, true, rng);
    for (auto* t : {&b.attn.qkv.weight, &b.attn.qkv.bias, &b.attn.proj.weight, &b.attn.proj.bias, &b.fc1.weight,
                    &b.fc1.bias, &b.fc2.weight, &b.fc2.bias})
        fill(*t, 0.0f);
    auto x = random_tensor({2, 16, 8}, 11);
    auto y = swin_block(x, b, 4, 4);
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST_F(SwinTest, ShiftIsInvisibleOnConstantImages) {
    Rng rng(12);
    auto shifted = SwinBlock<float>::make(8, 2, 8, 8, 4, true, rng);
    ASSERT_EQ(shifted.shift, 2);
    Rng rng2(12);
    auto plain = SwinBlock<float>::make(8, 2, 8, 8, 4, false, rng2);
    ASSERT_EQ(plain.shift, 0);
    auto token = random_tensor({8}, 13);
    Tensor x({1, 64, 8});
    for (int64_t i = 0; i < x.numel(); ++i) x.mutable_data()[i] = token[i % 8];
    auto a = swin_block(x, shifted, 8, 8);
    auto b = swin_block(x, plain, 8, 8);
    for (int64_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5);
}

TEST_F(SwinTest, SmallGridCollapsesToOneUnshiftedWindow) {
    Rng rng(14);
    auto b = SwinBlock<float>::make(16, 2, 2, 2, 4, true, rng);
    EXPECT_EQ(b.window, 2);
    EXPECT_EQ(b.shift, 0);
    EXPECT_FALSE(b.mask.defined());
}

TEST_F(SwinTest, BlockRejectsMismatchedGrid) {
    Rng rng(15);
    auto b = SwinBlock<float>::make(8, 2, 4, 4, 2, false, rng);
    EXPECT_THROW(swin_block(Tensor({1, 12, 8}), b, 4, 4), DimensionError);
    EXPECT_THROW(swin_block(Tensor({1, 16, 8}), b, 2, 8), DimensionError);
    EXPECT_THROW(SwinBlock<float>::make(8, 2, 6, 6, 4, false, rng), DimensionError);
}

TEST_F(SwinTest, BlockOutputsStayFinite) {
    Rng rng(16);
    auto b = SwinBlock<float>::make(16, 4, 8, 8, 4, true, rng);
    for (uint64_t seed = 0; seed < 4; ++seed) {
        auto y = swin_block(random_tensor({2, 64, 16}, seed, -10, 10), b, 8, 8);
        for (float v : y.data()) ASSERT_TRUE(std::isfinite(v));
    }
}

TEST_F(SwinTest, SwinBlockGradcheck) {
    for (uint64_t seed : {0, 1, 2}) {
        auto r = gradcheck("swin_block", seed);
        EXPECT_EQ(r.tolerance, 3e-2);
        EXPECT_TRUE(r.passed) << seed << " " << r.max_relative_error;
    }
}

// ---------------------------------------------------------------- embed / merge / expand

TEST_F(SwinTest, PatchEmbedShapes) {
    Rng rng(17);
    auto e = PatchEmbed<float>::make(3, 4, 32, rng);
    EXPECT_EQ(e(Tensor({1, 3, 8, 8})).shape(), (Shape{1, 4, 32}));
    EXPECT_EQ(e.patches(Tensor({1, 3, 224, 224})).shape(), (Shape{1, 3136, 48}));
    EXPECT_THROW(e(Tensor({1, 3, 10, 8})), DimensionError);
    EXPECT_THROW(e(Tensor({1, 1, 8, 8})), DimensionError);
}

TEST_F(SwinTest, IdentityProjectionRecoversFlattenedPatches) {
    Rng rng(18);
    auto e = PatchEmbed<float>::make(3, 4, 64, rng);
    fill(e.proj.weight, 0.0f);
    fill(e.proj.bias, 0.0f);
    for (int64_t i = 0; i < 48; ++i) e.proj.weight.mutable_data()[i * 64 + i] = 1.0f;
    auto x = random_tensor({1, 3, 8, 12}, 19);
    auto t = e.project(x);
    ASSERT_EQ(t.shape(), (Shape{1, 6, 64}));
    for (int64_t pr = 0; pr < 2; ++pr)
        for (int64_t pc = 0; pc < 3; ++pc)
            for (int64_t ch = 0; ch < 3; ++ch)
                for (int64_t r = 0; r < 4; ++r)
                    for (int64_t c = 0; c < 4; ++c) {
                        const int64_t token = pr * 3 + pc, k = ch * 16 + r * 4 + c;
                        EXPECT_EQ(t[token * 64 + k], x[(ch * 8 + pr * 4 + r) * 12 + pc * 4 + c]);
                    }
}

TEST_F(SwinTest, PatchMergeShapesAndConstancy) {
    Rng rng(20);
    auto m = PatchMerge<float>::make(32, rng);
    EXPECT_EQ(m(Tensor({1, 64, 32}), 8, 8).shape(), (Shape{1, 16, 64}));
    EXPECT_THROW(m(Tensor({1, 49, 32}), 7, 7), DimensionError);
    fill(m.reduction.weight, 1.0f);
    for (int64_t i = 0; i < 128; ++i) m.norm.beta.mutable_data()[i] = 0.25f;
    auto y = m(Tensor({2, 64, 32}, 3.0f), 8, 8);
    for (float v : y.data()) EXPECT_FLOAT_EQ(v, 32.0f);
}

TEST_F(SwinTest, PatchExpandShapes) {
    Rng rng(21);
    auto e = PatchExpand<float>::make(64, 2, rng);
    auto y = e(Tensor({1, 16, 64}), 4, 4);
    EXPECT_EQ(y.shape(), (Shape{1, 64, 32}));
    auto m = PatchMerge<float>::make(32, rng);
    EXPECT_EQ(m(y, 8, 8).shape(), (Shape{1, 16, 64}));
    EXPECT_THROW(PatchExpand<float>::make(7, 2, rng), DimensionError);
    EXPECT_EQ(PatchExpand<float>::make(32, 4, rng)(Tensor({1, 4, 32}), 2, 2).shape(), (Shape{1, 64, 32}));
}

TEST_F(SwinTest, PatchExpandPlacesSubpixelsRowMajor) {
    // Token t of a 2x2 grid is one-hot e_t. Sub-pixel k = a*2+b of every
    // token gets channels {t, 4+k} set, so the two largest normalized
    // channels of an output pixel name its source token and sub-pixel.
    Rng rng(22);
    auto e = PatchExpand<float>::make(16, 2, rng);  // 16 -> 4 x 8 channels
    ASSERT_EQ(e.out_dim, 8);
    fill(e.expand.weight, 0.0f);
    for (int64_t t = 0; t < 4; ++t)
        for (int64_t k = 0; k < 4; ++k) {
            e.expand.weight.mutable_data()[t * 32 + k * 8 + t] = 1.0f;
            e.expand.weight.mutable_data()[t * 32 + k * 8 + 4 + k] = 1.0f;
        }
    Tensor x({1, 4, 16});
    for (int64_t t = 0; t < 4; ++t) x.mutable_data()[t * 16 + t] = 1.0f;
    auto y = e(x, 2, 2);
    ASSERT_EQ(y.shape(), (Shape{1, 16, 8}));
    for (int64_t r = 0; r < 2; ++r)
        for (int64_t c = 0; c < 2; ++c)
            for (int64_t a = 0; a < 2; ++a)
                for (int64_t b = 0; b < 2; ++b) {
                    const int64_t pixel = (r * 2 + a) * 4 + c * 2 + b;
                    std::set<int64_t> top;
                    for (int64_t ch = 0; ch < 8; ++ch)
                        if (y[pixel * 8 + ch] > 0.0f) top.insert(ch);
                    EXPECT_EQ(top, (std::set<int64_t>{r * 2 + c, 4 + a * 2 + b})) << r << c << a << b;
                }
}

TEST_F(SwinTest, LayerGradchecks) {
    for (const char* op : {"patch_embed", "patch_merge", "patch_expand"})
        for (uint64_t seed : {0, 1, 2}) {
            auto r = gradcheck(op, seed);
            EXPECT_EQ(r.tolerance, 1e-2);
            EXPECT_TRUE(r.passed) << op << " " << seed;
        }
}
