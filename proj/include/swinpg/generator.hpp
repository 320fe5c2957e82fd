#pragma once

// Swin-UNet generator: patch embedding, encoder stages joined by patch
// merging, a bottleneck at the deepest resolution, and a mirrored decoder
// that fuses same-resolution encoder features through concat + linear.
// A 4x final expansion and a tanh head map back to 3-channel pixels.

#include <sstream>
#include <string>
#include <vector>

#include "swinpg/swin.hpp"

namespace swinpg {

enum class BlockKind { swin, conv };

struct ModelConfig {
    int64_t image_size = 64;
    int64_t patch_size = 4;
    int64_t embed_dim = 32;
    std::vector<int64_t> depths{2, 2, 2, 2};
    std::vector<int64_t> heads{2, 4, 4, 8};
    int64_t window_size = 4;
    int64_t bottleneck_depth = 2;
    BlockKind block = BlockKind::swin;
    bool use_discriminator = true;
    uint64_t seed = 0;

    /// Laptop-sized default used by tests and the CLI.
    static ModelConfig desk() { return {}; }

    /// Canonical Swin-T ratios at 224x224 input.
    static ModelConfig paper() {
        ModelConfig c;
        c.image_size = 224;
        c.embed_dim = 96;
        c.heads = {3, 6, 12, 24};
        c.window_size = 7;
        return c;
    }

    int64_t num_stages() const { return static_cast<int64_t>(depths.size()); }
    int64_t stage_dim(int64_t s) const { return embed_dim << s; }
    int64_t stage_resolution(int64_t s) const { return (image_size / patch_size) >> s; }

    std::vector<int64_t> stage_resolutions() const {
        std::vector<int64_t> r;
        for (int64_t s = 0; s < num_stages(); ++s) r.push_back(stage_resolution(s));
        return r;
    }

    /// Window actually used at a stage: the grid itself when it is smaller.
    int64_t effective_window(int64_t s) const { return std::min(window_size, stage_resolution(s)); }

    void validate() const {
        auto fail = [](const std::string& msg) { throw ConfigError(msg); };
        if (depths.empty()) fail("model: at least one stage is required");
        if (heads.size() != depths.size()) fail("model: depths and heads must have the same length");
        if (patch_size < 1 || embed_dim < 1 || window_size < 1 || image_size < 1) fail("model: sizes must be positive");
        if (bottleneck_depth < 0) fail("model: bottleneck_depth must be >= 0");
        if (image_size % patch_size != 0) {
            fail("model: image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                 std::to_string(patch_size));
        }
        int64_t res = image_size / patch_size;
        for (int64_t s = 0; s < num_stages(); ++s) {
            const auto su = static_cast<std::size_t>(s);
            if (s > 0) {
                if (res % 2 != 0) {
                    fail("model: stage " + std::to_string(s) + " cannot halve odd resolution " + std::to_string(res));
                }
                res /= 2;
            }
            if (res < 1) fail("model: stage " + std::to_string(s) + " has empty resolution");
            const int64_t win = std::min(window_size, res);
            if (res % win != 0) {
                fail("model: stage " + std::to_string(s) + " resolution " + std::to_string(res) +
                     " not divisible by window size " + std::to_string(win));
            }
            if (depths[su] < 0) fail("model: stage " + std::to_string(s) + " has negative depth");
            if (heads[su] < 1 || stage_dim(s) % heads[su] != 0) {
                fail("model: stage " + std::to_string(s) + " dim " + std::to_string(stage_dim(s)) +
                     " not divisible by " + std::to_string(heads[su]) + " heads");
            }
        }
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Convolutional stand-in for a Swin block (ablation): two 3x3 convs with
/// batch norm and leaky ReLU 0.2, plus a residual path, on the same token
/// layout so encoder/decoder wiring does not change.
template <class T>
struct ConvBlock {
    Conv2d<T> conv1;
    BatchNorm2d<T> bn1;
    Conv2d<T> conv2;
    BatchNorm2d<T> bn2;
    int64_t height = 0;
    int64_t width = 0;

    static ConvBlock make(int64_t dim, int64_t height, int64_t width, Rng& rng) {
        ConvBlock b;
        b.conv1 = Conv2d<T>::make(dim, dim, 3, 1, 1, false, rng);
        b.bn1 = BatchNorm2d<T>::make(dim);
        b.conv2 = Conv2d<T>::make(dim, dim, 3, 1, 1, false, rng);
        b.bn2 = BatchNorm2d<T>::make(dim);
        b.height = height;
        b.width = width;
        return b;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        conv1.visit(prefix + ".conv1", f);
        bn1.visit(prefix + ".bn1", f);
        conv2.visit(prefix + ".conv2", f);
        bn2.visit(prefix + ".bn2", f);
    }
};

template <class T>
BasicTensor<T> conv_block_forward(const BasicTensor<T>& x, ConvBlock<T>& p, NormMode mode) {
    if (x.ndim() != 3 || x.dim(1) != p.height * p.width) {
        throw DimensionError("conv_block: input " + shape_string(x.shape()) + " for a " + std::to_string(p.height) +
                             "x" + std::to_string(p.width) + " grid");
    }
    const int64_t n = x.dim(0), c = x.dim(2);
    auto h = permute(reshape(x, {n, p.height, p.width, c}), {0, 3, 1, 2});
    h = leaky_relu(p.bn1(p.conv1(h), mode), 0.2);
    h = p.bn2(p.conv2(h), mode);
    h = reshape(permute(h, {0, 2, 3, 1}), {n, p.height * p.width, c});
    return add(x, h);
}

/// A run of blocks at one resolution; exactly one of the vectors is used.
template <class T>
struct Stage {
    std::vector<SwinBlock<T>> swin;
    std::vector<ConvBlock<T>> conv;
    int64_t resolution = 0;

    static Stage make(const ModelConfig& cfg, int64_t dim, int64_t heads, int64_t resolution, int64_t depth, Rng& rng) {
        Stage s;
        s.resolution = resolution;
        for (int64_t i = 0; i < depth; ++i) {
            if (cfg.block == BlockKind::swin) {
                s.swin.push_back(SwinBlock<T>::make(dim, heads, resolution, resolution, cfg.window_size, i % 2 == 1, rng));
            } else {
                s.conv.push_back(ConvBlock<T>::make(dim, resolution, resolution, rng));
            }
        }
        return s;
    }

    BasicTensor<T> forward(BasicTensor<T> x, NormMode mode) {
        for (const auto& b : swin) x = swin_block(x, b, resolution, resolution);
        for (auto& b : conv) x = conv_block_forward(x, b, mode);
        return x;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        for (std::size_t i = 0; i < swin.size(); ++i) swin[i].visit(prefix + ".block" + std::to_string(i), f);
        for (std::size_t i = 0; i < conv.size(); ++i) conv[i].visit(prefix + ".conv" + std::to_string(i), f);
    }
};

template <class T>
struct Generator {
    ModelConfig config;
    PatchEmbed<T> embed;
    std::vector<Stage<T>> encoder;
    std::vector<PatchMerge<T>> merges;  // between encoder stages s and s+1
    Stage<T> bottleneck;
    std::vector<Linear<T>> fuse;        // per decoder stage: 2*dim -> dim
    std::vector<Stage<T>> decoder;
    std::vector<PatchExpand<T>> expands;  // decoder stage s -> s-1 (index s-1)
    PatchExpand<T> final_expand;
    Linear<T> head;  // embed_dim -> 3
    NormMode mode = NormMode::train;

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        embed.visit(prefix + "embed", f);
        for (std::size_t s = 0; s < encoder.size(); ++s) encoder[s].visit(prefix + "enc" + std::to_string(s), f);
        for (std::size_t s = 0; s < merges.size(); ++s) merges[s].visit(prefix + "merge" + std::to_string(s), f);
        bottleneck.visit(prefix + "bottleneck", f);
        for (std::size_t s = 0; s < decoder.size(); ++s) {
            fuse[s].visit(prefix + "fuse" + std::to_string(s), f);
            decoder[s].visit(prefix + "dec" + std::to_string(s), f);
        }
        for (std::size_t s = 0; s < expands.size(); ++s) expands[s].visit(prefix + "expand" + std::to_string(s), f);
        final_expand.visit(prefix + "final_expand", f);
        head.visit(prefix + "head", f);
    }
};

/// Deterministic initialization: truncated normal(0.02) weights, zero
/// biases, unit/zero norm affine parameters.
template <class T = float>
Generator<T> build_generator(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    Generator<T> g;
    g.config = cfg;
    const int64_t stages = cfg.num_stages();
    g.embed = PatchEmbed<T>::make(3, cfg.patch_size, cfg.embed_dim, rng);
    for (int64_t s = 0; s < stages; ++s) {
        const auto su = static_cast<std::size_t>(s);
        g.encoder.push_back(Stage<T>::make(cfg, cfg.stage_dim(s), cfg.heads[su], cfg.stage_resolution(s), cfg.depths[su], rng));
        if (s + 1 < stages) g.merges.push_back(PatchMerge<T>::make(cfg.stage_dim(s), rng));
    }
    const int64_t last = stages - 1;
    g.bottleneck = Stage<T>::make(cfg, cfg.stage_dim(last), cfg.heads[static_cast<std::size_t>(last)],
                                  cfg.stage_resolution(last), cfg.bottleneck_depth, rng);
    for (int64_t s = 0; s < stages; ++s) {
        const auto su = static_cast<std::size_t>(s);
        g.fuse.push_back(Linear<T>::make(2 * cfg.stage_dim(s), cfg.stage_dim(s), true, rng));
        g.decoder.push_back(Stage<T>::make(cfg, cfg.stage_dim(s), cfg.heads[su], cfg.stage_resolution(s), cfg.depths[su], rng));
        if (s > 0) g.expands.push_back(PatchExpand<T>::make(cfg.stage_dim(s), 2, rng));
    }
    g.final_expand = PatchExpand<T>::make(cfg.embed_dim, cfg.patch_size, rng);
    g.head = Linear<T>::make(cfg.embed_dim, 3, true, rng);
    return g;
}

/// [n, 3, H, W] in [-1, 1] -> [n, 3, H, W] in (-1, 1).
template <class T>
BasicTensor<T> generator_forward(Generator<T>& g, const BasicTensor<T>& x) {
    const auto& cfg = g.config;
    if (x.ndim() != 4 || x.dim(1) != 3 || x.dim(2) != cfg.image_size || x.dim(3) != cfg.image_size) {
        throw DimensionError("generator: expected [n,3," + std::to_string(cfg.image_size) + "," +
                             std::to_string(cfg.image_size) + "], got " + shape_string(x.shape()));
    }
    const int64_t n = x.dim(0), stages = cfg.num_stages();
    auto h = g.embed(x);
    std::vector<BasicTensor<T>> skips;
    for (int64_t s = 0; s < stages; ++s) {
        h = g.encoder[static_cast<std::size_t>(s)].forward(h, g.mode);
        skips.push_back(h);
        if (s + 1 < stages) {
            const int64_t r = cfg.stage_resolution(s);
            h = g.merges[static_cast<std::size_t>(s)](h, r, r);
        }
    }
    h = g.bottleneck.forward(h, g.mode);
    for (int64_t s = stages - 1; s >= 0; --s) {
        const auto su = static_cast<std::size_t>(s);
        h = g.fuse[su](concat<T>({h, skips[su]}, -1));
        h = g.decoder[su].forward(h, g.mode);
        if (s > 0) {
            const int64_t r = cfg.stage_resolution(s);
            h = g.expands[su - 1](h, r, r);
        }
    }
    const int64_t r0 = cfg.stage_resolution(0);
    h = g.final_expand(h, r0, r0);
    h = tanh(g.head(h));  // [n, H*W, 3]
    return permute(reshape(h, {n, cfg.image_size, cfg.image_size, 3}), {0, 3, 1, 2});
}

}  // namespace swinpg
