#pragma once

// Shifted-window transformer machinery: window partitioning, relative
// position bias, shift masks, windowed multi-head attention, the transformer
// block, and the patch embed / merge / expand layers of the U-Net.

#include <cmath>
#include <string>
#include <vector>

#include "swinpg/layers.hpp"

namespace swinpg {

inline constexpr double kShiftMaskValue = -100.0;

/// Tiling of an H x W token grid into M x M windows.
struct WindowGrid {
    int64_t height = 0;
    int64_t width = 0;
    int64_t window = 0;

    static WindowGrid make(int64_t height, int64_t width, int64_t window) {
        if (window < 1) throw ContractError("window size must be >= 1");
        if (height % window != 0 || width % window != 0) {
            throw DimensionError("grid " + std::to_string(height) + "x" + std::to_string(width) +
                                 " is not divisible by window size " + std::to_string(window));
        }
        return {height, width, window};
    }

    int64_t num_windows() const { return (height / window) * (width / window); }
    int64_t tokens_per_window() const { return window * window; }
};

/// [n, H, W, C] -> [n * num_windows, M*M, C]; windows in row-major order,
/// tokens row-major inside each window.
template <class T>
BasicTensor<T> window_partition(const BasicTensor<T>& x, int64_t window) {
    if (x.ndim() != 4) throw DimensionError("window_partition: expected [n,H,W,C], got " + shape_string(x.shape()));
    const auto g = WindowGrid::make(x.dim(1), x.dim(2), window);
    const int64_t n = x.dim(0), c = x.dim(3);
    auto v = reshape(x, {n, g.height / window, window, g.width / window, window, c});
    v = permute(v, {0, 1, 3, 2, 4, 5});
    return reshape(v, {n * g.num_windows(), window * window, c});
}

template <class T>
BasicTensor<T> window_reverse(const BasicTensor<T>& windows, int64_t window, int64_t height, int64_t width) {
    const auto g = WindowGrid::make(height, width, window);
    if (windows.ndim() != 3 || windows.dim(1) != window * window || windows.dim(0) % g.num_windows() != 0) {
        throw DimensionError("window_reverse: " + shape_string(windows.shape()) + " inconsistent with " +
                             std::to_string(height) + "x" + std::to_string(width) + " grid, window " +
                             std::to_string(window));
    }
    const int64_t n = windows.dim(0) / g.num_windows(), c = windows.dim(2);
    auto v = reshape(windows, {n, height / window, width / window, window, window, c});
    v = permute(v, {0, 1, 3, 2, 4, 5});
    return reshape(v, {n, height, width, c});
}

/// Row-major [M*M, M*M] lookup of the bias-table row for each token pair.
inline std::vector<int32_t> build_relative_index(int64_t window) {
    if (window < 1) throw ContractError("build_relative_index: window size must be >= 1");
    const int64_t n = window * window;
    const int64_t span = 2 * window - 1;
    std::vector<int32_t> index(static_cast<std::size_t>(n * n));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j) {
            const int64_t dr = i / window - j / window;
            const int64_t dc = i % window - j % window;
            index[static_cast<std::size_t>(i * n + j)] = static_cast<int32_t>((dr + window - 1) * span + (dc + window - 1));
        }
    return index;
}

/// Attention mask for a cyclically shifted grid: [num_windows, M*M, M*M]
/// holding 0 or kShiftMaskValue. Regions are labelled on the shifted frame
/// with three slices per axis; token pairs from different labels are masked.
template <class T>
BasicTensor<T> build_shift_mask(int64_t height, int64_t width, int64_t window, int64_t shift) {
    const auto g = WindowGrid::make(height, width, window);
    if (shift < 0 || shift >= window) {
        throw ContractError("build_shift_mask: shift " + std::to_string(shift) + " must lie in [0, " +
                            std::to_string(window) + ")");
    }
    const int64_t nw = g.num_windows(), n = g.tokens_per_window();
    BasicTensor<T> mask(Shape{nw, n, n});
    if (shift == 0) return mask;

    auto slice_of = [&](int64_t p, int64_t len) -> int64_t {
        if (p < len - window) return 0;
        if (p < len - shift) return 1;
        return 2;
    };
    std::vector<int64_t> labels(static_cast<std::size_t>(height * width));
    for (int64_t r = 0; r < height; ++r)
        for (int64_t c = 0; c < width; ++c)
            labels[static_cast<std::size_t>(r * width + c)] = slice_of(r, height) * 3 + slice_of(c, width);

    auto m = mask.mutable_data();
    const int64_t per_row = width / window;
    for (int64_t wi = 0; wi < nw; ++wi) {
        const int64_t r0 = (wi / per_row) * window, c0 = (wi % per_row) * window;
        for (int64_t i = 0; i < n; ++i) {
            const int64_t li = labels[static_cast<std::size_t>((r0 + i / window) * width + c0 + i % window)];
            for (int64_t j = 0; j < n; ++j) {
                const int64_t lj = labels[static_cast<std::size_t>((r0 + j / window) * width + c0 + j % window)];
                if (li != lj) m[static_cast<std::size_t>((wi * n + i) * n + j)] = static_cast<T>(kShiftMaskValue);
            }
        }
    }
    return mask;
}

/// Adds a constant [num_windows, N, N] mask to [B_, heads, N, N] logits,
/// where B_ enumerates windows image-major.
template <class T>
BasicTensor<T> add_window_mask(const BasicTensor<T>& logits, const BasicTensor<T>& mask) {
    if (logits.ndim() != 4 || mask.ndim() != 3 || logits.dim(2) != mask.dim(1) || logits.dim(3) != mask.dim(2) ||
        logits.dim(0) % mask.dim(0) != 0) {
        throw DimensionError("add_window_mask: logits " + shape_string(logits.shape()) + " vs mask " +
                             shape_string(mask.shape()));
    }
    const int64_t nw = mask.dim(0), heads = logits.dim(1), nn = logits.dim(2) * logits.dim(3);
    BasicTensor<T> out(logits.shape());
    auto o = out.mutable_data();
    auto in = logits.data();
    auto mk = mask.data();
    for (int64_t b = 0; b < logits.dim(0); ++b)
        for (int64_t h = 0; h < heads; ++h) {
            const int64_t base = (b * heads + h) * nn, mbase = (b % nw) * nn;
            for (int64_t e = 0; e < nn; ++e) o[static_cast<std::size_t>(base + e)] = in[static_cast<std::size_t>(base + e)] + mk[static_cast<std::size_t>(mbase + e)];
        }
    if (detail::any_requires_grad<T>({&logits})) {
        detail::attach(out, "add_window_mask", [li = logits.impl()](std::span<const T> g) {
            if (T* gl = detail::sink(li)) for (std::size_t i = 0; i < g.size(); ++i) gl[i] += g[i];
        });
    }
    return out;
}

template <class T>
struct WindowAttention {
    Linear<T> qkv;   // dim -> 3*dim
    Linear<T> proj;  // dim -> dim
    BasicTensor<T> bias_table;  // [(2M-1)^2, heads]
    int64_t dim = 0;
    int64_t heads = 1;
    int64_t window = 1;
    std::vector<int32_t> relative_index;

    static WindowAttention make(int64_t dim, int64_t heads, int64_t window, Rng& rng) {
        if (heads < 1 || dim % heads != 0) {
            throw DimensionError("window attention: dim " + std::to_string(dim) + " not divisible by " +
                                 std::to_string(heads) + " heads");
        }
        WindowAttention a;
        a.dim = dim;
        a.heads = heads;
        a.window = window;
        a.qkv = Linear<T>::make(dim, 3 * dim, true, rng);
        a.proj = Linear<T>::make(dim, dim, true, rng);
        const int64_t span = 2 * window - 1;
        a.bias_table = make_param(BasicTensor<T>::truncated_normal({span * span, heads}, rng, 0.02));
        a.relative_index = build_relative_index(window);
        return a;
    }

    int64_t head_dim() const { return dim / heads; }

    /// Relative position bias laid out as [heads, N, N].
    BasicTensor<T> position_bias() const {
        const int64_t n = window * window;
        auto b = gather_rows(bias_table, relative_index);
        b = reshape(b, {n, n, heads});
        return permute(b, {2, 0, 1});
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        qkv.visit(prefix + ".qkv", f);
        proj.visit(prefix + ".proj", f);
        f(prefix + ".bias_table", bias_table, TensorKind::parameter);
    }
};

/// Multi-head self-attention inside each window:
/// softmax(Q K^T / sqrt(d) + B + mask) V per head, heads concatenated and
/// projected. `mask` may be undefined.
template <class T>
BasicTensor<T> window_attention(const BasicTensor<T>& x, const WindowAttention<T>& p, const BasicTensor<T>& mask) {
    if (x.ndim() != 3 || x.dim(2) != p.dim || x.dim(1) != p.window * p.window) {
        throw DimensionError("window_attention: input " + shape_string(x.shape()) + " for dim " +
                             std::to_string(p.dim) + ", window " + std::to_string(p.window));
    }
    const int64_t bw = x.dim(0), n = x.dim(1), hd = p.head_dim();
    auto qkv = reshape(p.qkv(x), {bw, n, 3, p.heads, hd});
    qkv = permute(qkv, {2, 0, 3, 1, 4});  // [3, B_, heads, N, hd]
    auto parts = split(qkv, 0, {1, 1, 1});
    auto q = scale(reshape(parts[0], {bw, p.heads, n, hd}), static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
    auto k = reshape(parts[1], {bw, p.heads, n, hd});
    auto v = reshape(parts[2], {bw, p.heads, n, hd});

    auto logits = matmul(q, permute(k, {0, 1, 3, 2}));
    logits = add_suffix(logits, p.position_bias());
    if (mask.defined()) logits = add_window_mask(logits, mask);
    auto attn = softmax(logits, -1);
    auto out = permute(matmul(attn, v), {0, 2, 1, 3});  // [B_, N, heads, hd]
    return p.proj(reshape(out, {bw, n, p.dim}));
}

/// Pre-norm transformer block over an H x W token grid. Odd-indexed blocks
/// in a stage shift the window grid by floor(M/2).
template <class T>
struct SwinBlock {
    LayerNorm<T> norm1;
    WindowAttention<T> attn;
    LayerNorm<T> norm2;
    Linear<T> fc1;
    Linear<T> fc2;
    int64_t height = 0;
    int64_t width = 0;
    int64_t window = 1;
    int64_t shift = 0;
    BasicTensor<T> mask;

    /// A grid no larger than the window collapses to one unshifted window.
    static SwinBlock make(int64_t dim, int64_t heads, int64_t height, int64_t width, int64_t window, bool shifted,
                          Rng& rng, int64_t mlp_ratio = 4) {
        SwinBlock b;
        b.height = height;
        b.width = width;
        b.window = window;
        b.shift = shifted ? window / 2 : 0;
        if (std::min(height, width) <= window) {
            b.window = std::min(height, width);
            b.shift = 0;
        }
        WindowGrid::make(height, width, b.window);
        b.norm1 = LayerNorm<T>::make(dim);
        b.attn = WindowAttention<T>::make(dim, heads, b.window, rng);
        b.norm2 = LayerNorm<T>::make(dim);
        b.fc1 = Linear<T>::make(dim, mlp_ratio * dim, true, rng);
        b.fc2 = Linear<T>::make(mlp_ratio * dim, dim, true, rng);
        if (b.shift > 0) b.mask = build_shift_mask<T>(height, width, b.window, b.shift);
        return b;
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        norm1.visit(prefix + ".norm1", f);
        attn.visit(prefix + ".attn", f);
        norm2.visit(prefix + ".norm2", f);
        fc1.visit(prefix + ".fc1", f);
        fc2.visit(prefix + ".fc2", f);
    }
};

template <class T>
BasicTensor<T> swin_block(const BasicTensor<T>& x, const SwinBlock<T>& p, int64_t height, int64_t width) {
    if (x.ndim() != 3 || x.dim(1) != height * width || height != p.height || width != p.width) {
        throw DimensionError("swin_block: input " + shape_string(x.shape()) + " for a " + std::to_string(height) +
                             "x" + std::to_string(width) + " grid, block built for " + std::to_string(p.height) +
                             "x" + std::to_string(p.width));
    }
    WindowGrid::make(height, width, p.window);
    const int64_t n = x.dim(0), c = x.dim(2);
    auto h = reshape(p.norm1(x), {n, height, width, c});
    if (p.shift > 0) h = roll(h, -p.shift, -p.shift);
    auto windows = window_partition(h, p.window);
    auto attended = window_attention(windows, p.attn, p.mask);
    h = window_reverse(attended, p.window, height, width);
    if (p.shift > 0) h = roll(h, p.shift, p.shift);
    auto y = add(x, reshape(h, {n, height * width, c}));
    auto mlp = p.fc2(gelu(p.fc1(p.norm2(y))));
    return add(y, mlp);
}

/// Non-overlapping patch x patch pixels flattened and linearly embedded.
template <class T>
struct PatchEmbed {
    Linear<T> proj;  // in_ch*patch*patch -> dim
    LayerNorm<T> norm;
    int64_t patch = 4;
    int64_t in_channels = 3;

    static PatchEmbed make(int64_t in_channels, int64_t patch, int64_t dim, Rng& rng) {
        PatchEmbed e;
        e.patch = patch;
        e.in_channels = in_channels;
        e.proj = Linear<T>::make(in_channels * patch * patch, dim, true, rng);
        e.norm = LayerNorm<T>::make(dim);
        return e;
    }

    /// Flattened (channel, row, col) patches, [n, tokens, in_ch*patch^2].
    BasicTensor<T> patches(const BasicTensor<T>& x) const {
        if (x.ndim() != 4 || x.dim(1) != in_channels || x.dim(2) % patch != 0 || x.dim(3) % patch != 0) {
            throw DimensionError("patch_embed: input " + shape_string(x.shape()) + " not divisible into " +
                                 std::to_string(patch) + "x" + std::to_string(patch) + " patches of " +
                                 std::to_string(in_channels) + " channels");
        }
        const int64_t n = x.dim(0), hp = x.dim(2) / patch, wp = x.dim(3) / patch;
        auto v = reshape(x, {n, in_channels, hp, patch, wp, patch});
        v = permute(v, {0, 2, 4, 1, 3, 5});
        return reshape(v, {n, hp * wp, in_channels * patch * patch});
    }

    BasicTensor<T> project(const BasicTensor<T>& x) const { return proj(patches(x)); }
    BasicTensor<T> operator()(const BasicTensor<T>& x) const { return norm(project(x)); }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        proj.visit(prefix + ".proj", f);
        norm.visit(prefix + ".norm", f);
    }
};

/// 2x2 neighbourhood concat (4C), layer norm, projection to 2C.
template <class T>
struct PatchMerge {
    LayerNorm<T> norm;
    Linear<T> reduction;

    static PatchMerge make(int64_t dim, Rng& rng) {
        return {LayerNorm<T>::make(4 * dim), Linear<T>::make(4 * dim, 2 * dim, false, rng)};
    }

    BasicTensor<T> operator()(const BasicTensor<T>& x, int64_t height, int64_t width) const {
        if (x.ndim() != 3 || x.dim(1) != height * width || height % 2 != 0 || width % 2 != 0) {
            throw DimensionError("patch_merge: input " + shape_string(x.shape()) + " for a " +
                                 std::to_string(height) + "x" + std::to_string(width) + " grid (needs even sides)");
        }
        const int64_t n = x.dim(0), c = x.dim(2);
        auto v = reshape(x, {n, height / 2, 2, width / 2, 2, c});
        v = permute(v, {0, 1, 3, 4, 2, 5});  // neighbours ordered (0,0),(1,0),(0,1),(1,1)
        v = reshape(v, {n, height * width / 4, 4 * c});
        return reduction(norm(v));
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        norm.visit(prefix + ".norm", f);
        reduction.visit(prefix + ".reduction", f);
    }
};

/// Projection C -> scale^2 * C/divisor then pixel rearrangement into a
/// scale x scale block, followed by layer norm. scale 2 halves the
/// channels (decoder expand); scale 4 keeps them (final expand).
template <class T>
struct PatchExpand {
    Linear<T> expand;
    LayerNorm<T> norm;
    int64_t scale = 2;
    int64_t out_dim = 0;

    static PatchExpand make(int64_t dim, int64_t scale, Rng& rng) {
        PatchExpand e;
        e.scale = scale;
        e.out_dim = scale == 2 ? dim / 2 : dim;
        if (scale == 2 && dim % 2 != 0) throw DimensionError("patch_expand: odd channel count " + std::to_string(dim));
        e.expand = Linear<T>::make(dim, scale * scale * e.out_dim, false, rng);
        e.norm = LayerNorm<T>::make(e.out_dim);
        return e;
    }

    BasicTensor<T> operator()(const BasicTensor<T>& x, int64_t height, int64_t width) const {
        if (x.ndim() != 3 || x.dim(1) != height * width) {
            throw DimensionError("patch_expand: input " + shape_string(x.shape()) + " for a " +
                                 std::to_string(height) + "x" + std::to_string(width) + " grid");
        }
        const int64_t n = x.dim(0), s = scale;
        auto v = reshape(expand(x), {n, height, width, s, s, out_dim});
        v = permute(v, {0, 1, 3, 2, 4, 5});
        v = reshape(v, {n, height * s * width * s, out_dim});
        return norm(v);
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        expand.visit(prefix + ".expand", f);
        norm.visit(prefix + ".norm", f);
    }
};

}  // namespace swinpg
