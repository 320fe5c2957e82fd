#pragma once

// Markovian PatchGAN discriminator over channel-concatenated
// (degraded, candidate) pairs. Five 4x4 convolutions with widths
// 64-128-256-512-1 and strides 2-2-2-1-1; batch norm + leaky ReLU(0.2) after
// the first four, sigmoid after the last.

#include <array>
#include <string>

#include "swinpg/layers.hpp"

namespace swinpg {

inline constexpr std::array<int64_t, 5> kDiscriminatorWidths{64, 128, 256, 512, 1};
inline constexpr std::array<int64_t, 5> kDiscriminatorStrides{2, 2, 2, 1, 1};
inline constexpr int64_t kDiscriminatorKernel = 4;
inline constexpr int64_t kDiscriminatorPadding = 1;

template <class T>
struct Discriminator {
    std::array<Conv2d<T>, 5> convs;
    std::array<BatchNorm2d<T>, 4> norms;
    NormMode mode = NormMode::train;

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        for (std::size_t i = 0; i < convs.size(); ++i) {
            convs[i].visit(prefix + "conv" + std::to_string(i), f);
            if (i < norms.size()) norms[i].visit(prefix + "bn" + std::to_string(i), f);
        }
    }
};

/// normal(0, 0.02) conv weights; batch-normalized layers carry no bias.
template <class T = float>
Discriminator<T> build_discriminator(uint64_t seed) {
    Rng rng(seed);
    Discriminator<T> d;
    int64_t in = 6;
    for (std::size_t i = 0; i < 5; ++i) {
        const bool last = i == 4;
        d.convs[i] = Conv2d<T>::make(in, kDiscriminatorWidths[i], kDiscriminatorKernel, kDiscriminatorStrides[i],
                                     kDiscriminatorPadding, last, rng, 0.02);
        if (!last) d.norms[i] = BatchNorm2d<T>::make(kDiscriminatorWidths[i]);
        in = kDiscriminatorWidths[i];
    }
    return d;
}

/// Side length of the probability map for a square input.
constexpr int64_t discriminator_output_size(int64_t input) {
    int64_t s = input;
    for (int64_t stride : kDiscriminatorStrides) s = conv_output_size(s, kDiscriminatorKernel, stride, kDiscriminatorPadding);
    return s;
}

/// Input rows [first, last] (inclusive, may extend into padding) seen by
/// output row `out` of the final layer.
inline std::pair<int64_t, int64_t> discriminator_receptive_field(int64_t out) {
    int64_t lo = out, hi = out;
    for (auto it = kDiscriminatorStrides.rbegin(); it != kDiscriminatorStrides.rend(); ++it) {
        lo = lo * *it - kDiscriminatorPadding;
        hi = hi * *it - kDiscriminatorPadding + kDiscriminatorKernel - 1;
    }
    return {lo, hi};
}

/// [n, 6, H, W] -> [n, 1, h', w'] with every value in (0, 1).
template <class T>
BasicTensor<T> discriminator_forward(Discriminator<T>& d, const BasicTensor<T>& pair) {
    if (pair.ndim() != 4 || pair.dim(1) != 6) {
        throw DimensionError("discriminator: expected [n,6,H,W] pair input, got " + shape_string(pair.shape()));
    }
    auto h = pair;
    for (std::size_t i = 0; i < 4; ++i) h = leaky_relu(d.norms[i](d.convs[i](h), d.mode), 0.2);
    return sigmoid(d.convs[4](h));
}

}  // namespace swinpg
