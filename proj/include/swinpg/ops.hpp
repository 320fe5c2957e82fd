#pragma once

// Differentiable operators. Every op computes its forward result eagerly and,
// when any input requires a gradient, appends one backward closure to the tape.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "swinpg/gemm.hpp"
#include "swinpg/tensor.hpp"

namespace swinpg {

namespace detail {

inline int64_t normalize_axis(int64_t axis, int64_t ndim, const char* op) {
    const int64_t a = axis < 0 ? axis + ndim : axis;
    if (a < 0 || a >= ndim) {
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                             std::to_string(ndim));
    }
    return a;
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) throw DimensionError(std::string(op) + ": shapes " + shape_string(a) + " and " + shape_string(b) + " differ");
}

inline std::vector<int64_t> strides_of(const Shape& shape) {
    std::vector<int64_t> s(shape.size(), 1);
    for (int64_t i = static_cast<int64_t>(shape.size()) - 2; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = s[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
    }
    return s;
}

/// Elementwise map with derivative df(x, y) evaluated from input and output.
template <class T, class F, class DF>
BasicTensor<T> map_unary(const BasicTensor<T>& x, const char* op, F f, DF df) {
    BasicTensor<T> out(x.shape());
    auto in = x.data();
    auto o = out.mutable_data();
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = f(in[i]);
    check_finite(out, op);
    if (any_requires_grad<T>({&x})) {
        attach(out, op, [xi = x.impl(), oi = out.impl(), df](std::span<const T> g) {
            if (T* gx = sink(xi)) {
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xi->data[i], oi->data[i]);
            }
        });
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "add");
    BasicTensor<T> out(a.shape());
    auto o = out.mutable_data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] + b.data()[i];
    if (detail::any_requires_grad<T>({&a, &b})) {
        detail::attach(out, "add", [ai = a.impl(), bi = b.impl()](std::span<const T> g) {
            if (T* ga = detail::sink(ai)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            if (T* gb = detail::sink(bi)) for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        });
    }
    return out;
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "sub");
    BasicTensor<T> out(a.shape());
    auto o = out.mutable_data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] - b.data()[i];
    if (detail::any_requires_grad<T>({&a, &b})) {
        detail::attach(out, "sub", [ai = a.impl(), bi = b.impl()](std::span<const T> g) {
            if (T* ga = detail::sink(ai)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            if (T* gb = detail::sink(bi)) for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        });
    }
    return out;
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "mul");
    BasicTensor<T> out(a.shape());
    auto o = out.mutable_data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] * b.data()[i];
    if (detail::any_requires_grad<T>({&a, &b})) {
        detail::attach(out, "mul", [ai = a.impl(), bi = b.impl()](std::span<const T> g) {
            if (T* ga = detail::sink(ai)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
            if (T* gb = detail::sink(bi)) for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
        });
    }
    return out;
}

/// a + b where b's shape equals the trailing dimensions of a (bias add).
template <class T>
BasicTensor<T> add_suffix(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sb.size() > sa.size() || !std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) {
        throw DimensionError("add_suffix: " + shape_string(sb) + " is not a suffix of " + shape_string(sa));
    }
    const auto inner = static_cast<std::size_t>(b.numel());
    BasicTensor<T> out(sa);
    auto o = out.mutable_data();
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] + bd[i % inner];
    if (detail::any_requires_grad<T>({&a, &b})) {
        detail::attach(out, "add_suffix", [ai = a.impl(), bi = b.impl(), inner](std::span<const T> g) {
            if (T* ga = detail::sink(ai)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            if (T* gb = detail::sink(bi)) for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i];
        });
    }
    return out;
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& x, T s) {
    return detail::map_unary(x, "scale", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T s) {
    return detail::map_unary(x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
BasicTensor<T> abs(const BasicTensor<T>& x) {
    return detail::map_unary(
        x, "abs", [](T v) { return std::abs(v); }, [](T v, T) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
}

/// log(max(x, floor)); the gradient is zero where the clamp is active.
template <class T>
BasicTensor<T> log_clamped(const BasicTensor<T>& x, T floor = T(1e-12)) {
    return detail::map_unary(
        x, "log_clamped", [floor](T v) { return std::log(std::max(v, floor)); },
        [floor](T v, T) { return v > floor ? T(1) / v : T(0); });
}

// ---------------------------------------------------------------------------
// Activations

struct Activation {
    enum class Kind { gelu, leaky_relu, tanh, sigmoid };
    Kind kind = Kind::gelu;
    double slope = 0.0;

    static Activation gelu() { return {Kind::gelu, 0.0}; }
    static Activation leaky_relu(double slope) { return {Kind::leaky_relu, slope}; }
    static Activation tanh() { return {Kind::tanh, 0.0}; }
    static Activation sigmoid() { return {Kind::sigmoid, 0.0}; }
};

template <class T>
BasicTensor<T> activation(Activation act, const BasicTensor<T>& x) {
    switch (act.kind) {
        case Activation::Kind::gelu:
            return detail::map_unary(
                x, "gelu", [](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2))); },
                [](T v, T) {
                    const T cdf = T(0.5) * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2)));
                    const T pdf = std::exp(T(-0.5) * v * v) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
                    return cdf + v * pdf;
                });
        case Activation::Kind::leaky_relu: {
            const T slope = static_cast<T>(act.slope);
            return detail::map_unary(
                x, "leaky_relu", [slope](T v) { return v > 0 ? v : v * slope; },
                [slope](T v, T) { return v > 0 ? T(1) : slope; });
        }
        case Activation::Kind::tanh:
            return detail::map_unary(
                x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
        case Activation::Kind::sigmoid:
            return detail::map_unary(
                x, "sigmoid",
                [](T v) {
                    if (v >= 0) return T(1) / (T(1) + std::exp(-v));
                    const T e = std::exp(v);
                    return e / (T(1) + e);
                },
                [](T, T y) { return y * (T(1) - y); });
    }
    throw ContractError("activation: unknown kind");
}

template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& x) { return activation(Activation::gelu(), x); }
template <class T>
BasicTensor<T> leaky_relu(const BasicTensor<T>& x, double slope) { return activation(Activation::leaky_relu(slope), x); }
template <class T>
BasicTensor<T> tanh(const BasicTensor<T>& x) { return activation(Activation::tanh(), x); }
template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) { return activation(Activation::sigmoid(), x); }

// ---------------------------------------------------------------------------
// Normalization

/// Softmax along `axis`, stabilized by subtracting the running maximum.
template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x, int64_t axis) {
    const int64_t ax = detail::normalize_axis(axis, x.ndim(), "softmax");
    const Shape& s = x.shape();
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < ax; ++i) outer *= s[static_cast<std::size_t>(i)];
    for (int64_t i = ax + 1; i < x.ndim(); ++i) inner *= s[static_cast<std::size_t>(i)];
    const int64_t n = s[static_cast<std::size_t>(ax)];

    BasicTensor<T> out(s);
    auto in = x.data();
    auto o = out.mutable_data();
    for (int64_t a = 0; a < outer; ++a) {
        for (int64_t c = 0; c < inner; ++c) {
            const int64_t base = a * n * inner + c;
            T mx = in[static_cast<std::size_t>(base)];
            for (int64_t j = 1; j < n; ++j) mx = std::max(mx, in[static_cast<std::size_t>(base + j * inner)]);
            T sum = 0;
            for (int64_t j = 0; j < n; ++j) {
                const auto k = static_cast<std::size_t>(base + j * inner);
                o[k] = std::exp(in[k] - mx);
                sum += o[k];
            }
            for (int64_t j = 0; j < n; ++j) o[static_cast<std::size_t>(base + j * inner)] /= sum;
        }
    }
    if (detail::any_requires_grad<T>({&x})) {
        detail::attach(out, "softmax", [xi = x.impl(), oi = out.impl(), outer, inner, n](std::span<const T> g) {
            T* gx = detail::sink(xi);
            if (!gx) return;
            const auto& y = oi->data;
            for (int64_t a = 0; a < outer; ++a) {
                for (int64_t c = 0; c < inner; ++c) {
                    const int64_t base = a * n * inner + c;
                    T dot = 0;
                    for (int64_t j = 0; j < n; ++j) {
                        const auto k = static_cast<std::size_t>(base + j * inner);
                        dot += g[k] * y[k];
                    }
                    for (int64_t j = 0; j < n; ++j) {
                        const auto k = static_cast<std::size_t>(base + j * inner);
                        gx[k] += y[k] * (g[k] - dot);
                    }
                }
            }
        });
    }
    return out;
}

/// Normalizes each vector along the last dimension, then applies gamma/beta.
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          double eps = 1e-5) {
    if (x.ndim() < 1) throw DimensionError("layer_norm: scalar input");
    const int64_t d = x.dim(-1);
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw DimensionError("layer_norm: input " + shape_string(x.shape()) + " vs gamma " +
                             shape_string(gamma.shape()) + " / beta " + shape_string(beta.shape()));
    }
    const int64_t rows = x.numel() / std::max<int64_t>(d, 1);
    BasicTensor<T> out(x.shape());
    std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
    std::vector<T> rstd(static_cast<std::size_t>(rows));
    auto in = x.data();
    auto o = out.mutable_data();
    auto gm = gamma.data();
    auto bt = beta.data();
    for (int64_t r = 0; r < rows; ++r) {
        const auto base = static_cast<std::size_t>(r * d);
        T mean = 0;
        for (int64_t j = 0; j < d; ++j) mean += in[base + static_cast<std::size_t>(j)];
        mean /= static_cast<T>(d);
        T var = 0;
        for (int64_t j = 0; j < d; ++j) {
            const T c = in[base + static_cast<std::size_t>(j)] - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
        rstd[static_cast<std::size_t>(r)] = rs;
        for (int64_t j = 0; j < d; ++j) {
            const auto k = base + static_cast<std::size_t>(j);
            xhat[k] = (in[k] - mean) * rs;
            o[k] = xhat[k] * gm[static_cast<std::size_t>(j)] + bt[static_cast<std::size_t>(j)];
        }
    }
    detail::check_finite(out, "layer_norm");
    if (detail::any_requires_grad<T>({&x, &gamma, &beta})) {
        detail::attach(out, "layer_norm",
                       [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), xhat = std::move(xhat),
                        rstd = std::move(rstd), rows, d](std::span<const T> g) {
                           T* gx = detail::sink(xi);
                           T* gg = detail::sink(gi);
                           T* gb = detail::sink(bi);
                           const auto& gm = gi->data;
                           for (int64_t r = 0; r < rows; ++r) {
                               const auto base = static_cast<std::size_t>(r * d);
                               T mean_gy = 0, mean_gyx = 0;
                               for (int64_t j = 0; j < d; ++j) {
                                   const auto k = base + static_cast<std::size_t>(j);
                                   const T gy = g[k] * gm[static_cast<std::size_t>(j)];
                                   mean_gy += gy;
                                   mean_gyx += gy * xhat[k];
                                   if (gg) gg[j] += g[k] * xhat[k];
                                   if (gb) gb[j] += g[k];
                               }
                               if (!gx) continue;
                               mean_gy /= static_cast<T>(d);
                               mean_gyx /= static_cast<T>(d);
                               const T rs = rstd[static_cast<std::size_t>(r)];
                               for (int64_t j = 0; j < d; ++j) {
                                   const auto k = base + static_cast<std::size_t>(j);
                                   const T gy = g[k] * gm[static_cast<std::size_t>(j)];
                                   gx[k] += rs * (gy - mean_gy - xhat[k] * mean_gyx);
                               }
                           }
                       });
    }
    return out;
}

enum class NormMode { train, eval };

/// Per-channel normalization of an NCHW tensor. Train mode normalizes with
/// batch statistics and updates the running estimates in place.
template <class T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          BasicTensor<T>& running_mean, BasicTensor<T>& running_var, NormMode mode,
                          double momentum = 0.1, double eps = 1e-5) {
    if (x.ndim() != 4) throw DimensionError("batch_norm: expected NCHW input, got " + shape_string(x.shape()));
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const Shape cs{c};
    if (gamma.shape() != cs || beta.shape() != cs || running_mean.shape() != cs || running_var.shape() != cs) {
        throw DimensionError("batch_norm: parameter shapes do not match " + std::to_string(c) + " channels");
    }
    const int64_t m = n * hw;
    if (mode == NormMode::train && m < 2) {
        throw ContractError("batch_norm: degenerate batch, train mode needs at least 2 values per channel, got " +
                            std::to_string(m));
    }
    std::vector<T> mean(static_cast<std::size_t>(c)), rstd(static_cast<std::size_t>(c));
    auto in = x.data();
    if (mode == NormMode::train) {
        auto rm = running_mean.mutable_data();
        auto rv = running_var.mutable_data();
        for (int64_t ch = 0; ch < c; ++ch) {
            T s = 0;
            for (int64_t b = 0; b < n; ++b)
                for (int64_t i = 0; i < hw; ++i) s += in[static_cast<std::size_t>((b * c + ch) * hw + i)];
            const T mu = s / static_cast<T>(m);
            T v = 0;
            for (int64_t b = 0; b < n; ++b)
                for (int64_t i = 0; i < hw; ++i) {
                    const T d = in[static_cast<std::size_t>((b * c + ch) * hw + i)] - mu;
                    v += d * d;
                }
            v /= static_cast<T>(m);
            const auto k = static_cast<std::size_t>(ch);
            mean[k] = mu;
            rstd[k] = T(1) / std::sqrt(v + static_cast<T>(eps));
            const T mom = static_cast<T>(momentum);
            rm[k] = (T(1) - mom) * rm[k] + mom * mu;
            rv[k] = (T(1) - mom) * rv[k] + mom * v * static_cast<T>(m) / static_cast<T>(m - 1);
        }
    } else {
        for (int64_t ch = 0; ch < c; ++ch) {
            const auto k = static_cast<std::size_t>(ch);
            mean[k] = running_mean.data()[k];
            rstd[k] = T(1) / std::sqrt(running_var.data()[k] + static_cast<T>(eps));
        }
    }
    BasicTensor<T> out(x.shape());
    auto o = out.mutable_data();
    std::vector<T> xhat(in.size());
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < c; ++ch) {
            const auto k = static_cast<std::size_t>(ch);
            for (int64_t i = 0; i < hw; ++i) {
                const auto idx = static_cast<std::size_t>((b * c + ch) * hw + i);
                xhat[idx] = (in[idx] - mean[k]) * rstd[k];
                o[idx] = xhat[idx] * gamma.data()[k] + beta.data()[k];
            }
        }
    detail::check_finite(out, "batch_norm");
    if (detail::any_requires_grad<T>({&x, &gamma, &beta})) {
        detail::attach(out, "batch_norm",
                       [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), xhat = std::move(xhat),
                        rstd = std::move(rstd), n, c, hw, m, mode](std::span<const T> g) {
                           T* gx = detail::sink(xi);
                           T* gg = detail::sink(gi);
                           T* gb = detail::sink(bi);
                           for (int64_t ch = 0; ch < c; ++ch) {
                               const auto k = static_cast<std::size_t>(ch);
                               T sum_g = 0, sum_gx = 0;
                               for (int64_t b = 0; b < n; ++b)
                                   for (int64_t i = 0; i < hw; ++i) {
                                       const auto idx = static_cast<std::size_t>((b * c + ch) * hw + i);
                                       sum_g += g[idx];
                                       sum_gx += g[idx] * xhat[idx];
                                   }
                               if (gg) gg[k] += sum_gx;
                               if (gb) gb[k] += sum_g;
                               if (!gx) continue;
                               const T scale = gi->data[k] * rstd[k];
                               for (int64_t b = 0; b < n; ++b)
                                   for (int64_t i = 0; i < hw; ++i) {
                                       const auto idx = static_cast<std::size_t>((b * c + ch) * hw + i);
                                       if (mode == NormMode::train) {
                                           gx[idx] += scale / static_cast<T>(m) *
                                                      (static_cast<T>(m) * g[idx] - sum_g - xhat[idx] * sum_gx);
                                       } else {
                                           gx[idx] += scale * g[idx];
                                       }
                                   }
                           }
                       });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product. Leading dimensions must match, or one operand
/// must be a plain matrix that is broadcast across the other's batch.
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    auto fail = [&] {
        throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                             shape_string(b.shape()));
    };
    if (a.ndim() < 2 || b.ndim() < 2) fail();
    const int64_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
    if (b.dim(-2) != k) fail();
    const Shape lead_a(a.shape().begin(), a.shape().end() - 2);
    const Shape lead_b(b.shape().begin(), b.shape().end() - 2);
    enum class Mode { flat_a, batched, flat_b } mode;
    if (lead_b.empty()) {
        mode = Mode::flat_a;
    } else if (lead_a == lead_b) {
        mode = Mode::batched;
    } else if (lead_a.empty()) {
        mode = Mode::flat_b;
    } else {
        fail();
    }
    Shape out_shape = lead_a.empty() ? lead_b : lead_a;
    out_shape.push_back(m);
    out_shape.push_back(n);
    const int64_t batch = shape_numel(lead_a.empty() ? lead_b : lead_a);

    BasicTensor<T> out(out_shape);
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* pc = out.mutable_data().data();
    switch (mode) {
        case Mode::flat_a:
            detail::gemm<T>(false, false, batch * m, n, k, T(1), pa, k, pb, n, T(0), pc, n);
            break;
        case Mode::batched:
            for (int64_t i = 0; i < batch; ++i)
                detail::gemm<T>(false, false, m, n, k, T(1), pa + i * m * k, k, pb + i * k * n, n, T(0), pc + i * m * n, n);
            break;
        case Mode::flat_b:
            for (int64_t i = 0; i < batch; ++i)
                detail::gemm<T>(false, false, m, n, k, T(1), pa, k, pb + i * k * n, n, T(0), pc + i * m * n, n);
            break;
    }
    if (detail::any_requires_grad<T>({&a, &b})) {
        detail::attach(out, "matmul", [ai = a.impl(), bi = b.impl(), mode, batch, m, n, k](std::span<const T> g) {
            T* ga = detail::sink(ai);
            T* gb = detail::sink(bi);
            const T* A = ai->data.data();
            const T* B = bi->data.data();
            const T* G = g.data();
            switch (mode) {
                case Mode::flat_a:
                    // dA = dC B^T, dB = A^T dC with the batch folded into rows.
                    if (ga) detail::gemm<T>(false, true, batch * m, k, n, T(1), G, n, B, n, T(1), ga, k);
                    if (gb) detail::gemm<T>(true, false, k, n, batch * m, T(1), A, k, G, n, T(1), gb, n);
                    break;
                case Mode::batched:
                    for (int64_t i = 0; i < batch; ++i) {
                        if (ga) detail::gemm<T>(false, true, m, k, n, T(1), G + i * m * n, n, B + i * k * n, n, T(1), ga + i * m * k, k);
                        if (gb) detail::gemm<T>(true, false, k, n, m, T(1), A + i * m * k, k, G + i * m * n, n, T(1), gb + i * k * n, n);
                    }
                    break;
                case Mode::flat_b:
                    for (int64_t i = 0; i < batch; ++i) {
                        if (ga) detail::gemm<T>(false, true, m, k, n, T(1), G + i * m * n, n, B + i * k * n, n, T(1), ga, k);
                        if (gb) detail::gemm<T>(true, false, k, n, m, T(1), A, k, G + i * m * n, n, T(1), gb + i * k * n, n);
                    }
                    break;
            }
        });
    }
    return out;
}

namespace detail {

template <class T>
void im2col(const T* x, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t stride, int64_t pad,
            int64_t oh, int64_t ow, T* cols) {
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t ki = 0; ki < kh; ++ki)
            for (int64_t kj = 0; kj < kw; ++kj) {
                T* row = cols + ((ch * kh + ki) * kw + kj) * oh * ow;
                for (int64_t y = 0; y < oh; ++y) {
                    const int64_t iy = y * stride - pad + ki;
                    for (int64_t xo = 0; xo < ow; ++xo) {
                        const int64_t ix = xo * stride - pad + kj;
                        row[y * ow + xo] = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x[(ch * h + iy) * w + ix] : T(0);
                    }
                }
            }
}

template <class T>
void col2im_add(const T* cols, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t stride, int64_t pad,
                int64_t oh, int64_t ow, T* x) {
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t ki = 0; ki < kh; ++ki)
            for (int64_t kj = 0; kj < kw; ++kj) {
                const T* row = cols + ((ch * kh + ki) * kw + kj) * oh * ow;
                for (int64_t y = 0; y < oh; ++y) {
                    const int64_t iy = y * stride - pad + ki;
                    if (iy < 0 || iy >= h) continue;
                    for (int64_t xo = 0; xo < ow; ++xo) {
                        const int64_t ix = xo * stride - pad + kj;
                        if (ix >= 0 && ix < w) x[(ch * h + iy) * w + ix] += row[y * ow + xo];
                    }
                }
            }
}

}  // namespace detail

/// Output spatial size of a convolution along one axis.
constexpr int64_t conv_output_size(int64_t in, int64_t kernel, int64_t stride, int64_t pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

/// 2-D cross-correlation over NCHW input via im2col + GEMM. `bias` may be
/// an undefined tensor.
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      int64_t stride, int64_t padding) {
    if (x.ndim() != 4 || weight.ndim() != 4 || weight.dim(1) != x.dim(1)) {
        throw DimensionError("conv2d: input " + shape_string(x.shape()) + " incompatible with weight " +
                             shape_string(weight.shape()));
    }
    if (stride < 1 || padding < 0) throw ContractError("conv2d: stride must be >= 1 and padding >= 0");
    const int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (bias.defined() && bias.shape() != Shape{cout}) {
        throw DimensionError("conv2d: bias " + shape_string(bias.shape()) + " for " + std::to_string(cout) + " outputs");
    }
    if (kh > h + 2 * padding || kw > w + 2 * padding) {
        throw DimensionError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                             " larger than padded input " + std::to_string(h + 2 * padding) + "x" +
                             std::to_string(w + 2 * padding));
    }
    const int64_t oh = conv_output_size(h, kh, stride, padding);
    const int64_t ow = conv_output_size(w, kw, stride, padding);
    const int64_t kdim = cin * kh * kw, pix = oh * ow;

    BasicTensor<T> out(Shape{n, cout, oh, ow});
    std::vector<T> cols(static_cast<std::size_t>(kdim * pix));
    T* po = out.mutable_data().data();
    for (int64_t b = 0; b < n; ++b) {
        detail::im2col(x.data().data() + b * cin * h * w, cin, h, w, kh, kw, stride, padding, oh, ow, cols.data());
        T* ob = po + b * cout * pix;
        if (bias.defined()) {
            for (int64_t co = 0; co < cout; ++co) std::fill_n(ob + co * pix, pix, bias.data()[static_cast<std::size_t>(co)]);
        }
        detail::gemm<T>(false, false, cout, pix, kdim, T(1), weight.data().data(), kdim, cols.data(), pix,
                        bias.defined() ? T(1) : T(0), ob, pix);
    }
    if (detail::any_requires_grad<T>({&x, &weight, &bias})) {
        detail::attach(out, "conv2d",
                       [xi = x.impl(), wi = weight.impl(), bi = bias.impl(), n, cin, h, w, cout, kh, kw, stride,
                        padding, oh, ow, kdim, pix](std::span<const T> g) {
                           T* gx = detail::sink(xi);
                           T* gw = detail::sink(wi);
                           T* gb = detail::sink(bi);
                           std::vector<T> cols(static_cast<std::size_t>(kdim * pix));
                           std::vector<T> dcols(gx ? cols.size() : 0);
                           for (int64_t b = 0; b < n; ++b) {
                               const T* gob = g.data() + b * cout * pix;
                               if (gb) {
                                   for (int64_t co = 0; co < cout; ++co) {
                                       T s = 0;
                                       for (int64_t p = 0; p < pix; ++p) s += gob[co * pix + p];
                                       gb[co] += s;
                                   }
                               }
                               if (gw) {
                                   detail::im2col(xi->data.data() + b * cin * h * w, cin, h, w, kh, kw, stride,
                                                  padding, oh, ow, cols.data());
                                   detail::gemm<T>(false, true, cout, kdim, pix, T(1), gob, pix, cols.data(), pix, T(1),
                                                   gw, kdim);
                               }
                               if (gx) {
                                   detail::gemm<T>(true, false, kdim, pix, cout, T(1), wi->data.data(), kdim, gob, pix,
                                                   T(0), dcols.data(), pix);
                                   detail::col2im_add(dcols.data(), cin, h, w, kh, kw, stride, padding, oh, ow,
                                                      gx + b * cin * h * w);
                               }
                           }
                       });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Restructuring

/// Reinterprets the data with a new shape; one entry may be -1 (inferred).
template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
    int64_t known = 1, infer = -1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) throw DimensionError("reshape: more than one inferred dimension");
            infer = static_cast<int64_t>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0 && known > 0 && x.numel() % known == 0) shape[static_cast<std::size_t>(infer)] = x.numel() / known;
    if (shape_numel(shape) != x.numel() || (infer >= 0 && shape[static_cast<std::size_t>(infer)] < 0)) {
        throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
    }
    BasicTensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
    if (detail::any_requires_grad<T>({&x})) {
        detail::attach(out, "reshape", [xi = x.impl()](std::span<const T> g) {
            if (T* gx = detail::sink(xi)) for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

namespace detail {

/// Calls f(out_index, in_index) for every element of a permuted view.
template <class F>
void for_each_permuted(const Shape& in_shape, const std::vector<int64_t>& axes, F&& f) {
    const std::size_t nd = axes.size();
    const auto in_strides = strides_of(in_shape);
    Shape out_shape(nd);
    std::vector<int64_t> src_stride(nd);
    for (std::size_t i = 0; i < nd; ++i) {
        out_shape[i] = in_shape[static_cast<std::size_t>(axes[i])];
        src_stride[i] = in_strides[static_cast<std::size_t>(axes[i])];
    }
    const int64_t total = shape_numel(out_shape);
    if (total == 0) return;
    if (nd == 0) {
        f(int64_t{0}, int64_t{0});
        return;
    }
    std::vector<int64_t> idx(nd, 0);
    const int64_t last = out_shape[nd - 1];
    const int64_t last_stride = src_stride[nd - 1];
    int64_t src = 0;
    for (int64_t o = 0; o < total; o += last) {
        for (int64_t j = 0; j < last; ++j) f(o + j, src + j * last_stride);
        // advance the odometer over all but the last axis
        for (int64_t d = static_cast<int64_t>(nd) - 2; d >= 0; --d) {
            const auto du = static_cast<std::size_t>(d);
            if (++idx[du] < out_shape[du]) {
                src += src_stride[du];
                break;
            }
            src -= src_stride[du] * (out_shape[du] - 1);
            idx[du] = 0;
        }
    }
}

}  // namespace detail

template <class T>
BasicTensor<T> permute(const BasicTensor<T>& x, std::vector<int64_t> axes) {
    const auto nd = static_cast<std::size_t>(x.ndim());
    std::vector<bool> seen(nd, false);
    bool ok = axes.size() == nd;
    for (auto& a : axes) {
        if (!ok) break;
        if (a < 0) a += static_cast<int64_t>(nd);
        if (a < 0 || a >= static_cast<int64_t>(nd) || seen[static_cast<std::size_t>(a)]) {
            ok = false;
            break;
        }
        seen[static_cast<std::size_t>(a)] = true;
    }
    if (!ok) throw DimensionError("permute: invalid axes for tensor of shape " + shape_string(x.shape()));
    Shape out_shape(nd);
    for (std::size_t i = 0; i < nd; ++i) out_shape[i] = x.shape()[static_cast<std::size_t>(axes[i])];
    BasicTensor<T> out(out_shape);
    auto in = x.data();
    auto o = out.mutable_data();
    detail::for_each_permuted(x.shape(), axes, [&](int64_t oi, int64_t ii) {
        o[static_cast<std::size_t>(oi)] = in[static_cast<std::size_t>(ii)];
    });
    if (detail::any_requires_grad<T>({&x})) {
        detail::attach(out, "permute", [xi = x.impl(), axes = std::move(axes)](std::span<const T> g) {
            T* gx = detail::sink(xi);
            if (!gx) return;
            detail::for_each_permuted(xi->shape, axes, [&](int64_t oi, int64_t ii) {
                gx[ii] += g[static_cast<std::size_t>(oi)];
            });
        });
    }
    return out;
}

/// Cyclic translation of an [n, h, w, c] tensor along h and w.
template <class T>
BasicTensor<T> roll(const BasicTensor<T>& x, int64_t shift_h, int64_t shift_w) {
    if (x.ndim() != 4) throw DimensionError("roll: expected [n,h,w,c], got " + shape_string(x.shape()));
    const int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const int64_t sh = h ? ((shift_h % h) + h) % h : 0;
    const int64_t sw = w ? ((shift_w % w) + w) % w : 0;
    BasicTensor<T> out(x.shape());
    auto in = x.data();
    auto o = out.mutable_data();
    auto move = [=](auto src, auto dst) {
        for (int64_t b = 0; b < n; ++b)
            for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 0; j < w; ++j) {
                    const int64_t from = ((b * h + i) * w + j) * c;
                    const int64_t to = ((b * h + (i + sh) % h) * w + (j + sw) % w) * c;
                    for (int64_t k = 0; k < c; ++k) dst(to + k, from + k, src);
                }
    };
    move(in.data(), [&](int64_t to, int64_t from, const T* s) { o[static_cast<std::size_t>(to)] = s[from]; });
    if (detail::any_requires_grad<T>({&x})) {
        detail::attach(out, "roll", [xi = x.impl(), move](std::span<const T> g) {
            T* gx = detail::sink(xi);
            if (!gx) return;
            // gradient flows back along the inverse shift
            move(g.data(), [&](int64_t to, int64_t from, const T* s) { gx[from] += s[to]; });
        });
    }
    return out;
}

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int64_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const int64_t ax = detail::normalize_axis(axis, parts[0].ndim(), "concat");
    Shape out_shape = parts[0].shape();
    out_shape[static_cast<std::size_t>(ax)] = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (s.size() != out_shape.size()) throw DimensionError("concat: rank mismatch " + shape_string(s));
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (static_cast<int64_t>(i) != ax && s[i] != parts[0].shape()[i]) {
                throw DimensionError("concat: shapes " + shape_string(parts[0].shape()) + " and " + shape_string(s) +
                                     " differ off axis " + std::to_string(ax));
            }
        }
        out_shape[static_cast<std::size_t>(ax)] += s[static_cast<std::size_t>(ax)];
    }
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < ax; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(ax) + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
    const int64_t total_axis = out_shape[static_cast<std::size_t>(ax)];

    BasicTensor<T> out(out_shape);
    auto o = out.mutable_data();
    std::vector<int64_t> offsets;
    int64_t off = 0;
    bool needs_grad = false;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const int64_t len = p.dim(ax) * inner;
        for (int64_t a = 0; a < outer; ++a)
            std::copy_n(p.data().data() + a * len, len, o.data() + a * total_axis * inner + off);
        off += len;
        needs_grad = needs_grad || detail::any_requires_grad<T>({&p});
    }
    if (needs_grad) {
        std::vector<std::shared_ptr<detail::TensorImpl<T>>> impls;
        for (const auto& p : parts) impls.push_back(p.impl());
        detail::attach(out, "concat",
                       [impls = std::move(impls), offsets = std::move(offsets), outer, inner, total_axis,
                        ax](std::span<const T> g) {
                           for (std::size_t i = 0; i < impls.size(); ++i) {
                               T* gp = detail::sink(impls[i]);
                               if (!gp) continue;
                               const int64_t len = impls[i]->shape[static_cast<std::size_t>(ax)] * inner;
                               for (int64_t a = 0; a < outer; ++a) {
                                   const T* src = g.data() + a * total_axis * inner + offsets[i];
                                   for (int64_t j = 0; j < len; ++j) gp[a * len + j] += src[j];
                               }
                           }
                       });
    }
    return out;
}

template <class T>
std::vector<BasicTensor<T>> split(const BasicTensor<T>& x, int64_t axis, const std::vector<int64_t>& sizes) {
    const int64_t ax = detail::normalize_axis(axis, x.ndim(), "split");
    int64_t total = 0;
    for (int64_t s : sizes) {
        if (s < 0) throw DimensionError("split: negative size");
        total += s;
    }
    if (total != x.dim(ax)) {
        throw DimensionError("split: sizes sum to " + std::to_string(total) + " but axis has " +
                             std::to_string(x.dim(ax)));
    }
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < ax; ++i) outer *= x.shape()[static_cast<std::size_t>(i)];
    for (int64_t i = ax + 1; i < x.ndim(); ++i) inner *= x.shape()[static_cast<std::size_t>(i)];
    const int64_t axis_len = x.dim(ax);
    std::vector<BasicTensor<T>> outs;
    int64_t off = 0;
    for (int64_t s : sizes) {
        Shape shape = x.shape();
        shape[static_cast<std::size_t>(ax)] = s;
        BasicTensor<T> part(shape);
        const int64_t len = s * inner;
        for (int64_t a = 0; a < outer; ++a)
            std::copy_n(x.data().data() + a * axis_len * inner + off, len, part.mutable_data().data() + a * len);
        if (detail::any_requires_grad<T>({&x})) {
            detail::attach(part, "split", [xi = x.impl(), outer, len, axis_len, inner, off](std::span<const T> g) {
                T* gx = detail::sink(xi);
                if (!gx) return;
                for (int64_t a = 0; a < outer; ++a)
                    for (int64_t j = 0; j < len; ++j) gx[a * axis_len * inner + off + j] += g[static_cast<std::size_t>(a * len + j)];
            });
        }
        outs.push_back(std::move(part));
        off += len;
    }
    return outs;
}

/// Gathers rows of a [rows, cols] table; backward scatter-adds.
template <class T>
BasicTensor<T> gather_rows(const BasicTensor<T>& table, const std::vector<int32_t>& index) {
    if (table.ndim() != 2) throw DimensionError("gather_rows: table must be 2-D, got " + shape_string(table.shape()));
    const int64_t rows = table.dim(0), cols = table.dim(1);
    BasicTensor<T> out(Shape{static_cast<int64_t>(index.size()), cols});
    auto o = out.mutable_data();
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= rows) throw DimensionError("gather_rows: index out of range");
        std::copy_n(table.data().data() + index[i] * cols, cols, o.data() + static_cast<int64_t>(i) * cols);
    }
    if (detail::any_requires_grad<T>({&table})) {
        detail::attach(out, "gather_rows", [ti = table.impl(), index, cols](std::span<const T> g) {
            T* gt = detail::sink(ti);
            if (!gt) return;
            for (std::size_t i = 0; i < index.size(); ++i)
                for (int64_t j = 0; j < cols; ++j) gt[index[i] * cols + j] += g[i * static_cast<std::size_t>(cols) + static_cast<std::size_t>(j)];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions

enum class ReduceOp { sum, mean, abs_mean };

/// Reduces over `axes` (dropped from the output shape). An empty axis list
/// leaves sum/mean as the identity and abs_mean as elementwise |x|.
template <class T>
BasicTensor<T> reduce(const BasicTensor<T>& x, ReduceOp op, std::vector<int64_t> axes) {
    const int64_t nd = x.ndim();
    std::vector<bool> reduced(static_cast<std::size_t>(nd), false);
    for (auto& a : axes) {
        a = detail::normalize_axis(a, nd, "reduce");
        reduced[static_cast<std::size_t>(a)] = true;
    }
    Shape out_shape;
    for (int64_t i = 0; i < nd; ++i)
        if (!reduced[static_cast<std::size_t>(i)]) out_shape.push_back(x.shape()[static_cast<std::size_t>(i)]);
    const int64_t count = out_shape.empty() && nd == 0 ? 1 : x.numel() / std::max<int64_t>(shape_numel(out_shape), 1);

    // map every input element to its output slot
    std::vector<int64_t> out_index(static_cast<std::size_t>(x.numel()));
    {
        const auto in_strides = detail::strides_of(x.shape());
        const auto out_strides = detail::strides_of(out_shape);
        std::vector<int64_t> dim_out_stride(static_cast<std::size_t>(nd), 0);
        for (int64_t i = 0, j = 0; i < nd; ++i)
            if (!reduced[static_cast<std::size_t>(i)]) dim_out_stride[static_cast<std::size_t>(i)] = out_strides[static_cast<std::size_t>(j++)];
        for (int64_t e = 0; e < x.numel(); ++e) {
            int64_t rem = e, oi = 0;
            for (int64_t i = 0; i < nd; ++i) {
                const int64_t c = rem / in_strides[static_cast<std::size_t>(i)];
                rem %= in_strides[static_cast<std::size_t>(i)];
                oi += c * dim_out_stride[static_cast<std::size_t>(i)];
            }
            out_index[static_cast<std::size_t>(e)] = oi;
        }
    }
    const T norm = op == ReduceOp::sum ? T(1) : T(1) / static_cast<T>(count);
    BasicTensor<T> out(out_shape);
    auto o = out.mutable_data();
    auto in = x.data();
    for (std::size_t e = 0; e < in.size(); ++e) {
        const T v = op == ReduceOp::abs_mean ? std::abs(in[e]) : in[e];
        o[static_cast<std::size_t>(out_index[e])] += v;
    }
    for (auto& v : o) v *= norm;
    if (detail::any_requires_grad<T>({&x})) {
        detail::attach(out, "reduce", [xi = x.impl(), op, norm, out_index = std::move(out_index)](std::span<const T> g) {
            T* gx = detail::sink(xi);
            if (!gx) return;
            for (std::size_t e = 0; e < out_index.size(); ++e) {
                T d = g[static_cast<std::size_t>(out_index[e])] * norm;
                if (op == ReduceOp::abs_mean) {
                    const T v = xi->data[e];
                    d *= v > 0 ? T(1) : (v < 0 ? T(-1) : T(0));
                }
                gx[e] += d;
            }
        });
    }
    return out;
}

namespace detail {
inline std::vector<int64_t> all_axes(int64_t nd) {
    std::vector<int64_t> a(static_cast<std::size_t>(nd));
    std::iota(a.begin(), a.end(), 0);
    return a;
}
}  // namespace detail

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) { return reduce(x, ReduceOp::sum, detail::all_axes(x.ndim())); }
template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) { return reduce(x, ReduceOp::mean, detail::all_axes(x.ndim())); }
template <class T>
BasicTensor<T> abs_mean(const BasicTensor<T>& x) { return reduce(x, ReduceOp::abs_mean, detail::all_axes(x.ndim())); }

/// Linear layer helper: x[..., in] * w[in, out] (+ b[out]).
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
    auto y = matmul(x, weight);
    return bias.defined() ? add_suffix(y, bias) : y;
}

}  // namespace swinpg
