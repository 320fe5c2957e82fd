#pragma once

// Finite-difference gradient checking. Checks run in double precision:
// the analytic reverse pass and central differences (eps = 1e-3) are both
// evaluated on BasicTensor<double>, the loss being sum(out * R) for a fixed
// random R. Relative error per element is |a - f| / max(|a|, |f|, 1e-6).

#include <algorithm>
#include <functional>
#include <limits>
#include <numeric>
#include <map>
#include <string>
#include <vector>

#include "swinpg/discriminator.hpp"
#include "swinpg/generator.hpp"
#include "swinpg/losses.hpp"
#include "swinpg/swin.hpp"

namespace swinpg {

struct GradCheckReport {
    std::string op;
    double max_relative_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
    /// Probes discarded because the loss is not smooth around them.
    int64_t nonsmooth_skipped = 0;
};

inline constexpr double kGradCheckEps = 1e-3;
inline constexpr double kSingleOpTolerance = 1e-2;
inline constexpr double kCompositeTolerance = 3e-2;
inline constexpr double kDiscriminatorTolerance = 2e-2;
/// First-layer weights move every cell of a 16x16 leaky-ReLU map; a 1e-3
/// step crosses about one kink per probe there.
inline constexpr double kDiscriminatorEps = 1e-5;

struct GradCheckOptions {
    double tolerance = kSingleOpTolerance;
    double eps = kGradCheckEps;
    /// Elements probed per input; larger inputs are sampled.
    int64_t max_samples = 48;
    /// Dyadic data, weights and step (2^-10) so the difference quotient of a
    /// data-movement op is computed without rounding.
    bool exact = false;
};

namespace detail {

inline double dyadic(Rng& rng) { return static_cast<double>(static_cast<int64_t>(rng.below(513)) - 256) / 256.0; }

inline BasicTensor<double> grad_input(Shape shape, Rng& rng, bool exact, double lo = -1.0, double hi = 1.0) {
    BasicTensor<double> t(std::move(shape));
    for (auto& v : t.mutable_data()) v = exact ? dyadic(rng) : rng.uniform(lo, hi);
    t.set_requires_grad(true);
    return t;
}

}  // namespace detail

/// Compares analytic and central-difference gradients of sum(fn() * R) with
/// respect to every tensor in `inputs` (which `fn` must read through shared
/// handles so in-place perturbation is visible).
template <class Fn>
GradCheckReport check_gradients(const std::string& name, std::vector<BasicTensor<double>> inputs, Fn&& fn,
                                uint64_t seed, const GradCheckOptions& opt = {}) {
    Rng rng(mix_seed(seed, 0xC0FFEE));
    tape().clear();
    for (auto& in : inputs) in.zero_grad();

    BasicTensor<double> weights;
    auto loss_of = [&](const BasicTensor<double>& out) {
        if (!weights.defined()) {
            weights = BasicTensor<double>(out.shape());
            for (auto& w : weights.mutable_data()) w = opt.exact ? detail::dyadic(rng) : rng.uniform(-1.0, 1.0);
        }
        return sum(mul(out, weights));
    };

    backward(loss_of(fn()));
    std::vector<std::vector<double>> analytic;
    for (auto& in : inputs) {
        analytic.emplace_back(static_cast<std::size_t>(in.numel()), 0.0);
        if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), analytic.back().begin());
    }
    tape().clear();

    const double eps = opt.exact ? 0x1.0p-10 : opt.eps;
    double worst = 0.0;
    int64_t skipped = 0;
    bool starved = false;
    NoGradGuard no_grad;
    const double base = loss_of(fn()).item();
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto data = inputs[k].mutable_data();
        std::vector<int64_t> order(data.size());
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        const auto wanted = std::min<int64_t>(opt.max_samples, static_cast<int64_t>(order.size()));
        int64_t taken = 0;
        for (std::size_t p = 0; p < order.size() && taken < wanted; ++p) {
            const auto u = static_cast<std::size_t>(order[p]);
            const double orig = data[u];
            data[u] = orig + eps;
            const double plus = loss_of(fn()).item();
            data[u] = orig - eps;
            const double minus = loss_of(fn()).item();
            data[u] = orig;
            // A kink inside [orig - eps, orig + eps] makes the one-sided
            // quotients disagree; such probes say nothing about the gradient.
            const double right = (plus - base) / eps, left = (base - minus) / eps;
            if (std::abs(right - left) > opt.tolerance * std::max({std::abs(right), std::abs(left), 1e-6})) {
                ++skipped;
                continue;
            }
            ++taken;
            const double numeric = (plus - minus) / (2.0 * eps);
            const double a = analytic[k][u];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
            worst = std::max(worst, err);
        }
        if (2 * taken < wanted) starved = true;
    }
    GradCheckReport report{name, worst, opt.tolerance, false, skipped};
    if (starved) report.max_relative_error = std::numeric_limits<double>::infinity();
    report.passed = report.max_relative_error <= report.tolerance;
    return report;
}

namespace detail {

template <class Module>
std::vector<BasicTensor<double>> params_of(Module& m) {
    std::vector<BasicTensor<double>> out;
    m.visit("", [&](const std::string&, BasicTensor<double>& t, TensorKind kind) {
        if (kind == TensorKind::parameter) out.push_back(t);
    });
    return out;
}

/// Perturbs every parameter away from its (often constant) initial value.
template <class Module>
void randomize(Module& m, Rng& rng, double amplitude) {
    m.visit("", [&](const std::string&, BasicTensor<double>& t, TensorKind kind) {
        if (kind != TensorKind::parameter) return;
        for (auto& v : t.mutable_data()) v += rng.uniform(-amplitude, amplitude);
    });
}

inline std::vector<BasicTensor<double>> with(BasicTensor<double> x, std::vector<BasicTensor<double>> rest) {
    rest.insert(rest.begin(), std::move(x));
    return rest;
}

using GradCheckFn = std::function<GradCheckReport(uint64_t)>;

inline std::map<std::string, GradCheckFn> build_registry() {
    std::map<std::string, GradCheckFn> r;
    using D = BasicTensor<double>;

    auto unary = [&r](const std::string& name, std::function<D(const D&)> f, Shape shape, bool exact = false,
                      double lo = -2.0, double hi = 2.0) {
        r[name] = [=](uint64_t seed) {
            Rng rng(seed);
            auto x = grad_input(shape, rng, exact, lo, hi);
            GradCheckOptions opt;
            opt.exact = exact;
            return check_gradients(name, {x}, [&] { return f(x); }, seed, opt);
        };
    };
    auto binary = [&r](const std::string& name, std::function<D(const D&, const D&)> f, Shape sa, Shape sb) {
        r[name] = [=](uint64_t seed) {
            Rng rng(seed);
            auto a = grad_input(sa, rng, false);
            auto b = grad_input(sb, rng, false);
            return check_gradients(name, {a, b}, [&] { return f(a, b); }, seed);
        };
    };

    binary("add", [](const D& a, const D& b) { return add(a, b); }, {3, 4}, {3, 4});
    binary("sub", [](const D& a, const D& b) { return sub(a, b); }, {3, 4}, {3, 4});
    binary("mul", [](const D& a, const D& b) { return mul(a, b); }, {3, 4}, {3, 4});
    binary("add_suffix", [](const D& a, const D& b) { return add_suffix(a, b); }, {2, 3, 4}, {4});
    binary("matmul", [](const D& a, const D& b) { return matmul(a, b); }, {4, 5}, {5, 3});
    binary("matmul_batched", [](const D& a, const D& b) { return matmul(a, b); }, {2, 3, 4, 5}, {2, 3, 5, 2});
    binary("matmul_broadcast", [](const D& a, const D& b) { return matmul(a, b); }, {2, 3, 4}, {4, 5});
    unary("scale", [](const D& x) { return scale(x, 1.5); }, {8});
    unary("abs", [](const D& x) { return abs(x); }, {16});
    unary("log_clamped", [](const D& x) { return log_clamped(x); }, {16}, false, 0.1, 2.0);
    unary("gelu", [](const D& x) { return gelu(x); }, {16});
    unary("leaky_relu", [](const D& x) { return leaky_relu(x, 0.2); }, {16});
    unary("tanh", [](const D& x) { return tanh(x); }, {16});
    unary("sigmoid", [](const D& x) { return sigmoid(x); }, {16});
    unary("softmax", [](const D& x) { return softmax(x, 1); }, {3, 5, 2});
    unary("reduce_sum", [](const D& x) { return reduce(x, ReduceOp::sum, {0, 2}); }, {3, 4, 2});
    unary("reduce_mean", [](const D& x) { return reduce(x, ReduceOp::mean, {1}); }, {3, 4, 2});
    unary("abs_mean", [](const D& x) { return reduce(x, ReduceOp::abs_mean, {0}); }, {3, 4});
    unary("reshape", [](const D& x) { return reshape(x, {4, 6}); }, {2, 3, 4}, true);
    unary("permute", [](const D& x) { return permute(x, {2, 0, 1}); }, {2, 3, 4}, true);
    unary("roll", [](const D& x) { return roll(x, 1, -2); }, {2, 3, 4, 2}, true);
    unary("concat", [](const D& x) { return concat<double>({x, scale(x, 2.0)}, 1); }, {2, 3, 2});
    unary("split", [](const D& x) {
        auto parts = split(x, 1, {1, 2});
        return concat<double>({scale(parts[1], 3.0), parts[0]}, 1);
    }, {2, 3, 2});
    unary("window_partition", [](const D& x) { return window_reverse(window_partition(x, 2), 2, 4, 4); },
          {2, 4, 4, 3}, true);

    r["gather_rows"] = [](uint64_t seed) {
        Rng rng(seed);
        auto t = grad_input({5, 3}, rng, false);
        const std::vector<int32_t> idx{4, 0, 0, 2, 4, 1};
        return check_gradients("gather_rows", {t}, [&] { return gather_rows(t, idx); }, seed);
    };
    r["layer_norm"] = [](uint64_t seed) {
        Rng rng(seed);
        auto x = grad_input({4, 8}, rng, false);
        auto g = grad_input({8}, rng, false, 0.5, 1.5);
        auto b = grad_input({8}, rng, false);
        return check_gradients("layer_norm", {x, g, b}, [&] { return layer_norm(x, g, b, 1e-5); }, seed);
    };
    r["batch_norm"] = [](uint64_t seed) {
        Rng rng(seed);
        auto x = grad_input({4, 2, 3, 3}, rng, false);
        auto g = grad_input({2}, rng, false, 0.5, 1.5);
        auto b = grad_input({2}, rng, false);
        auto rm = D::zeros({2});
        auto rv = D::ones({2});
        GradCheckOptions opt;
        opt.tolerance = 2e-3;
        return check_gradients("batch_norm", {x, g, b},
                               [&] { return batch_norm(x, g, b, rm, rv, NormMode::train, 0.1, 1e-5); }, seed, opt);
    };
    r["conv2d"] = [](uint64_t seed) {
        Rng rng(seed);
        auto x = grad_input({1, 2, 6, 6}, rng, false);
        auto w = grad_input({3, 2, 3, 3}, rng, false);
        auto b = grad_input({3}, rng, false);
        return check_gradients("conv2d", {x, w, b}, [&] { return conv2d(x, w, b, 1, 1); }, seed);
    };
    r["conv2d_strided"] = [](uint64_t seed) {
        Rng rng(seed);
        auto x = grad_input({2, 2, 8, 8}, rng, false);
        auto w = grad_input({3, 2, 4, 4}, rng, false);
        auto b = grad_input({3}, rng, false);
        return check_gradients("conv2d_strided", {x, w, b}, [&] { return conv2d(x, w, b, 2, 1); }, seed);
    };
    r["window_attention"] = [](uint64_t seed) {
        Rng rng(seed);
        auto attn = WindowAttention<double>::make(8, 2, 2, rng);
        randomize(attn, rng, 0.3);
        auto mask = build_shift_mask<double>(4, 4, 2, 1);
        auto x = grad_input({4, 4, 8}, rng, false);
        return check_gradients("window_attention", with(x, params_of(attn)),
                               [&] { return window_attention(x, attn, mask); }, seed);
    };
    r["swin_block"] = [](uint64_t seed) {
        Rng rng(seed);
        auto block = SwinBlock<double>::make(8, 2, 4, 4, 2, true, rng);
        randomize(block, rng, 0.3);
        auto x = grad_input({1, 16, 8}, rng, false);
        GradCheckOptions opt;
        opt.tolerance = kCompositeTolerance;
        return check_gradients("swin_block", with(x, params_of(block)), [&] { return swin_block(x, block, 4, 4); },
                               seed, opt);
    };
    r["patch_embed"] = [](uint64_t seed) {
        Rng rng(seed);
        auto e = PatchEmbed<double>::make(3, 4, 8, rng);
        randomize(e, rng, 0.3);
        auto x = grad_input({1, 3, 8, 8}, rng, false);
        return check_gradients("patch_embed", with(x, params_of(e)), [&] { return e(x); }, seed);
    };
    r["patch_merge"] = [](uint64_t seed) {
        Rng rng(seed);
        auto m = PatchMerge<double>::make(4, rng);
        randomize(m, rng, 0.3);
        auto x = grad_input({1, 16, 4}, rng, false);
        return check_gradients("patch_merge", with(x, params_of(m)), [&] { return m(x, 4, 4); }, seed);
    };
    r["patch_expand"] = [](uint64_t seed) {
        Rng rng(seed);
        auto e = PatchExpand<double>::make(8, 2, rng);
        randomize(e, rng, 0.3);
        auto x = grad_input({1, 4, 8}, rng, false);
        return check_gradients("patch_expand", with(x, params_of(e)), [&] { return e(x, 2, 2); }, seed);
    };
    r["conv_block"] = [](uint64_t seed) {
        Rng rng(seed);
        auto b = ConvBlock<double>::make(4, 4, 4, rng);
        randomize(b, rng, 0.3);
        auto x = grad_input({2, 16, 4}, rng, false);
        return check_gradients("conv_block", with(x, params_of(b)),
                               [&] { return conv_block_forward(x, b, NormMode::train); }, seed);
    };
    r["discriminator"] = [](uint64_t seed) {
        auto d = build_discriminator<double>(seed);
        Rng rng(seed);
        auto x = grad_input({1, 6, 32, 32}, rng, false);
        GradCheckOptions opt;
        opt.tolerance = kDiscriminatorTolerance;
        opt.eps = kDiscriminatorEps;
        opt.max_samples = 12;
        return check_gradients("discriminator", with(x, params_of(d)), [&] { return discriminator_forward(d, x); },
                               seed, opt);
    };
    r["generator"] = [](uint64_t seed) {
        ModelConfig cfg;
        cfg.image_size = 16;
        cfg.embed_dim = 8;
        cfg.depths = {2, 2};
        cfg.heads = {2, 2};
        cfg.window_size = 2;
        cfg.seed = seed;
        auto g = build_generator<double>(cfg);
        Rng rng(seed);
        randomize(g, rng, 0.1);
        auto x = grad_input({1, 3, 16, 16}, rng, false);
        GradCheckOptions opt;
        opt.tolerance = kCompositeTolerance;
        opt.max_samples = 8;
        return check_gradients("generator", with(x, params_of(g)), [&] { return generator_forward(g, x); }, seed, opt);
    };
    r["loss_generator"] = [](uint64_t seed) {
        Rng rng(seed);
        auto d = grad_input({1, 1, 3, 3}, rng, false, 0.05, 0.95);
        auto fake = grad_input({1, 3, 4, 4}, rng, false);
        auto target = grad_input({1, 3, 4, 4}, rng, false);
        // keep |fake - target| clear of the L1 kink
        for (std::size_t i = 0; i < 48; ++i) {
            const double gap = rng.uniform(0.1, 0.5);
            target.mutable_data()[i] = fake.data()[i] + (rng.coin() ? gap : -gap);
        }
        return check_gradients("loss_generator", {d, fake, target},
                               [&] { return loss_generator(d, fake, target, 100.0).total; }, seed);
    };
    r["loss_discriminator"] = [](uint64_t seed) {
        Rng rng(seed);
        auto real = grad_input({1, 1, 3, 3}, rng, false, 0.05, 0.95);
        auto fake = grad_input({1, 1, 3, 3}, rng, false, 0.05, 0.95);
        return check_gradients("loss_discriminator", {real, fake}, [&] { return loss_discriminator(real, fake); }, seed);
    };
    return r;
}

}  // namespace detail

inline const std::map<std::string, detail::GradCheckFn>& gradcheck_registry() {
    static const auto registry = detail::build_registry();
    return registry;
}

inline std::vector<std::string> gradcheck_ops() {
    std::vector<std::string> names;
    for (const auto& [name, fn] : gradcheck_registry()) names.push_back(name);
    return names;
}

/// Runs the registered check `op` with inputs drawn from `seed`.
inline GradCheckReport gradcheck(const std::string& op, uint64_t seed) {
    const auto& reg = gradcheck_registry();
    auto it = reg.find(op);
    if (it == reg.end()) throw LookupError("gradcheck: unknown op '" + op + "'");
    return it->second(seed);
}

}  // namespace swinpg
