#pragma once

// Parameter containers shared by the generator and discriminator. Each
// exposes visit(prefix, f) calling f(name, tensor, kind) for every tensor it
// owns, which drives optimizers, checkpoints and parameter counting.

#include <string>

#include "swinpg/ops.hpp"

namespace swinpg {

enum class TensorKind { parameter, buffer };

template <class T>
BasicTensor<T> make_param(BasicTensor<T> t) {
    t.set_requires_grad(true);
    return t;
}

template <class T>
struct Linear {
    BasicTensor<T> weight;  // [in, out]
    BasicTensor<T> bias;    // [out], undefined when the layer is bias-free

    static Linear make(int64_t in, int64_t out, bool with_bias, Rng& rng) {
        Linear l;
        l.weight = make_param(BasicTensor<T>::truncated_normal({in, out}, rng, 0.02));
        if (with_bias) l.bias = make_param(BasicTensor<T>::zeros({out}));
        return l;
    }

    BasicTensor<T> operator()(const BasicTensor<T>& x) const { return linear(x, weight, bias); }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".weight", weight, TensorKind::parameter);
        if (bias.defined()) f(prefix + ".bias", bias, TensorKind::parameter);
    }
};

template <class T>
struct LayerNorm {
    BasicTensor<T> gamma;
    BasicTensor<T> beta;
    double eps = 1e-5;

    static LayerNorm make(int64_t dim) {
        return {make_param(BasicTensor<T>::ones({dim})), make_param(BasicTensor<T>::zeros({dim})), 1e-5};
    }

    BasicTensor<T> operator()(const BasicTensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".gamma", gamma, TensorKind::parameter);
        f(prefix + ".beta", beta, TensorKind::parameter);
    }
};

template <class T>
struct Conv2d {
    BasicTensor<T> weight;  // [out, in, k, k]
    BasicTensor<T> bias;    // optional
    int64_t stride = 1;
    int64_t padding = 0;

    static Conv2d make(int64_t in, int64_t out, int64_t k, int64_t stride, int64_t padding, bool with_bias, Rng& rng,
                       double std = 0.02) {
        Conv2d c;
        c.weight = make_param(BasicTensor<T>::normal({out, in, k, k}, rng, std));
        if (with_bias) c.bias = make_param(BasicTensor<T>::zeros({out}));
        c.stride = stride;
        c.padding = padding;
        return c;
    }

    BasicTensor<T> operator()(const BasicTensor<T>& x) const { return conv2d(x, weight, bias, stride, padding); }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".weight", weight, TensorKind::parameter);
        if (bias.defined()) f(prefix + ".bias", bias, TensorKind::parameter);
    }
};

template <class T>
struct BatchNorm2d {
    BasicTensor<T> gamma;
    BasicTensor<T> beta;
    BasicTensor<T> running_mean;
    BasicTensor<T> running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    static BatchNorm2d make(int64_t channels) {
        BatchNorm2d b;
        b.gamma = make_param(BasicTensor<T>::ones({channels}));
        b.beta = make_param(BasicTensor<T>::zeros({channels}));
        b.running_mean = BasicTensor<T>::zeros({channels});
        b.running_var = BasicTensor<T>::ones({channels});
        return b;
    }

    BasicTensor<T> operator()(const BasicTensor<T>& x, NormMode mode) {
        return batch_norm(x, gamma, beta, running_mean, running_var, mode, momentum, eps);
    }

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".gamma", gamma, TensorKind::parameter);
        f(prefix + ".beta", beta, TensorKind::parameter);
        f(prefix + ".running_mean", running_mean, TensorKind::buffer);
        f(prefix + ".running_var", running_var, TensorKind::buffer);
    }
};

/// Total element count of all learnable tensors reachable through visit().
template <class Module>
int64_t count_parameters(Module& m) {
    int64_t n = 0;
    m.visit("", [&](const std::string&, auto& t, TensorKind kind) {
        if (kind == TensorKind::parameter) n += t.numel();
    });
    return n;
}

/// FNV-1a over the raw bytes of every tensor, in visit order.
template <class Module>
uint64_t checksum(Module& m) {
    uint64_t h = 0xcbf29ce484222325ull;
    m.visit("", [&](const std::string& name, auto& t, TensorKind) {
        for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ull;
        const auto* bytes = reinterpret_cast<const unsigned char*>(t.data().data());
        for (std::size_t i = 0; i < t.data().size_bytes(); ++i) h = (h ^ bytes[i]) * 0x100000001b3ull;
    });
    return h;
}

template <class Module>
void zero_grad(Module& m) {
    m.visit("", [](const std::string&, auto& t, TensorKind) { t.zero_grad(); });
}

}  // namespace swinpg
