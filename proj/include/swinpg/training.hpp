#pragma once

// Adam, the training state and the alternating conditional-GAN update:
// one discriminator step on (real pair, detached fake pair), then one
// generator step on the non-saturating adversarial term plus lambda * L1.

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "swinpg/data.hpp"
#include "swinpg/discriminator.hpp"
#include "swinpg/generator.hpp"
#include "swinpg/losses.hpp"

namespace swinpg {

struct TrainConfig {
    double lr = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
    double lambda_l1 = 100.0;
    int64_t batch_size = 4;
    int64_t epochs = 1;
    uint64_t seed = 0;

    void validate() const {
        if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("training: lr must be > 0");
        if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("training: beta1 must lie in [0,1)");
        if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("training: beta2 must lie in [0,1)");
        if (!(eps > 0.0)) throw ConfigError("training: eps must be > 0");
        if (!(lambda_l1 >= 0.0) || !std::isfinite(lambda_l1)) throw ConfigError("training: lambda_l1 must be >= 0");
        if (batch_size < 1) throw ConfigError("training: batch_size must be >= 1");
        if (epochs < 0) throw ConfigError("training: epochs must be >= 0");
    }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Adam with bias correction. Moments are kept in the module's visit order.
struct Adam {
    double lr = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t step_count = 0;
    std::vector<std::string> names;
    std::vector<Tensor> m;
    std::vector<Tensor> v;

    static Adam make(const TrainConfig& cfg) { return {cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, 0, {}, {}, {}}; }

    template <class Module>
    void init(Module& net) {
        names.clear();
        m.clear();
        v.clear();
        net.visit("", [&](const std::string& name, Tensor& p, TensorKind kind) {
            if (kind != TensorKind::parameter) return;
            names.push_back(name);
            m.push_back(Tensor::zeros(p.shape()));
            v.push_back(Tensor::zeros(p.shape()));
        });
    }

    /// Applies one update to every parameter and clears the gradients.
    /// Every parameter must hold a gradient.
    template <class Module>
    void step(Module& net) {
        std::vector<Tensor> params;
        net.visit("", [&](const std::string& name, Tensor& p, TensorKind kind) {
            if (kind != TensorKind::parameter) return;
            if (!p.has_grad()) throw ContractError("adam: parameter " + name + " has no gradient");
            params.push_back(p);
        });
        if (params.size() != m.size()) throw ContractError("adam: optimizer state does not match the network");
        ++step_count;
        const double t = static_cast<double>(step_count);
        const double c1 = 1.0 - std::pow(beta1, t), c2 = 1.0 - std::pow(beta2, t);
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto p = params[k].mutable_data();
            auto g = params[k].grad();
            auto mk = m[k].mutable_data();
            auto vk = v[k].mutable_data();
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = g[i];
                const double mi = beta1 * mk[i] + (1.0 - beta1) * gi;
                const double vi = beta2 * vk[i] + (1.0 - beta2) * gi * gi;
                mk[i] = static_cast<float>(mi);
                vk[i] = static_cast<float>(vi);
                p[i] = static_cast<float>(p[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
            }
            params[k].zero_grad();
        }
    }
};

struct TrainingState {
    ModelConfig model;
    TrainConfig train;
    Generator<float> generator;
    Discriminator<float> discriminator;
    Adam adam_g;
    Adam adam_d;
    int64_t epoch = 0;
    Rng rng;
};

inline uint64_t discriminator_seed(const ModelConfig& cfg) { return mix_seed(cfg.seed, 0xD15C); }

inline TrainingState make_training_state(const ModelConfig& model, const TrainConfig& train) {
    train.validate();
    TrainingState s;
    s.model = model;
    s.train = train;
    s.generator = build_generator<float>(model);
    s.discriminator = build_discriminator<float>(discriminator_seed(model));
    s.adam_g = Adam::make(train);
    s.adam_g.init(s.generator);
    s.adam_d = Adam::make(train);
    s.adam_d.init(s.discriminator);
    s.rng = Rng(train.seed);
    return s;
}

struct StepLosses {
    double loss_d = 0.0;  // 0 when the discriminator is disabled
    double loss_g = 0.0;
    double l1 = 0.0;
};

/// One optimisation step on a batch of [-1,1] images.
inline StepLosses train_step(TrainingState& s, const Tensor& degraded, const Tensor& reference) {
    tape().clear();
    s.generator.mode = NormMode::train;
    s.discriminator.mode = NormMode::train;
    StepLosses out;
    auto fake = generator_forward(s.generator, degraded);
    if (s.model.use_discriminator) {
        zero_grad(s.discriminator);
        auto d_real = discriminator_forward(s.discriminator, concat<float>({degraded, reference}, 1));
        auto d_fake = discriminator_forward(s.discriminator, concat<float>({degraded, fake.detach()}, 1));
        auto loss_d = loss_discriminator(d_real, d_fake);
        backward(loss_d);
        s.adam_d.step(s.discriminator);
        out.loss_d = loss_d.item();

        auto d_gen = discriminator_forward(s.discriminator, concat<float>({degraded, fake}, 1));
        auto lg = loss_generator(d_gen, fake, reference, static_cast<float>(s.train.lambda_l1));
        zero_grad(s.generator);
        backward(lg.total);
        zero_grad(s.discriminator);  // D is not updated from the generator pass
        s.adam_g.step(s.generator);
        out.loss_g = lg.total.item();
        out.l1 = lg.l1.item();
    } else {
        auto l1 = loss_l1(fake, reference);
        auto total = scale(l1, static_cast<float>(s.train.lambda_l1));
        zero_grad(s.generator);
        backward(total);
        s.adam_g.step(s.generator);
        out.loss_g = total.item();
        out.l1 = l1.item();
    }
    tape().clear();
    return out;
}

inline StepLosses train_step(TrainingState& s, const Batch& batch) { return train_step(s, batch.degraded, batch.reference); }

struct EpochStats {
    int64_t epoch = 0;  // 1-based index of the finished epoch
    int64_t steps = 0;
    double loss_d = 0.0;
    double loss_g = 0.0;
    double l1 = 0.0;
};

/// Shuffles with the state's generator, flips each pair with probability
/// 1/2, and steps once per batch (the last batch may be short).
inline EpochStats train_epoch(TrainingState& s, const std::vector<ImagePair>& pairs) {
    if (pairs.empty()) throw ContractError("train_epoch: no training pairs");
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[s.rng.below(i)]);
    EpochStats stats;
    const auto bs = static_cast<std::size_t>(s.train.batch_size);
    for (std::size_t start = 0; start < order.size(); start += bs) {
        std::vector<ImagePair> chunk;
        for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) chunk.push_back(augment_hflip(pairs[order[i]], s.rng));
        const auto l = train_step(s, make_batch(chunk));
        stats.loss_d += l.loss_d;
        stats.loss_g += l.loss_g;
        stats.l1 += l.l1;
        ++stats.steps;
    }
    const auto n = static_cast<double>(stats.steps);
    stats.loss_d /= n;
    stats.loss_g /= n;
    stats.l1 /= n;
    stats.epoch = ++s.epoch;
    return stats;
}

/// Generator output for [-1,1] inputs with batch-norm running statistics.
inline Tensor enhance_batch(Generator<float>& g, const Tensor& degraded) {
    NoGradGuard no_grad;
    const auto previous = g.mode;
    g.mode = NormMode::eval;
    auto y = generator_forward(g, degraded);
    g.mode = previous;
    return y;
}

}  // namespace swinpg
