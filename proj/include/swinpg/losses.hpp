#pragma once

// Conditional-GAN objectives. Probabilities are clamped at 1e-12 before the
// log so saturated discriminator outputs give finite losses.

#include <string>

#include "swinpg/ops.hpp"

namespace swinpg {

inline constexpr double kLogFloor = 1e-12;

/// Mean absolute difference over all elements.
template <class T>
BasicTensor<T> loss_l1(const BasicTensor<T>& fake, const BasicTensor<T>& target) {
    detail::require_same_shape(fake.shape(), target.shape(), "loss_l1");
    return abs_mean(sub(target, fake));
}

template <class T>
struct GeneratorLoss {
    BasicTensor<T> total;
    BasicTensor<T> adversarial;  // -mean(log D(fake))
    BasicTensor<T> l1;           // unweighted
    BasicTensor<T> weighted_l1;  // lambda * l1
};

/// Non-saturating generator objective: -mean(log D(x, G(x))) + lambda * L1.
template <class T>
GeneratorLoss<T> loss_generator(const BasicTensor<T>& d_fake, const BasicTensor<T>& fake, const BasicTensor<T>& target,
                                double lambda) {
    GeneratorLoss<T> out;
    out.adversarial = scale(mean(log_clamped(d_fake, static_cast<T>(kLogFloor))), T(-1));
    out.l1 = loss_l1(fake, target);
    out.weighted_l1 = scale(out.l1, static_cast<T>(lambda));
    out.total = add(out.adversarial, out.weighted_l1);
    return out;
}

namespace detail {
template <class T>
void require_probabilities(const BasicTensor<T>& p, const char* what) {
    for (T v : p.data()) {
        if (!(v >= T(0) && v <= T(1))) {
            throw ContractError(std::string("loss_discriminator: ") + what + " contains " + std::to_string(v) +
                                ", outside [0, 1]");
        }
    }
}
}  // namespace detail

/// -mean(log D(x, y)) - mean(log(1 - D(x, G(x)))).
template <class T>
BasicTensor<T> loss_discriminator(const BasicTensor<T>& d_real, const BasicTensor<T>& d_fake) {
    detail::require_probabilities(d_real, "d_real");
    detail::require_probabilities(d_fake, "d_fake");
    const auto floor = static_cast<T>(kLogFloor);
    auto real_term = mean(log_clamped(d_real, floor));
    auto fake_term = mean(log_clamped(add_scalar(scale(d_fake, T(-1)), T(1)), floor));
    return scale(add(real_term, fake_term), T(-1));
}

}  // namespace swinpg
