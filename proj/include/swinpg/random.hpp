#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include "swinpg/errors.hpp"

namespace swinpg {

/// Seeded PRNG whose derived distributions are computed here rather than by
/// the standard library, so sequences are identical across toolchains.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return n == 0 ? 0 : static_cast<uint64_t>(uniform() * static_cast<double>(n)); }

    bool coin() { return (engine_() >> 63) != 0; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Normal(0, std) resampled until within two standard deviations.
    double truncated_normal(double std) {
        for (;;) {
            const double z = normal();
            if (std::abs(z) <= 2.0) return z * std;
        }
    }

    std::string state() const {
        std::ostringstream os;
        os << engine_ << ' ' << has_spare_ << ' ' << std::hexfloat << spare_;
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_ >> has_spare_;
        std::string spare;
        is >> spare;
        if (!is) throw ConfigError("rng: malformed state");
        spare_ = std::strtod(spare.c_str(), nullptr);
    }

    friend bool operator==(const Rng& a, const Rng& b) {
        return a.engine_ == b.engine_ && a.has_spare_ == b.has_spare_ && (!a.has_spare_ || a.spare_ == b.spare_);
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// splitmix64 step, used to derive independent per-item seeds.
inline uint64_t mix_seed(uint64_t seed, uint64_t index) {
    uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace swinpg
