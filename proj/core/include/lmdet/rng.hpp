#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace lmdet {

/// Deterministic RNG. Distributions are hand-rolled on top of raw mt19937_64
/// draws so sequences do not depend on the standard library's distribution
/// implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t raw() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(engine_() % span);
    }

    /// Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    /// Normal(0, std) re-drawn until within 2 standard deviations.
    double trunc_normal(double stddev) {
        double z = normal();
        while (std::abs(z) > 2.0) z = normal();
        return z * stddev;
    }

    template <class T>
    std::vector<T> trunc_normal_vec(std::size_t n, double stddev) {
        std::vector<T> out(n);
        for (auto& v : out) v = static_cast<T>(trunc_normal(stddev));
        return out;
    }

    /// Fisher-Yates shuffle.
    template <class V>
    void shuffle(V& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(engine_() % i);
            std::swap(v[i - 1], v[j]);
        }
    }

    std::string save_state() const;
    void load_state(const std::string& state);

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace lmdet
