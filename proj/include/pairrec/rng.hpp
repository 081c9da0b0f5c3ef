#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace pairrec {

/// Deterministic random source. mt19937_64 is fully specified by the
/// standard, but the <random> distributions are not, so every draw here
/// is derived from raw engine output. Two builds on different platforms
/// produce identical streams for identical seeds.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform double in [0, 1), 53 bits of entropy.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    /// Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("uniform_int: n must be > 0");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= limit);
        return v % n;
    }

    /// Standard normal via Box-Muller; the spare is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    /// Fisher-Yates shuffle driven by uniform_int.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace pairrec
