#ifndef VNSC_RNG_HPP
#define VNSC_RNG_HPP

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "vnsc/tensor.hpp"

namespace vnsc {

/// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
    return mix_seed(mix_seed(seed ^ mix_seed(stream)) + index);
}

/// Seeded generator with platform-independent conversions (the standard
/// distributions are implementation-defined, mt19937_64 output is not).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

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

    Index below(Index n) { return static_cast<Index>(uniform() * static_cast<double>(n)) % n; }

    template <typename S>
    Tensor<S> uniform_tensor(Shape shape, double lo, double hi) {
        Tensor<S> t(std::move(shape));
        for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(uniform(lo, hi));
        return t;
    }

    template <typename S>
    Tensor<S> normal_tensor(Shape shape, double stddev = 1.0) {
        Tensor<S> t(std::move(shape));
        for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(stddev * normal());
        return t;
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace vnsc

#endif // VNSC_RNG_HPP
