#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "cvl/tensor.hpp"

namespace cvl {

// Deterministic generator built on mt19937_64 with explicit uniform and
// Box-Muller normal transforms, so the draw sequence depends only on the
// seed (std::normal_distribution is implementation-defined).
class rng {
  public:
    explicit rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // [0,1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0,n)
    int64_t uniform_int(int64_t n) {
        return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n;
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Normal(0, stddev) truncated to [lo_sigma, hi_sigma] standard
    // deviations via rejection.
    double trunc_normal(double stddev, double lo_sigma = -2.0, double hi_sigma = 2.0) {
        for (;;) {
            const double z = normal();
            if (z >= lo_sigma && z <= hi_sigma) {
                return z * stddev;
            }
        }
    }

    template <typename T>
    void fill_trunc_normal(tensor<T> & t, double stddev) {
        for (auto & v : t.data) {
            v = static_cast<T>(trunc_normal(stddev));
        }
    }

    template <typename T>
    void fill_uniform(tensor<T> & t, double lo, double hi) {
        for (auto & v : t.data) {
            v = static_cast<T>(uniform(lo, hi));
        }
    }

  private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Stable per-sample seed derivation (splitmix64 finalizer).
inline uint64_t mix_seed(uint64_t seed, uint64_t index) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace cvl
