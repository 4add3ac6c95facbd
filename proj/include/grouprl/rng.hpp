#ifndef GROUPRL_RNG_HPP
#define GROUPRL_RNG_HPP

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>

namespace grouprl {

// splitmix64 finalizer; used both as a stream-splitting hash and for the
// deterministic surface hash seeds.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Derives an independent child seed from a master seed and a path of tags
// (step index, query index, role id, ...). Same inputs, same seed, on every
// platform.
inline uint64_t derive_seed(uint64_t master, std::initializer_list<uint64_t> path) {
    uint64_t h = mix64(master ^ 0x6a09e667f3bcc908ull);
    for (uint64_t tag : path) {
        h = mix64(h ^ mix64(tag + 0x9e3779b97f4a7c15ull));
    }
    return h;
}

// Seeded generator wrapper. All draws go through explicit, documented
// constructions (53-bit uniforms, Box-Muller normals, inverse-CDF
// categoricals) so sequences are reproducible independent of the standard
// library's distribution implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + stddev * spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return mean + stddev * r * std::cos(theta);
    }

    // Inverse-CDF draw from an explicit probability vector. Probabilities are
    // assumed nonnegative; any rounding slack goes to the last index.
    int categorical(std::span<const double> probs) {
        const double u = uniform();
        double cum = 0.0;
        for (size_t i = 0; i < probs.size(); ++i) {
            cum += probs[i];
            if (u < cum) {
                return static_cast<int>(i);
            }
        }
        return static_cast<int>(probs.size()) - 1;
    }

    // Uniform integer in [0, n).
    int below(int n) {
        return static_cast<int>(uniform() * static_cast<double>(n)) % n;
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace grouprl

#endif
