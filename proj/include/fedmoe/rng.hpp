// SPDX-License-Identifier: Apache-2.0
//
// Self-contained deterministic random number generation. Everything in the
// simulator that draws randomness goes through this header so that runs are
// bit-reproducible across standard libraries and platforms; std::*_distribution
// is deliberately avoided.

#pragma once

#include <cstdint>
#include <cmath>
#include <string_view>

namespace fedmoe {

// splitmix64 step (Vigna). Good enough statistically for synthetic-data
// generation and weight init at this scale, and trivially reproducible.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // burn a few values so nearby seeds decorrelate
        for (int i = 0; i < 4; ++i) splitmix64(state_);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // uniform integer in [0, n)
    int64_t uniform_int(int64_t n) {
        return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
    }

    // standard normal via Box-Muller; second value cached
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Deterministic seed fan-out: every pipeline stage derives its own stream as
// derive_seed(master, stage_label, index). Ablation arms that share a master
// seed therefore share early-stage streams bit-exactly.
inline uint64_t derive_seed(uint64_t master, std::string_view label, uint64_t index = 0) {
    uint64_t h = master ^ 0x51'7c'c1'b7'27'22'0a'95ULL;
    for (char c : label) {
        h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
        h *= 0x100000001b3ULL;
    }
    h ^= index + 0x9e3779b97f4a7c15ULL;
    uint64_t s = h;
    return splitmix64(s);
}

}  // namespace fedmoe
