#include "ccr/rng.hpp"

#include <cmath>
#include <numbers>

namespace ccr {

double Rng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    Rng mix(seed ^ (tag * 0xd1b54a32d192ed03ULL));
    mix.next_u64();
    return mix.next_u64();
}

}  // namespace ccr
