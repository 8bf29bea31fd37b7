#include "fpdn/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "fpdn/errors.hpp"

namespace fpdn {

std::uint64_t Rng::below(std::uint64_t n) {
    // Rejection sampling to keep the draw unbiased.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return x % n;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0,1], keeps log finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

std::uint64_t Rng::mix(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer over seed+stream.
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::string Rng::serialize() const {
    std::ostringstream os;
    os << (has_spare_ ? 1 : 0) << " ";
    os.precision(17);
    os << spare_ << " " << engine_;
    return os.str();
}

Rng Rng::deserialize(const std::string& text) {
    std::istringstream is(text);
    Rng rng(0);
    int flag = 0;
    is >> flag >> rng.spare_ >> rng.engine_;
    if (!is) {
        throw NumericError("malformed rng state string");
    }
    rng.has_spare_ = flag != 0;
    return rng;
}

}  // namespace fpdn
