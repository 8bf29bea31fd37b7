#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace fpdn {

// Seedable generator with hand-rolled uniform/normal transforms. The standard
// distributions are implementation-defined, so drawing through them would make
// datasets and dropout masks differ across standard libraries; the raw
// mt19937_64 stream is fully specified and the transforms below are plain
// arithmetic on it.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0,1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    // Standard normal via Box-Muller; consumes two uniforms per pair of draws.
    double normal();

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Derives an independent stream for (seed, stream) without perturbing this one.
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream);

    std::string serialize() const;
    static Rng deserialize(const std::string& text);

    bool operator==(const Rng& other) const {
        return engine_ == other.engine_ && has_spare_ == other.has_spare_ &&
               (!has_spare_ || spare_ == other.spare_);
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Fisher-Yates shuffle driven by rng.below(); deterministic for a given stream.
template <typename T>
void shuffle(std::vector<T>& items, Rng& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(items[i - 1], items[j]);
    }
}

}  // namespace fpdn
