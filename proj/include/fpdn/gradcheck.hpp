#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fpdn {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    bool all_pass = true;
};

// Central finite differences (h = 1e-3, double-precision loss evaluation)
// against tape gradients, for every op and every input slot, plus an
// end-to-end check on a 16x16 toy model. Relative error uses
// |fd - grad| / max(|fd|, |grad|, 1). Op-level tolerance 1e-3, end-to-end
// 1e-2 (32-bit forward).
GradCheckReport run_gradcheck(std::uint64_t seed);

}  // namespace fpdn
