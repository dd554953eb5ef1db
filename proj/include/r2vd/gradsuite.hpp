#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace r2vd {

struct GradCase {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    std::size_t checked = 0;
    bool passed() const { return max_rel_error < tolerance; }
};

/// Central-difference checks (64-bit) of every differentiable primitive and
/// of small OCA and DiT composites.
std::vector<GradCase> run_gradient_suite(std::uint64_t seed = 0);

}  // namespace r2vd
