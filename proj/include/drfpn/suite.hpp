#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace drfpn {

enum class SuiteScope { op, module, full, all };

struct SuiteCase {
    std::string name;
    double max_rel = 0.0;
    double threshold = 0.0;
    bool pass = false;
};

// Registered finite-difference gradient checks at 64-bit precision.
// Deterministic for a fixed seed.
std::vector<SuiteCase> run_gradcheck_suite(SuiteScope scope, std::uint64_t seed);

struct CriterionResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

// Runs every acceptance criterion, printing one pass/fail line per criterion.
// `quick_training` shortens the training-smoke runs (for unit tests only; the
// real gate runs the full 500 steps).
std::vector<CriterionResult> run_acceptance(std::ostream& log, bool quick_training = false);

}  // namespace drfpn
