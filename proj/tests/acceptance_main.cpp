// Runs every acceptance criterion and prints one pass/fail line per
// criterion. Exit status is nonzero if any criterion fails.

#include <iostream>

#include "drfpn/suite.hpp"

int main() {
    auto results = drfpn::run_acceptance(std::cout);
    int failures = 0;
    for (const auto& r : results) failures += r.pass ? 0 : 1;
    std::cout << results.size() << " criteria, " << failures << " failed\n";
    return failures == 0 ? 0 : 1;
}
