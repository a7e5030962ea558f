#pragma once

#include <vector>

#include "rds/numcore.hpp"

namespace rds {

/// Probability that a randomly chosen positive (label 1) scores above a randomly
/// chosen negative (label 0); ties count one half. Exact, via mid-ranks.
/// Throws std::invalid_argument unless both classes are present.
double auc(const Vector& scores, const std::vector<int>& labels);

}  // namespace rds
