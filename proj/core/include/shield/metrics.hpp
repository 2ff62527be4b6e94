#pragma once

#include <cstddef>
#include <vector>

namespace shield {

// Per-class F1 averaged with weights = class support / total examples.
double weighted_f1(const std::vector<size_t>& predictions,
                   const std::vector<size_t>& gold, size_t num_classes);

double accuracy(const std::vector<size_t>& predictions,
                const std::vector<size_t>& gold);

}  // namespace shield
