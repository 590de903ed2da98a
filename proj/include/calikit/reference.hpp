#pragma once

// Serial reference implementations of the parallel kernels. They evaluate the
// estimators literally, one ordered pair (i, j) at a time, and exist for
// testing and benchmarking the optimised versions.

#include <cstddef>
#include <span>

#include "calikit/array.hpp"
#include "calikit/kernels.hpp"

namespace calikit::reference {

Array gram(const KernelSpec& spec, const Array& u, const Array& v);

double mmd_usq_regression(const KernelSpec& kernel, const Array& target, const Array& forecast,
                          std::size_t samples);

double mmd_usq_classification(const KernelSpec& kernel, std::span<const std::size_t> labels,
                              const Array& pmf, const Array* z);

}  // namespace calikit::reference
