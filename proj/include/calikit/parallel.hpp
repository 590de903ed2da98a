#pragma once

#include <cstddef>
#include <exception>

namespace calikit {

// Runs body(i) for i in [0, n) across OpenMP threads with a static schedule.
// The first exception thrown by any iteration is rethrown on the caller's
// thread once the loop finishes.
template <class Body>
void parallel_rows(std::size_t n, Body&& body) {
  std::exception_ptr failure;
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical(calikit_parallel_rows)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace calikit
