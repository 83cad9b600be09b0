#pragma once

#include <exception>

#include "kalign/types.hpp"

namespace kalign {

/// Caps the OpenMP team size used by every parallel kernel (n >= 1).
void set_num_threads(int n);
int max_threads();

namespace detail {

/// Runs body(i) for i in [0, n) on the OpenMP team. Every iteration runs;
/// if any throw, the exception of the smallest failing index is rethrown,
/// so error reporting does not depend on the schedule.
template <typename Body>
void parallel_for(Index n, Body&& body) {
  std::exception_ptr first;
  Index first_index = n;
#pragma omp parallel for schedule(dynamic, 4)
  for (Index i = 0; i < n; ++i) {
    try {
      body(i);
    } catch (...) {
#pragma omp critical(kalign_parallel_for_error)
      {
        if (i < first_index) {
          first_index = i;
          first = std::current_exception();
        }
      }
    }
  }
  if (first) std::rethrow_exception(first);
}

}  // namespace detail
}  // namespace kalign
