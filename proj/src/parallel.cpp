#include "kalign/parallel.hpp"

#include <algorithm>

#include <omp.h>

namespace kalign {

void set_num_threads(int n) { omp_set_num_threads(std::max(1, n)); }

int max_threads() { return omp_get_max_threads(); }

}  // namespace kalign
