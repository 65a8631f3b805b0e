#pragma once

#include <cstdint>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace uavd {

inline int max_threads() {
#if defined(_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

inline void set_threads(int n) {
#if defined(_OPENMP)
  omp_set_num_threads(n < 1 ? 1 : n);
#else
  (void)n;
#endif
}

/// Static-schedule loop over [begin, end). Callers only partition over
/// independent outputs, so results never depend on the thread count.
template <class F>
inline void parallel_for(std::int64_t begin, std::int64_t end, F&& f) {
#if defined(_OPENMP)
  if (end - begin > 1 && omp_get_max_threads() > 1 && !omp_in_parallel()) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = begin; i < end; ++i) f(i);
    return;
  }
#endif
  for (std::int64_t i = begin; i < end; ++i) f(i);
}

}  // namespace uavd
