#include "evcc/runtime.hpp"

#include <charconv>
#include <cstdlib>
#include <cstring>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace evcc {

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

Index thread_cap() {
  const char* env = std::getenv("EVCC_THREADS");
  if (!env) return 1;
  Index n = 0;
  auto res = std::from_chars(env, env + std::strlen(env), n);
  if (res.ec != std::errc() || n < 1) return 1;
  return n;
}

}  // namespace evcc
