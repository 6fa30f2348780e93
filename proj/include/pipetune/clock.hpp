#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <pthread.h>

namespace pipetune {

inline int64_t steady_now_ns() {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// Active CPU time of the calling thread. Expensive on some kernels (a full
// syscall), so callers batch reads; see tracer.hpp.
inline int64_t thread_cpu_now_ns() {
  timespec ts;
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return int64_t{ts.tv_sec} * 1'000'000'000 + ts.tv_nsec;
}

// Active CPU time of another live thread.
inline int64_t thread_cpu_now_ns(pthread_t handle) {
  clockid_t cid;
  if (pthread_getcpuclockid(handle, &cid) != 0) return 0;
  timespec ts;
  if (clock_gettime(cid, &ts) != 0) return 0;
  return int64_t{ts.tv_sec} * 1'000'000'000 + ts.tv_nsec;
}

namespace detail {

inline uint64_t spin_chain(uint64_t x, uint64_t iters) {
  for (uint64_t i = 0; i < iters; ++i) {
    x = x * 6364136223846793005ULL + 1442695040888963407ULL;
  }
  return x;
}

// Iterations per nanosecond at peak observed speed. Calibrating against the
// fastest trial means a spin of N ns consumes at most N ns of CPU, so rates
// derived from spin self-reports never understate capacity.
inline double calibrate_iters_per_ns() {
  volatile uint64_t sink = 0;
  constexpr uint64_t kBlock = 4'000'000;
  double best = 0.0;
  for (int trial = 0; trial < 7; ++trial) {
    const int64_t t0 = steady_now_ns();
    sink = sink + spin_chain(0x9e3779b97f4a7c15ULL + trial, kBlock);
    const int64_t t1 = steady_now_ns();
    if (t1 > t0) best = std::max(best, double(kBlock) / double(t1 - t0));
  }
  return best > 0.0 ? best : 1.0;
}

inline double iters_per_ns() {
  static const double rate = calibrate_iters_per_ns();
  return rate;
}

}  // namespace detail

// Burns approximately `ns` nanoseconds of CPU by running a fixed amount of
// serial integer work. No clock reads in the loop: a descheduled thread makes
// no progress, so oversubscribed workers compete for real CPU instead of
// finishing on wall-clock time.
inline void busy_spin_ns(int64_t ns) {
  if (ns <= 0) return;
  static thread_local volatile uint64_t sink = 0;
  const uint64_t iters = uint64_t(double(ns) * detail::iters_per_ns());
  sink = sink + detail::spin_chain(sink, iters);
}

// Forces calibration eagerly (otherwise it runs inside the first spin).
inline void warm_up_spin_calibration() { (void)detail::iters_per_ns(); }

}  // namespace pipetune
