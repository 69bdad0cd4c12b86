#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <thread>

#if defined(__x86_64__) || defined(__i386__)
#include <immintrin.h>
#endif

namespace aggfunnel::detail {

// Two lines: adjacent-line prefetch on x86 pulls pairs.
inline constexpr std::size_t kCacheLine = 128;

template <class T>
struct alignas(kCacheLine) Padded {
  T value{};
};

inline void cpu_relax() noexcept {
#if defined(__x86_64__) || defined(__i386__)
  _mm_pause();
#elif defined(__aarch64__)
  asm volatile("yield" ::: "memory");
#else
  std::atomic_signal_fence(std::memory_order_seq_cst);
#endif
}

/// Exponential spin that degrades to yielding once `spin_cap` rounds have
/// been spent. Waiters on an aggregator usually see their batch within a few
/// hundred cycles; a delegate that got descheduled is the exception.
class Backoff {
 public:
  explicit Backoff(unsigned spin_cap) noexcept : cap_(spin_cap) {}

  void pause() noexcept {
    if (rounds_ < cap_) {
      for (unsigned i = 0; i < width_; ++i) cpu_relax();
      if (width_ < kMaxWidth) width_ <<= 1;
      ++rounds_;
    } else {
      std::this_thread::yield();
    }
  }

 private:
  static constexpr unsigned kMaxWidth = 64;
  unsigned cap_;
  unsigned rounds_ = 0;
  unsigned width_ = 1;
};

/// Owner-only increment of a counter other threads may read concurrently.
inline void bump(std::atomic<std::uint64_t>& c, std::uint64_t by = 1) noexcept {
  c.store(c.load(std::memory_order_relaxed) + by, std::memory_order_relaxed);
}

}  // namespace aggfunnel::detail
