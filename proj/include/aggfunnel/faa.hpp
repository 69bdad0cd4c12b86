#pragma once

// Abstract fetch-and-add object, the hardware cell at the bottom of every
// construction, and dense thread-id registration.

#include <atomic>
#include <compare>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>

#include "aggfunnel/detail/platform.hpp"
#include "aggfunnel/errors.hpp"

namespace aggfunnel {

/// Dense per-object thread index in [0, p).
class ThreadId {
 public:
  constexpr ThreadId() noexcept = default;
  constexpr explicit ThreadId(std::uint32_t index) noexcept : index_(index) {}

  constexpr std::uint32_t index() const noexcept { return index_; }
  friend constexpr auto operator<=>(ThreadId, ThreadId) = default;

 private:
  std::uint32_t index_ = 0;
};

/// Runtime-polymorphic fetch-and-add object over a signed 64-bit value.
///
/// `ctx` identifies the caller for implementations that route per thread; the
/// hardware cell ignores it. All operations are linearizable.
class FaaObject {
 public:
  virtual ~FaaObject() = default;

  virtual std::int64_t fetch_add(ThreadId ctx, std::int64_t df) = 0;
  /// Fetch-and-add that skips any combining and goes straight to the value.
  virtual std::int64_t fetch_add_direct(std::int64_t df) = 0;
  virtual std::int64_t read() const = 0;
  virtual bool compare_swap(std::int64_t expected, std::int64_t desired) = 0;
};

template <class T>
concept FetchAddObject = requires(T& obj, const T& cobj, ThreadId ctx, std::int64_t v) {
  { obj.fetch_add(ctx, v) } -> std::same_as<std::int64_t>;
  { obj.fetch_add_direct(v) } -> std::same_as<std::int64_t>;
  { cobj.read() } -> std::same_as<std::int64_t>;
  { obj.compare_swap(v, v) } -> std::same_as<bool>;
};

/// A single machine word manipulated with native atomics. Arithmetic wraps
/// in two's complement.
class alignas(detail::kCacheLine) HardwareCell final : public FaaObject {
 public:
  explicit HardwareCell(std::int64_t initial = 0) noexcept : value_(initial) {}

  std::int64_t fetch_add(ThreadId, std::int64_t df) override { return add(df); }
  std::int64_t fetch_add_direct(std::int64_t df) override { return add(df); }

  std::int64_t read() const override { return value_.load(std::memory_order_seq_cst); }

  bool compare_swap(std::int64_t expected, std::int64_t desired) override {
    return value_.compare_exchange_strong(expected, desired, std::memory_order_seq_cst);
  }

 private:
  std::int64_t add(std::int64_t df) noexcept {
    // std::atomic<int64_t>::fetch_add is defined to wrap.
    return value_.fetch_add(df, std::memory_order_seq_cst);
  }

  std::atomic<std::int64_t> value_;
};

static_assert(FetchAddObject<HardwareCell>);
static_assert(FetchAddObject<FaaObject>);

/// Hands out dense ids in [0, p). A thread asking twice gets the same id.
class ThreadRegistry {
 public:
  explicit ThreadRegistry(std::size_t max_threads)
      : max_threads_(max_threads), serial_(next_serial().fetch_add(1)) {
    if (max_threads == 0) throw InvalidConfig("ThreadRegistry: max_threads must be >= 1");
  }

  ThreadRegistry(const ThreadRegistry&) = delete;
  ThreadRegistry& operator=(const ThreadRegistry&) = delete;

  ThreadId register_thread() {
    auto& mine = local_ids();
    if (auto it = mine.find(serial_); it != mine.end()) return it->second;
    std::size_t id = next_id_.load(std::memory_order_relaxed);
    do {
      if (id >= max_threads_) {
        throw RegistryFull("ThreadRegistry: all " + std::to_string(max_threads_) +
                           " ids are taken");
      }
    } while (!next_id_.compare_exchange_weak(id, id + 1, std::memory_order_acq_rel));
    ThreadId tid{static_cast<std::uint32_t>(id)};
    mine.emplace(serial_, tid);
    return tid;
  }

  std::size_t max_threads() const noexcept { return max_threads_; }
  std::size_t registered() const noexcept { return next_id_.load(std::memory_order_acquire); }

 private:
  // Keyed by a process-unique serial rather than `this` so a registry
  // reallocated at the same address does not inherit stale ids.
  static std::unordered_map<std::uint64_t, ThreadId>& local_ids() {
    thread_local std::unordered_map<std::uint64_t, ThreadId> ids;
    return ids;
  }
  static std::atomic<std::uint64_t>& next_serial() {
    static std::atomic<std::uint64_t> serial{0};
    return serial;
  }

  std::size_t max_threads_;
  std::uint64_t serial_;
  std::atomic<std::size_t> next_id_{0};
};

}  // namespace aggfunnel
