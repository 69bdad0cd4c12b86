#pragma once

#include <atomic>
#include <cassert>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace aggfunnel {

/// |v|. Callers keep values below 2^62 in magnitude, so this never overflows.
inline constexpr std::int64_t magnitude(std::int64_t v) noexcept { return v < 0 ? -v : v; }

/// a + b - c with two's-complement wrap instead of signed-overflow UB.
inline constexpr std::int64_t wrap_add_sub(std::int64_t a, std::int64_t b, std::int64_t c) noexcept {
  return static_cast<std::int64_t>(static_cast<std::uint64_t>(a) + static_cast<std::uint64_t>(b) -
                                   static_cast<std::uint64_t>(c));
}

/// One combined application of an aggregator's operations to main.
///
/// The aggregator's value went from `before` to `after` while the batch was
/// open, and main held `main_before` right before the batch was applied.
/// Every field except `previous` is immutable once the batch is published;
/// `previous` is only ever cleared, when older batches are trimmed.
struct Batch {
  static constexpr std::uint32_t kLive = 0x600DBA7Cu;
  static constexpr std::uint32_t kPoisoned = 0xDEADBA7Cu;

  Batch(std::int64_t before_, std::int64_t after_, std::int64_t main_before_, Batch* previous_,
        std::uint64_t seq_) noexcept
      : before(before_), after(after_), main_before(main_before_), previous(previous_), seq(seq_) {}

  static Batch* sentinel() { return new Batch(0, 0, 0, nullptr, 0); }

  const std::int64_t before;
  const std::int64_t after;
  const std::int64_t main_before;
  std::atomic<Batch*> previous;
  const std::uint64_t seq;  // position in the aggregator's list; the sentinel is 0
  std::atomic<std::uint32_t> canary{kLive};
};

/// What an operation that drew `a_before` from the aggregator returns, given
/// the batch that contains it.
inline constexpr std::int64_t batch_result(std::int64_t main_before, std::int64_t batch_before,
                                           std::int64_t a_before) noexcept {
  return wrap_add_sub(main_before, a_before, batch_before);
}

inline std::int64_t batch_result(const Batch& b, std::int64_t a_before) noexcept {
  return batch_result(b.main_before, b.before, a_before);
}

/// Walks back from `last` to the batch with |before| <= |a_before| < |after|.
/// Returns nullptr if the list runs out first, which means it is corrupt.
inline const Batch* find_batch(const Batch* last, std::int64_t a_before,
                               std::size_t* steps = nullptr) noexcept {
  const std::int64_t target = magnitude(a_before);
  std::size_t n = 0;
  const Batch* b = last;
  while (b != nullptr && magnitude(b->before) > target) {
    b = b->previous.load(std::memory_order_acquire);
    ++n;
  }
  assert(b != nullptr && "batch list exhausted before finding the operation's batch");
  if (steps != nullptr) *steps = n;
  return b;
}

struct BatchView {
  std::int64_t before = 0;
  std::int64_t after = 0;
  std::int64_t main_before = 0;

  friend bool operator==(const BatchView&, const BatchView&) = default;
};

/// Quiescent copy of one aggregator: its value and batch list, newest first.
/// `truncated` is set when older batches were trimmed away, so the list does
/// not end at the sentinel.
struct AggregatorSnapshot {
  std::int64_t value = 0;
  std::vector<BatchView> chain;
  bool truncated = false;
};

}  // namespace aggfunnel
