#pragma once

// FIFO queue over a conceptually infinite array of cells, realized as a list
// of fixed-size segments. Enqueuers and dequeuers draw tickets from two
// fetch-and-add objects (Tail and Head); ticket i names cell i.
//
// An enqueuer with ticket i installs its item into an empty cell i. A
// dequeuer with ticket i swaps in TAKEN: if an item was there it returns it,
// otherwise it has poisoned the cell and the matching enqueuer will retry
// with a fresh ticket. A segment is unlinked only after all of its cells were
// swapped to TAKEN, so a ticket whose segment is gone was poisoned.

#include <atomic>
#include <cassert>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>

#include "aggfunnel/detail/platform.hpp"
#include "aggfunnel/errors.hpp"
#include "aggfunnel/faa.hpp"
#include "aggfunnel/reclaim.hpp"

namespace aggfunnel {

struct QueueOptions {
  std::size_t segment_size = 1024;
};

template <FetchAddObject Index>
class SegQueue {
 public:
  using Item = std::uint64_t;
  static constexpr Item kEmptyCell = 0;
  static constexpr Item kTakenCell = std::numeric_limits<Item>::max();

  class Segment {
   public:
    Segment(std::uint64_t base, std::size_t size)
        : base_(base), size_(size), cells_(std::make_unique<std::atomic<Item>[]>(size)) {
      for (std::size_t i = 0; i < size; ++i) cells_[i].store(kEmptyCell, std::memory_order_relaxed);
    }

    std::uint64_t base() const noexcept { return base_; }
    std::size_t size() const noexcept { return size_; }
    bool covers(std::uint64_t index) const noexcept { return index >= base_ && index - base_ < size_; }
    const Segment* next() const noexcept { return next_.load(std::memory_order_acquire); }
    Item peek(std::uint64_t index) const noexcept {
      return cells_[index - base_].load(std::memory_order_acquire);
    }

   private:
    friend class SegQueue;
    std::atomic<Item>& cell(std::uint64_t index) noexcept {
      assert(covers(index));
      return cells_[index - base_];
    }

    const std::uint64_t base_;
    const std::size_t size_;
    std::unique_ptr<std::atomic<Item>[]> cells_;
    std::atomic<Segment*> next_{nullptr};
    std::atomic<std::size_t> consumed_{0};  // cells swapped to TAKEN
  };

  SegQueue(std::size_t max_threads, std::unique_ptr<Index> head, std::unique_ptr<Index> tail,
           QueueOptions options = {})
      : head_idx_(std::move(head)),
        tail_idx_(std::move(tail)),
        opts_(options),
        epochs_(max_threads == 0 ? 1 : max_threads) {
    if (max_threads == 0) throw InvalidConfig("queue: max_threads must be >= 1");
    if (!head_idx_ || !tail_idx_) throw InvalidConfig("queue: index objects must not be null");
    if (opts_.segment_size == 0) throw InvalidConfig("queue: segment_size must be >= 1");
    if (head_idx_->read() != 0 || tail_idx_->read() != 0) {
      throw InvalidConfig("queue: index objects must start at 0");
    }
    auto* first = new Segment(0, opts_.segment_size);
    head_seg_.store(first, std::memory_order_relaxed);
    tail_seg_.store(first, std::memory_order_relaxed);
    allocated_.store(1, std::memory_order_relaxed);
  }

  SegQueue(const SegQueue&) = delete;
  SegQueue& operator=(const SegQueue&) = delete;

  ~SegQueue() {
    Segment* s = head_seg_.load(std::memory_order_relaxed);
    while (s != nullptr) {
      Segment* next = s->next_.load(std::memory_order_relaxed);
      delete s;
      s = next;
    }
  }

  /// `item` must not be one of the reserved cell encodings (0 and ~0).
  void enqueue(ThreadId ctx, Item item) {
    if (item == kEmptyCell || item == kTakenCell) {
      throw std::invalid_argument("queue: item " + std::to_string(item) + " collides with a reserved cell state");
    }
    auto guard = epochs_.pin(ctx);
    for (;;) {
      const auto ticket = static_cast<std::uint64_t>(tail_idx_->fetch_add(ctx, 1));
      Segment* s = segment_for_enqueue(ticket);
      if (s == nullptr) continue;  // segment fully consumed: our cell was poisoned
      Item expected = kEmptyCell;
      if (s->cell(ticket).compare_exchange_strong(expected, item, std::memory_order_acq_rel,
                                                  std::memory_order_acquire)) {
        return;
      }
      if (expected != kTakenCell) handoff_violations_.fetch_add(1, std::memory_order_relaxed);
    }
  }

  /// Empty is returned only after observing head >= tail.
  std::optional<Item> dequeue(ThreadId ctx) {
    auto guard = epochs_.pin(ctx);
    for (;;) {
      if (head_idx_->read() >= tail_idx_->read()) return std::nullopt;
      const auto ticket = static_cast<std::uint64_t>(head_idx_->fetch_add(ctx, 1));
      Segment* s = head_seg_.load(std::memory_order_acquire);
      assert(s->base() <= ticket && "head segment moved past an unconsumed ticket");
      s = walk_to(s, ticket);
      const Item prior = s->cell(ticket).exchange(kTakenCell, std::memory_order_acq_rel);
      if (prior == kTakenCell) handoff_violations_.fetch_add(1, std::memory_order_relaxed);
      if (s->consumed_.fetch_add(1, std::memory_order_acq_rel) + 1 == s->size()) advance_head();
      if (prior != kEmptyCell && prior != kTakenCell) return prior;
    }
  }

  /// Segment covering `index`, appending segments as needed. Returns nullptr
  /// when that segment was already consumed and unlinked. The pointer stays
  /// valid only while the caller is pinned in epochs() or the queue is idle.
  const Segment* locate_segment(ThreadId ctx, std::uint64_t index) {
    auto guard = epochs_.pin(ctx);
    return segment_for_enqueue(index);
  }

  const Segment* head_segment() const noexcept { return head_seg_.load(std::memory_order_acquire); }
  const Segment* tail_segment() const noexcept { return tail_seg_.load(std::memory_order_acquire); }

  Index& head_index() noexcept { return *head_idx_; }
  Index& tail_index() noexcept { return *tail_idx_; }
  const Index& head_index() const noexcept { return *head_idx_; }
  const Index& tail_index() const noexcept { return *tail_idx_; }

  /// Linked segments from head onward (quiescent use).
  std::size_t live_segments() const noexcept {
    std::size_t n = 0;
    for (const Segment* s = head_segment(); s != nullptr; s = s->next()) ++n;
    return n;
  }
  std::uint64_t segments_allocated() const noexcept { return allocated_.load(std::memory_order_relaxed); }
  std::uint64_t segments_retired() const noexcept { return retired_.load(std::memory_order_relaxed); }

  /// A cell was filled twice or taken twice. Distinct tickets make this
  /// impossible; the counter exists to prove it in stress runs.
  std::uint64_t handoff_violations() const noexcept {
    return handoff_violations_.load(std::memory_order_relaxed);
  }

  const QueueOptions& options() const noexcept { return opts_; }
  EpochDomain& epochs() noexcept { return epochs_; }

 private:
  Segment* segment_for_enqueue(std::uint64_t index) {
    Segment* s = tail_seg_.load(std::memory_order_acquire);
    if (s->base() > index) {
      s = head_seg_.load(std::memory_order_acquire);
      if (s->base() > index) return nullptr;
    }
    Segment* found = walk_to(s, index);
    // Move tail_seg forward; never backward.
    Segment* cur = tail_seg_.load(std::memory_order_acquire);
    while (cur->base() < found->base() &&
           !tail_seg_.compare_exchange_weak(cur, found, std::memory_order_acq_rel, std::memory_order_acquire)) {
    }
    return found;
  }

  Segment* walk_to(Segment* s, std::uint64_t index) {
    while (!s->covers(index)) {
      Segment* next = s->next_.load(std::memory_order_acquire);
      if (next == nullptr) {
        auto* fresh = new Segment(s->base() + s->size(), opts_.segment_size);
        if (s->next_.compare_exchange_strong(next, fresh, std::memory_order_acq_rel, std::memory_order_acquire)) {
          allocated_.fetch_add(1, std::memory_order_relaxed);
          next = fresh;
        } else {
          delete fresh;
        }
      }
      s = next;
    }
    return s;
  }

  // Unlinks fully consumed segments from the front, keeping at least one.
  void advance_head() {
    for (;;) {
      Segment* h = head_seg_.load(std::memory_order_acquire);
      if (h->consumed_.load(std::memory_order_acquire) < h->size()) return;
      Segment* next = h->next_.load(std::memory_order_acquire);
      if (next == nullptr) return;
      Segment* t = h;
      tail_seg_.compare_exchange_strong(t, next, std::memory_order_acq_rel, std::memory_order_acquire);
      if (head_seg_.compare_exchange_strong(h, next, std::memory_order_acq_rel, std::memory_order_acquire)) {
        retired_.fetch_add(1, std::memory_order_relaxed);
        epochs_.retire(h);
      }
    }
  }

  std::unique_ptr<Index> head_idx_;
  std::unique_ptr<Index> tail_idx_;
  QueueOptions opts_;
  std::atomic<std::uint64_t> allocated_{0};
  std::atomic<std::uint64_t> retired_{0};
  std::atomic<std::uint64_t> handoff_violations_{0};
  EpochDomain epochs_;
  alignas(detail::kCacheLine) std::atomic<Segment*> head_seg_{nullptr};
  alignas(detail::kCacheLine) std::atomic<Segment*> tail_seg_{nullptr};
};

}  // namespace aggfunnel
