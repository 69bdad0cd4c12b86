#pragma once

// Three-bucket epoch-based reclamation.
//
// A thread pins the current global epoch before touching reclaimable memory
// and unpins when done. A node retired while the global epoch is e goes into
// bucket e % 3 and is freed when the epoch reaches e + 2: by then every thread
// that was pinned when the node was unlinked has since unpinned.

#include <atomic>
#include <cassert>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <mutex>
#include <utility>
#include <vector>

#include "aggfunnel/detail/platform.hpp"
#include "aggfunnel/errors.hpp"
#include "aggfunnel/faa.hpp"

namespace aggfunnel {

enum class ReclaimMode {
  Reclaim,  // free retired nodes after two epoch advances
  Defer,    // keep every retired node until the domain is destroyed
};

class EpochDomain {
 public:
  using Deleter = void (*)(void* node, void* ctx);

  class Guard {
   public:
    Guard() noexcept = default;
    Guard(const Guard&) = delete;
    Guard& operator=(const Guard&) = delete;
    Guard(Guard&& other) noexcept
        : domain_(std::exchange(other.domain_, nullptr)), ctx_(other.ctx_) {}
    Guard& operator=(Guard&& other) noexcept {
      if (this != &other) {
        if (domain_ != nullptr) domain_->unpin(ctx_);
        domain_ = std::exchange(other.domain_, nullptr);
        ctx_ = other.ctx_;
      }
      return *this;
    }
    ~Guard() {
      if (domain_ != nullptr) domain_->unpin(ctx_);
    }

    bool active() const noexcept { return domain_ != nullptr; }

    /// Unpins early. Releasing an inactive guard is a programming error.
    void release() noexcept {
      assert(domain_ != nullptr && "EpochDomain::Guard released twice");
      if (domain_ != nullptr) std::exchange(domain_, nullptr)->unpin(ctx_);
    }

   private:
    friend class EpochDomain;
    Guard(EpochDomain* d, ThreadId ctx) noexcept : domain_(d), ctx_(ctx) {}
    EpochDomain* domain_ = nullptr;
    ThreadId ctx_;
  };

  explicit EpochDomain(std::size_t max_threads, ReclaimMode mode = ReclaimMode::Reclaim)
      : slots_(max_threads), mode_(mode) {
    if (max_threads == 0) throw InvalidConfig("EpochDomain: max_threads must be >= 1");
  }

  EpochDomain(const EpochDomain&) = delete;
  EpochDomain& operator=(const EpochDomain&) = delete;

  ~EpochDomain() {
    for (auto& bucket : buckets_) run(std::move(bucket));
  }

  /// Pins are nested per thread; only the outermost one publishes the epoch.
  [[nodiscard]] Guard pin(ThreadId ctx) noexcept {
    Slot& s = slot(ctx);
    if (s.depth++ == 0) {
      s.epoch.store(global_.load(std::memory_order_acquire), std::memory_order_relaxed);
      std::atomic_thread_fence(std::memory_order_seq_cst);
    }
    return Guard{this, ctx};
  }

  void unpin(ThreadId ctx) noexcept {
    Slot& s = slot(ctx);
    assert(s.depth > 0 && "EpochDomain::unpin without matching pin");
    if (s.depth == 0) return;
    if (--s.depth == 0) s.epoch.store(kQuiescent, std::memory_order_release);
  }

  bool pinned(ThreadId ctx) const noexcept { return slots_[ctx.index()].value.depth > 0; }

  /// `node` must already be unreachable for threads that pin from now on.
  void retire(void* node, Deleter deleter, void* ctx = nullptr) {
    {
      std::lock_guard lock(mu_);
      const std::uint64_t e = global_.load(std::memory_order_relaxed);
      buckets_[e % 3].push_back(Retired{node, deleter, ctx});
    }
    retired_.fetch_add(1, std::memory_order_relaxed);
    try_advance();
  }

  template <class T>
  void retire(T* node) {
    retire(node, [](void* p, void*) { delete static_cast<T*>(p); });
  }

  /// Moves the global epoch forward if every pinned thread has observed it.
  /// Fails benignly when another thread is advancing or a pin lags behind.
  bool try_advance() {
    std::vector<Retired> expired;
    {
      std::unique_lock lock(mu_, std::try_to_lock);
      if (!lock.owns_lock()) return false;
      const std::uint64_t e = global_.load(std::memory_order_relaxed);
      std::atomic_thread_fence(std::memory_order_seq_cst);
      for (const auto& s : slots_) {
        const std::uint64_t pinned_at = s.value.epoch.load(std::memory_order_acquire);
        if (pinned_at != kQuiescent && pinned_at != e) return false;
      }
      global_.store(e + 1, std::memory_order_release);
      // Epoch is now e + 1: bucket (e + 1) - 2 is safe, and it is also the
      // bucket the next epoch will fill.
      if (mode_ == ReclaimMode::Reclaim) expired = std::exchange(buckets_[(e + 2) % 3], {});
    }
    run(std::move(expired));
    return true;
  }

  std::uint64_t epoch() const noexcept { return global_.load(std::memory_order_acquire); }
  std::uint64_t retired_count() const noexcept { return retired_.load(std::memory_order_relaxed); }
  std::uint64_t reclaimed_count() const noexcept {
    return reclaimed_.load(std::memory_order_relaxed);
  }
  std::size_t max_threads() const noexcept { return slots_.size(); }
  ReclaimMode mode() const noexcept { return mode_; }

 private:
  static constexpr std::uint64_t kQuiescent = std::numeric_limits<std::uint64_t>::max();

  struct Slot {
    std::atomic<std::uint64_t> epoch{kQuiescent};
    std::uint32_t depth = 0;  // owner-only
  };

  struct Retired {
    void* node;
    Deleter deleter;
    void* ctx;
  };

  Slot& slot(ThreadId ctx) noexcept {
    assert(ctx.index() < slots_.size());
    return slots_[ctx.index()].value;
  }

  void run(std::vector<Retired> nodes) {
    for (const auto& r : nodes) r.deleter(r.node, r.ctx);
    reclaimed_.fetch_add(nodes.size(), std::memory_order_relaxed);
  }

  std::atomic<std::uint64_t> global_{0};
  std::vector<detail::Padded<Slot>> slots_;
  std::mutex mu_;
  std::vector<Retired> buckets_[3];
  ReclaimMode mode_;
  std::atomic<std::uint64_t> retired_{0};
  std::atomic<std::uint64_t> reclaimed_{0};
};

}  // namespace aggfunnel
