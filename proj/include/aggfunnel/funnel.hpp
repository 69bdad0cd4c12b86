#pragma once

// Aggregating funnel: a fetch-and-add object that batches concurrent
// operations at 2m aggregators so that main sees one hardware fetch-and-add
// per batch.
//
// An operation adds df to its aggregator's value, getting a_before. It then
// waits until the aggregator's newest batch ends at or past a_before. If that
// batch ends exactly at a_before the operation is the delegate of the next
// batch: it reads the aggregator's value (a_after), applies a_after - a_before
// to main in one step, and publishes Batch(a_before, a_after, main_before).
// Everyone else finds the batch covering a_before and computes its own result
// from it. All operations of a batch linearize at the delegate's access to main.

#include <atomic>
#include <cassert>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aggfunnel/batch.hpp"
#include "aggfunnel/detail/platform.hpp"
#include "aggfunnel/errors.hpp"
#include "aggfunnel/faa.hpp"
#include "aggfunnel/reclaim.hpp"
#include "aggfunnel/routing.hpp"

namespace aggfunnel {

/// Deliberate defects for mutation testing of the verification harness.
enum class Fault : std::uint8_t {
  None,
  SkipMainApply,  // delegates read main instead of adding their batch to it
};

struct FunnelOptions {
  /// Cut and retire batches no in-flight operation can still need. With
  /// trimming off every batch lives until the funnel is destroyed.
  bool trim = true;
  /// Retained batches per aggregator before a trim is attempted.
  std::size_t trim_threshold = 64;
#ifdef NDEBUG
  bool check_invariants = false;
#else
  bool check_invariants = true;
#endif
  /// Reclaimed batches are poisoned and parked instead of freed, and every
  /// batch dereference checks for poison.
  bool poison_reclaimed = false;
  /// Backoff rounds in the wait loop before falling back to yielding.
  unsigned spin_cap = 16;
  Fault fault = Fault::None;
};

/// Totals over all threads. Torn while operations are running.
struct FunnelStats {
  std::uint64_t funneled_ops = 0;           // fetch_add through an aggregator
  std::uint64_t delegate_applications = 0;  // batches applied to main
  std::uint64_t direct_ops = 0;             // fetch_add applied straight to main
  std::uint64_t head_hits = 0;              // non-delegates whose batch was the newest
  std::uint64_t search_steps = 0;           // previous-links followed by non-delegates

  std::uint64_t main_applications() const noexcept { return delegate_applications + direct_ops; }

  /// Fetch-and-adds per access to main; a direct operation is a batch of one.
  double avg_batch_size() const noexcept {
    const auto apps = main_applications();
    return apps == 0 ? 0.0 : static_cast<double>(funneled_ops + direct_ops) / static_cast<double>(apps);
  }
};

template <FetchAddObject Main>
class BasicFunnel final : public FaaObject {
 public:
  /// `aggregators` is m, the number of aggregators per sign; `max_threads` is
  /// p, the number of distinct ThreadIds callers may use.
  BasicFunnel(std::size_t aggregators, std::size_t max_threads, std::unique_ptr<Main> main,
              RoutingPolicy router, FunnelOptions options = {})
      : m_(aggregators),
        p_(max_threads),
        main_(std::move(main)),
        router_(std::move(router)),
        opts_(options),
        epochs_(max_threads == 0 ? 1 : max_threads),
        slots_(max_threads) {
    if (m_ == 0) throw InvalidConfig("funnel: aggregator count m must be >= 1");
    if (p_ == 0) throw InvalidConfig("funnel: thread count p must be >= 1");
    if (!main_) throw InvalidConfig("funnel: main object is null");
    if (router_.aggregators() > m_) {
      throw InvalidConfig("funnel: routing policy " + router_.describe() + " needs more than m=" +
                          std::to_string(m_) + " aggregators");
    }
    if (opts_.trim_threshold == 0) throw InvalidConfig("funnel: trim_threshold must be >= 1");
    aggs_ = std::make_unique<Aggregator[]>(2 * m_);
    for (std::size_t i = 0; i < 2 * m_; ++i) aggs_[i].init(p_);
    for (std::size_t t = 0; t < p_; ++t) {
      slots_[t].value.rng = router_.make_rng(ThreadId{static_cast<std::uint32_t>(t)});
    }
  }

  BasicFunnel(std::size_t aggregators, std::size_t max_threads, std::unique_ptr<Main> main)
      : BasicFunnel(aggregators, max_threads, std::move(main), RoutingPolicy::fixed_m(aggregators)) {}

  BasicFunnel(const BasicFunnel&) = delete;
  BasicFunnel& operator=(const BasicFunnel&) = delete;

  ~BasicFunnel() override {
    for (std::size_t i = 0; i < 2 * m_; ++i) {
      destroy_chain(aggs_[i].last.load(std::memory_order_relaxed));
    }
  }

  std::int64_t fetch_add(ThreadId ctx, std::int64_t df) override {
    if (df == 0) return read();
    assert(ctx.index() < p_);
    ThreadSlot& me = slots_[ctx.index()].value;
    const Route route = router_.route(ctx, df, me.rng);
    if (route.direct) return fetch_add_direct(ctx, df);

    const std::size_t agg_id = (route.bank == Bank::Positive ? 0 : m_) + route.index;
    Aggregator& a = aggs_[agg_id];

    EpochDomain::Guard guard;
    if (opts_.trim) {
      guard = epochs_.pin(ctx);
      // Lower bound on our a_before, visible to trimmers before our add lands.
      a.announce[ctx.index()].value.store(magnitude(a.value.load(std::memory_order_relaxed)),
                                          std::memory_order_relaxed);
      std::atomic_thread_fence(std::memory_order_seq_cst);
    }

    const std::int64_t a_before = a.value.fetch_add(df, std::memory_order_acq_rel);
    assert(magnitude(a_before) < (std::int64_t{1} << 62));

    Batch* last = a.last.load(std::memory_order_acquire);
    if (magnitude(last->after) < magnitude(a_before)) {
      detail::Backoff backoff(opts_.spin_cap);
      do {
        backoff.pause();
        last = a.last.load(std::memory_order_acquire);
      } while (magnitude(last->after) < magnitude(a_before));
    }
    touch(last);

    std::int64_t result;
    if (last->after == a_before) {
      result = deliver(a, agg_id, last, a_before, me);
    } else {
      std::size_t steps = 0;
      const Batch* mine = find_batch(last, a_before, &steps);
      touch(mine);
      if (steps == 0) {
        detail::bump(me.head_hits);
      } else {
        detail::bump(me.search_steps, steps);
      }
      result = batch_result(*mine, a_before);
    }

    if (opts_.trim) a.announce[ctx.index()].value.store(kNoAnnouncement, std::memory_order_release);
    detail::bump(me.funneled_ops);
    return result;
  }

  /// Applies df to main, bypassing the aggregators. Not counted in stats;
  /// use the ThreadId overload for that.
  std::int64_t fetch_add_direct(std::int64_t df) override { return main_->fetch_add_direct(df); }

  std::int64_t fetch_add_direct(ThreadId ctx, std::int64_t df) {
    assert(ctx.index() < p_);
    detail::bump(slots_[ctx.index()].value.direct_ops);
    return main_->fetch_add_direct(df);
  }

  std::int64_t read() const override { return main_->read(); }

  bool compare_swap(std::int64_t expected, std::int64_t desired) override {
    return main_->compare_swap(expected, desired);
  }

  FunnelStats stats() const noexcept {
    FunnelStats s;
    for (const auto& padded : slots_) {
      const ThreadSlot& t = padded.value;
      s.funneled_ops += t.funneled_ops.load(std::memory_order_relaxed);
      s.delegate_applications += t.delegated.load(std::memory_order_relaxed);
      s.direct_ops += t.direct_ops.load(std::memory_order_relaxed);
      s.head_hits += t.head_hits.load(std::memory_order_relaxed);
      s.search_steps += t.search_steps.load(std::memory_order_relaxed);
    }
    return s;
  }

  FunnelStats thread_stats(ThreadId ctx) const noexcept {
    const ThreadSlot& t = slots_[ctx.index()].value;
    FunnelStats s;
    s.funneled_ops = t.funneled_ops.load(std::memory_order_relaxed);
    s.delegate_applications = t.delegated.load(std::memory_order_relaxed);
    s.direct_ops = t.direct_ops.load(std::memory_order_relaxed);
    s.head_hits = t.head_hits.load(std::memory_order_relaxed);
    s.search_steps = t.search_steps.load(std::memory_order_relaxed);
    return s;
  }

  /// Copies one aggregator's value and batch list. Only meaningful while no
  /// operation is in flight on that aggregator.
  AggregatorSnapshot snapshot(Bank bank, std::size_t index) const {
    const Aggregator& a = agg(bank, index);
    AggregatorSnapshot snap;
    snap.value = a.value.load(std::memory_order_acquire);
    const Batch* b = a.last.load(std::memory_order_acquire);
    const Batch* oldest = b;
    for (; b != nullptr; b = b->previous.load(std::memory_order_acquire)) {
      snap.chain.push_back(BatchView{b->before, b->after, b->main_before});
      oldest = b;
    }
    snap.truncated = oldest != nullptr && oldest->seq != 0;
    return snap;
  }

  /// Batches ever published at an aggregator (the sentinel excluded).
  std::uint64_t installed_batches(Bank bank, std::size_t index) const noexcept {
    return agg(bank, index).last.load(std::memory_order_acquire)->seq;
  }

  /// Fetch-and-adds on main issued by this aggregator's delegates.
  std::uint64_t main_applications(Bank bank, std::size_t index) const noexcept {
    return agg(bank, index).applications.load(std::memory_order_acquire);
  }

  /// Publication-time violations of the batch-list invariant seen so far
  /// (only counted with `check_invariants`).
  std::uint64_t invariant_violations() const noexcept {
    return violations_.load(std::memory_order_relaxed);
  }

  /// Dereferences of poisoned batches (only counted with `poison_reclaimed`).
  std::uint64_t use_after_reclaim() const noexcept {
    return poisoned_reads_.load(std::memory_order_relaxed);
  }

  std::uint64_t reclaimed_batches() const noexcept {
    return reclaimed_batches_.load(std::memory_order_relaxed);
  }

  std::size_t aggregators() const noexcept { return m_; }
  std::size_t max_threads() const noexcept { return p_; }
  const RoutingPolicy& router() const noexcept { return router_; }
  const FunnelOptions& options() const noexcept { return opts_; }
  Main& main() noexcept { return *main_; }
  const Main& main() const noexcept { return *main_; }
  EpochDomain& epochs() noexcept { return epochs_; }

 private:
  static constexpr std::int64_t kNoAnnouncement = std::numeric_limits<std::int64_t>::max();

  struct Aggregator {
    alignas(detail::kCacheLine) std::atomic<std::int64_t> value{0};

    alignas(detail::kCacheLine) std::atomic<Batch*> last{nullptr};
    std::atomic<std::uint64_t> applications{0};  // written by the current delegate only

    alignas(detail::kCacheLine) std::atomic_flag trimming = ATOMIC_FLAG_INIT;
    std::atomic<std::uint64_t> oldest_seq{0};
    std::unique_ptr<detail::Padded<std::atomic<std::int64_t>>[]> announce;
    std::size_t announce_len = 0;

    void init(std::size_t p) {
      last.store(Batch::sentinel(), std::memory_order_relaxed);
      announce = std::make_unique<detail::Padded<std::atomic<std::int64_t>>[]>(p);
      announce_len = p;
      for (std::size_t i = 0; i < p; ++i) announce[i].value.store(kNoAnnouncement);
    }
  };

  struct ThreadSlot {
    std::atomic<std::uint64_t> funneled_ops{0};
    std::atomic<std::uint64_t> delegated{0};
    std::atomic<std::uint64_t> direct_ops{0};
    std::atomic<std::uint64_t> head_hits{0};
    std::atomic<std::uint64_t> search_steps{0};
    RoutingPolicy::Rng rng;
  };

  Aggregator& agg(Bank bank, std::size_t index) noexcept {
    assert(index < m_);
    return aggs_[(bank == Bank::Positive ? 0 : m_) + index];
  }
  const Aggregator& agg(Bank bank, std::size_t index) const noexcept {
    assert(index < m_);
    return aggs_[(bank == Bank::Positive ? 0 : m_) + index];
  }

  std::int64_t deliver(Aggregator& a, std::size_t agg_id, Batch* last, std::int64_t a_before,
                       ThreadSlot& me) {
    const std::int64_t a_after = a.value.load(std::memory_order_acquire);
    std::int64_t main_before;
    if (opts_.fault == Fault::SkipMainApply) [[unlikely]] {
      main_before = main_->read();
    } else {
      // Aggregator ids double as thread ids when main is itself a funnel.
      main_before = main_->fetch_add(ThreadId{static_cast<std::uint32_t>(agg_id)}, a_after - a_before);
    }
    auto* batch = new Batch(a_before, a_after, main_before, last, last->seq + 1);
    if (opts_.check_invariants) check_publication(a, *batch, *last);
    a.applications.store(a.applications.load(std::memory_order_relaxed) + 1, std::memory_order_relaxed);
    a.last.store(batch, std::memory_order_release);
    detail::bump(me.delegated);
    if (opts_.trim) maybe_trim(a, batch, a_after);
    return main_before;
  }

  void check_publication(const Aggregator& a, const Batch& fresh, const Batch& prior) noexcept {
    const bool ok = fresh.before == prior.after &&
                    magnitude(fresh.after) > magnitude(fresh.before) &&
                    magnitude(a.value.load(std::memory_order_acquire)) >= magnitude(fresh.after) &&
                    fresh.previous.load(std::memory_order_relaxed) == &prior;
    if (!ok) violations_.fetch_add(1, std::memory_order_relaxed);
  }

  // Called by the delegate right after publishing `head`. Keeps every batch
  // whose |after| reaches the smallest announced lower bound (or a_after when
  // nobody is announced) and retires the rest.
  void maybe_trim(Aggregator& a, Batch* head, std::int64_t a_after) {
    if (head->seq - a.oldest_seq.load(std::memory_order_relaxed) <= opts_.trim_threshold) return;
    if (a.trimming.test_and_set(std::memory_order_acquire)) return;
    std::atomic_thread_fence(std::memory_order_seq_cst);

    std::int64_t floor = magnitude(a_after);
    for (std::size_t i = 0; i < a.announce_len; ++i) {
      const std::int64_t v = a.announce[i].value.load(std::memory_order_relaxed);
      if (v < floor) floor = v;
    }
    Batch* keep = head;
    for (Batch* b = keep->previous.load(std::memory_order_acquire);
         b != nullptr && magnitude(b->after) >= floor; b = b->previous.load(std::memory_order_acquire)) {
      keep = b;
    }
    Batch* cut = keep->previous.exchange(nullptr, std::memory_order_acq_rel);
    a.oldest_seq.store(keep->seq, std::memory_order_relaxed);
    a.trimming.clear(std::memory_order_release);
    if (cut != nullptr) epochs_.retire(cut, &BasicFunnel::reclaim_chain, this);
  }

  static void reclaim_chain(void* node, void* self_ptr) {
    auto* self = static_cast<BasicFunnel*>(self_ptr);
    std::uint64_t n = 0;
    for (auto* b = static_cast<Batch*>(node); b != nullptr; ++n) {
      Batch* older = b->previous.load(std::memory_order_relaxed);
      if (self->opts_.poison_reclaimed) {
        b->canary.store(Batch::kPoisoned, std::memory_order_relaxed);
        std::lock_guard lock(self->graveyard_mu_);
        self->graveyard_.emplace_back(b);
      } else {
        delete b;
      }
      b = older;
    }
    self->reclaimed_batches_.fetch_add(n, std::memory_order_relaxed);
  }

  static void destroy_chain(Batch* b) {
    while (b != nullptr) delete std::exchange(b, b->previous.load(std::memory_order_relaxed));
  }

  void touch(const Batch* b) noexcept {
    if (opts_.poison_reclaimed && b->canary.load(std::memory_order_relaxed) != Batch::kLive) {
      poisoned_reads_.fetch_add(1, std::memory_order_relaxed);
    }
  }

  std::size_t m_;
  std::size_t p_;
  std::unique_ptr<Main> main_;
  RoutingPolicy router_;
  FunnelOptions opts_;
  std::unique_ptr<Aggregator[]> aggs_;

  std::atomic<std::uint64_t> violations_{0};
  std::atomic<std::uint64_t> poisoned_reads_{0};
  std::atomic<std::uint64_t> reclaimed_batches_{0};

  // Declared before epochs_: its destructor runs reclaim_chain, which parks
  // batches here and bumps the counters above.
  std::mutex graveyard_mu_;
  std::vector<std::unique_ptr<Batch>> graveyard_;
  EpochDomain epochs_;

  std::vector<detail::Padded<ThreadSlot>> slots_;
};

/// Flat funnel over a hardware cell.
using Funnel = BasicFunnel<HardwareCell>;
/// Funnel over any fetch-and-add object, including another funnel.
using DynFunnel = BasicFunnel<FaaObject>;

inline std::unique_ptr<Funnel> make_funnel(std::size_t m, std::size_t p, RoutingPolicy router,
                                           FunnelOptions options = {}) {
  return std::make_unique<Funnel>(m, p, std::make_unique<HardwareCell>(), std::move(router), options);
}

inline std::unique_ptr<Funnel> make_funnel(std::size_t m, std::size_t p, FunnelOptions options = {}) {
  return make_funnel(m, p, RoutingPolicy::fixed_m(m), options);
}

/// Nested funnels, outermost first: levels = {m0, m1, ...} builds a funnel
/// with m0 aggregators whose main is a funnel with m1 aggregators, and so on
/// down to a hardware cell. Each inner level sees the 2 * m_outer aggregators
/// above it as its threads, spread evenly over its own aggregators.
inline std::unique_ptr<DynFunnel> make_recursive_funnel(std::span<const std::size_t> levels,
                                                        std::size_t p, RoutingPolicy outer_router,
                                                        FunnelOptions options = {}) {
  if (levels.empty()) throw InvalidConfig("recursive funnel: level list is empty");
  for (std::size_t m : levels) {
    if (m == 0) throw InvalidConfig("recursive funnel: every level needs m >= 1");
  }
  std::unique_ptr<FaaObject> inner = std::make_unique<HardwareCell>();
  for (std::size_t i = levels.size(); i-- > 1;) {
    const std::size_t m = levels[i];
    const std::size_t callers = 2 * levels[i - 1];
    inner = std::make_unique<DynFunnel>(m, callers, std::move(inner), RoutingPolicy::fixed_m(m), options);
  }
  return std::make_unique<DynFunnel>(levels[0], p, std::move(inner), std::move(outer_router), options);
}

inline std::unique_ptr<DynFunnel> make_recursive_funnel(std::span<const std::size_t> levels,
                                                        std::size_t p, FunnelOptions options = {}) {
  if (levels.empty()) throw InvalidConfig("recursive funnel: level list is empty");
  return make_recursive_funnel(levels, p, RoutingPolicy::fixed_m(levels[0]), options);
}

}  // namespace aggfunnel
