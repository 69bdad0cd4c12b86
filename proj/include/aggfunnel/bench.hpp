#pragma once

// Benchmark harness: timed fetch-and-add and queue workloads with geometric
// local work between operations, plus the concurrent history generator that
// feeds the linearizability checker.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <latch>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#if defined(__linux__)
#include <pthread.h>
#include <sched.h>
#endif

#if defined(__x86_64__) || defined(__i386__)
#include <x86intrin.h>
#endif

#include "aggfunnel/detail/platform.hpp"
#include "aggfunnel/errors.hpp"
#include "aggfunnel/faa.hpp"
#include "aggfunnel/funnel.hpp"
#include "aggfunnel/lincheck.hpp"
#include "aggfunnel/routing.hpp"
#include "aggfunnel/segqueue.hpp"

namespace aggfunnel::bench {

// ---------------------------------------------------------------------------
// Local work

/// Busy loop calibrated against the timestamp counter so that spin(n) takes
/// roughly n reference cycles.
class LocalWork {
 public:
  explicit LocalWork(double loops_per_cycle) noexcept : loops_per_cycle_(loops_per_cycle) {}

  /// Measured once per process.
  static const LocalWork& calibrated() {
    static const LocalWork work = calibrate();
    return work;
  }

  static LocalWork calibrate() {
    constexpr std::uint64_t kLoops = 2'000'000;
    double best = 0.0;
    for (int attempt = 0; attempt < 3; ++attempt) {
      const std::uint64_t t0 = cycles_now();
      run(kLoops);
      const std::uint64_t t1 = cycles_now();
      const double rate = static_cast<double>(kLoops) / static_cast<double>(std::max<std::uint64_t>(t1 - t0, 1));
      best = std::max(best, rate);
    }
    return LocalWork(best);
  }

  void spin(std::uint64_t cycles) const noexcept {
    if (cycles == 0) return;
    run(static_cast<std::uint64_t>(static_cast<double>(cycles) * loops_per_cycle_ + 0.5));
  }

  double loops_per_cycle() const noexcept { return loops_per_cycle_; }

  /// Reference cycles: the TSC where available, else nanoseconds scaled by a
  /// nominal 2.7 GHz.
  static std::uint64_t cycles_now() noexcept {
#if defined(__x86_64__) || defined(__i386__)
    return __rdtsc();
#else
    const auto ns = std::chrono::duration_cast<std::chrono::nanoseconds>(
                        std::chrono::steady_clock::now().time_since_epoch())
                        .count();
    return static_cast<std::uint64_t>(static_cast<double>(ns) * 2.7);
#endif
  }

 private:
  static void run(std::uint64_t loops) noexcept {
    std::uint64_t x = loops;
    for (std::uint64_t i = 0; i < loops; ++i) {
      x = x * 6364136223846793005ULL + 1442695040888963407ULL;
      asm volatile("" : "+r"(x));
    }
  }

  double loops_per_cycle_;
};

/// Geometric amounts of work with the given mean (in cycles).
class GeometricWork {
 public:
  explicit GeometricWork(double mean)
      : mean_(mean), dist_(mean > 0 ? 1.0 / (mean + 1.0) : 1.0) {}

  template <class Rng>
  std::uint64_t draw(Rng& rng) {
    if (mean_ <= 0) return 0;
    return static_cast<std::uint64_t>(dist_(rng));
  }

  double mean() const noexcept { return mean_; }

 private:
  double mean_;
  std::geometric_distribution<std::uint64_t> dist_;
};

// ---------------------------------------------------------------------------
// Thread placement

enum class PinPolicy { None, RoundRobin };

inline std::optional<PinPolicy> parse_pin_policy(std::string_view s) {
  if (s == "none") return PinPolicy::None;
  if (s == "round-robin" || s == "roundrobin") return PinPolicy::RoundRobin;
  return std::nullopt;
}

inline unsigned hardware_threads() noexcept {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : n;
}

inline void pin_current_thread(PinPolicy policy, std::size_t index) {
#if defined(__linux__)
  if (policy != PinPolicy::RoundRobin) return;
  cpu_set_t allowed;
  CPU_ZERO(&allowed);
  if (sched_getaffinity(0, sizeof(allowed), &allowed) != 0) return;
  std::vector<int> cpus;
  for (int c = 0; c < CPU_SETSIZE; ++c) {
    if (CPU_ISSET(c, &allowed)) cpus.push_back(c);
  }
  if (cpus.empty()) return;
  cpu_set_t one;
  CPU_ZERO(&one);
  CPU_SET(cpus[index % cpus.size()], &one);
  pthread_setaffinity_np(pthread_self(), sizeof(one), &one);
#else
  (void)policy;
  (void)index;
#endif
}

// ---------------------------------------------------------------------------
// Configuration and results

enum class Impl { Hardware, AggFunnel, AggFunnelRecursive };

inline std::string_view to_string(Impl i) {
  switch (i) {
    case Impl::Hardware: return "hardware";
    case Impl::AggFunnel: return "aggfunnel";
    case Impl::AggFunnelRecursive: return "aggfunnel-recursive";
  }
  return "?";
}

inline std::optional<Impl> parse_impl(std::string_view s) {
  for (auto i : {Impl::Hardware, Impl::AggFunnel, Impl::AggFunnelRecursive}) {
    if (to_string(i) == s) return i;
  }
  return std::nullopt;
}

struct BenchConfig {
  Impl impl = Impl::AggFunnel;
  std::size_t m = 6;        // aggregators per sign; inner level for the recursive variant
  std::size_t direct = 0;   // d: high-priority threads using the direct path
  std::size_t threads = 1;  // p
  unsigned ratio_pct = 100;  // share of fetch_add among operations; the rest are reads
  double work_cycles = 512;
  double duration_s = 2.0;
  std::uint64_t ops_per_thread = 0;  // nonzero: fixed operation count instead of a timed run
  std::size_t reps = 5;
  std::uint64_t seed = 1;
  std::int64_t df_min = 1;
  std::int64_t df_max = 100;
  bool trim = true;
  PinPolicy pin = PinPolicy::RoundRobin;
  bool oversubscribe = false;
  bool record_returns = false;  // keep every fetch_add response (fixed-count runs)
  double warmup_fraction = 0.1;
  std::vector<std::size_t> levels;  // recursive variant; empty = {ceil(p / m), m}

  void validate() const {
    if (threads == 0) throw InvalidConfig("threads must be >= 1");
    if (direct > threads) throw InvalidConfig("direct threads must not exceed threads");
    if (ratio_pct > 100) throw InvalidConfig("ratio must be within [0, 100]");
    if (reps == 0) throw InvalidConfig("reps must be >= 1");
    if (m == 0) throw InvalidConfig("m must be >= 1");
    if (df_min < 1 || df_max < df_min) throw InvalidConfig("need 1 <= df_min <= df_max");
    if (ops_per_thread == 0 && duration_s <= 0) throw InvalidConfig("duration must be positive");
    if (work_cycles < 0) throw InvalidConfig("work must be non-negative");
    if (!oversubscribe && threads > hardware_threads()) {
      throw InvalidConfig("threads (" + std::to_string(threads) + ") exceed hardware threads (" +
                          std::to_string(hardware_threads()) + "); pass --oversubscribe to allow");
    }
  }

  std::vector<std::size_t> recursive_levels() const {
    if (!levels.empty()) return levels;
    return {(threads + m - 1) / m, m};
  }
};

struct RunResult {
  std::string impl;
  std::size_t m = 0;
  std::size_t direct = 0;
  std::size_t threads = 0;
  unsigned ratio_pct = 0;
  double work_cycles = 0;
  std::size_t rep = 0;
  double duration_s = 0;  // measured window
  std::uint64_t total_ops = 0;
  double throughput = 0;  // ops per second
  double avg_batch = 1.0;
  double fairness = 1.0;  // min / max per-thread ops
  double hp_throughput = 0;  // per-thread average, high-priority threads
  double lp_throughput = 0;  // per-thread average, everyone else
  std::vector<std::uint64_t> per_thread_ops;
  FunnelStats stats;
  std::vector<std::vector<std::int64_t>> returns;  // record_returns only
};

struct Summary {
  double mean = 0;
  double stddev = 0;
};

inline Summary summarize(std::span<const double> xs) {
  Summary s;
  if (xs.empty()) return s;
  s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double acc = 0;
    for (double x : xs) acc += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(acc / static_cast<double>(xs.size() - 1));
  }
  return s;
}

inline Summary summarize_throughput(std::span<const RunResult> runs) {
  std::vector<double> xs;
  for (const auto& r : runs) xs.push_back(r.throughput);
  return summarize(xs);
}

inline const char* faa_csv_header() {
  return "impl,m,d,threads,ratio_pct,work_cycles,rep,duration_s,total_ops,throughput,avg_batch,fairness,"
         "hp_throughput,lp_throughput";
}

inline void write_faa_csv_row(std::ostream& out, const RunResult& r) {
  std::ostringstream row;
  row << std::setprecision(10) << r.impl << ',' << r.m << ',' << r.direct << ',' << r.threads << ','
      << r.ratio_pct << ',' << r.work_cycles << ',' << r.rep << ',' << r.duration_s << ',' << r.total_ops
      << ',' << r.throughput << ',' << r.avg_batch << ',' << r.fairness << ',' << r.hp_throughput << ','
      << r.lp_throughput;
  out << row.str() << '\n';
}

// ---------------------------------------------------------------------------
// Object construction

/// The object under test plus a way to read its batching statistics.
struct FaaUnderTest {
  std::unique_ptr<FaaObject> object;
  std::function<FunnelStats()> stats;
};

inline FunnelOptions bench_funnel_options(bool trim) {
  FunnelOptions o;
  o.trim = trim;
  o.check_invariants = false;
  return o;
}

/// Builds the object a configuration names. `p` threads use ids [0, p).
inline FaaUnderTest make_faa_object(Impl impl, std::size_t m, std::size_t direct, std::size_t p,
                                    bool trim = true, std::vector<std::size_t> levels = {}) {
  FaaUnderTest out;
  switch (impl) {
    case Impl::Hardware: {
      out.object = std::make_unique<HardwareCell>();
      out.stats = [] { return FunnelStats{}; };
      break;
    }
    case Impl::AggFunnel: {
      auto router = RoutingPolicy::priority(direct, p, RoutingPolicy::fixed_m(m));
      auto f = make_funnel(m, p, router, bench_funnel_options(trim));
      auto* raw = f.get();
      out.stats = [raw] { return raw->stats(); };
      out.object = std::move(f);
      break;
    }
    case Impl::AggFunnelRecursive: {
      if (levels.empty()) levels = {(p + m - 1) / m, m};
      auto router = RoutingPolicy::priority(direct, p, RoutingPolicy::fixed_m(levels[0]));
      auto f = make_recursive_funnel(levels, p, router, bench_funnel_options(trim));
      auto* raw = f.get();
      out.stats = [raw] { return raw->stats(); };
      out.object = std::move(f);
      break;
    }
  }
  return out;
}

namespace detail_bench {

struct alignas(aggfunnel::detail::kCacheLine) WorkerCounter {
  std::atomic<std::uint64_t> ops{0};
};

/// Runs `body(thread_index, stop_flag)` on `threads` threads and measures the
/// ops counters over the window after warm-up. Fixed-count runs (duration 0)
/// measure from release to the last join.
template <class Body>
std::pair<std::vector<std::uint64_t>, double> run_workers(
    std::size_t threads, PinPolicy pin, double duration_s, double warmup_fraction,
    std::vector<WorkerCounter>& counters, Body&& body, const std::function<void()>& on_window_open = {},
    const std::function<void()>& on_window_close = {}) {
  std::atomic<bool> stop{false};
  std::latch ready(static_cast<std::ptrdiff_t>(threads) + 1);
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      pin_current_thread(pin, t);
      ready.arrive_and_wait();
      body(t, stop);
    });
  }
  using clock = std::chrono::steady_clock;
  std::vector<std::uint64_t> begin(threads, 0), end(threads, 0);
  if (duration_s <= 0 && on_window_open) on_window_open();
  ready.arrive_and_wait();
  const auto t0 = clock::now();
  double window = 0;
  if (duration_s > 0) {
    const auto warm = std::chrono::duration<double>(duration_s * warmup_fraction);
    std::this_thread::sleep_for(warm);
    const auto w0 = clock::now();
    for (std::size_t t = 0; t < threads; ++t) begin[t] = counters[t].ops.load(std::memory_order_relaxed);
    if (on_window_open) on_window_open();
    std::this_thread::sleep_until(t0 + std::chrono::duration_cast<clock::duration>(
                                           std::chrono::duration<double>(duration_s)));
    for (std::size_t t = 0; t < threads; ++t) end[t] = counters[t].ops.load(std::memory_order_relaxed);
    if (on_window_close) on_window_close();
    window = std::chrono::duration<double>(clock::now() - w0).count();
    stop.store(true, std::memory_order_relaxed);
    for (auto& th : pool) th.join();
  } else {
    for (auto& th : pool) th.join();
    window = std::chrono::duration<double>(clock::now() - t0).count();
    for (std::size_t t = 0; t < threads; ++t) end[t] = counters[t].ops.load(std::memory_order_relaxed);
    if (on_window_close) on_window_close();
  }
  std::vector<std::uint64_t> ops(threads);
  for (std::size_t t = 0; t < threads; ++t) ops[t] = end[t] - begin[t];
  return {ops, window};
}

inline FunnelStats stats_delta(const FunnelStats& a, const FunnelStats& b) {
  FunnelStats d;
  d.funneled_ops = b.funneled_ops - a.funneled_ops;
  d.delegate_applications = b.delegate_applications - a.delegate_applications;
  d.direct_ops = b.direct_ops - a.direct_ops;
  d.head_hits = b.head_hits - a.head_hits;
  d.search_steps = b.search_steps - a.search_steps;
  return d;
}

inline void fill_throughput(RunResult& r, const std::vector<std::uint64_t>& ops, double window,
                            std::size_t direct) {
  r.per_thread_ops = ops;
  r.duration_s = window;
  r.total_ops = std::accumulate(ops.begin(), ops.end(), std::uint64_t{0});
  r.throughput = window > 0 ? static_cast<double>(r.total_ops) / window : 0.0;
  const auto [lo, hi] = std::minmax_element(ops.begin(), ops.end());
  r.fairness = (ops.empty() || *hi == 0) ? 0.0 : static_cast<double>(*lo) / static_cast<double>(*hi);
  double hp = 0, lp = 0;
  for (std::size_t t = 0; t < ops.size(); ++t) (t < direct ? hp : lp) += static_cast<double>(ops[t]);
  const std::size_t lp_n = ops.size() - std::min(direct, ops.size());
  r.hp_throughput = (direct > 0 && window > 0) ? hp / static_cast<double>(direct) / window : 0.0;
  r.lp_throughput = (lp_n > 0 && window > 0) ? lp / static_cast<double>(lp_n) / window : 0.0;
}

}  // namespace detail_bench

/// One RunResult per repetition.
inline std::vector<RunResult> run_faa_bench(const BenchConfig& cfg) {
  cfg.validate();
  const LocalWork& work = LocalWork::calibrated();
  std::vector<RunResult> results;
  for (std::size_t rep = 0; rep < cfg.reps; ++rep) {
    FaaUnderTest target = make_faa_object(cfg.impl, cfg.m, cfg.direct, cfg.threads, cfg.trim,
                                          cfg.impl == Impl::AggFunnelRecursive ? cfg.recursive_levels()
                                                                               : std::vector<std::size_t>{});
    FaaObject& obj = *target.object;
    std::vector<detail_bench::WorkerCounter> counters(cfg.threads);
    std::vector<std::vector<std::int64_t>> returns(cfg.record_returns ? cfg.threads : 0);

    auto body = [&](std::size_t t, const std::atomic<bool>& stop) {
      std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + rep * 7919 + t);
      std::uniform_int_distribution<std::int64_t> df_dist(cfg.df_min, cfg.df_max);
      std::uniform_int_distribution<unsigned> pct(0, 99);
      GeometricWork gap(cfg.work_cycles);
      const ThreadId ctx{static_cast<std::uint32_t>(t)};
      auto& count = counters[t].ops;
      std::vector<std::int64_t>* out = cfg.record_returns ? &returns[t] : nullptr;
      if (out != nullptr && cfg.ops_per_thread > 0) out->reserve(cfg.ops_per_thread);
      std::uint64_t done = 0;
      while (cfg.ops_per_thread > 0 ? done < cfg.ops_per_thread : !stop.load(std::memory_order_relaxed)) {
        std::int64_t r;
        if (pct(rng) < cfg.ratio_pct) {
          r = obj.fetch_add(ctx, df_dist(rng));
        } else {
          r = obj.read();
        }
        if (out != nullptr) out->push_back(r);
        ++done;
        aggfunnel::detail::bump(count);
        work.spin(gap.draw(rng));
      }
    };

    FunnelStats s0, s1;
    auto [ops, window] = detail_bench::run_workers(
        cfg.threads, cfg.pin, cfg.ops_per_thread > 0 ? 0.0 : cfg.duration_s, cfg.warmup_fraction, counters,
        body, [&] { s0 = target.stats(); }, [&] { s1 = target.stats(); });

    RunResult r;
    r.impl = std::string(to_string(cfg.impl));
    r.m = cfg.impl == Impl::Hardware ? 0 : cfg.m;
    r.direct = cfg.direct;
    r.threads = cfg.threads;
    r.ratio_pct = cfg.ratio_pct;
    r.work_cycles = cfg.work_cycles;
    r.rep = rep;
    detail_bench::fill_throughput(r, ops, window, cfg.direct);
    if (cfg.impl == Impl::Hardware) {
      r.avg_batch = 1.0;
    } else {
      r.stats = detail_bench::stats_delta(s0, s1);
      r.avg_batch = r.stats.main_applications() == 0 ? 1.0 : r.stats.avg_batch_size();
    }
    r.returns = std::move(returns);
    results.push_back(std::move(r));
  }
  return results;
}

// ---------------------------------------------------------------------------
// Queue benchmark

enum class QueuePattern { Pairs, Enq4Deq4 };

inline std::string_view to_string(QueuePattern p) {
  return p == QueuePattern::Pairs ? "pairs" : "enq4deq4";
}

inline std::optional<QueuePattern> parse_queue_pattern(std::string_view s) {
  if (s == "pairs") return QueuePattern::Pairs;
  if (s == "enq4deq4") return QueuePattern::Enq4Deq4;
  return std::nullopt;
}

struct QueueBenchConfig {
  BenchConfig base;  // impl names the index implementation
  QueuePattern pattern = QueuePattern::Pairs;
  std::size_t initial_size = 0;
  std::size_t segment_size = 1024;
  bool verify = true;  // record dequeued items and check conservation and FIFO afterwards
};

struct QueueCheck {
  bool conserved = true;
  bool per_producer_fifo = true;
  std::uint64_t handoff_violations = 0;
  std::uint64_t enqueued = 0;
  std::uint64_t dequeued = 0;  // including the post-run drain
  std::string detail;

  bool ok() const noexcept { return conserved && per_producer_fifo && handoff_violations == 0; }
};

struct QueueRunResult {
  RunResult run;
  std::string pattern;
  std::size_t initial_size = 0;
  QueueCheck check;
};

inline const char* queue_csv_header() {
  return "queue_impl,idx_impl,m,threads,pattern,initial_size,work_cycles,rep,duration_s,total_ops,throughput";
}

inline void write_queue_csv_row(std::ostream& out, const QueueRunResult& q) {
  std::ostringstream row;
  row << std::setprecision(10) << "segqueue," << q.run.impl << ',' << q.run.m << ',' << q.run.threads << ','
      << q.pattern << ',' << q.initial_size << ',' << q.run.work_cycles << ',' << q.run.rep << ','
      << q.run.duration_s << ',' << q.run.total_ops << ',' << q.run.throughput;
  out << row.str() << '\n';
}

/// Items carry their producer and a per-producer sequence number.
inline constexpr unsigned kSeqBits = 40;
inline std::uint64_t encode_item(std::size_t producer, std::uint64_t seq) {
  return (static_cast<std::uint64_t>(producer) << kSeqBits) | (seq + 1);
}
inline std::size_t item_producer(std::uint64_t item) { return static_cast<std::size_t>(item >> kSeqBits); }
inline std::uint64_t item_seq(std::uint64_t item) { return (item & ((1ULL << kSeqBits) - 1)) - 1; }

/// Conservation and per-producer FIFO over what each consumer dequeued, in
/// its own dequeue order. `enqueued[p]` is how many items producer p added.
inline QueueCheck verify_queue_run(const std::vector<std::vector<std::uint64_t>>& dequeued_by_consumer,
                                   const std::vector<std::uint64_t>& enqueued) {
  QueueCheck c;
  c.enqueued = std::accumulate(enqueued.begin(), enqueued.end(), std::uint64_t{0});
  std::vector<std::vector<bool>> seen(enqueued.size());
  for (std::size_t p = 0; p < enqueued.size(); ++p) seen[p].assign(enqueued[p], false);
  for (std::size_t consumer = 0; consumer < dequeued_by_consumer.size(); ++consumer) {
    std::vector<std::int64_t> last(enqueued.size(), -1);
    for (std::uint64_t item : dequeued_by_consumer[consumer]) {
      ++c.dequeued;
      const std::size_t p = item_producer(item);
      const std::uint64_t s = item_seq(item);
      if (p >= enqueued.size() || s >= enqueued[p]) {
        c.conserved = false;
        c.detail = "dequeued an item that was never enqueued";
        continue;
      }
      if (seen[p][s]) {
        c.conserved = false;
        c.detail = "item dequeued twice";
      }
      seen[p][s] = true;
      if (static_cast<std::int64_t>(s) <= last[p]) {
        c.per_producer_fifo = false;
        c.detail = "consumer " + std::to_string(consumer) + " saw producer " + std::to_string(p) +
                   " items out of order";
      }
      last[p] = static_cast<std::int64_t>(s);
    }
  }
  if (c.dequeued != c.enqueued) {
    c.conserved = false;
    if (c.detail.empty()) c.detail = "dequeued " + std::to_string(c.dequeued) + " of " + std::to_string(c.enqueued);
  }
  return c;
}

namespace detail_bench {

template <class Index>
QueueRunResult run_queue_rep(const QueueBenchConfig& cfg, std::size_t rep, std::unique_ptr<Index> head,
                             std::unique_ptr<Index> tail) {
  const BenchConfig& b = cfg.base;
  const std::size_t p = b.threads;
  SegQueue<Index> queue(p + 1, std::move(head), std::move(tail), QueueOptions{cfg.segment_size});
  const LocalWork& work = LocalWork::calibrated();
  const ThreadId drain_ctx{static_cast<std::uint32_t>(p)};

  // Producer index p stands for the preloaded items.
  std::vector<std::uint64_t> enqueued(p + 1, 0);
  for (std::size_t i = 0; i < cfg.initial_size; ++i) queue.enqueue(ThreadId{0}, encode_item(p, enqueued[p]++));

  std::vector<WorkerCounter> counters(p);
  std::vector<std::vector<std::uint64_t>> taken(p + 1);
  const std::size_t burst = cfg.pattern == QueuePattern::Pairs ? 1 : 4;

  auto body = [&](std::size_t t, const std::atomic<bool>& stop) {
    std::mt19937_64 rng(b.seed * 0x9E3779B97F4A7C15ULL + rep * 7919 + t);
    GeometricWork gap(b.work_cycles);
    const ThreadId ctx{static_cast<std::uint32_t>(t)};
    auto& count = counters[t].ops;
    auto& mine = taken[t];
    if (cfg.verify && b.ops_per_thread > 0) mine.reserve(b.ops_per_thread / 2 + 8);
    std::uint64_t seq = 0;
    std::uint64_t done = 0;
    auto more = [&] {
      return b.ops_per_thread > 0 ? done < b.ops_per_thread : !stop.load(std::memory_order_relaxed);
    };
    while (more()) {
      for (std::size_t i = 0; i < burst && more(); ++i) {
        queue.enqueue(ctx, encode_item(t, seq++));
        ++done;
        aggfunnel::detail::bump(count);
        work.spin(gap.draw(rng));
      }
      for (std::size_t i = 0; i < burst && more(); ++i) {
        if (auto item = queue.dequeue(ctx); item && cfg.verify) mine.push_back(*item);
        ++done;
        aggfunnel::detail::bump(count);
        work.spin(gap.draw(rng));
      }
    }
    enqueued[t] = seq;
  };

  auto [ops, window] =
      run_workers(p, b.pin, b.ops_per_thread > 0 ? 0.0 : b.duration_s, b.warmup_fraction, counters, body);

  QueueRunResult q;
  q.run.impl = std::string(to_string(b.impl));
  q.run.m = b.impl == Impl::Hardware ? 0 : b.m;
  q.run.threads = p;
  q.run.work_cycles = b.work_cycles;
  q.run.rep = rep;
  fill_throughput(q.run, ops, window, 0);
  q.pattern = std::string(to_string(cfg.pattern));
  q.initial_size = cfg.initial_size;
  if (cfg.verify) {
    while (auto item = queue.dequeue(drain_ctx)) taken[p].push_back(*item);
    q.check = verify_queue_run(taken, enqueued);
  }
  q.check.handoff_violations = queue.handoff_violations();
  return q;
}

}  // namespace detail_bench

inline std::vector<QueueRunResult> run_queue_bench(const QueueBenchConfig& cfg) {
  cfg.base.validate();
  if (cfg.segment_size == 0) throw InvalidConfig("segment size must be >= 1");
  const BenchConfig& b = cfg.base;
  // Queue threads use ids [0, p); id p drains after the run.
  const std::size_t ids = b.threads + 1;
  std::vector<QueueRunResult> out;
  for (std::size_t rep = 0; rep < b.reps; ++rep) {
    if (b.impl == Impl::Hardware) {
      out.push_back(detail_bench::run_queue_rep<HardwareCell>(cfg, rep, std::make_unique<HardwareCell>(),
                                                              std::make_unique<HardwareCell>()));
    } else {
      auto levels = b.impl == Impl::AggFunnelRecursive ? b.recursive_levels() : std::vector<std::size_t>{};
      auto make = [&] { return make_faa_object(b.impl, b.m, 0, ids, b.trim, levels).object; };
      out.push_back(detail_bench::run_queue_rep<FaaObject>(cfg, rep, make(), make()));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linearizability stress

struct LincheckStressConfig {
  Impl impl = Impl::AggFunnel;
  std::size_t m = 2;
  std::vector<std::size_t> levels;  // recursive variant; empty = {4, 2}
  std::size_t threads = 3;
  std::size_t ops_per_history = 8;
  std::size_t histories = 1000;
  std::uint64_t seed = 1;
  bool trim = true;
  Fault fault = Fault::None;
  bool fetch_inc_only = false;  // every op is fetch_add(1)
  unsigned yield_pct = 30;      // chance of yielding before an op, to shake up interleavings
};

struct LincheckReport {
  std::size_t histories = 0;
  std::size_t rejections = 0;
  std::vector<std::string> rejected_dumps;  // first few rejected histories, dump format
  std::vector<std::string> witnesses;

  bool ok() const noexcept { return rejections == 0; }
};

namespace detail_bench {

inline std::unique_ptr<FaaObject> make_lincheck_object(const LincheckStressConfig& cfg) {
  FunnelOptions o;
  o.trim = cfg.trim;
  o.trim_threshold = 1;  // trim eagerly so tiny histories exercise reclamation
  o.fault = cfg.fault;
  switch (cfg.impl) {
    case Impl::Hardware: return std::make_unique<HardwareCell>();
    case Impl::AggFunnel: return make_funnel(cfg.m, cfg.threads, RoutingPolicy::fixed_m(cfg.m), o);
    case Impl::AggFunnelRecursive: {
      std::vector<std::size_t> levels = cfg.levels.empty() ? std::vector<std::size_t>{4, 2} : cfg.levels;
      return make_recursive_funnel(levels, cfg.threads, RoutingPolicy::fixed_m(levels[0]), o);
    }
  }
  return nullptr;
}

/// Random op mix over a fetch-and-add object: fetch_add with either sign,
/// direct adds, reads and compare-and-swaps that sometimes succeed.
inline Op random_faa_op(std::mt19937_64& rng, std::int64_t last_seen, bool fetch_inc_only) {
  if (fetch_inc_only) return Op::fetch_add(1);
  std::uniform_int_distribution<int> pick(0, 99);
  std::uniform_int_distribution<std::int64_t> mag(1, 100);
  const int k = pick(rng);
  const std::int64_t df = (pick(rng) < 70 ? 1 : -1) * mag(rng);
  if (k < 50) return Op::fetch_add(df);
  if (k < 62) return Op::fetch_add_direct(df);
  if (k < 82) return Op::read();
  const std::int64_t expected = pick(rng) < 60 ? last_seen : mag(rng);
  return Op::compare_swap(expected, mag(rng));
}

inline std::int64_t apply_op(FaaObject& obj, ThreadId ctx, const Op& op) {
  switch (op.kind) {
    case OpKind::FetchAdd: return obj.fetch_add(ctx, op.arg1);
    case OpKind::FetchAddDirect: return obj.fetch_add_direct(op.arg1);
    case OpKind::Read: return obj.read();
    case OpKind::CompareSwap: return obj.compare_swap(op.arg1, op.arg2) ? 1 : 0;
    default: break;
  }
  throw std::logic_error("apply_op: not a fetch-and-add operation");
}

/// Runs `per_thread[t]` operations on thread t against a shared target,
/// all threads released together, and returns the merged history.
template <class Exec>
History record_burst(std::size_t threads, const std::vector<std::size_t>& per_thread, std::uint64_t seed,
                     unsigned yield_pct, Exec&& exec) {
  std::vector<ThreadLog> logs;
  for (std::size_t t = 0; t < threads; ++t) logs.emplace_back(static_cast<std::uint32_t>(t));
  std::latch start(static_cast<std::ptrdiff_t>(threads));
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      std::mt19937_64 rng(seed + 1000003ULL * t);
      std::uniform_int_distribution<unsigned> pct(0, 99);
      start.arrive_and_wait();
      for (std::size_t i = 0; i < per_thread[t]; ++i) {
        if (pct(rng) < yield_pct) std::this_thread::yield();
        exec(t, rng, logs[t]);
      }
    });
  }
  for (auto& th : pool) th.join();
  std::vector<std::vector<Event>> all;
  for (auto& l : logs) all.push_back(l.events());
  return History::merge(all);
}

inline std::vector<std::size_t> split_ops(std::size_t ops, std::size_t threads) {
  std::vector<std::size_t> per(threads, ops / threads);
  for (std::size_t t = 0; t < ops % threads; ++t) ++per[t];
  return per;
}

}  // namespace detail_bench

/// Records many small concurrent histories on fresh objects and checks each
/// one for linearizability.
inline LincheckReport run_lincheck_stress(const LincheckStressConfig& cfg) {
  if (cfg.threads == 0) throw InvalidConfig("lincheck: threads must be >= 1");
  if (cfg.ops_per_history > kMaxCheckedOperations) {
    throw InvalidConfig("lincheck: ops_per_history exceeds the checker bound of " +
                        std::to_string(kMaxCheckedOperations));
  }
  LincheckReport report;
  const auto per_thread = detail_bench::split_ops(cfg.ops_per_history, cfg.threads);
  for (std::size_t h = 0; h < cfg.histories; ++h) {
    auto obj = detail_bench::make_lincheck_object(cfg);
    std::vector<std::int64_t> last_seen(cfg.threads, 0);
    History hist = detail_bench::record_burst(
        cfg.threads, per_thread, cfg.seed * 0x9E3779B97F4A7C15ULL + h, cfg.yield_pct,
        [&](std::size_t t, std::mt19937_64& rng, ThreadLog& log) {
          const Op op = detail_bench::random_faa_op(rng, last_seen[t], cfg.fetch_inc_only);
          const ThreadId ctx{static_cast<std::uint32_t>(t)};
          const std::int64_t r = record(log, op, [&] { return detail_bench::apply_op(*obj, ctx, op); });
          if (op.kind != OpKind::CompareSwap) last_seen[t] = op.kind == OpKind::Read ? r : r + op.arg1;
        });
    ++report.histories;
    CheckResult res = check_linearizable(hist);
    if (!res) {
      ++report.rejections;
      if (report.rejected_dumps.size() < 5) {
        report.rejected_dumps.push_back(hist.dump());
        report.witnesses.push_back(res.witness());
      }
    }
  }
  return report;
}

struct QueueLincheckConfig {
  Impl index_impl = Impl::AggFunnel;
  std::size_t m = 2;
  std::size_t threads = 3;
  std::size_t ops_per_history = 10;
  std::size_t histories = 500;
  std::size_t segment_size = 2;  // tiny segments so histories cross segment boundaries
  std::uint64_t seed = 1;
  unsigned yield_pct = 30;
};

/// Same as run_lincheck_stress, for enqueue/dequeue histories against a FIFO.
inline LincheckReport run_queue_lincheck_stress(const QueueLincheckConfig& cfg) {
  if (cfg.threads == 0) throw InvalidConfig("lincheck: threads must be >= 1");
  if (cfg.ops_per_history > kMaxCheckedOperations) {
    throw InvalidConfig("lincheck: ops_per_history exceeds the checker bound");
  }
  LincheckReport report;
  const auto per_thread = detail_bench::split_ops(cfg.ops_per_history, cfg.threads);
  auto make_index = [&]() -> std::unique_ptr<FaaObject> {
    if (cfg.index_impl == Impl::Hardware) return std::make_unique<HardwareCell>();
    FunnelOptions o;
    o.trim_threshold = 1;
    if (cfg.index_impl == Impl::AggFunnelRecursive) {
      const std::size_t levels[] = {cfg.m, 2};
      return make_recursive_funnel(levels, cfg.threads, o);
    }
    return make_funnel(cfg.m, cfg.threads, o);
  };
  for (std::size_t h = 0; h < cfg.histories; ++h) {
    SegQueue<FaaObject> queue(cfg.threads, make_index(), make_index(), QueueOptions{cfg.segment_size});
    std::vector<std::uint64_t> seq(cfg.threads, 0);
    History hist = detail_bench::record_burst(
        cfg.threads, per_thread, cfg.seed * 0x9E3779B97F4A7C15ULL + h, cfg.yield_pct,
        [&](std::size_t t, std::mt19937_64& rng, ThreadLog& log) {
          const ThreadId ctx{static_cast<std::uint32_t>(t)};
          if (std::uniform_int_distribution<int>(0, 1)(rng) == 0) {
            const auto item = encode_item(t, seq[t]++);
            record(log, Op::enqueue(static_cast<std::int64_t>(item)), [&] {
              queue.enqueue(ctx, item);
              return 0;
            });
          } else {
            record(log, Op::dequeue(), [&] {
              auto v = queue.dequeue(ctx);
              return v ? static_cast<std::int64_t>(*v) : kEmptyResponse;
            });
          }
        });
    ++report.histories;
    CheckResult res = check_linearizable(hist, FifoSpec{});
    if (!res) {
      ++report.rejections;
      if (report.rejected_dumps.size() < 5) {
        report.rejected_dumps.push_back(hist.dump());
        report.witnesses.push_back(res.witness());
      }
    }
  }
  return report;
}

}  // namespace aggfunnel::bench
