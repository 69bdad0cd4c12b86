// Acceptance run: one PASS / FAIL / SKIP line per criterion, exit status 1 if
// anything failed. Thresholds and sizes are fixed below.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "aggfunnel/aggfunnel.hpp"
#include "aggfunnel/bench.hpp"

using namespace aggfunnel;
using namespace aggfunnel::bench;

namespace {

// Linearizability
constexpr std::size_t kLinHistories = 1000;
constexpr std::size_t kLinOps = 10;
constexpr double kLinBudgetS = 120.0;
// Fetch&Inc
constexpr std::size_t kIncThreads = 8;
constexpr std::size_t kIncEach = 100000;
constexpr double kIncBudgetS = 30.0;
// Sum invariant
constexpr std::size_t kSumThreads = 8;
constexpr std::size_t kSumOps = 1000000;
// Combining evidence
constexpr unsigned kCombineMinHw = 8;
constexpr double kCombineMinBatch = 1.5;
constexpr double kCombineDurationS = 1.0;
// Priority
constexpr std::size_t kPrioThreads = 8;
constexpr double kPrioRatio = 2.0;
constexpr double kPrioTotalTolerance = 0.15;
constexpr double kPrioDurationS = 2.0;
constexpr std::size_t kPrioReps = 3;
// Queue
constexpr std::size_t kQueueThreads = 8;
constexpr std::uint64_t kQueueOpsPerThread = 1000000;
constexpr std::size_t kQueueHistories = 500;
constexpr unsigned kQueueDirectionMinHw = 32;
constexpr double kQueueDirectionFloor = 0.8;
constexpr double kQueueDurationS = 2.0;
// Reclamation
constexpr std::size_t kCanaryThreads = 8;
constexpr std::uint64_t kCanaryTurnovers = 100000;
constexpr std::uint64_t kReplayOps = 200000;

int failures = 0;

void report(const char* status, const std::string& name, const std::string& detail) {
  std::printf("%-4s %-28s %s\n", status, name.c_str(), detail.c_str());
  std::fflush(stdout);
}

void verdict(bool ok, const std::string& name, const std::string& detail) {
  if (!ok) ++failures;
  report(ok ? "PASS" : "FAIL", name, detail);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ThreadId tid(std::size_t t) { return ThreadId{static_cast<std::uint32_t>(t)}; }

template <class Body>
void run_threads(std::size_t n, Body body) {
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < n; ++t) pool.emplace_back(body, t);
  for (auto& th : pool) th.join();
}

void linearizability() {
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t total = 0, rejected = 0;
  std::string detail;
  struct Variant {
    Impl impl;
    std::size_t m;
    std::vector<std::size_t> levels;
    const char* name;
  };
  const Variant variants[] = {{Impl::AggFunnel, 1, {}, "m=1"},
                              {Impl::AggFunnel, 2, {}, "m=2"},
                              {Impl::AggFunnel, 6, {}, "m=6"},
                              {Impl::AggFunnelRecursive, 4, {4, 2}, "[4,2]"}};
  for (const auto& v : variants) {
    std::size_t rej = 0;
    // Thread counts 2, 3 and 4 in turn.
    for (std::size_t threads = 2; threads <= 4; ++threads) {
      LincheckStressConfig c;
      c.impl = v.impl;
      c.m = v.m;
      c.levels = v.levels;
      c.threads = threads;
      c.ops_per_history = kLinOps;
      c.histories = kLinHistories / 3 + (threads == 2 ? kLinHistories % 3 : 0);
      c.seed = 1000 * threads + v.m;
      const auto r = run_lincheck_stress(c);
      total += r.histories;
      rej += r.rejections;
      if (r.rejections > 0 && detail.empty()) detail = "\n" + r.rejected_dumps[0];
    }
    rejected += rej;
  }
  const double secs = seconds_since(t0);
  verdict(rejected == 0 && secs < kLinBudgetS, "linearizability",
          fmt("%zu histories over m=1,2,6 and [4,2], %zu rejected, %.1f s (budget %.0f s)", total, rejected,
              secs, kLinBudgetS) +
              detail);
}

void fetch_increment() {
  const auto t0 = std::chrono::steady_clock::now();
  auto f = make_funnel(6, kIncThreads, bench_funnel_options(true));
  std::vector<ThreadLog> logs;
  for (std::size_t t = 0; t < kIncThreads; ++t) logs.emplace_back(static_cast<std::uint32_t>(t));
  run_threads(kIncThreads, [&](std::size_t t) {
    logs[t].reserve(2 * kIncEach);
    for (std::size_t i = 0; i < kIncEach; ++i) {
      record(logs[t], Op::fetch_add(1), [&] { return f->fetch_add(tid(t), 1); });
    }
  });
  std::vector<std::vector<Event>> all;
  for (auto& l : logs) all.push_back(l.events());
  const auto res = check_fetch_inc(History::merge(all));
  const std::int64_t final_value = f->read();
  const double secs = seconds_since(t0);
  const bool ok = res.accepted && final_value == static_cast<std::int64_t>(kIncThreads * kIncEach) &&
                  secs < kIncBudgetS;
  verdict(ok, "fetch-inc",
          fmt("%zu x %zu on m=6: %s, final read %lld, %.1f s (budget %.0f s)", kIncThreads, kIncEach,
              res.accepted ? "returns exactly 0..n-1 in real-time order" : res.reason.c_str(),
              static_cast<long long>(final_value), secs, kIncBudgetS));
}

void sum_invariant() {
  FunnelOptions o;
  o.check_invariants = true;
  auto f = make_funnel(6, kSumThreads, o);
  std::vector<std::int64_t> sums(kSumThreads, 0);
  run_threads(kSumThreads, [&](std::size_t t) {
    std::mt19937_64 rng(77 + t);
    std::uniform_int_distribution<std::int64_t> mag(1, 100);
    for (std::size_t i = 0; i < kSumOps / kSumThreads; ++i) {
      const std::int64_t df = (rng() & 1 ? 1 : -1) * mag(rng);
      f->fetch_add(tid(t), df);
      sums[t] += df;
    }
  });
  const std::int64_t expect = std::accumulate(sums.begin(), sums.end(), std::int64_t{0});
  std::size_t bad_chains = 0;
  for (auto bank : {Bank::Positive, Bank::Negative}) {
    for (std::size_t i = 0; i < 6; ++i) bad_chains += validate_batch_chain(f->snapshot(bank, i)).ok() ? 0 : 1;
  }
  const bool ok = f->read() == expect && f->invariant_violations() == 0 && bad_chains == 0;
  verdict(ok, "sum-invariant",
          fmt("%zu ops df in +-[1,100]: read %lld, expected %lld, publication violations %llu, bad chains %zu",
              kSumOps, static_cast<long long>(f->read()), static_cast<long long>(expect),
              static_cast<unsigned long long>(f->invariant_violations()), bad_chains));
}

void golden() {
  auto* sentinel = Batch::sentinel();
  auto* b1 = new Batch(0, 11, 5, sentinel, 1);
  auto* b2 = new Batch(11, 26, 16, b1, 2);
  const std::int64_t p3 = batch_result(*find_batch(b2, 9), 9);
  const std::int64_t p5 = batch_result(*find_batch(b2, 24), 24);
  HardwareCell main(5);
  const std::int64_t applied = main.fetch_add(tid(0), 11);
  delete b2;
  delete b1;
  delete sentinel;
  verdict(p3 == 14 && p5 == 29 && applied == 5 && main.read() == 16, "golden-example",
          fmt("a_before 9 -> %lld (want 14), a_before 24 -> %lld (want 29), main apply -> %lld (want 5)",
              static_cast<long long>(p3), static_cast<long long>(p5), static_cast<long long>(applied)));
}

void combining_evidence() {
  const unsigned hw = hardware_threads();
  if (hw < kCombineMinHw) {
    report("SKIP", "combining-evidence", fmt("%u hardware threads < %u", hw, kCombineMinHw));
    return;
  }
  auto batch_for = [&](std::size_t m) {
    BenchConfig c;
    c.impl = Impl::AggFunnel;
    c.m = m;
    c.threads = hw;
    c.ratio_pct = 100;
    c.work_cycles = 0;
    c.duration_s = kCombineDurationS;
    c.reps = 1;
    return run_faa_bench(c)[0].avg_batch;
  };
  const double b1 = batch_for(1), b6 = batch_for(6);
  verdict(b1 > b6 && b6 > kCombineMinBatch, "combining-evidence",
          fmt("p=%u: avg batch m=1 %.2f, m=6 %.2f (need m=1 > m=6 > %.1f)", hw, b1, b6, kCombineMinBatch));
}

void priority() {
  const unsigned hw = hardware_threads();
  const std::size_t p = std::max<std::size_t>(kPrioThreads, hw);
  auto run = [&](std::size_t d) {
    BenchConfig c;
    c.impl = Impl::AggFunnel;
    c.m = 6;
    c.direct = d;
    c.threads = p;
    c.ratio_pct = 100;
    c.work_cycles = 0;
    c.duration_s = kPrioDurationS;
    c.reps = kPrioReps;
    c.oversubscribe = true;
    const auto runs = run_faa_bench(c);
    double hp = 0, lp = 0, total = 0;
    for (const auto& r : runs) {
      hp += r.hp_throughput;
      lp += r.lp_throughput;
      total += r.throughput;
    }
    const double n = static_cast<double>(runs.size());
    return std::array<double, 3>{hp / n, lp / n, total / n};
  };
  const auto base = run(0);
  const auto prio = run(1);
  const double ratio = prio[1] > 0 ? prio[0] / prio[1] : 0;
  const double change = base[2] > 0 ? prio[2] / base[2] - 1.0 : 0;
  const bool ok = ratio >= kPrioRatio && std::abs(change) <= kPrioTotalTolerance;
  verdict(ok, "priority",
          fmt("p=%zu%s m=6 d=1: hp/lp per-thread %.2fx (need >= %.1f), total %.3g vs d=0 %.3g ops/s (%+.1f%%, "
              "limit +-%.0f%%)",
              p, p > hw ? " (oversubscribed)" : "", ratio, kPrioRatio, prio[2], base[2], 100 * change,
              100 * kPrioTotalTolerance));
}

void queue_correctness() {
  std::string detail;
  bool ok = true;
  for (auto impl : {Impl::Hardware, Impl::AggFunnel}) {
    QueueBenchConfig q;
    q.base.impl = impl;
    q.base.m = 6;
    q.base.threads = kQueueThreads;
    q.base.ops_per_thread = kQueueOpsPerThread;
    q.base.work_cycles = 0;
    q.base.reps = 1;
    q.base.oversubscribe = true;
    q.pattern = QueuePattern::Pairs;
    const auto r = run_queue_bench(q)[0];
    ok = ok && r.check.ok();
    detail += fmt("%s index: %llu enq / %llu deq, %s; ", std::string(to_string(impl)).c_str(),
                  static_cast<unsigned long long>(r.check.enqueued),
                  static_cast<unsigned long long>(r.check.dequeued),
                  r.check.ok() ? "conserved, per-producer FIFO" : r.check.detail.c_str());
  }
  QueueLincheckConfig lc;
  lc.index_impl = Impl::AggFunnel;
  lc.histories = kQueueHistories;
  const auto lr = run_queue_lincheck_stress(lc);
  ok = ok && lr.rejections == 0;
  detail += fmt("%zu small histories, %zu rejected", lr.histories, lr.rejections);
  verdict(ok, "queue-correctness", detail);
}

void queue_direction() {
  const unsigned hw = hardware_threads();
  if (hw < kQueueDirectionMinHw) {
    report("SKIP", "queue-direction", fmt("%u hardware threads < %u", hw, kQueueDirectionMinHw));
    return;
  }
  auto tput = [&](Impl impl) {
    QueueBenchConfig q;
    q.base.impl = impl;
    q.base.m = 6;
    q.base.threads = hw;
    q.base.duration_s = kQueueDurationS;
    q.base.reps = 1;
    q.verify = false;
    return run_queue_bench(q)[0].run.throughput;
  };
  const double hw_t = tput(Impl::Hardware), fun_t = tput(Impl::AggFunnel);
  const double ratio = hw_t > 0 ? fun_t / hw_t : 0;
  verdict(ratio >= kQueueDirectionFloor, "queue-direction",
          fmt("p=%u: funnel-indexed %.3g ops/s vs hardware-indexed %.3g ops/s, ratio %.2f (need >= %.1f)", hw,
              fun_t, hw_t, ratio, kQueueDirectionFloor));
}

void reclamation() {
  FunnelOptions o;
  o.trim = true;
  o.trim_threshold = 4;
  o.poison_reclaimed = true;
  o.check_invariants = true;
  auto f = make_funnel(1, kCanaryThreads, o);
  std::atomic<bool> done{false};
  run_threads(kCanaryThreads, [&](std::size_t t) {
    std::mt19937_64 rng(t);
    while (!done.load(std::memory_order_relaxed)) {
      for (int i = 0; i < 64; ++i) f->fetch_add(tid(t), 1 + static_cast<std::int64_t>(rng() % 100));
      if (f->installed_batches(Bank::Positive, 0) >= kCanaryTurnovers) done.store(true);
    }
  });
  const auto turnovers = f->installed_batches(Bank::Positive, 0);
  const auto uar = f->use_after_reclaim();
  const auto reclaimed = f->reclaimed_batches();
  const bool canary_ok = uar == 0 && reclaimed > 0 && turnovers >= kCanaryTurnovers;

  BenchConfig c;
  c.impl = Impl::AggFunnel;
  c.m = 1;
  c.threads = 1;
  c.ratio_pct = 90;
  c.work_cycles = 0;
  c.ops_per_thread = kReplayOps;
  c.record_returns = true;
  c.reps = 1;
  c.seed = 4242;
  c.trim = true;
  const auto with_trim = run_faa_bench(c)[0];
  c.trim = false;
  const auto without = run_faa_bench(c)[0];
  const bool same = with_trim.returns == without.returns && !with_trim.returns.empty();

  verdict(canary_ok && same, "reclamation",
          fmt("%zu threads, %llu batch turnovers, %llu reclaimed, %llu use-after-reclaim; p=1 trim vs no-trim "
              "over %llu ops: %s",
              kCanaryThreads, static_cast<unsigned long long>(turnovers),
              static_cast<unsigned long long>(reclaimed), static_cast<unsigned long long>(uar),
              static_cast<unsigned long long>(kReplayOps), same ? "identical" : "DIFFERENT"));
}

}  // namespace

int main() {
  std::printf("hardware threads: %u\n", hardware_threads());
  const std::function<void()> criteria[] = {linearizability, fetch_increment,   sum_invariant,
                                            golden,          combining_evidence, priority,
                                            queue_correctness, queue_direction, reclamation};
  for (const auto& c : criteria) {
    try {
      c();
    } catch (const std::exception& e) {
      ++failures;
      report("FAIL", "exception", e.what());
    }
  }
  std::printf("%d failed\n", failures);
  return failures == 0 ? 0 : 1;
}
