#include <gtest/gtest.h>

#include <atomic>
#include <mutex>
#include <random>
#include <thread>
#include <vector>

#include "aggfunnel/reclaim.hpp"

using aggfunnel::EpochDomain;
using aggfunnel::ReclaimMode;
using aggfunnel::ThreadId;

namespace {

struct Node {
  static constexpr std::uint32_t kLive = 0xA11CEu;
  static constexpr std::uint32_t kDead = 0xDEADu;
  std::atomic<std::uint32_t> canary{kLive};
  std::uint64_t payload = 0;
};

// Reclaimed nodes are poisoned and parked here instead of freed, so a late
// reader sees the poison rather than freed memory.
struct Graveyard {
  std::mutex mu;
  std::vector<Node*> nodes;
  ~Graveyard() {
    for (Node* n : nodes) delete n;
  }
  static void bury(void* p, void* ctx) {
    auto* n = static_cast<Node*>(p);
    n->canary.store(Node::kDead, std::memory_order_relaxed);
    auto* g = static_cast<Graveyard*>(ctx);
    std::lock_guard lock(g->mu);
    g->nodes.push_back(n);
  }
};

}  // namespace

TEST(EpochDomain, SingleThreadReclaimsAfterThreeAdvances) {
  EpochDomain d(1);
  bool freed = false;
  const ThreadId me{0};
  {
    auto g = d.pin(me);
    d.retire(&freed, [](void* p, void*) { *static_cast<bool*>(p) = true; });
  }
  for (int i = 0; i < 3; ++i) d.try_advance();
  EXPECT_TRUE(freed);
  EXPECT_EQ(d.retired_count(), 1u);
  EXPECT_EQ(d.reclaimed_count(), 1u);
}

TEST(EpochDomain, PinnedReaderBlocksReclamation) {
  EpochDomain d(2);
  bool freed = false;
  const ThreadId a{0}, b{1};
  auto reader = d.pin(a);
  {
    auto g = d.pin(b);
    d.retire(&freed, [](void* p, void*) { *static_cast<bool*>(p) = true; });
  }
  for (int i = 0; i < 10; ++i) d.try_advance();
  EXPECT_FALSE(freed);
  reader.release();
  for (int i = 0; i < 3; ++i) d.try_advance();
  EXPECT_TRUE(freed);
}

TEST(EpochDomain, NestedPinsUnpinAtOutermost) {
  EpochDomain d(1);
  const ThreadId me{0};
  auto outer = d.pin(me);
  {
    auto inner = d.pin(me);
    EXPECT_TRUE(d.pinned(me));
  }
  EXPECT_TRUE(d.pinned(me));
  outer.release();
  EXPECT_FALSE(d.pinned(me));
}

TEST(EpochDomain, DeferModeKeepsEverythingUntilTeardown) {
  int freed = 0;
  {
    EpochDomain d(1, ReclaimMode::Defer);
    for (int i = 0; i < 5; ++i) d.retire(&freed, [](void* p, void*) { ++*static_cast<int*>(p); });
    for (int i = 0; i < 10; ++i) d.try_advance();
    EXPECT_EQ(freed, 0);
  }
  EXPECT_EQ(freed, 5);
}

TEST(EpochDomain, QuiescentDomainDrainsEverything) {
  EpochDomain d(4);
  int freed = 0;
  for (int i = 0; i < 100; ++i) d.retire(&freed, [](void* p, void*) { ++*static_cast<int*>(p); });
  for (int i = 0; i < 3; ++i) d.try_advance();
  EXPECT_EQ(freed, 100);
}

TEST(EpochDomain, CanaryStressSeesNoReclaimedNode) {
  constexpr std::size_t kThreads = 8;
  constexpr std::size_t kCycles = 100000;
  Graveyard graveyard;  // outlives the domain, whose teardown buries into it
  EpochDomain d(kThreads);
  constexpr std::size_t kSlots = 4;
  std::atomic<Node*> shared[kSlots];
  for (auto& s : shared) s.store(new Node, std::memory_order_relaxed);
  std::atomic<std::uint64_t> bad{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < kThreads; ++t) {
    pool.emplace_back([&, t] {
      const ThreadId me{static_cast<std::uint32_t>(t)};
      std::mt19937 rng(static_cast<unsigned>(t));
      for (std::size_t i = 0; i < kCycles / kThreads; ++i) {
        auto g = d.pin(me);
        auto& slot = shared[rng() % kSlots];
        Node* n = slot.load(std::memory_order_acquire);
        if (n->canary.load(std::memory_order_relaxed) != Node::kLive) bad.fetch_add(1);
        n->payload += 0;  // traverse
        Node* fresh = new Node;
        if (slot.compare_exchange_strong(n, fresh, std::memory_order_acq_rel)) {
          d.retire(n, &Graveyard::bury, &graveyard);
        } else {
          delete fresh;
        }
        if (n->canary.load(std::memory_order_relaxed) != Node::kLive) bad.fetch_add(1);
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& s : shared) delete s.load();
  EXPECT_EQ(bad.load(), 0u);
  EXPECT_GT(d.reclaimed_count(), 0u);
}

#ifndef NDEBUG
TEST(EpochDomainDeathTest, DoubleUnpinAsserts) {
  EpochDomain d(1);
  EXPECT_DEATH(
      {
        auto g = d.pin(ThreadId{0});
        g.release();
        g.release();
      },
      "released twice");
  EXPECT_DEATH(d.unpin(ThreadId{0}), "without matching pin");
}
#endif
