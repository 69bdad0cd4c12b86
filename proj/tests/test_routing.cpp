#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <vector>

#include "aggfunnel/routing.hpp"

using aggfunnel::Bank;
using aggfunnel::InvalidConfig;
using aggfunnel::Route;
using aggfunnel::RoutingPolicy;
using aggfunnel::ThreadId;

namespace {

Route route_of(const RoutingPolicy& r, std::size_t t, std::int64_t df) {
  auto rng = r.make_rng(ThreadId{static_cast<std::uint32_t>(t)});
  return r.route(ThreadId{static_cast<std::uint32_t>(t)}, df, rng);
}

std::vector<std::size_t> loads(const RoutingPolicy& r, std::size_t p) {
  std::vector<std::size_t> n(r.aggregators(), 0);
  for (std::size_t t = 0; t < p; ++t) {
    const Route rt = route_of(r, t, 1);
    if (!rt.direct) ++n.at(rt.index);
  }
  return n;
}

}  // namespace

TEST(EvenSpread, SquareRootGroups) {
  EXPECT_EQ(aggfunnel::route_even_spread(5, 16, 1), (Route{false, Bank::Positive, 1}));
  EXPECT_EQ(aggfunnel::route_even_spread(0, 16, 1), (Route{false, Bank::Positive, 0}));
  EXPECT_EQ(aggfunnel::route_even_spread(15, 16, -1), (Route{false, Bank::Negative, 3}));
  EXPECT_EQ(RoutingPolicy::even_spread(16).aggregators(), 4u);
}

TEST(EvenSpread, MatchesFloorDivisionForPerfectSquares) {
  for (std::size_t s = 1; s <= 12; ++s) {
    const std::size_t p = s * s;
    for (std::size_t t = 0; t < p; ++t) {
      EXPECT_EQ(aggfunnel::route_even_spread(t, p, 1).index, t / s) << "p=" << p << " t=" << t;
    }
  }
}

TEST(EvenSpread, IntegerSquareRoot) {
  for (std::size_t p = 0; p < 5000; ++p) {
    const std::size_t s = aggfunnel::isqrt(p);
    EXPECT_LE(s * s, p);
    EXPECT_GT((s + 1) * (s + 1), p);
  }
}

TEST(FixedM, Modulo) {
  EXPECT_EQ(aggfunnel::route_fixed_m(7, 6, 1).index, 1u);
  const auto n = loads(RoutingPolicy::fixed_m(6), 12);
  EXPECT_EQ(n, std::vector<std::size_t>(6, 2));
  for (std::size_t t = 0; t < 50; ++t) EXPECT_EQ(aggfunnel::route_fixed_m(t, 1, -3).index, 0u);
}

TEST(Routing, LoadBalanceWithinOne) {
  for (std::size_t p = 1; p <= 200; ++p) {
    for (const auto& r : {RoutingPolicy::even_spread(p), RoutingPolicy::fixed_m(1 + p % 9)}) {
      const auto n = loads(r, p);
      const auto [lo, hi] = std::minmax_element(n.begin(), n.end());
      EXPECT_LE(*hi - *lo, 1u) << r.describe() << " p=" << p;
      for (std::size_t t = 0; t < p; ++t) EXPECT_LT(route_of(r, t, 1).index, r.aggregators());
    }
  }
}

TEST(Routing, StaticPoliciesAreDeterministic) {
  const auto r = RoutingPolicy::even_spread(40);
  for (std::size_t t = 0; t < 40; ++t) {
    EXPECT_EQ(route_of(r, t, 5), route_of(r, t, 5));
    EXPECT_EQ(route_of(r, t, 5).index, route_of(r, t, -5).index);
    EXPECT_EQ(route_of(r, t, -5).bank, Bank::Negative);
  }
}

TEST(Priority, ZeroDirectIsInnerPolicy) {
  const auto inner = RoutingPolicy::fixed_m(3);
  const auto r = RoutingPolicy::priority(0, 10, inner);
  for (std::size_t t = 0; t < 10; ++t) EXPECT_EQ(route_of(r, t, 1), route_of(inner, t, 1));
}

TEST(Priority, FirstThreadsGoDirect) {
  const auto r = RoutingPolicy::priority(1, 8, RoutingPolicy::fixed_m(6));
  EXPECT_TRUE(route_of(r, 0, 1).direct);
  for (std::size_t t = 1; t < 8; ++t) EXPECT_FALSE(route_of(r, t, 1).direct);
}

TEST(Priority, RemainingThreadsSpreadEvenly) {
  const auto r = RoutingPolicy::priority(2, 8, RoutingPolicy::fixed_m(2));
  EXPECT_EQ(loads(r, 8), (std::vector<std::size_t>{3, 3}));
}

TEST(Priority, EvenSpreadRebuiltOverSurvivors) {
  const auto r = RoutingPolicy::priority(7, 16, RoutingPolicy::even_spread(16));
  EXPECT_EQ(r.aggregators(), 3u);
  const auto n = loads(r, 16);
  EXPECT_EQ(n, (std::vector<std::size_t>{3, 3, 3}));
}

TEST(Priority, RejectsTooManyDirectThreads) {
  EXPECT_THROW(RoutingPolicy::priority(9, 8, RoutingPolicy::fixed_m(2)), InvalidConfig);
  EXPECT_THROW(RoutingPolicy::fixed_m(0), InvalidConfig);
  EXPECT_THROW(RoutingPolicy::even_spread(0), InvalidConfig);
}

TEST(RandomRouting, StaysInRangeAndCoversAll) {
  const auto r = RoutingPolicy::random(5, 42);
  auto rng = r.make_rng(ThreadId{3});
  std::map<std::size_t, int> hits;
  for (int i = 0; i < 5000; ++i) {
    const auto rt = r.route(ThreadId{3}, 1, rng);
    ASSERT_LT(rt.index, 5u);
    ++hits[rt.index];
  }
  EXPECT_EQ(hits.size(), 5u);
  for (const auto& [idx, n] : hits) EXPECT_GT(n, 700) << idx;
}
