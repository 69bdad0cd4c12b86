#pragma once

// Policies that pick the aggregator an operation goes through.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>

#include "aggfunnel/errors.hpp"
#include "aggfunnel/faa.hpp"

namespace aggfunnel {

enum class Bank : std::uint8_t { Positive, Negative };

inline constexpr Bank bank_for(std::int64_t df) noexcept {
  return df > 0 ? Bank::Positive : Bank::Negative;
}

struct Route {
  bool direct = false;  // bypass aggregators, go straight to main
  Bank bank = Bank::Positive;
  std::size_t index = 0;

  friend bool operator==(const Route&, const Route&) = default;
};

/// Largest s with s * s <= p.
inline std::size_t isqrt(std::size_t p) noexcept {
  std::size_t s = static_cast<std::size_t>(std::sqrt(static_cast<double>(p)));
  while (s * s > p) --s;
  while ((s + 1) * (s + 1) <= p) ++s;
  return s;
}

/// Groups of consecutive thread ids, floor(sqrt(p)) groups per sign.
///
/// For perfect-square p this is exactly floor(thread / sqrt(p)). Otherwise
/// ids are spread as floor(thread * m / p), so group sizes differ by at most one.
inline Route route_even_spread(std::size_t thread, std::size_t p, std::int64_t df) noexcept {
  const std::size_t m = isqrt(p);
  return Route{false, bank_for(df), thread * m / p};
}

inline Route route_fixed_m(std::size_t thread, std::size_t m, std::int64_t df) noexcept {
  return Route{false, bank_for(df), thread % m};
}

/// Static or per-operation aggregator assignment, optionally reserving the
/// first `direct_threads` ids as high-priority threads that skip aggregation.
class RoutingPolicy {
 public:
  enum class Kind : std::uint8_t { EvenSpread, FixedM, Random };

  static RoutingPolicy even_spread(std::size_t p) {
    if (p == 0) throw InvalidConfig("even-spread routing needs p >= 1");
    return RoutingPolicy(Kind::EvenSpread, isqrt(p), p, 0, 0);
  }
  static RoutingPolicy fixed_m(std::size_t m) {
    if (m == 0) throw InvalidConfig("fixed-m routing needs m >= 1");
    return RoutingPolicy(Kind::FixedM, m, 0, 0, 0);
  }
  static RoutingPolicy random(std::size_t m, std::uint64_t seed) {
    if (m == 0) throw InvalidConfig("random routing needs m >= 1");
    return RoutingPolicy(Kind::Random, m, 0, 0, seed);
  }

  /// Threads [0, d) go direct; the rest are re-indexed from 0 and handed to
  /// `inner`. An even-spread inner policy is rebuilt over the p - d survivors.
  static RoutingPolicy priority(std::size_t d, std::size_t p, const RoutingPolicy& inner) {
    if (d > p) throw InvalidConfig("priority routing needs d <= p");
    RoutingPolicy r = inner;
    r.direct_ = d;
    if (inner.kind_ == Kind::EvenSpread) {
      if (p == d) throw InvalidConfig("even-spread inner policy needs at least one funneled thread");
      r.p_ = p - d;
      r.m_ = isqrt(p - d);
    }
    return r;
  }

  Kind kind() const noexcept { return kind_; }
  std::size_t aggregators() const noexcept { return m_; }
  std::size_t direct_threads() const noexcept { return direct_; }
  std::uint64_t seed() const noexcept { return seed_; }
  bool is_static() const noexcept { return kind_ != Kind::Random; }

  /// Generator state for the Random policy; one per thread.
  using Rng = std::minstd_rand;
  Rng make_rng(ThreadId ctx) const {
    return Rng(static_cast<Rng::result_type>((seed_ * 0x9E3779B97F4A7C15ULL + ctx.index() + 1) %
                                             Rng::modulus));
  }

  Route route(ThreadId ctx, std::int64_t df, Rng& rng) const {
    const std::size_t t = ctx.index();
    if (t < direct_) return Route{true, bank_for(df), 0};
    const std::size_t local = t - direct_;
    switch (kind_) {
      case Kind::EvenSpread:
        return route_even_spread(local, p_, df);
      case Kind::FixedM:
        return route_fixed_m(local, m_, df);
      case Kind::Random:
        return Route{false, bank_for(df), std::uniform_int_distribution<std::size_t>(0, m_ - 1)(rng)};
    }
    return Route{};
  }

  std::string describe() const {
    std::string s;
    switch (kind_) {
      case Kind::EvenSpread: s = "even-spread"; break;
      case Kind::FixedM: s = "fixed-m"; break;
      case Kind::Random: s = "random"; break;
    }
    s += "(m=" + std::to_string(m_);
    if (direct_ > 0) s += ",d=" + std::to_string(direct_);
    return s + ")";
  }

 private:
  RoutingPolicy(Kind k, std::size_t m, std::size_t p, std::size_t d, std::uint64_t seed)
      : kind_(k), m_(m), p_(p), direct_(d), seed_(seed) {}

  Kind kind_;
  std::size_t m_;
  std::size_t p_;  // even-spread only
  std::size_t direct_;
  std::uint64_t seed_;
};

}  // namespace aggfunnel
