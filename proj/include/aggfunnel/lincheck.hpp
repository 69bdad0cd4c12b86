#pragma once

// Operation histories and the checks run over them: a Wing & Gong style
// linearizability search against a sequential specification, a linear-time
// check for fetch-and-increment histories, and the batch-list invariant.

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "aggfunnel/batch.hpp"
#include "aggfunnel/errors.hpp"
#include "aggfunnel/faa.hpp"

namespace aggfunnel {

enum class OpKind : std::uint8_t { FetchAdd, FetchAddDirect, Read, CompareSwap, Enqueue, Dequeue };

struct Op {
  OpKind kind = OpKind::Read;
  std::int64_t arg1 = 0;  // df, CAS expected, or enqueued item
  std::int64_t arg2 = 0;  // CAS desired

  static Op fetch_add(std::int64_t df) { return {OpKind::FetchAdd, df, 0}; }
  static Op fetch_add_direct(std::int64_t df) { return {OpKind::FetchAddDirect, df, 0}; }
  static Op read() { return {OpKind::Read, 0, 0}; }
  static Op compare_swap(std::int64_t expected, std::int64_t desired) {
    return {OpKind::CompareSwap, expected, desired};
  }
  static Op enqueue(std::int64_t item) { return {OpKind::Enqueue, item, 0}; }
  static Op dequeue() { return {OpKind::Dequeue, 0, 0}; }

  friend bool operator==(const Op&, const Op&) = default;
};

/// Response of a dequeue that found the queue empty.
inline constexpr std::int64_t kEmptyResponse = -1;

enum class EventKind : std::uint8_t { Invoke, Respond };

struct Event {
  std::uint64_t ts = 0;
  std::uint32_t thread = 0;
  EventKind kind = EventKind::Invoke;
  Op op;
  std::int64_t value = 0;  // response payload; 0 on invoke

  friend bool operator==(const Event&, const Event&) = default;
};

/// An invoke paired with its response. Pending operations never responded.
struct Operation {
  std::uint32_t thread = 0;
  Op op;
  std::int64_t response = 0;
  std::uint64_t invoked = 0;
  std::uint64_t responded = std::numeric_limits<std::uint64_t>::max();
  bool pending = false;

  /// Real-time order: this one finished before `other` started.
  bool precedes(const Operation& other) const noexcept { return !pending && responded < other.invoked; }
};

inline std::string_view to_string(OpKind k) {
  switch (k) {
    case OpKind::FetchAdd: return "fetch_add";
    case OpKind::FetchAddDirect: return "fetch_add_direct";
    case OpKind::Read: return "read";
    case OpKind::CompareSwap: return "compare_swap";
    case OpKind::Enqueue: return "enqueue";
    case OpKind::Dequeue: return "dequeue";
  }
  return "?";
}

inline std::string describe(const Operation& o) {
  std::ostringstream s;
  s << 'T' << o.thread << ' ' << to_string(o.op.kind);
  switch (o.op.kind) {
    case OpKind::FetchAdd:
    case OpKind::FetchAddDirect:
    case OpKind::Enqueue: s << '(' << o.op.arg1 << ')'; break;
    case OpKind::CompareSwap: s << '(' << o.op.arg1 << ',' << o.op.arg2 << ')'; break;
    default: s << "()"; break;
  }
  if (o.pending) {
    s << " -> pending";
  } else {
    s << " -> " << o.response;
  }
  s << " [" << o.invoked << ',';
  if (o.pending) {
    s << "inf";
  } else {
    s << o.responded;
  }
  s << ']';
  return s.str();
}

/// Time-ordered invoke/respond events from any number of threads.
class History {
 public:
  History() = default;
  explicit History(std::vector<Event> events) : events_(std::move(events)) { sort(); }

  /// Merges per-thread logs by timestamp.
  static History merge(const std::vector<std::vector<Event>>& logs) {
    std::vector<Event> all;
    for (const auto& log : logs) all.insert(all.end(), log.begin(), log.end());
    return History(std::move(all));
  }

  void add(const Event& e) {
    events_.push_back(e);
    sort();
  }

  const std::vector<Event>& events() const noexcept { return events_; }
  bool empty() const noexcept { return events_.empty(); }

  /// Throws MalformedHistory unless, per thread, events alternate
  /// invoke/respond (starting with invoke), responses match their invokes,
  /// and timestamps strictly increase.
  void validate() const { (void)operations(); }

  /// Pairs events into operations, ordered by invocation time.
  std::vector<Operation> operations() const {
    struct Open {
      bool open = false;
      std::size_t index = 0;
      bool seen = false;
      std::uint64_t last_ts = 0;
    };
    std::vector<Operation> ops;
    std::vector<Open> state;
    for (const Event& e : events_) {
      if (e.thread >= state.size()) state.resize(e.thread + 1);
      Open& t = state[e.thread];
      if (t.seen && e.ts <= t.last_ts) {
        throw MalformedHistory("thread " + std::to_string(e.thread) +
                               ": timestamps not strictly increasing at ts " + std::to_string(e.ts));
      }
      t.seen = true;
      t.last_ts = e.ts;
      if (e.kind == EventKind::Invoke) {
        if (t.open) {
          throw MalformedHistory("thread " + std::to_string(e.thread) +
                                 ": invoke while previous operation is still open");
        }
        t.open = true;
        t.index = ops.size();
        Operation o;
        o.thread = e.thread;
        o.op = e.op;
        o.invoked = e.ts;
        o.pending = true;
        ops.push_back(o);
      } else {
        if (!t.open) {
          throw MalformedHistory("thread " + std::to_string(e.thread) + ": response without invoke");
        }
        Operation& o = ops[t.index];
        if (!(o.op == e.op)) {
          throw MalformedHistory("thread " + std::to_string(e.thread) +
                                 ": response does not match invoked operation");
        }
        o.response = e.value;
        o.responded = e.ts;
        o.pending = false;
        t.open = false;
      }
    }
    return ops;
  }

  /// One record per line: `ts thread kind op arg1 arg2 value`.
  void dump(std::ostream& out) const {
    for (const Event& e : events_) {
      out << e.ts << ' ' << e.thread << ' ' << (e.kind == EventKind::Invoke ? "invoke" : "respond")
          << ' ' << to_string(e.op.kind) << ' ' << e.op.arg1 << ' ' << e.op.arg2 << ' ' << e.value
          << '\n';
    }
  }

  std::string dump() const {
    std::ostringstream s;
    dump(s);
    return s.str();
  }

  /// Inverse of dump(). Blank lines and lines starting with '#' are skipped.
  static History parse(std::istream& in) {
    std::vector<Event> events;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      std::istringstream fields(line);
      Event e;
      std::string kind;
      std::string op;
      if (!(fields >> e.ts >> e.thread >> kind >> op >> e.op.arg1 >> e.op.arg2 >> e.value)) {
        throw MalformedHistory("line " + std::to_string(lineno) + ": expected 7 fields");
      }
      std::string extra;
      if (fields >> extra) throw MalformedHistory("line " + std::to_string(lineno) + ": trailing data");
      if (kind == "invoke") {
        e.kind = EventKind::Invoke;
      } else if (kind == "respond") {
        e.kind = EventKind::Respond;
      } else {
        throw MalformedHistory("line " + std::to_string(lineno) + ": unknown event kind '" + kind + "'");
      }
      auto parsed = parse_op_kind(op);
      if (!parsed) throw MalformedHistory("line " + std::to_string(lineno) + ": unknown op '" + op + "'");
      e.op.kind = *parsed;
      events.push_back(e);
    }
    return History(std::move(events));
  }

  static History parse(std::string_view text) {
    std::istringstream in{std::string(text)};
    return parse(in);
  }

 private:
  static std::optional<OpKind> parse_op_kind(std::string_view s) {
    for (auto k : {OpKind::FetchAdd, OpKind::FetchAddDirect, OpKind::Read, OpKind::CompareSwap,
                   OpKind::Enqueue, OpKind::Dequeue}) {
      if (to_string(k) == s) return k;
    }
    return std::nullopt;
  }

  void sort() {
    std::stable_sort(events_.begin(), events_.end(),
                     [](const Event& a, const Event& b) { return a.ts < b.ts; });
  }

  std::vector<Event> events_;
};

/// Per-thread append-only log; threads never share one.
class ThreadLog {
 public:
  explicit ThreadLog(std::uint32_t thread = 0) : thread_(thread) {}

  void invoke(const Op& op) {
    current_ = op;
    events_.push_back(Event{stamp(), thread_, EventKind::Invoke, op, 0});
  }

  void respond(std::int64_t value) {
    events_.push_back(Event{stamp(), thread_, EventKind::Respond, current_, value});
  }

  const std::vector<Event>& events() const noexcept { return events_; }
  void clear() { events_.clear(); }
  void reserve(std::size_t n) { events_.reserve(n); }

 private:
  // Monotonic clock, nudged forward when two reads land on the same tick.
  std::uint64_t stamp() {
    const auto now = static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(
            std::chrono::steady_clock::now().time_since_epoch())
            .count());
    last_ = std::max(now, last_ + 1);
    return last_;
  }

  std::uint32_t thread_;
  Op current_;
  std::uint64_t last_ = 0;
  std::vector<Event> events_;
};

/// Runs `body` between a recorded invoke and respond.
template <class F>
std::int64_t record(ThreadLog& log, const Op& op, F&& body) {
  log.invoke(op);
  const std::int64_t r = static_cast<std::int64_t>(std::forward<F>(body)());
  log.respond(r);
  return r;
}

// ---------------------------------------------------------------------------
// Sequential specifications

/// A fetch-and-add object holding a signed 64-bit value.
struct CounterSpec {
  using State = std::int64_t;
  State initial = 0;

  /// Returns the response, or nullopt when the op is foreign to this object.
  std::optional<std::int64_t> apply(State& s, const Op& op) const {
    switch (op.kind) {
      case OpKind::FetchAdd:
      case OpKind::FetchAddDirect: {
        const std::int64_t before = s;
        s = wrap_add_sub(s, op.arg1, 0);
        return before;
      }
      case OpKind::Read: return s;
      case OpKind::CompareSwap:
        if (s == op.arg1) {
          s = op.arg2;
          return 1;
        }
        return 0;
      default: return std::nullopt;
    }
  }

  static std::size_t hash(const State& s) noexcept { return std::hash<std::int64_t>{}(s); }
};

/// A FIFO queue of positive items.
struct FifoSpec {
  using State = std::deque<std::int64_t>;
  State initial;

  std::optional<std::int64_t> apply(State& s, const Op& op) const {
    switch (op.kind) {
      case OpKind::Enqueue:
        s.push_back(op.arg1);
        return 0;
      case OpKind::Dequeue: {
        if (s.empty()) return kEmptyResponse;
        const std::int64_t front = s.front();
        s.pop_front();
        return front;
      }
      default: return std::nullopt;
    }
  }

  static std::size_t hash(const State& s) noexcept {
    std::size_t h = s.size();
    for (std::int64_t v : s) h = h * 1000003u ^ std::hash<std::int64_t>{}(v);
    return h;
  }
};

template <class S>
concept SeqSpec = requires(const S& spec, typename S::State& state, const Op& op) {
  { spec.initial } -> std::convertible_to<typename S::State>;
  { spec.apply(state, op) } -> std::same_as<std::optional<std::int64_t>>;
  { S::hash(state) } -> std::convertible_to<std::size_t>;
};

// ---------------------------------------------------------------------------
// Checkers

struct CheckResult {
  bool accepted = false;
  std::string reason;
  /// Accept: a linearization (indices into `operations`). Reject: the longest
  /// prefix the search managed to linearize.
  std::vector<std::size_t> order;
  std::vector<Operation> operations;

  explicit operator bool() const noexcept { return accepted; }

  std::string witness() const {
    std::ostringstream s;
    s << (accepted ? "linearization:" : "rejected: " + reason + "; longest linearizable prefix:") << '\n';
    for (std::size_t i : order) s << "  " << describe(operations[i]) << '\n';
    if (!accepted) {
      s << "operations:\n";
      for (const auto& o : operations) s << "  " << describe(o) << '\n';
    }
    return s.str();
  }
};

/// Search is exponential in the operation count; histories are capped here.
inline constexpr std::size_t kMaxCheckedOperations = 12;

namespace detail {

/// Replays `order` through the spec and checks responses and real-time
/// order. Used to re-verify every witness the search emits.
template <SeqSpec Spec>
bool replay_witness(const Spec& spec, const std::vector<Operation>& ops,
                    const std::vector<std::size_t>& order) {
  std::vector<bool> used(ops.size(), false);
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const std::size_t i = order[pos];
    if (i >= ops.size() || used[i]) return false;
    used[i] = true;
    for (std::size_t later = pos + 1; later < order.size(); ++later) {
      if (ops[order[later]].precedes(ops[i])) return false;
    }
  }
  for (std::size_t i = 0; i < ops.size(); ++i) {
    if (!used[i] && !ops[i].pending) return false;
  }
  typename Spec::State state = spec.initial;
  for (std::size_t i : order) {
    const auto r = spec.apply(state, ops[i].op);
    if (!r) return false;
    if (!ops[i].pending && *r != ops[i].response) return false;
  }
  return true;
}

template <SeqSpec Spec>
class LinearizabilitySearch {
 public:
  LinearizabilitySearch(const Spec& spec, const std::vector<Operation>& ops)
      : spec_(spec), ops_(ops) {
    for (std::size_t i = 0; i < ops_.size(); ++i) {
      if (!ops_[i].pending) required_ |= (1u << i);
    }
  }

  bool run() {
    typename Spec::State state = spec_.initial;
    return dfs(0, state);
  }

  const std::vector<std::size_t>& order() const noexcept { return order_; }
  const std::vector<std::size_t>& best_prefix() const noexcept { return best_; }

 private:
  struct Key {
    std::uint32_t done;
    typename Spec::State state;
    bool operator==(const Key& o) const { return done == o.done && state == o.state; }
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const noexcept {
      return Spec::hash(k.state) * 31u + std::hash<std::uint32_t>{}(k.done);
    }
  };

  bool dfs(std::uint32_t done, const typename Spec::State& state) {
    if ((done & required_) == required_) return true;
    if (!failed_.insert(Key{done, state}).second) return false;

    std::uint64_t horizon = std::numeric_limits<std::uint64_t>::max();
    for (std::size_t j = 0; j < ops_.size(); ++j) {
      if (!(done & (1u << j)) && !ops_[j].pending) horizon = std::min(horizon, ops_[j].responded);
    }
    for (std::size_t i = 0; i < ops_.size(); ++i) {
      if (done & (1u << i)) continue;
      if (ops_[i].invoked > horizon) continue;  // some unfinished op precedes it
      typename Spec::State next = state;
      const auto r = spec_.apply(next, ops_[i].op);
      if (!r) continue;
      if (!ops_[i].pending && *r != ops_[i].response) continue;
      order_.push_back(i);
      if (order_.size() > best_.size()) best_ = order_;
      if (dfs(done | (1u << i), next)) return true;
      order_.pop_back();
    }
    return false;
  }

  const Spec& spec_;
  const std::vector<Operation>& ops_;
  std::uint32_t required_ = 0;
  std::vector<std::size_t> order_;
  std::vector<std::size_t> best_;
  std::unordered_set<Key, KeyHash> failed_;
};

}  // namespace detail

/// Accepts iff some total order of the operations respects real-time order
/// and replays through `spec` producing every recorded response. Pending
/// operations may take effect or not.
template <SeqSpec Spec = CounterSpec>
CheckResult check_linearizable(const History& h, const Spec& spec = {},
                               std::size_t max_operations = kMaxCheckedOperations) {
  CheckResult result;
  result.operations = h.operations();
  const auto& ops = result.operations;
  if (ops.size() > max_operations || ops.size() > 31) {
    throw HistoryTooLarge("history has " + std::to_string(ops.size()) +
                          " operations; the checker is limited to " + std::to_string(max_operations));
  }
  for (const auto& o : ops) {
    typename Spec::State probe = spec.initial;
    if (!spec.apply(probe, o.op)) {
      throw MalformedHistory("operation " + std::string(to_string(o.op.kind)) +
                             " is not part of this specification");
    }
  }
  detail::LinearizabilitySearch<Spec> search(spec, ops);
  if (search.run()) {
    result.accepted = true;
    result.order = search.order();
    if (!detail::replay_witness(spec, ops, result.order)) {
      throw std::logic_error("linearizability search produced a witness that does not replay");
    }
  } else {
    result.reason = "no linearization reproduces the recorded responses";
    result.order = search.best_prefix();
  }
  return result;
}

/// Linear-time check for histories of fetch_add(1) / fetch_add_direct(1)
/// on an object that starts at zero: responses must be exactly {0..n-1} and
/// an operation that finished before another started must have the smaller
/// response. Pending operations are not allowed.
inline CheckResult check_fetch_inc(std::vector<Operation> ops) {
  CheckResult result;
  result.operations = std::move(ops);
  const auto& all = result.operations;
  const std::size_t n = all.size();
  std::vector<std::size_t> by_value(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const Operation& o = all[i];
    if ((o.op.kind != OpKind::FetchAdd && o.op.kind != OpKind::FetchAddDirect) || o.op.arg1 != 1) {
      throw MalformedHistory("fetch-and-increment check given " + describe(o));
    }
    if (o.pending) throw MalformedHistory("fetch-and-increment check given a pending operation");
    if (o.response < 0 || static_cast<std::uint64_t>(o.response) >= n) {
      result.reason = "response out of range: " + describe(o);
      return result;
    }
    auto& slot = by_value[static_cast<std::size_t>(o.response)];
    if (slot != n) {
      result.reason = "duplicate response " + std::to_string(o.response) + ": " + describe(all[slot]) +
                      " and " + describe(o);
      return result;
    }
    slot = i;
  }
  // Every value is taken exactly once, so the order by response is the only
  // candidate linearization. It respects real time iff no operation finished
  // before an operation with a smaller response started.
  std::uint64_t latest_invoke = 0;
  std::size_t latest_op = n;
  for (std::size_t v = 0; v < n; ++v) {
    const Operation& o = all[by_value[v]];
    if (latest_op != n && o.responded < latest_invoke) {
      result.reason = "real-time order violated: " + describe(o) + " finished before " +
                      describe(all[latest_op]) + " started";
      return result;
    }
    if (o.invoked >= latest_invoke) {
      latest_invoke = o.invoked;
      latest_op = by_value[v];
    }
  }
  result.accepted = true;
  result.order = std::move(by_value);
  return result;
}

inline CheckResult check_fetch_inc(const History& h) { return check_fetch_inc(h.operations()); }

// ---------------------------------------------------------------------------
// Batch-list invariant

enum class ChainViolation : std::uint8_t {
  None,
  EmptyChain,
  ValueBehindHead,  // |value| < |newest.after|
  NotGrowing,       // |after| <= |before| for a non-sentinel batch
  Discontinuous,    // before != previous.after
  BadSentinel,      // oldest batch is not (0, 0, 0)
};

inline std::string_view to_string(ChainViolation v) {
  switch (v) {
    case ChainViolation::None: return "none";
    case ChainViolation::EmptyChain: return "empty chain";
    case ChainViolation::ValueBehindHead: return "aggregator value behind newest batch";
    case ChainViolation::NotGrowing: return "batch does not grow the aggregator value";
    case ChainViolation::Discontinuous: return "batch before != previous batch after";
    case ChainViolation::BadSentinel: return "oldest batch is not the zero sentinel";
  }
  return "?";
}

struct ChainCheck {
  ChainViolation violation = ChainViolation::None;
  std::size_t position = 0;  // index into the chain, newest first

  bool ok() const noexcept { return violation == ChainViolation::None; }
  explicit operator bool() const noexcept { return ok(); }
};

/// Checks a quiescent aggregator snapshot against the batch-list invariant.
/// A truncated chain (older batches trimmed) skips the sentinel clause.
inline ChainCheck validate_batch_chain(const AggregatorSnapshot& snap) {
  const auto& c = snap.chain;
  if (c.empty()) return {ChainViolation::EmptyChain, 0};
  if (magnitude(snap.value) < magnitude(c.front().after)) return {ChainViolation::ValueBehindHead, 0};
  const std::size_t real = snap.truncated ? c.size() : c.size() - 1;
  for (std::size_t j = 0; j < real; ++j) {
    if (magnitude(c[j].after) <= magnitude(c[j].before)) return {ChainViolation::NotGrowing, j};
    if (j + 1 < c.size() && c[j].before != c[j + 1].after) return {ChainViolation::Discontinuous, j};
  }
  if (!snap.truncated) {
    const BatchView& base = c.back();
    if (base.before != 0 || base.after != 0 || base.main_before != 0) {
      return {ChainViolation::BadSentinel, c.size() - 1};
    }
  }
  return {};
}

}  // namespace aggfunnel
