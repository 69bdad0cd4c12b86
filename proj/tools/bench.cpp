// bench: fetch-and-add and queue microbenchmarks, plus linearizability
// stress runs.
//
//   bench faa --impl aggfunnel --m 6 --threads 8 --csv out.csv
//   bench queue --impl hardware --pattern pairs --threads 4
//   bench lincheck --impl aggfunnel --m 2 --histories 1000
//   bench lincheck --history dump.txt --spec counter
//
// Exit codes: 0 success, 1 configuration error, 2 correctness failure.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "aggfunnel/aggfunnel.hpp"
#include "aggfunnel/bench.hpp"

namespace {

namespace ab = aggfunnel::bench;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitCorrectness = 2;

struct CommonFlags {
  std::string impl = "aggfunnel";
  std::size_t m = 6;
  std::size_t direct = 0;
  std::size_t threads = 1;
  unsigned ratio = 100;
  double work = 512;
  double duration = 2.0;
  std::size_t reps = 5;
  std::uint64_t seed = 1;
  std::uint64_t ops = 0;
  std::string csv;
  bool no_trim = false;
  std::string pin = "round-robin";
  bool oversubscribe = false;
  std::vector<std::size_t> levels;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--impl", f.impl, "hardware | aggfunnel | aggfunnel-recursive")->capture_default_str();
  cmd->add_option("--m", f.m, "aggregators per sign (inner level for the recursive variant)")
      ->capture_default_str();
  cmd->add_option("--threads,-p", f.threads, "worker threads")->capture_default_str();
  cmd->add_option("--work", f.work, "mean local work between operations, in cycles")->capture_default_str();
  cmd->add_option("--duration", f.duration, "seconds per repetition")->capture_default_str();
  cmd->add_option("--ops", f.ops, "fixed operations per thread instead of a timed run");
  cmd->add_option("--reps", f.reps, "repetitions")->capture_default_str();
  cmd->add_option("--seed", f.seed, "random seed")->capture_default_str();
  cmd->add_option("--csv", f.csv, "append result rows to this CSV file");
  cmd->add_flag("--no-trim", f.no_trim, "keep every batch until teardown");
  cmd->add_option("--pin", f.pin, "thread placement: round-robin | none")->capture_default_str();
  cmd->add_flag("--oversubscribe", f.oversubscribe, "allow more threads than hardware threads");
  cmd->add_option("--levels", f.levels, "recursive variant: m per level, outermost first");
}

ab::BenchConfig to_config(const CommonFlags& f) {
  ab::BenchConfig c;
  auto impl = ab::parse_impl(f.impl);
  if (!impl) throw aggfunnel::InvalidConfig("unknown --impl '" + f.impl + "'");
  auto pin = ab::parse_pin_policy(f.pin);
  if (!pin) throw aggfunnel::InvalidConfig("unknown --pin '" + f.pin + "'");
  c.impl = *impl;
  c.m = f.m;
  c.direct = f.direct;
  c.threads = f.threads;
  c.ratio_pct = f.ratio;
  c.work_cycles = f.work;
  c.duration_s = f.duration;
  c.ops_per_thread = f.ops;
  c.reps = f.reps;
  c.seed = f.seed;
  c.trim = !f.no_trim;
  c.pin = *pin;
  c.oversubscribe = f.oversubscribe;
  c.levels = f.levels;
  return c;
}

// Opens `path` for appending and writes the header if the file is new.
std::ofstream open_csv(const std::string& path, const char* header) {
  bool fresh = true;
  {
    std::ifstream probe(path);
    fresh = !probe.good() || probe.peek() == std::ifstream::traits_type::eof();
  }
  std::ofstream out(path, std::ios::app);
  if (!out) throw aggfunnel::InvalidConfig("cannot open " + path + " for writing");
  if (fresh) out << header << '\n';
  return out;
}

int run_faa(const CommonFlags& f) {
  const ab::BenchConfig cfg = to_config(f);
  const auto runs = ab::run_faa_bench(cfg);
  std::ofstream csv;
  if (!f.csv.empty()) csv = open_csv(f.csv, ab::faa_csv_header());
  std::cout << ab::faa_csv_header() << '\n';
  for (const auto& r : runs) {
    ab::write_faa_csv_row(std::cout, r);
    if (csv.is_open()) ab::write_faa_csv_row(csv, r);
  }
  const auto s = ab::summarize_throughput(runs);
  std::cerr << std::setprecision(6) << "throughput mean " << s.mean << " ops/s, stddev " << s.stddev << '\n';
  return kExitOk;
}

int run_queue(const CommonFlags& f, const std::string& pattern, std::size_t initial, std::size_t segment,
              bool verify) {
  ab::QueueBenchConfig cfg;
  cfg.base = to_config(f);
  auto pat = ab::parse_queue_pattern(pattern);
  if (!pat) throw aggfunnel::InvalidConfig("unknown --pattern '" + pattern + "'");
  cfg.pattern = *pat;
  cfg.initial_size = initial;
  cfg.segment_size = segment;
  cfg.verify = verify;
  const auto runs = ab::run_queue_bench(cfg);
  std::ofstream csv;
  if (!f.csv.empty()) csv = open_csv(f.csv, ab::queue_csv_header());
  std::cout << ab::queue_csv_header() << '\n';
  int rc = kExitOk;
  for (const auto& q : runs) {
    ab::write_queue_csv_row(std::cout, q);
    if (csv.is_open()) ab::write_queue_csv_row(csv, q);
    if (verify && !q.check.ok()) {
      std::cerr << "rep " << q.run.rep << ": queue check failed: " << q.check.detail
                << " (handoff violations " << q.check.handoff_violations << ")\n";
      rc = kExitCorrectness;
    }
  }
  return rc;
}

int check_history_file(const std::string& path, const std::string& spec) {
  std::ifstream in(path);
  if (!in) throw aggfunnel::InvalidConfig("cannot read " + path);
  const auto h = aggfunnel::History::parse(in);
  aggfunnel::CheckResult r;
  if (spec == "counter") {
    r = aggfunnel::check_linearizable(h, aggfunnel::CounterSpec{});
  } else if (spec == "queue") {
    r = aggfunnel::check_linearizable(h, aggfunnel::FifoSpec{});
  } else if (spec == "fetch-inc") {
    r = aggfunnel::check_fetch_inc(h);
  } else {
    throw aggfunnel::InvalidConfig("unknown --spec '" + spec + "'");
  }
  if (r) {
    std::cout << "accepted: " << r.witness() << '\n';
    return kExitOk;
  }
  std::cout << "rejected: " << r.reason << '\n';
  return kExitCorrectness;
}

int run_lincheck(const CommonFlags& f, std::size_t ops, std::size_t histories, bool mutant, bool queue,
                 bool fetch_inc) {
  auto impl = ab::parse_impl(f.impl);
  if (!impl) throw aggfunnel::InvalidConfig("unknown --impl '" + f.impl + "'");
  ab::LincheckReport rep;
  if (queue) {
    ab::QueueLincheckConfig c;
    c.index_impl = *impl;
    c.m = f.m;
    c.threads = f.threads;
    c.ops_per_history = ops;
    c.histories = histories;
    c.seed = f.seed;
    rep = ab::run_queue_lincheck_stress(c);
  } else {
    ab::LincheckStressConfig c;
    c.impl = *impl;
    c.m = f.m;
    c.levels = f.levels;
    c.threads = f.threads;
    c.ops_per_history = ops;
    c.histories = histories;
    c.seed = f.seed;
    c.trim = !f.no_trim;
    c.fault = mutant ? aggfunnel::Fault::SkipMainApply : aggfunnel::Fault::None;
    c.fetch_inc_only = fetch_inc;
    rep = ab::run_lincheck_stress(c);
  }
  std::cout << "histories " << rep.histories << ", rejections " << rep.rejections << '\n';
  for (std::size_t i = 0; i < rep.rejected_dumps.size(); ++i) {
    std::cout << "# rejected history " << i << " (" << rep.witnesses[i] << ")\n" << rep.rejected_dumps[i];
  }
  return rep.ok() ? kExitOk : kExitCorrectness;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Aggregating funnel benchmarks and checks"};
  app.require_subcommand(1);

  CommonFlags faa_flags;
  auto* faa = app.add_subcommand("faa", "fetch-and-add throughput");
  add_common(faa, faa_flags);
  faa->add_option("--direct,-d", faa_flags.direct, "high-priority threads using the direct path")
      ->capture_default_str();
  faa->add_option("--ratio", faa_flags.ratio, "percent of operations that are fetch_add (rest are reads)")
      ->capture_default_str();

  CommonFlags q_flags;
  std::string pattern = "pairs";
  std::size_t initial = 0;
  std::size_t segment = 1024;
  bool no_verify = false;
  auto* queue = app.add_subcommand("queue", "segment queue throughput");
  add_common(queue, q_flags);
  queue->add_option("--pattern", pattern, "pairs | enq4deq4")->capture_default_str();
  queue->add_option("--initial-size", initial, "items preloaded before the run")->capture_default_str();
  queue->add_option("--segment-size", segment, "cells per segment")->capture_default_str();
  queue->add_flag("--no-verify", no_verify, "skip the post-run conservation and FIFO checks");

  CommonFlags l_flags;
  l_flags.m = 2;
  l_flags.threads = 3;
  std::size_t ops = 8;
  std::size_t histories = 1000;
  bool mutant = false;
  bool lin_queue = false;
  bool fetch_inc = false;
  std::string history_path;
  std::string spec = "counter";
  auto* lin = app.add_subcommand("lincheck", "record small concurrent histories and check them");
  lin->add_option("--impl", l_flags.impl, "hardware | aggfunnel | aggfunnel-recursive")->capture_default_str();
  lin->add_option("--m", l_flags.m, "aggregators per sign")->capture_default_str();
  lin->add_option("--levels", l_flags.levels, "recursive variant: m per level");
  lin->add_option("--threads,-p", l_flags.threads, "threads per history")->capture_default_str();
  lin->add_option("--ops", ops, "operations per history")->capture_default_str();
  lin->add_option("--histories", histories, "number of histories")->capture_default_str();
  lin->add_option("--seed", l_flags.seed, "random seed")->capture_default_str();
  lin->add_flag("--no-trim", l_flags.no_trim, "keep every batch until teardown");
  lin->add_flag("--mutant", mutant, "delegates skip the main application (should be rejected)");
  lin->add_flag("--queue", lin_queue, "enqueue/dequeue histories against the segment queue");
  lin->add_flag("--fetch-inc", fetch_inc, "only fetch_add(1)");
  lin->add_option("--history", history_path, "check a dumped history file instead of recording");
  lin->add_option("--spec", spec, "for --history: counter | queue | fetch-inc")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*faa) return run_faa(faa_flags);
    if (*queue) return run_queue(q_flags, pattern, initial, segment, !no_verify);
    if (*lin) {
      if (!history_path.empty()) return check_history_file(history_path, spec);
      return run_lincheck(l_flags, ops, histories, mutant, lin_queue, fetch_inc);
    }
  } catch (const aggfunnel::MalformedHistory& e) {
    std::cerr << "malformed history: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::length_error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitOk;
}
