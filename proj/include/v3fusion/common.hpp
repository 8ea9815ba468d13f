#pragma once

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace v3fusion {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input could not be parsed (bad line, bad number, bad key).
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Input parsed but violates a data invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A numerical routine hit a degenerate configuration.
class NumericalError : public Error {
 public:
  using Error::Error;
};

enum class TaskKind { MCQ, OEQ };

inline std::string_view to_string(TaskKind kind) {
  return kind == TaskKind::MCQ ? "MCQ" : "OEQ";
}

inline TaskKind parse_task_kind(std::string_view text) {
  if (text == "MCQ" || text == "mcq") return TaskKind::MCQ;
  if (text == "OEQ" || text == "oeq") return TaskKind::OEQ;
  throw ValidationError("unknown task_kind '" + std::string(text) + "'");
}

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw Error("argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

/// Non-fatal diagnostics attached to a result.
using Warnings = std::vector<std::string>;

/// Ensemble membership as a bitmask over manifest model indices (N <= 64).
using TeamMask = std::uint64_t;

inline constexpr std::size_t kMaxPoolSize = 64;

inline std::vector<std::size_t> team_members(TeamMask mask) {
  std::vector<std::size_t> members;
  for (std::size_t i = 0; mask != 0; ++i, mask >>= 1) {
    if (mask & 1U) members.push_back(i);
  }
  return members;
}

inline TeamMask team_mask(std::span<const std::size_t> members) {
  TeamMask mask = 0;
  for (auto i : members) {
    if (i >= kMaxPoolSize) throw Error("model index exceeds pool size limit");
    mask |= TeamMask{1} << i;
  }
  return mask;
}

inline TeamMask full_team(std::size_t n) {
  return n >= 64 ? ~TeamMask{0} : (TeamMask{1} << n) - 1;
}

/// splitmix64 finalizer.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Named sub-seed: every stochastic stage draws from derive_seed(run_seed, "<stage>").
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
  std::uint64_t h = mix64(seed);
  for (unsigned char c : stream) h = mix64(h ^ c);
  return h;
}

/// Worker count from V3FUSION_THREADS (default 1).
inline unsigned thread_count() {
  if (const char* env = std::getenv("V3FUSION_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<unsigned>(std::min<long>(n, 256));
  }
  return 1;
}

/// Runs body(i) for i in [0, n). Each index is owned by exactly one worker,
/// so results written to slot i are identical for any thread count.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body,
                         unsigned threads = thread_count()) {
  if (threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  std::vector<std::exception_ptr> failures(threads);
  {
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t i = t; i < n; i += threads) body(i);
        } catch (...) {
          failures[t] = std::current_exception();
        }
      });
    }
  }
  for (const auto& failure : failures) {
    if (failure) std::rethrow_exception(failure);
  }
}

}  // namespace v3fusion
