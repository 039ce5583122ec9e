#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace ctxswitch {

// Every failure the toolkit reports carries one of these kinds. The CLI maps
// them onto exit codes (see exit_code()).
enum class ErrorKind {
  Usage,
  MissingFile,
  SchemaViolation,
  DuplicateClass,
  EmptySplit,
  DimensionMismatch,
  UnknownClassIndex,
  NonFiniteValue,
  EmptyClass,
  InfeasibleGeometry,
  ZeroVector,
  ComboTooSmall,
  DuplicateClassInCombo,
  EmptyRow,
  NoNegativesAvailable,
  NotADistribution,
  BadM,
  EmptyTrainingSet,
  RateOutOfRange,
  CoverageInfeasible,
  ExhaustedCandidates,
  EmptyTrace,
  NoLocalHeadAvailable,
  NewClassUncovered,
  PredictorError,
  InsufficientSamples,
  LogDisabled,
  FrameError,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage: return "Usage";
    case ErrorKind::MissingFile: return "MissingFile";
    case ErrorKind::SchemaViolation: return "SchemaViolation";
    case ErrorKind::DuplicateClass: return "DuplicateClass";
    case ErrorKind::EmptySplit: return "EmptySplit";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::UnknownClassIndex: return "UnknownClassIndex";
    case ErrorKind::NonFiniteValue: return "NonFiniteValue";
    case ErrorKind::EmptyClass: return "EmptyClass";
    case ErrorKind::InfeasibleGeometry: return "InfeasibleGeometry";
    case ErrorKind::ZeroVector: return "ZeroVector";
    case ErrorKind::ComboTooSmall: return "ComboTooSmall";
    case ErrorKind::DuplicateClassInCombo: return "DuplicateClassInCombo";
    case ErrorKind::EmptyRow: return "EmptyRow";
    case ErrorKind::NoNegativesAvailable: return "NoNegativesAvailable";
    case ErrorKind::NotADistribution: return "NotADistribution";
    case ErrorKind::BadM: return "BadM";
    case ErrorKind::EmptyTrainingSet: return "EmptyTrainingSet";
    case ErrorKind::RateOutOfRange: return "RateOutOfRange";
    case ErrorKind::CoverageInfeasible: return "CoverageInfeasible";
    case ErrorKind::ExhaustedCandidates: return "ExhaustedCandidates";
    case ErrorKind::EmptyTrace: return "EmptyTrace";
    case ErrorKind::NoLocalHeadAvailable: return "NoLocalHeadAvailable";
    case ErrorKind::NewClassUncovered: return "NewClassUncovered";
    case ErrorKind::PredictorError: return "PredictorError";
    case ErrorKind::InsufficientSamples: return "InsufficientSamples";
    case ErrorKind::LogDisabled: return "LogDisabled";
    case ErrorKind::FrameError: return "FrameError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// 0 ok, 2 usage, 3 data error, 4 infeasible.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage:
      return 2;
    case ErrorKind::InfeasibleGeometry:
    case ErrorKind::CoverageInfeasible:
    case ErrorKind::ExhaustedCandidates:
    case ErrorKind::NewClassUncovered:
    case ErrorKind::NoLocalHeadAvailable:
      return 4;
    default:
      return 3;
  }
}

// A class combination (context). Always kept sorted ascending, no duplicates.
using Combo = std::vector<int>;

inline Combo make_combo(std::vector<int> classes) {
  std::sort(classes.begin(), classes.end());
  if (std::adjacent_find(classes.begin(), classes.end()) != classes.end()) {
    throw Error(ErrorKind::DuplicateClassInCombo, "combo lists a class twice");
  }
  return classes;
}

inline bool combo_contains(const Combo& combo, int cls) {
  return std::binary_search(combo.begin(), combo.end(), cls);
}

inline std::size_t combo_overlap(const Combo& a, const Combo& b) {
  std::size_t n = 0;
  for (int c : a) n += combo_contains(b, c) ? 1 : 0;
  return n;
}

inline std::string combo_key(const Combo& combo, char sep = '-') {
  std::string out;
  for (std::size_t i = 0; i < combo.size(); ++i) {
    if (i) out += sep;
    out += std::to_string(combo[i]);
  }
  return out;
}

// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view text) {
  double v = 0.0;
  auto first = text.data();
  auto last = text.data() + text.size();
  if (first != last && *first == '+') ++first;
  auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last) {
    throw Error(ErrorKind::SchemaViolation, "not a number: '" + std::string(text) + "'");
  }
  return v;
}

inline long long parse_int(std::string_view text) {
  long long v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw Error(ErrorKind::SchemaViolation, "not an integer: '" + std::string(text) + "'");
  }
  return v;
}

// Seeded PRNG. The engine is std::mt19937_64 (fully specified by the
// standard); the distributions below are written out so that draws are
// identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), rejection sampled.
  std::size_t below(std::size_t n) {
    if (n <= 1) return 0;
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % bound);
  }

  // Standard normal via Box-Muller; caches the second variate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ctxswitch
