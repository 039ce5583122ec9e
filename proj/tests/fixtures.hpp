#pragma once

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "ctxswitch/ctxswitch.hpp"

namespace ctxswitch::testing {

// Distances a + b * |i - j| between class centers: neighbouring indices are
// close, far indices are far. Squared, this is a sum of negative-type
// kernels, so it embeds in n - 1 dimensions.
inline std::vector<std::vector<double>> graded_distances(std::size_t n, double a, double b) {
  std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j) d[i][j] = a + b * std::abs(static_cast<double>(i) - static_cast<double>(j));
    }
  }
  return d;
}

inline std::vector<std::vector<double>> uniform_distances(std::size_t n, double dist) {
  std::vector<std::vector<double>> d(n, std::vector<double>(n, dist));
  for (std::size_t i = 0; i < n; ++i) d[i][i] = 0.0;
  return d;
}

// Well separated clusters: every head trained on it is perfect.
inline EmbeddingDataset separable_dataset(std::size_t n_classes, std::uint64_t seed = 7,
                                          std::size_t per_class = 40) {
  SyntheticSpec spec;
  spec.n_classes = n_classes;
  spec.dim = std::max<std::size_t>(n_classes, 2);
  spec.cluster_spread = 0.1;
  spec.center_distances = uniform_distances(n_classes, 10.0);
  spec.samples_per_class = per_class;
  spec.val_per_class = per_class / 2;
  spec.test_per_class = per_class / 2;
  spec.configs = {{10.0, 0.05}, {40.0, 0.0}};
  spec.seed = seed;
  return synthesize_gaussian_dataset(spec);
}

// Trace over the same contexts as synthesize_sequence, with frames ordered so
// the recency companion rule rebuilds each next context exactly: within a
// context the entering class comes first, then the class that leaves next,
// then the staying classes. interval must be at least m + 1.
inline FrameTrace ideal_trace(const EmbeddingDataset& ds, std::size_t m, std::size_t n_changes, std::size_t interval,
                              std::uint64_t seed) {
  auto base = synthesize_sequence(ds, m, n_changes, interval, seed);
  const auto& labels = ds.matrix(ds.manifest().configs.front().id, base.split).labels;
  Rng rng(seed ^ 0x5eedULL);
  const auto frame_of = [&](int cls) {
    const auto& rows = ds.rows_of(base.split, cls);
    const std::size_t r = rows[rng.below(rows.size())];
    return Frame{r, labels[r]};
  };
  FrameTrace out = base;
  out.frames.clear();
  out.boundaries.clear();
  for (std::size_t k = 0; k < base.contexts.size(); ++k) {
    const Combo& ctx = base.contexts[k];
    int entering = -1, leaving = -1;
    if (k > 0) {
      for (int c : ctx) {
        if (!combo_contains(base.contexts[k - 1], c)) entering = c;
      }
    }
    if (k + 1 < base.contexts.size()) {
      for (int c : ctx) {
        if (!combo_contains(base.contexts[k + 1], c)) leaving = c;
      }
    }
    std::vector<int> staying;
    for (int c : ctx) {
      if (c != leaving) staying.push_back(c);
    }
    std::vector<int> order;
    if (entering >= 0) order.push_back(entering);
    if (leaving >= 0) order.push_back(leaving);
    const std::size_t fill = interval - order.size() - staying.size();
    for (std::size_t f = 0; f < fill; ++f) order.push_back(staying[rng.below(staying.size())]);
    order.insert(order.end(), staying.begin(), staying.end());
    out.boundaries.push_back(out.frames.size());
    for (int c : order) out.frames.push_back(frame_of(c));
  }
  return out;
}

inline HeadHyperparams quick_hyper(std::uint64_t seed = 42) {
  HeadHyperparams hp;
  hp.hidden_dim = 16;
  hp.epochs = 15;
  hp.seed = seed;
  return hp;
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("ctxswitch-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::filesystem::path path_;
};

}  // namespace ctxswitch::testing
