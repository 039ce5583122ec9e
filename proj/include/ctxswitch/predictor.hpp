#pragma once

#include <array>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxswitch/common.hpp"
#include "ctxswitch/dataset.hpp"
#include "ctxswitch/heads.hpp"
#include "ctxswitch/similarity.hpp"

namespace ctxswitch {

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Exceptions from workers
// are rethrown (the one with the lowest index wins).
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::size_t failed_at = n;
  std::exception_ptr failure;
  auto worker = [&] {
    while (true) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= n) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (i < failed_at) {
          failed_at = i;
          failure = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(jobs, n); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// All m-subsets of {0..n-1}, lexicographic.
inline std::vector<Combo> enumerate_combinations(std::size_t n, std::size_t m) {
  if (m < 2 || m > n) {
    throw Error(ErrorKind::BadM, "context size " + std::to_string(m) + " is not in [2, " + std::to_string(n) + "]");
  }
  std::vector<Combo> out;
  Combo c(m);
  std::iota(c.begin(), c.end(), 0);
  const int ni = static_cast<int>(n);
  const int mi = static_cast<int>(m);
  while (true) {
    out.push_back(c);
    int i = mi - 1;
    while (i >= 0 && c[static_cast<std::size_t>(i)] == ni - mi + i) --i;
    if (i < 0) break;
    ++c[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < mi; ++j) c[static_cast<std::size_t>(j)] = c[static_cast<std::size_t>(j - 1)] + 1;
  }
  return out;
}

struct OracleResult {
  std::string config_id;
  std::vector<std::pair<std::string, double>> accuracies;  // per config, ascending FLOPs
  bool unmet = false;
};

// Cheapest config whose accuracy reaches the threshold; otherwise the most
// accurate one (first on ties) with unmet set. `accuracies` must follow
// ascending-FLOPs order.
inline OracleResult select_oracle(std::vector<std::pair<std::string, double>> accuracies, double acc_thr) {
  if (accuracies.empty()) throw Error(ErrorKind::EmptyTrainingSet, "no configurations to choose from");
  OracleResult res;
  res.accuracies = std::move(accuracies);
  for (const auto& [id, acc] : res.accuracies) {
    if (acc >= acc_thr) {
      res.config_id = id;
      return res;
    }
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < res.accuracies.size(); ++i) {
    if (res.accuracies[i].second > res.accuracies[best].second) best = i;
  }
  res.config_id = res.accuracies[best].first;
  res.unmet = true;
  return res;
}

// Trains one micro-classifier per configuration and applies select_oracle on
// validation accuracy.
// Validation accuracy of one micro-classifier per configuration, in the
// order given (ascending FLOPs).
inline std::vector<std::pair<std::string, double>> config_accuracies(const EmbeddingDataset& ds, const Combo& combo,
                                                                     const std::vector<ConfigDescriptor>& configs,
                                                                     const HeadHyperparams& hp) {
  for (std::size_t i = 1; i < configs.size(); ++i) {
    if (configs[i].flops_m < configs[i - 1].flops_m) {
      throw Error(ErrorKind::Usage, "configs must be sorted by ascending flops_m");
    }
  }
  std::vector<std::pair<std::string, double>> accs;
  for (const auto& cfg : configs) {
    accs.emplace_back(cfg.id, train_heads(ds, cfg.id, combo, hp).val_accuracy);
  }
  return accs;
}

inline OracleResult oracle_config(const EmbeddingDataset& ds, const Combo& combo,
                                  const std::vector<ConfigDescriptor>& configs, double acc_thr,
                                  const HeadHyperparams& hp) {
  return select_oracle(config_accuracies(ds, combo, configs, hp), acc_thr);
}

// Median of every validation accuracy in a set of per-config tables.
inline double median_accuracy(const std::vector<std::vector<std::pair<std::string, double>>>& tables) {
  std::vector<double> all;
  for (const auto& t : tables) {
    for (const auto& [id, acc] : t) all.push_back(acc);
  }
  if (all.empty()) throw Error(ErrorKind::EmptyTrainingSet, "no accuracies to take a median of");
  std::sort(all.begin(), all.end());
  const std::size_t mid = all.size() / 2;
  return all.size() % 2 ? all[mid] : 0.5 * (all[mid - 1] + all[mid]);
}

// Quartile-stratified sampling on mean similarity. Group boundaries are the
// 25/50/75th percentiles (linear interpolation); each group contributes
// ceil(fraction * size) combos drawn uniformly. Output is sorted.
inline std::vector<Combo> sd_sample(const std::vector<Combo>& combos, const SimilarityMatrix& s, double fraction,
                                    std::uint64_t seed) {
  if (!(fraction > 0.0) || fraction > 1.0) throw Error(ErrorKind::Usage, "fraction must be in (0, 1]");
  if (combos.empty()) return {};
  std::vector<double> means;
  means.reserve(combos.size());
  for (const auto& c : combos) means.push_back(context_representation(s, c).mean_sim);
  std::vector<double> sorted = means;
  std::sort(sorted.begin(), sorted.end());
  const auto percentile = [&](double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
  };
  const std::array<double, 3> bounds = {percentile(0.25), percentile(0.5), percentile(0.75)};
  std::array<std::vector<std::size_t>, 4> groups;
  for (std::size_t i = 0; i < combos.size(); ++i) {
    std::size_t g = 0;
    while (g < 3 && means[i] > bounds[g]) ++g;
    groups[g].push_back(i);
  }
  Rng rng(seed);
  std::vector<Combo> out;
  for (auto& g : groups) {
    const auto take = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(g.size()) - 1e-12));
    for (std::size_t k = 0; k < take && k < g.size(); ++k) {
      std::swap(g[k], g[k + rng.below(g.size() - k)]);
      out.push_back(combos[g[k]]);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Uniform sample of `count` combos without replacement, sorted. Baseline for
// similarity-directed sampling.
inline std::vector<Combo> random_sample(std::vector<Combo> combos, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  count = std::min(count, combos.size());
  for (std::size_t k = 0; k < count; ++k) std::swap(combos[k], combos[k + rng.below(combos.size() - k)]);
  combos.resize(count);
  std::sort(combos.begin(), combos.end());
  return combos;
}

struct TrainingPoint {
  Combo combo;
  double mean_sim = 0.0;
  double std_sim = 0.0;
  std::string config_id;
};

// Expanding-k vote kNN over (mean, std) context representations.
class ConfigPredictor {
 public:
  ConfigPredictor() = default;
  ConfigPredictor(std::vector<TrainingPoint> points, double acc_thr, std::size_t k_start = 3)
      : points_(std::move(points)), acc_thr_(acc_thr), k_start_(k_start) {
    canonicalize();
  }

  const std::vector<TrainingPoint>& points() const { return points_; }
  double acc_thr() const { return acc_thr_; }
  std::size_t k_start() const { return k_start_; }
  const std::array<double, 2>& scale() const { return scale_; }
  std::size_t context_size() const { return points_.empty() ? 0 : points_.front().combo.size(); }

  void set_scale(std::array<double, 2> scale) { scale_ = scale; }

  // Rescales each feature by 1 / (max - min) over the training points.
  void normalize_features() {
    for (std::size_t f = 0; f < 2; ++f) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (const auto& p : points_) {
        const double v = f == 0 ? p.mean_sim : p.std_sim;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      scale_[f] = hi > lo ? 1.0 / (hi - lo) : 1.0;
    }
  }

  std::string predict(double mean_sim, double std_sim) const {
    if (points_.empty()) throw Error(ErrorKind::EmptyTrainingSet, "predictor has no training points");
    std::vector<std::pair<double, std::size_t>> order;
    order.reserve(points_.size());
    for (std::size_t i = 0; i < points_.size(); ++i) {
      const double dm = (points_[i].mean_sim - mean_sim) * scale_[0];
      const double ds = (points_[i].std_sim - std_sim) * scale_[1];
      order.emplace_back(std::sqrt(dm * dm + ds * ds), i);
    }
    // Points are kept in combo order, so index order breaks distance ties
    // lexicographically.
    std::sort(order.begin(), order.end());
    std::map<std::string, std::size_t> votes;
    std::size_t counted = 0;
    for (std::size_t k = std::min(std::max<std::size_t>(k_start_, 1), points_.size()); k <= points_.size(); ++k) {
      while (counted < k) ++votes[points_[order[counted++].second].config_id];
      // A config wins when it holds more votes than every other one.
      const std::string* top = nullptr;
      std::size_t top_n = 0, runner_up = 0;
      for (const auto& [cfg, n] : votes) {
        if (n > top_n) {
          runner_up = top_n;
          top_n = n;
          top = &cfg;
        } else if (n > runner_up) {
          runner_up = n;
        }
      }
      if (top && top_n > runner_up) return *top;
    }
    return points_[order.front().second].config_id;
  }

  std::string predict(const ContextRepresentation& rep) const { return predict(rep.mean_sim, rep.std_sim); }

 private:
  void canonicalize() {
    std::sort(points_.begin(), points_.end(), [](const auto& a, const auto& b) { return a.combo < b.combo; });
    points_.erase(std::unique(points_.begin(), points_.end(),
                              [](const auto& a, const auto& b) { return a.combo == b.combo; }),
                  points_.end());
  }

  std::vector<TrainingPoint> points_;
  double acc_thr_ = 0.9;
  std::size_t k_start_ = 3;
  std::array<double, 2> scale_ = {1.0, 1.0};
};

inline std::string predict_config(const ConfigPredictor& p, const ContextRepresentation& rep) {
  return p.predict(rep);
}

// Labels every distinct sampled combo with its oracle configuration. Without
// a threshold, the median of all trained validation accuracies is used.
inline ConfigPredictor build_predictor(const EmbeddingDataset& ds, const SimilarityMatrix& s,
                                       std::vector<Combo> sampled, std::vector<ConfigDescriptor> configs,
                                       std::optional<double> acc_thr, const HeadHyperparams& hp,
                                       std::size_t jobs = 1, std::size_t k_start = 3) {
  for (auto& c : sampled) c = make_combo(c);
  std::sort(sampled.begin(), sampled.end());
  sampled.erase(std::unique(sampled.begin(), sampled.end()), sampled.end());
  if (sampled.empty()) throw Error(ErrorKind::EmptyTrainingSet, "no sampled combos to build the predictor from");
  std::stable_sort(configs.begin(), configs.end(),
                   [](const auto& a, const auto& b) { return a.flops_m < b.flops_m; });
  std::vector<std::vector<std::pair<std::string, double>>> tables(sampled.size());
  parallel_for(sampled.size(), jobs, [&](std::size_t i) { tables[i] = config_accuracies(ds, sampled[i], configs, hp); });
  const double thr = acc_thr ? *acc_thr : median_accuracy(tables);
  std::vector<TrainingPoint> points(sampled.size());
  for (std::size_t i = 0; i < sampled.size(); ++i) {
    const auto rep = context_representation(s, sampled[i]);
    points[i] = {sampled[i], rep.mean_sim, rep.std_sim, select_oracle(tables[i], thr).config_id};
  }
  return ConfigPredictor(std::move(points), thr, k_start);
}

inline nlohmann::json predictor_to_json(const ConfigPredictor& p) {
  nlohmann::json doc;
  doc["m"] = p.context_size();
  doc["acc_thr"] = p.acc_thr();
  doc["k_start"] = p.k_start();
  doc["scale"] = p.scale();
  doc["points"] = nlohmann::json::array();
  for (const auto& pt : p.points()) {
    doc["points"].push_back({{"combo", pt.combo}, {"mean", pt.mean_sim}, {"std", pt.std_sim}, {"config", pt.config_id}});
  }
  return doc;
}

inline ConfigPredictor predictor_from_json(const nlohmann::json& doc) {
  using detail::get_field;
  std::vector<TrainingPoint> points;
  const auto& arr = detail::require(doc, "points", "knn.");
  if (!arr.is_array()) throw Error(ErrorKind::SchemaViolation, "knn.points must be an array");
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = "knn.points[" + std::to_string(i) + "].";
    points.push_back({make_combo(get_field<std::vector<int>>(arr[i], "combo", where)),
                      get_field<double>(arr[i], "mean", where), get_field<double>(arr[i], "std", where),
                      get_field<std::string>(arr[i], "config", where)});
  }
  const double thr = get_field<double>(doc, "acc_thr", "knn.");
  if (!(thr > 0.0 && thr <= 1.0)) throw Error(ErrorKind::SchemaViolation, "knn.acc_thr must be in (0, 1]");
  ConfigPredictor p(std::move(points), thr, get_field<std::size_t>(doc, "k_start", "knn."));
  if (doc.contains("scale")) p.set_scale(get_field<std::array<double, 2>>(doc, "scale", "knn."));
  return p;
}

}  // namespace ctxswitch
