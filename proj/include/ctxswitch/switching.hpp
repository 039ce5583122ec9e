#pragma once

#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "ctxswitch/common.hpp"
#include "ctxswitch/dataset.hpp"
#include "ctxswitch/heads.hpp"
#include "ctxswitch/predictor.hpp"
#include "ctxswitch/similarity.hpp"

namespace ctxswitch {

inline constexpr std::size_t kUnbounded = std::numeric_limits<std::size_t>::max();

// Least-frequently-used store. Ties on frequency evict the least recently
// used entry. Access counts survive eviction, so a returning key competes
// with its full history; this keeps the policy a stack algorithm (a larger
// cache always holds a superset of a smaller one's contents).
template <typename Key, typename Value>
class LfuCache {
 public:
  explicit LfuCache(std::size_t capacity = kUnbounded) : capacity_(capacity) {
    if (capacity_ == 0) throw Error(ErrorKind::Usage, "cache capacity must be at least 1");
  }

  struct Lookup {
    const Value& value;
    bool hit;
    std::optional<Key> evicted;
  };

  template <typename Loader>
  Lookup get_or_admit(const Key& key, Loader&& loader) {
    const std::uint64_t now = ++clock_;
    std::uint64_t& freq = freq_[key];
    auto it = entries_.find(key);
    if (it != entries_.end()) {
      order_.erase({freq, it->second.last_use, key});
      ++freq;
      it->second.last_use = now;
      order_.insert({freq, now, key});
      ++hits_;
      return {it->second.value, true, std::nullopt};
    }
    Value value = loader();
    ++misses_;
    std::optional<Key> evicted;
    if (entries_.size() >= capacity_) {
      auto victim = order_.begin();
      evicted = std::get<2>(*victim);
      entries_.erase(*evicted);
      order_.erase(victim);
    }
    ++freq;
    auto [pos, inserted] = entries_.emplace(key, Entry{std::move(value), now});
    order_.insert({freq, now, key});
    return {pos->second.value, false, evicted};
  }

  bool contains(const Key& key) const { return entries_.count(key) > 0; }
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::uint64_t hits() const { return hits_; }
  std::uint64_t misses() const { return misses_; }

  std::uint64_t frequency(const Key& key) const {
    auto it = freq_.find(key);
    return it == freq_.end() ? 0 : it->second;
  }

 private:
  struct Entry {
    Value value;
    std::uint64_t last_use;
  };

  std::size_t capacity_;
  std::uint64_t clock_ = 0;
  std::uint64_t hits_ = 0;
  std::uint64_t misses_ = 0;
  std::map<Key, std::uint64_t> freq_;
  std::map<Key, Entry> entries_;
  std::set<std::tuple<std::uint64_t, std::uint64_t, Key>> order_;  // (freq, last use, key)
};

template <typename Key, typename Value, typename Loader>
typename LfuCache<Key, Value>::Lookup cache_get_or_admit(LfuCache<Key, Value>& cache, const Key& key, Loader&& loader) {
  return cache.get_or_admit(key, std::forward<Loader>(loader));
}

inline bool detect_change(const PredictionOutcome& outcome, double theta) { return outcome.change_score > theta; }

// Classifier over every class of the dataset; its change head is unused.
struct AllClassModel {
  MicroClassifier model;
  double flops_m = 0.0;

  const std::string& config_id() const { return model.config_id; }
};

inline AllClassModel train_all_class_model(const EmbeddingDataset& ds, const std::string& config_id,
                                           HeadHyperparams hp) {
  hp.negative_ratio = 0.0;
  Combo all(ds.num_classes());
  std::iota(all.begin(), all.end(), 0);
  return {train_heads(ds, config_id, all, hp), ds.manifest().config(config_id).flops_m};
}

inline int identify_class(const AllClassModel& all_class, std::span<const double> embedding) {
  return predict(all_class.model, embedding).predicted_class;
}

using HeadKey = std::pair<Combo, std::string>;
using HeadPtr = std::shared_ptr<const MicroClassifier>;

// Where a device gets head pairs from.
class HeadSource {
 public:
  virtual ~HeadSource() = default;
  virtual HeadPtr fetch(const Combo& combo, const std::string& config_id) = 0;
};

// Trains heads on demand, as the cloud would. Results are memoized.
class TrainingHeadSource : public HeadSource {
 public:
  TrainingHeadSource(const EmbeddingDataset& ds, HeadHyperparams hp) : ds_(ds), hp_(hp) {}

  HeadPtr fetch(const Combo& combo, const std::string& config_id) override {
    HeadKey key{combo, config_id};
    auto it = trained_.find(key);
    if (it != trained_.end()) return it->second;
    auto heads = std::make_shared<const MicroClassifier>(train_heads(ds_, config_id, combo, hp_));
    trained_.emplace(std::move(key), heads);
    return heads;
  }

  std::size_t trained_count() const { return trained_.size(); }

 private:
  const EmbeddingDataset& ds_;
  HeadHyperparams hp_;
  std::map<HeadKey, HeadPtr> trained_;
};

// Pre-installed heads only.
class InstalledHeadSource : public HeadSource {
 public:
  void install(HeadPtr heads) { store_[{heads->combo, heads->config_id}] = std::move(heads); }

  HeadPtr fetch(const Combo& combo, const std::string& config_id) override {
    auto it = store_.find({combo, config_id});
    if (it == store_.end()) {
      throw Error(ErrorKind::NoLocalHeadAvailable, "no installed heads for " + combo_key(combo) + " @ " + config_id);
    }
    return it->second;
  }

  // Loads every heads/<config>/<combo>.bin under root.
  void load_directory(const std::filesystem::path& root) {
    const auto dir = root / "heads";
    if (!std::filesystem::exists(dir)) throw Error(ErrorKind::MissingFile, dir.string());
    for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".bin") {
        install(std::make_shared<const MicroClassifier>(load_heads(entry.path())));
      }
    }
  }

  std::size_t size() const { return store_.size(); }

 private:
  std::map<HeadKey, HeadPtr> store_;
};

enum class CompanionRule { Recency, Farthest };

struct ActiveContext {
  Combo combo;
  std::string config_id;
  HeadPtr heads;
};

struct SwitchState {
  ActiveContext current;
  std::deque<int> recent;  // most recent first, distinct
  std::size_t recency_capacity = 8;
  std::vector<std::size_t> m_set = {2, 3, 4};
  CompanionRule rule = CompanionRule::Recency;
  LfuCache<HeadKey, HeadPtr> cache{kUnbounded};

  void observe(int cls) {
    auto it = std::find(recent.begin(), recent.end(), cls);
    if (it != recent.end()) recent.erase(it);
    recent.push_front(cls);
    while (recent.size() > recency_capacity) recent.pop_back();
  }
};

struct ContextChoice {
  Combo combo;
  std::string config_id;
  double flops_m = 0.0;
  std::size_t m = 0;
};

// Builds the m-class candidate around new_class. Recency takes the most
// recently seen classes, then the current combo, then the lowest unused
// indices. Farthest keeps the companions most similar to the new class.
inline Combo candidate_combo(const SwitchState& state, int new_class, std::size_t m, std::size_t n_classes,
                             const SimilarityMatrix* sim = nullptr) {
  std::vector<int> pool;
  const auto push = [&](int c) {
    if (c != new_class && std::find(pool.begin(), pool.end(), c) == pool.end()) pool.push_back(c);
  };
  for (int c : state.recent) push(c);
  for (int c : state.current.combo) push(c);
  if (state.rule == CompanionRule::Farthest) {
    if (!sim) throw Error(ErrorKind::Usage, "farthest companion rule needs a similarity matrix");
    std::stable_sort(pool.begin(), pool.end(),
                     [&](int a, int b) { return sim->at(a, new_class) > sim->at(b, new_class); });
  }
  for (std::size_t c = 0; c < n_classes && pool.size() < m - 1; ++c) push(static_cast<int>(c));
  pool.resize(std::min(pool.size(), m - 1));
  pool.push_back(new_class);
  return make_combo(pool);
}

// For each allowed size, predicts a configuration for the candidate context
// and keeps the cheapest; equal FLOPs prefer the larger context.
inline ContextChoice choose_context(const SwitchState& state, int new_class,
                                    const std::map<std::size_t, ConfigPredictor>& predictors,
                                    const SimilarityMatrix& sim, const Manifest& manifest) {
  std::optional<ContextChoice> best;
  for (std::size_t m : state.m_set) {
    if (m < 2 || m > manifest.num_classes()) continue;
    auto pit = predictors.find(m);
    if (pit == predictors.end()) {
      throw Error(ErrorKind::PredictorError, "no predictor for context size " + std::to_string(m));
    }
    ContextChoice c;
    c.m = m;
    c.combo = candidate_combo(state, new_class, m, manifest.num_classes(), &sim);
    c.config_id = pit->second.predict(context_representation(sim, c.combo));
    c.flops_m = manifest.config(c.config_id).flops_m;
    if (!best || c.flops_m < best->flops_m || (c.flops_m == best->flops_m && c.m > best->m)) best = std::move(c);
  }
  if (!best) throw Error(ErrorKind::PredictorError, "m_set has no usable context size");
  return *best;
}

struct SwitchOutcome {
  ContextChoice choice;
  bool cache_hit = false;
  std::uint64_t download_bytes = 0;
};

// Cloud-assisted switch: picks the context, then fetches its heads through
// the cache. Misses cost a head-pair download.
inline SwitchOutcome hybrid_switch(SwitchState& state, int new_class,
                                   const std::map<std::size_t, ConfigPredictor>& predictors,
                                   const SimilarityMatrix& sim, const Manifest& manifest, HeadSource& source) {
  if (combo_contains(state.current.combo, new_class)) {
    throw Error(ErrorKind::Usage, "class " + std::to_string(new_class) + " is already in the current context");
  }
  SwitchOutcome out;
  out.choice = choose_context(state, new_class, predictors, sim, manifest);
  const auto& cfg = manifest.config(out.choice.config_id);
  auto lookup = state.cache.get_or_admit(HeadKey{out.choice.combo, out.choice.config_id},
                                         [&] { return source.fetch(out.choice.combo, out.choice.config_id); });
  out.cache_hit = lookup.hit;
  if (!lookup.hit) {
    out.download_bytes = static_cast<std::uint64_t>(lookup.value->param_count()) *
                         static_cast<std::uint64_t>(cfg.param_bytes_per_weight);
  }
  state.current = {out.choice.combo, out.choice.config_id, lookup.value};
  state.observe(new_class);
  return out;
}

struct InstalledContext {
  Combo combo;
  std::string config_id;
  double flops_m = 0.0;
};

// Installed context with the largest overlap with `desired`; must contain
// required_class when it is >= 0. Ties: fewer FLOPs, then lexicographic.
inline const InstalledContext& best_installed(const Combo& desired, int required_class,
                                              const std::vector<InstalledContext>& installed) {
  const InstalledContext* best = nullptr;
  std::size_t best_overlap = 0;
  for (const auto& ic : installed) {
    if (required_class >= 0 && !combo_contains(ic.combo, required_class)) continue;
    const std::size_t ov = combo_overlap(ic.combo, desired);
    if (!best || ov > best_overlap || (ov == best_overlap && ic.flops_m < best->flops_m) ||
        (ov == best_overlap && ic.flops_m == best->flops_m && ic.combo < best->combo)) {
      best = &ic;
      best_overlap = ov;
    }
  }
  if (!best) {
    throw Error(ErrorKind::NewClassUncovered,
                "no installed context contains class " + std::to_string(required_class));
  }
  return *best;
}

inline Combo local_fallback(const Combo& desired, int new_class, const std::vector<InstalledContext>& installed) {
  return best_installed(desired, new_class, installed).combo;
}

}  // namespace ctxswitch
