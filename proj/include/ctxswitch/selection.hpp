#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxswitch/common.hpp"
#include "ctxswitch/heads.hpp"

namespace ctxswitch {

// Expected per-frame computation of a deployed micro-classifier: its own cost
// every frame plus the all-class model whenever the detector fires.
inline double expected_flops(double f_i, double f_full, double ccr, double fpr, double fnr) {
  for (double r : {ccr, fpr, fnr}) {
    if (!(r >= 0.0 && r <= 1.0)) throw Error(ErrorKind::RateOutOfRange, "rate " + format_double(r) + " not in [0, 1]");
  }
  if (!(f_i > 0.0) || !(f_full > 0.0)) throw Error(ErrorKind::RateOutOfRange, "FLOPs must be positive");
  return ccr * (fnr * f_i + (1.0 - fnr) * (f_i + f_full)) + (1.0 - ccr) * (fpr * (f_i + f_full) + (1.0 - fpr) * f_i);
}

struct Candidate {
  Combo combo;
  std::string config_id;
  double expected_flops = 0.0;
  std::optional<double> accuracy;
};

enum class AccuracyCriterion { Average, Minimum };

struct GreedyOptions {
  std::size_t n = 0;            // set size
  std::size_t num_classes = 0;  // coverage target
  double acc_thr = 0.0;
  AccuracyCriterion criterion = AccuracyCriterion::Average;
  std::uint64_t seed = 42;
  std::size_t init_retries = 1000;
  std::size_t restarts = 20;  // independent random starts for stage 1
};

struct SelectionStep {
  std::string stage;  // "greecomp" or "accucomp"
  std::size_t removed = 0;  // candidate indices (after sorting)
  std::size_t added = 0;
  double flops_avg_before = 0.0;
  double flops_avg_after = 0.0;
  double acc_before = 0.0;  // only meaningful for accucomp steps
  double acc_after = 0.0;
};

struct SelectionResult {
  std::vector<Candidate> candidates;  // sorted ascending by expected_flops
  std::vector<std::size_t> members;   // indices into candidates, ascending
  std::vector<SelectionStep> audit;
  double initial_avg_flops = 0.0;
  double avg_flops = 0.0;
  std::optional<double> accuracy;  // criterion value after stage 2, if run

  std::vector<Candidate> selected() const {
    std::vector<Candidate> out;
    for (auto i : members) out.push_back(candidates[i]);
    return out;
  }
};

// Returns the accuracy of a candidate, training it when needed.
using AccuracyFn = std::function<double(const Candidate&)>;

inline bool covers(const std::vector<Candidate>& cands, const std::vector<std::size_t>& members, std::size_t n_classes) {
  std::vector<bool> seen(n_classes, false);
  std::size_t count = 0;
  for (auto i : members) {
    for (int c : cands[i].combo) {
      if (c >= 0 && static_cast<std::size_t>(c) < n_classes && !seen[static_cast<std::size_t>(c)]) {
        seen[static_cast<std::size_t>(c)] = true;
        ++count;
      }
    }
  }
  return count == n_classes;
}

namespace detail {

inline double avg_flops(const std::vector<Candidate>& cands, const std::vector<std::size_t>& members) {
  double s = 0.0;
  for (auto i : members) s += cands[i].expected_flops;
  return s / static_cast<double>(members.size());
}

// Random covering start: shuffled candidates are taken whenever they add an
// uncovered class, the rest of the set is filled uniformly. Retries until the
// covering part fits in n.
inline std::vector<std::size_t> random_cover(const std::vector<Candidate>& cands, const GreedyOptions& opt, Rng& rng) {
  std::vector<std::size_t> order(cands.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t attempt = 0; attempt < opt.init_retries; ++attempt) {
    rng.shuffle(order);
    std::vector<bool> seen(opt.num_classes, false), used(cands.size(), false);
    std::size_t covered = 0;
    std::vector<std::size_t> members;
    for (auto i : order) {
      if (covered == opt.num_classes || members.size() > opt.n) break;
      bool adds = false;
      for (int c : cands[i].combo) {
        if (!seen[static_cast<std::size_t>(c)]) {
          seen[static_cast<std::size_t>(c)] = true;
          ++covered;
          adds = true;
        }
      }
      if (adds) {
        members.push_back(i);
        used[i] = true;
      }
    }
    if (covered != opt.num_classes || members.size() > opt.n) continue;
    for (auto i : order) {
      if (members.size() == opt.n) break;
      if (!used[i]) {
        members.push_back(i);
        used[i] = true;
      }
    }
    std::sort(members.begin(), members.end());
    return members;
  }
  throw Error(ErrorKind::CoverageInfeasible, "no covering set of " + std::to_string(opt.n) + " found in " +
                                                 std::to_string(opt.init_retries) + " draws");
}

// Stage 1 from one starting set: swap the most expensive member for the
// lightest strictly cheaper non-member that keeps coverage, until no swap
// lowers the average.
inline void greecomp(const std::vector<Candidate>& cands, const GreedyOptions& opt, std::vector<std::size_t>& members,
                     std::vector<SelectionStep>& audit) {
  const auto is_member = [&](std::size_t i) { return std::find(members.begin(), members.end(), i) != members.end(); };
  while (true) {
    const double before = avg_flops(cands, members);
    std::size_t worst_pos = 0;
    for (std::size_t p = 1; p < members.size(); ++p) {
      if (cands[members[p]].expected_flops > cands[members[worst_pos]].expected_flops) worst_pos = p;
    }
    const std::size_t worst = members[worst_pos];
    bool replaced = false;
    for (std::size_t i = 0; i < worst; ++i) {
      if (!(cands[i].expected_flops < cands[worst].expected_flops)) break;
      if (is_member(i)) continue;
      auto trial = members;
      trial[worst_pos] = i;
      if (covers(cands, trial, opt.num_classes)) {
        members = std::move(trial);
        replaced = true;
        audit.push_back({"greecomp", worst, i, before, avg_flops(cands, members), 0.0, 0.0});
        break;
      }
    }
    if (!replaced) return;
  }
}

}  // namespace detail

// Two-stage selection. Stage 1 runs greecomp from `restarts` random covering
// sets and keeps the cheapest outcome. Stage 2 (acc_thr > 0) swaps the least
// accurate member for the lightest candidate with higher accuracy that keeps
// coverage, until the criterion reaches acc_thr.
inline SelectionResult greedy_select(std::vector<Candidate> candidates, const GreedyOptions& opt,
                                     const AccuracyFn& accuracy_of = {}) {
  if (opt.n == 0 || opt.num_classes == 0) throw Error(ErrorKind::CoverageInfeasible, "n and N must be positive");
  std::size_t max_m = 0;
  for (auto& c : candidates) {
    c.combo = make_combo(c.combo);
    for (int cls : c.combo) {
      if (cls < 0 || static_cast<std::size_t>(cls) >= opt.num_classes) {
        throw Error(ErrorKind::UnknownClassIndex, "candidate " + combo_key(c.combo) + " names an unknown class");
      }
    }
    max_m = std::max(max_m, c.combo.size());
  }
  if (candidates.size() < opt.n || opt.n * max_m < opt.num_classes) {
    throw Error(ErrorKind::CoverageInfeasible, std::to_string(opt.n) + " contexts cannot cover " +
                                                   std::to_string(opt.num_classes) + " classes");
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const auto& a, const auto& b) { return a.expected_flops < b.expected_flops; });

  SelectionResult res;
  Rng rng(opt.seed);
  std::vector<std::size_t> members;
  double best_avg = std::numeric_limits<double>::infinity();
  for (std::size_t start = 0; start < std::max<std::size_t>(opt.restarts, 1); ++start) {
    auto trial_members = detail::random_cover(candidates, opt, rng);
    std::vector<SelectionStep> trial_audit;
    const double initial = detail::avg_flops(candidates, trial_members);
    detail::greecomp(candidates, opt, trial_members, trial_audit);
    const double avg = detail::avg_flops(candidates, trial_members);
    if (avg < best_avg) {
      best_avg = avg;
      members = std::move(trial_members);
      res.audit = std::move(trial_audit);
      res.initial_avg_flops = initial;
    }
  }

  const auto is_member = [&](std::size_t i) { return std::find(members.begin(), members.end(), i) != members.end(); };

  // Stage 2
  if (opt.acc_thr > 0.0) {
    std::vector<std::optional<double>> acc(candidates.size());
    const auto acc_at = [&](std::size_t i) -> double {
      if (!acc[i]) {
        if (candidates[i].accuracy) {
          acc[i] = candidates[i].accuracy;
        } else if (accuracy_of) {
          acc[i] = accuracy_of(candidates[i]);
        } else {
          throw Error(ErrorKind::Usage, "candidate " + combo_key(candidates[i].combo) + " has no accuracy");
        }
        candidates[i].accuracy = acc[i];
      }
      return *acc[i];
    };
    const auto criterion = [&] {
      double agg = opt.criterion == AccuracyCriterion::Minimum ? 1e300 : 0.0;
      for (auto i : members) {
        agg = opt.criterion == AccuracyCriterion::Minimum ? std::min(agg, acc_at(i)) : agg + acc_at(i);
      }
      return opt.criterion == AccuracyCriterion::Minimum ? agg : agg / static_cast<double>(members.size());
    };
    double current = criterion();
    while (current < opt.acc_thr) {
      std::size_t low_pos = 0;
      for (std::size_t p = 1; p < members.size(); ++p) {
        if (acc_at(members[p]) < acc_at(members[low_pos])) low_pos = p;
      }
      const std::size_t low = members[low_pos];
      const double acc_low = acc_at(low);
      bool replaced = false;
      for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (is_member(i)) continue;
        auto trial = members;
        trial[low_pos] = i;
        if (!covers(candidates, trial, opt.num_classes)) continue;
        if (acc_at(i) > acc_low) {
          const double fb = detail::avg_flops(candidates, members);
          members = std::move(trial);
          const double next = criterion();
          res.audit.push_back({"accucomp", low, i, fb, detail::avg_flops(candidates, members), current, next});
          current = next;
          replaced = true;
          break;
        }
      }
      if (!replaced) {
        throw Error(ErrorKind::ExhaustedCandidates,
                    "accuracy target " + format_double(opt.acc_thr) + " unreachable (best " + format_double(current) + ")");
      }
    }
    res.accuracy = current;
  }

  std::sort(members.begin(), members.end());
  res.members = std::move(members);
  res.avg_flops = detail::avg_flops(candidates, res.members);
  res.candidates = std::move(candidates);
  return res;
}

// The k most frequent contexts of a trace; ties go to the earlier first
// occurrence.
inline std::vector<Combo> topk_frequent(const std::vector<Combo>& trace, std::size_t k) {
  if (trace.empty()) throw Error(ErrorKind::EmptyTrace, "context trace is empty");
  std::map<Combo, std::pair<std::size_t, std::size_t>> stats;  // count, first position
  for (std::size_t i = 0; i < trace.size(); ++i) {
    auto [it, inserted] = stats.try_emplace(make_combo(trace[i]), 0, i);
    ++it->second.first;
  }
  std::vector<std::pair<Combo, std::pair<std::size_t, std::size_t>>> ranked(stats.begin(), stats.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second.first != b.second.first) return a.second.first > b.second.first;
    return a.second.second < b.second.second;
  });
  std::vector<Combo> out;
  for (std::size_t i = 0; i < ranked.size() && i < k; ++i) out.push_back(ranked[i].first);
  return out;
}

// Context changes per frame observed in a trace.
inline double context_change_rate(std::size_t changes, std::size_t frames) {
  if (frames == 0) throw Error(ErrorKind::EmptyTrace, "no frames");
  return static_cast<double>(changes) / static_cast<double>(frames);
}

enum class StorageMode { Cloud, Unattended };

struct StoredHead {
  std::size_t embedding_dim = 0;
  std::size_t hidden_dim = 64;
  std::size_t classes = 0;
  int bytes_per_weight = 4;
};

struct StorageModel {
  std::map<std::string, std::uint64_t> extractor_bytes;  // one extractor per config
  std::uint64_t all_class_bytes = 0;
};

inline std::uint64_t head_bytes(const StoredHead& h) {
  return static_cast<std::uint64_t>(head_param_count(h.embedding_dim, h.hidden_dim, h.classes)) *
         static_cast<std::uint64_t>(h.bytes_per_weight);
}

// Extractors are stored once per configuration; heads once per selected
// context; the all-class model only when running unattended.
inline std::uint64_t storage_footprint(std::span<const StoredHead> selected, const StorageModel& model,
                                       StorageMode mode) {
  std::uint64_t total = 0;
  for (const auto& [cfg, bytes] : model.extractor_bytes) total += bytes;
  for (const auto& h : selected) total += head_bytes(h);
  if (mode == StorageMode::Unattended) total += model.all_class_bytes;
  return total;
}

inline nlohmann::json selection_to_json(const SelectionResult& res, std::uint64_t storage_bytes) {
  nlohmann::json doc;
  doc["contexts"] = nlohmann::json::array();
  for (auto i : res.members) {
    const auto& c = res.candidates[i];
    nlohmann::json e{{"combo", c.combo}, {"config", c.config_id}, {"expected_flops_m", c.expected_flops}};
    e["accuracy"] = c.accuracy ? nlohmann::json(*c.accuracy) : nlohmann::json(nullptr);
    doc["contexts"].push_back(std::move(e));
  }
  doc["initial_avg_flops_m"] = res.initial_avg_flops;
  doc["avg_flops_m"] = res.avg_flops;
  doc["accuracy"] = res.accuracy ? nlohmann::json(*res.accuracy) : nlohmann::json(nullptr);
  doc["storage_bytes"] = storage_bytes;
  doc["audit"] = nlohmann::json::array();
  for (const auto& s : res.audit) {
    doc["audit"].push_back({{"stage", s.stage},
                            {"removed", res.candidates[s.removed].combo},
                            {"removed_config", res.candidates[s.removed].config_id},
                            {"added", res.candidates[s.added].combo},
                            {"added_config", res.candidates[s.added].config_id},
                            {"avg_flops_before", s.flops_avg_before},
                            {"avg_flops_after", s.flops_avg_after},
                            {"accuracy_before", s.acc_before},
                            {"accuracy_after", s.acc_after}});
  }
  return doc;
}

}  // namespace ctxswitch
