#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxswitch/common.hpp"
#include "ctxswitch/dataset.hpp"
#include "ctxswitch/heads.hpp"
#include "ctxswitch/predictor.hpp"
#include "ctxswitch/similarity.hpp"
#include "ctxswitch/switching.hpp"

namespace ctxswitch {

enum class SimMode { Cloud, Local };

inline const char* to_string(SimMode m) { return m == SimMode::Cloud ? "cloud" : "local"; }

struct SimConfig {
  SimMode mode = SimMode::Cloud;
  std::string device = "pi0";
  double data_rate_mbps = 3.0;
  std::size_t context_interval = 30;
  double theta = 0.5;
  std::vector<std::size_t> m_set = {2, 3, 4};
  std::size_t cache_capacity = kUnbounded;
  std::uint64_t frame_bytes = 30000;
  double cloud_ms = 0.0;
  std::size_t recency_capacity = 8;
  CompanionRule rule = CompanionRule::Recency;
  bool log_frames = true;
  std::uint64_t seed = 42;

  void validate() const {
    if (!(data_rate_mbps > 0.0)) throw Error(ErrorKind::Usage, "data rate must be positive");
    if (context_interval < 1) throw Error(ErrorKind::Usage, "context interval must be at least 1");
    if (m_set.empty()) throw Error(ErrorKind::Usage, "m_set is empty");
    if (cache_capacity == 0) throw Error(ErrorKind::Usage, "cache capacity must be at least 1");
    if (cloud_ms < 0.0) throw Error(ErrorKind::Usage, "cloud_ms must be non-negative");
  }
};

struct Frame {
  std::size_t row = 0;  // row in the trace's split, same for every config
  int true_class = 0;
};

struct FrameTrace {
  std::string split = "test";
  std::size_t m = 0;
  std::vector<Frame> frames;
  std::vector<Combo> contexts;
  std::vector<std::size_t> boundaries;  // first frame of each context

  std::size_t change_count() const { return contexts.empty() ? 0 : contexts.size() - 1; }
};

// Frames-to-changes relation: n = ceil(CCR * |TS|).
inline std::size_t context_changes_for(double ccr, std::size_t test_size) {
  if (!(ccr >= 0.0 && ccr <= 1.0)) throw Error(ErrorKind::RateOutOfRange, "CCR must be in [0, 1]");
  return static_cast<std::size_t>(std::ceil(ccr * static_cast<double>(test_size) - 1e-9));
}

// Random walk over m-class contexts where each step swaps exactly one class;
// each context lasts `interval` frames drawn uniformly from its classes'
// samples.
inline FrameTrace synthesize_sequence(const EmbeddingDataset& ds, std::size_t m, std::size_t n_changes,
                                      std::size_t interval, std::uint64_t seed, const std::string& split = "test") {
  const std::size_t n = ds.num_classes();
  if (m < 1 || m >= n) throw Error(ErrorKind::BadM, "context size must be in [1, N)");
  if (interval < 1) throw Error(ErrorKind::Usage, "interval must be at least 1");
  for (std::size_t c = 0; c < n; ++c) {
    if (ds.rows_of(split, static_cast<int>(c)).empty()) {
      throw Error(ErrorKind::InsufficientSamples, "class " + std::to_string(c) + " has no samples in split '" + split + "'");
    }
  }
  Rng rng(seed);
  std::vector<int> classes(n);
  std::iota(classes.begin(), classes.end(), 0);
  rng.shuffle(classes);
  Combo current(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(m));
  std::sort(current.begin(), current.end());

  FrameTrace trace;
  trace.split = split;
  trace.m = m;
  for (std::size_t step = 0; step <= n_changes; ++step) {
    if (step > 0) {
      std::vector<int> outside;
      for (std::size_t c = 0; c < n; ++c) {
        if (!combo_contains(current, static_cast<int>(c))) outside.push_back(static_cast<int>(c));
      }
      current[rng.below(m)] = outside[rng.below(outside.size())];
      std::sort(current.begin(), current.end());
    }
    trace.contexts.push_back(current);
    trace.boundaries.push_back(trace.frames.size());
    std::vector<std::size_t> pool;
    for (int c : current) {
      const auto& rows = ds.rows_of(split, c);
      pool.insert(pool.end(), rows.begin(), rows.end());
    }
    const auto& labels = ds.matrix(ds.manifest().configs.front().id, split).labels;
    for (std::size_t f = 0; f < interval; ++f) {
      const std::size_t r = pool[rng.below(pool.size())];
      trace.frames.push_back({r, labels[r]});
    }
  }
  return trace;
}

// Everything the device and cloud run during a simulation.
struct SimSystem {
  const EmbeddingDataset* dataset = nullptr;
  SimilarityMatrix similarity;
  std::map<std::size_t, ConfigPredictor> predictors;
  AllClassModel all_class;
  HeadSource* heads = nullptr;
  std::vector<InstalledContext> installed;  // local mode
};

inline std::int64_t ms_to_ns(double ms) { return static_cast<std::int64_t>(std::llround(ms * 1.0e6)); }

inline double transmission_ms(std::uint64_t bytes, double rate_mbps) {
  if (!(rate_mbps > 0.0)) throw Error(ErrorKind::Usage, "data rate must be positive");
  return static_cast<double>(bytes) * 8.0 / (rate_mbps * 1.0e6) * 1000.0;
}

inline std::int64_t transmission_ns(std::uint64_t bytes, double rate_mbps) {
  if (!(rate_mbps > 0.0)) throw Error(ErrorKind::Usage, "data rate must be positive");
  return static_cast<std::int64_t>(std::llround(static_cast<double>(bytes) * 8000.0 / rate_mbps));
}

struct FrameRecord {
  std::size_t index = 0;
  int true_class = 0;
  std::string context;  // combo key at the time of the frame
  std::string config_id;
  bool in_context = false;
  bool triggered = false;
  bool switched = false;
  int emitted = 0;
  bool correct = false;
  std::int64_t device_ns = 0;
  std::int64_t uplink_ns = 0;
  std::int64_t download_ns = 0;
  std::int64_t all_class_ns = 0;
  double device_flops_m = 0.0;

  std::int64_t total_ns() const { return device_ns + uplink_ns + download_ns + all_class_ns; }
};

struct LatencyBreakdown {
  std::int64_t device_inference_ns = 0;
  std::int64_t uplink_ns = 0;
  std::int64_t head_download_ns = 0;
  std::int64_t all_class_ns = 0;

  std::int64_t total() const { return device_inference_ns + uplink_ns + head_download_ns + all_class_ns; }
};

struct SimulationReport {
  SimMode mode = SimMode::Cloud;
  std::string device;
  std::size_t interval = 0;
  std::size_t frames = 0;
  double accuracy = 0.0;
  double avg_latency_ms = 0.0;
  std::int64_t total_latency_ns = 0;
  LatencyBreakdown breakdown;
  std::size_t trigger_count = 0;
  std::size_t switch_count = 0;
  std::size_t fp_count = 0;
  std::size_t fn_count = 0;
  std::size_t in_context_frames = 0;
  std::size_t out_context_frames = 0;
  std::size_t head_downloads = 0;
  double avg_device_flops_m = 0.0;
  double all_class_flops_m = 0.0;
  double all_class_latency_ms = 0.0;
  double all_class_accuracy = 0.0;
  double speedup_vs_allclass = 0.0;
  std::vector<Combo> context_log;  // every context instantiated, in order
  std::vector<FrameRecord> frame_log;
  bool frame_log_enabled = false;
};

// Replays a trace through detector, all-class model and switching policy.
inline SimulationReport run(const SimConfig& sim, const FrameTrace& trace, SimSystem& system) {
  sim.validate();
  if (!system.dataset || !system.heads) throw Error(ErrorKind::Usage, "simulation system is incomplete");
  const EmbeddingDataset& ds = *system.dataset;
  const Manifest& manifest = ds.manifest();
  if (trace.frames.empty() || trace.contexts.empty()) throw Error(ErrorKind::EmptyTrace, "trace has no frames");

  SwitchState state;
  state.m_set = sim.m_set;
  state.recency_capacity = sim.recency_capacity;
  state.rule = sim.rule;
  state.cache = LfuCache<HeadKey, HeadPtr>(sim.cache_capacity);

  SimulationReport rep;
  rep.mode = sim.mode;
  rep.device = sim.device;
  rep.interval = sim.context_interval;
  rep.frame_log_enabled = sim.log_frames;
  rep.all_class_flops_m = system.all_class.flops_m;
  const auto& all_cfg = manifest.config(system.all_class.config_id());
  const std::int64_t all_class_device_ns = ms_to_ns(all_cfg.latency_ms(sim.device));
  rep.all_class_latency_ms = all_cfg.latency_ms(sim.device);

  // Cold start: the first context's heads are already on the device.
  {
    const Combo& first = trace.contexts.front();
    ActiveContext ctx;
    if (sim.mode == SimMode::Local) {
      const auto& ic = best_installed(first, -1, system.installed);
      ctx = {ic.combo, ic.config_id, system.heads->fetch(ic.combo, ic.config_id)};
    } else {
      auto pit = system.predictors.find(first.size());
      const std::string cfg = pit != system.predictors.end()
                                  ? pit->second.predict(context_representation(system.similarity, first))
                                  : manifest.reference();
      auto lookup = state.cache.get_or_admit(HeadKey{first, cfg}, [&] { return system.heads->fetch(first, cfg); });
      ctx = {first, cfg, lookup.value};
    }
    state.current = std::move(ctx);
    for (auto it = state.current.combo.rbegin(); it != state.current.combo.rend(); ++it) state.observe(*it);
    rep.context_log.push_back(state.current.combo);
  }

  const std::int64_t uplink_ns = transmission_ns(sim.frame_bytes, sim.data_rate_mbps);
  const std::int64_t cloud_ns = ms_to_ns(sim.cloud_ms);
  std::size_t correct = 0, all_class_correct = 0;
  double device_flops = 0.0;

  for (std::size_t i = 0; i < trace.frames.size(); ++i) {
    const Frame& fr = trace.frames[i];
    FrameRecord rec;
    try {
      rec.index = i;
      rec.true_class = fr.true_class;
      rec.context = combo_key(state.current.combo);
      rec.config_id = state.current.config_id;
      rec.in_context = combo_contains(state.current.combo, fr.true_class);

      const auto& cfg = manifest.config(state.current.config_id);
      const auto emb = ds.matrix(cfg.id, trace.split).row(fr.row);
      const auto outcome = predict(*state.current.heads, emb);
      rec.device_ns = ms_to_ns(cfg.latency_ms(sim.device));
      rec.device_flops_m = cfg.flops_m;
      rec.triggered = outcome.change_score > sim.theta;

      const auto all_emb = ds.matrix(all_cfg.id, trace.split).row(fr.row);
      const int all_label = identify_class(system.all_class, all_emb);
      all_class_correct += all_label == fr.true_class ? 1 : 0;

      if (rec.triggered) {
        if (sim.mode == SimMode::Cloud) {
          rec.uplink_ns = uplink_ns;
          rec.all_class_ns = cloud_ns;
        } else {
          rec.all_class_ns = all_class_device_ns;
          rec.device_flops_m += system.all_class.flops_m;
        }
        rec.emitted = all_label;
        if (!combo_contains(state.current.combo, all_label)) {
          if (sim.mode == SimMode::Cloud) {
            auto sw = hybrid_switch(state, all_label, system.predictors, system.similarity, manifest, *system.heads);
            if (!sw.cache_hit) {
              rec.download_ns = transmission_ns(sw.download_bytes, sim.data_rate_mbps);
              ++rep.head_downloads;
            }
          } else {
            const auto desired = choose_context(state, all_label, system.predictors, system.similarity, manifest);
            const auto& ic = best_installed(desired.combo, all_label, system.installed);
            state.current = {ic.combo, ic.config_id, system.heads->fetch(ic.combo, ic.config_id)};
            state.observe(all_label);
          }
          rec.switched = true;
          ++rep.switch_count;
          rep.context_log.push_back(state.current.combo);
        }
      } else {
        rec.emitted = outcome.predicted_class;
      }
    } catch (const Error& e) {
      throw Error(e.kind(), "frame " + std::to_string(i) + ": " + e.what());
    }
    state.observe(rec.emitted);
    rec.correct = rec.emitted == fr.true_class;
    correct += rec.correct ? 1 : 0;
    rep.trigger_count += rec.triggered ? 1 : 0;
    if (rec.in_context) {
      ++rep.in_context_frames;
      rep.fp_count += rec.triggered ? 1 : 0;
    } else {
      ++rep.out_context_frames;
      rep.fn_count += rec.triggered ? 0 : 1;
    }
    rep.breakdown.device_inference_ns += rec.device_ns;
    rep.breakdown.uplink_ns += rec.uplink_ns;
    rep.breakdown.head_download_ns += rec.download_ns;
    rep.breakdown.all_class_ns += rec.all_class_ns;
    rep.total_latency_ns += rec.total_ns();
    device_flops += rec.device_flops_m;
    if (sim.log_frames) rep.frame_log.push_back(std::move(rec));
  }

  const auto n = static_cast<double>(trace.frames.size());
  rep.frames = trace.frames.size();
  rep.accuracy = static_cast<double>(correct) / n;
  rep.all_class_accuracy = static_cast<double>(all_class_correct) / n;
  rep.avg_latency_ms = static_cast<double>(rep.total_latency_ns) / n / 1.0e6;
  rep.avg_device_flops_m = device_flops / n;
  rep.speedup_vs_allclass = rep.avg_latency_ms > 0.0 ? rep.all_class_latency_ms / rep.avg_latency_ms : 0.0;
  return rep;
}

struct OnlineRates {
  double fp_rate = 0.0;
  double fn_rate = 0.0;
};

// FP: triggers among in-context frames. FN: missed triggers among
// out-of-context frames. Empty denominators give 0.
inline OnlineRates measure_fpfn_online(const SimulationReport& rep) {
  if (!rep.frame_log_enabled) throw Error(ErrorKind::LogDisabled, "per-frame log was not recorded");
  std::size_t in = 0, out = 0, fp = 0, fn = 0;
  for (const auto& f : rep.frame_log) {
    if (f.in_context) {
      ++in;
      fp += f.triggered ? 1 : 0;
    } else {
      ++out;
      fn += f.triggered ? 0 : 1;
    }
  }
  return {in ? static_cast<double>(fp) / static_cast<double>(in) : 0.0,
          out ? static_cast<double>(fn) / static_cast<double>(out) : 0.0};
}

inline nlohmann::json report_to_json(const SimulationReport& r) {
  nlohmann::json doc;
  doc["mode"] = to_string(r.mode);
  doc["device"] = r.device;
  doc["interval"] = r.interval;
  doc["frames"] = r.frames;
  doc["accuracy"] = r.accuracy;
  doc["avg_latency_ms"] = r.avg_latency_ms;
  doc["total_latency_ns"] = r.total_latency_ns;
  doc["breakdown_ns"] = {{"device_inference", r.breakdown.device_inference_ns},
                         {"uplink", r.breakdown.uplink_ns},
                         {"head_download", r.breakdown.head_download_ns},
                         {"all_class", r.breakdown.all_class_ns}};
  doc["trigger_count"] = r.trigger_count;
  doc["switch_count"] = r.switch_count;
  doc["fp_count"] = r.fp_count;
  doc["fn_count"] = r.fn_count;
  doc["in_context_frames"] = r.in_context_frames;
  doc["out_context_frames"] = r.out_context_frames;
  doc["head_downloads"] = r.head_downloads;
  doc["avg_device_flops_m"] = r.avg_device_flops_m;
  doc["all_class_flops_m"] = r.all_class_flops_m;
  doc["all_class_latency_ms"] = r.all_class_latency_ms;
  doc["all_class_accuracy"] = r.all_class_accuracy;
  doc["speedup_vs_allclass"] = r.speedup_vs_allclass;
  doc["context_log"] = r.context_log;
  return doc;
}

inline constexpr const char* kReportCsvHeader = "mode,device,interval,acc,avg_ms,speedup,triggers,switches,fp,fn";

inline void write_report_csv_row(std::ostream& out, const SimulationReport& r) {
  out << to_string(r.mode) << ',' << r.device << ',' << r.interval << ',' << format_double(r.accuracy) << ','
      << format_double(r.avg_latency_ms) << ',' << format_double(r.speedup_vs_allclass) << ',' << r.trigger_count
      << ',' << r.switch_count << ',' << r.fp_count << ',' << r.fn_count << '\n';
}

inline void write_frames_csv(std::ostream& out, const SimulationReport& r) {
  if (!r.frame_log_enabled) throw Error(ErrorKind::LogDisabled, "per-frame log was not recorded");
  out << "frame,true_class,context,config,in_context,triggered,switched,emitted,correct,device_ns,uplink_ns,"
         "download_ns,all_class_ns\n";
  for (const auto& f : r.frame_log) {
    out << f.index << ',' << f.true_class << ',' << f.context << ',' << f.config_id << ',' << f.in_context << ','
        << f.triggered << ',' << f.switched << ',' << f.emitted << ',' << f.correct << ',' << f.device_ns << ','
        << f.uplink_ns << ',' << f.download_ns << ',' << f.all_class_ns << '\n';
  }
}

}  // namespace ctxswitch
