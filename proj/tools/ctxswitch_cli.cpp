#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "ctxswitch/ctxswitch.hpp"

namespace fs = std::filesystem;
using namespace ctxswitch;

namespace {

std::uint64_t default_seed() {
  if (const char* env = std::getenv("CTXSWITCH_SEED")) {
    return static_cast<std::uint64_t>(parse_int(env));
  }
  return 42;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::MissingFile, "cannot write " + path.string());
  out << text;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::MissingFile, path.string() + " not found");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::SchemaViolation, path.string() + ": " + e.what());
  }
}

// Class names or indices to a combo.
Combo parse_classes(const Manifest& m, const std::string& text) {
  std::vector<int> out;
  for (const auto& tok : split_list(text)) {
    const bool numeric = tok.find_first_not_of("0123456789") == std::string::npos;
    if (numeric) {
      const auto idx = parse_int(tok);
      if (idx < 0 || static_cast<std::size_t>(idx) >= m.num_classes()) {
        throw Error(ErrorKind::UnknownClassIndex, "class index " + tok + " out of range");
      }
      out.push_back(static_cast<int>(idx));
    } else {
      out.push_back(m.class_index(tok));
    }
  }
  return make_combo(out);
}

struct HyperFlags {
  HeadHyperparams hp;

  void attach(CLI::App* sub) {
    sub->add_option("--hidden", hp.hidden_dim, "Hidden units per head");
    sub->add_option("--epochs", hp.epochs, "Training epochs");
    sub->add_option("--batch", hp.batch_size, "Mini-batch size");
    sub->add_option("--lr", hp.learning_rate, "SGD learning rate");
    sub->add_option("--momentum", hp.momentum, "SGD momentum");
    sub->add_option("--neg-ratio", hp.negative_ratio, "Negatives per positive for the change head");
  }
};

struct Common {
  std::uint64_t seed = default_seed();
  std::size_t jobs = 1;
  std::string out = ".";
};

struct SampleFlags {
  std::size_t m = 3;
  std::string acc_thr = "median";
  std::string sample = "sd";
  double fraction = 0.33;
};

// "median" leaves the threshold to the trained accuracies.
std::optional<double> parse_acc_thr(const std::string& text) {
  if (text == "median") return std::nullopt;
  double v = 0.0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size() || !(v > 0.0 && v <= 1.0)) {
    throw Error(ErrorKind::Usage, "--acc-thr must be median or a number in (0, 1]");
  }
  return v;
}

std::vector<Combo> sample_combos(const EmbeddingDataset& ds, const SimilarityMatrix& s, const SampleFlags& f,
                                 std::uint64_t seed) {
  const auto all = enumerate_combinations(ds.num_classes(), f.m);
  if (f.sample == "all") return all;
  const auto sd = sd_sample(all, s, f.fraction, seed);
  if (f.sample == "sd") return sd;
  if (f.sample == "random") return random_sample(all, sd.size(), seed);
  throw Error(ErrorKind::Usage, "--sample must be all, sd or random");
}

int cmd_ingest(const std::string& manifest_path, const std::string& similarity_out) {
  const auto ds = load_dataset(fs::path(manifest_path));
  const auto& m = ds.manifest();
  if (!similarity_out.empty()) {
    std::ostringstream csv;
    write_similarity_csv(csv, similarity_matrix(ds), m.classes);
    write_text(similarity_out, csv.str());
  }
  std::cout << "ingest ok: " << m.dataset_name << ", " << m.num_classes() << " classes, " << m.configs.size()
            << " configs";
  for (const auto& [split, ids] : m.splits) std::cout << ", " << split << "=" << ids.size();
  std::cout << '\n';
  return 0;
}

struct SynthFlags {
  std::size_t classes = 10;
  std::size_t dim = 16;
  double spread = 1.0;
  std::string layout = "graded";
  double base = 1.5;
  double step = 0.6;
  std::size_t train = 40;
  std::size_t val = 20;
  std::size_t test = 20;
  std::string configs = "50:1.2,100:0.8,200:0.4,400:0";
  std::string name = "synthetic";
};

int cmd_synth(const SynthFlags& f, const Common& c) {
  SyntheticSpec spec;
  spec.n_classes = f.classes;
  spec.dim = f.dim;
  spec.cluster_spread = f.spread;
  spec.samples_per_class = f.train;
  spec.val_per_class = f.val;
  spec.test_per_class = f.test;
  spec.seed = c.seed;
  spec.dataset_name = f.name;
  spec.center_distances.assign(f.classes, std::vector<double>(f.classes, 0.0));
  for (std::size_t i = 0; i < f.classes; ++i) {
    for (std::size_t j = 0; j < f.classes; ++j) {
      if (i == j) continue;
      const double gap = std::abs(static_cast<double>(i) - static_cast<double>(j));
      if (f.layout == "graded") {
        spec.center_distances[i][j] = f.base + f.step * gap;
      } else if (f.layout == "uniform") {
        spec.center_distances[i][j] = f.base;
      } else {
        throw Error(ErrorKind::Usage, "--layout must be graded or uniform");
      }
    }
  }
  for (const auto& item : split_list(f.configs)) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw Error(ErrorKind::Usage, "--configs entries are flops:noise, got " + item);
    spec.configs.push_back({parse_double(item.substr(0, colon)), parse_double(item.substr(colon + 1))});
  }
  const auto ds = synthesize_gaussian_dataset(spec);
  write_dataset(ds, c.out);
  std::cout << "synth ok: " << (fs::path(c.out) / "manifest.json").string() << ", " << f.classes << " classes, "
            << spec.configs.size() << " configs\n";
  return 0;
}

int cmd_oracle(const std::string& manifest_path, const SampleFlags& f, const HyperFlags& h, const Common& c,
               const std::string& output) {
  const auto ds = load_dataset(fs::path(manifest_path));
  const auto s = similarity_matrix(ds);
  const auto combos = sample_combos(ds, s, f, c.seed);
  const auto configs = ds.manifest().configs_by_flops();
  auto hp = h.hp;
  hp.seed = c.seed;
  std::vector<std::vector<std::pair<std::string, double>>> tables(combos.size());
  parallel_for(combos.size(), c.jobs, [&](std::size_t i) { tables[i] = config_accuracies(ds, combos[i], configs, hp); });
  const auto thr = parse_acc_thr(f.acc_thr);
  const double acc_thr = thr ? *thr : median_accuracy(tables);
  std::vector<OracleResult> results(combos.size());
  for (std::size_t i = 0; i < combos.size(); ++i) results[i] = select_oracle(tables[i], acc_thr);
  std::ostringstream csv;
  csv << "combo,mean_sim,std_sim";
  for (const auto& cfg : configs) csv << ',' << cfg.id;
  csv << ",oracle,unmet\n";
  std::size_t unmet = 0;
  for (std::size_t i = 0; i < combos.size(); ++i) {
    const auto rep = context_representation(s, combos[i]);
    csv << combo_key(combos[i]) << ',' << format_double(rep.mean_sim) << ',' << format_double(rep.std_sim);
    for (const auto& [id, acc] : results[i].accuracies) csv << ',' << format_double(acc);
    csv << ',' << results[i].config_id << ',' << (results[i].unmet ? 1 : 0) << '\n';
    unmet += results[i].unmet ? 1 : 0;
  }
  const fs::path path = fs::path(c.out) / output;
  write_text(path, csv.str());
  std::cout << "oracle ok: " << combos.size() << " combos, acc-thr " << format_double(acc_thr) << ", " << unmet
            << " unmet, " << path.string() << '\n';
  return 0;
}

int cmd_build_knn(const std::string& manifest_path, const SampleFlags& f, const HyperFlags& h, const Common& c,
                  std::size_t k_start, bool normalize, const std::string& output) {
  const auto ds = load_dataset(fs::path(manifest_path));
  const auto s = similarity_matrix(ds);
  const auto combos = sample_combos(ds, s, f, c.seed);
  auto hp = h.hp;
  hp.seed = c.seed;
  auto p = build_predictor(ds, s, combos, ds.manifest().configs, parse_acc_thr(f.acc_thr), hp, c.jobs, k_start);
  if (normalize) p.normalize_features();
  const fs::path path = fs::path(c.out) / output;
  write_text(path, predictor_to_json(p).dump(2) + "\n");
  std::cout << "build-knn ok: m=" << f.m << ", " << p.points().size() << " points, " << path.string() << '\n';
  return 0;
}

std::map<std::size_t, ConfigPredictor> load_predictors(const std::vector<std::string>& paths) {
  std::map<std::size_t, ConfigPredictor> out;
  for (const auto& path : paths) {
    auto p = predictor_from_json(read_json(path));
    const std::size_t m = p.context_size();
    if (m == 0) throw Error(ErrorKind::SchemaViolation, path + " has no points");
    if (!out.emplace(m, std::move(p)).second) {
      throw Error(ErrorKind::Usage, "two --knn files for context size " + std::to_string(m));
    }
  }
  return out;
}

int cmd_predict(const std::string& manifest_path, const std::vector<std::string>& knn, const std::string& classes) {
  const auto ds = load_dataset(fs::path(manifest_path));
  const auto combo = parse_classes(ds.manifest(), classes);
  const auto predictors = load_predictors(knn);
  auto it = predictors.find(combo.size());
  if (it == predictors.end()) {
    throw Error(ErrorKind::PredictorError, "no --knn file for context size " + std::to_string(combo.size()));
  }
  const auto s = similarity_matrix(ds);
  std::cout << predict_config(it->second, context_representation(s, combo)) << '\n';
  return 0;
}

struct SimFlags {
  std::string mode = "cloud";
  std::string device = "pi0";
  double rate = 3.0;
  std::size_t interval = 30;
  double theta = 0.5;
  std::string m_set = "2,3,4";
  std::size_t cache_capacity = 0;
  std::uint64_t frame_bytes = 30000;
  double cloud_ms = 0.0;
  std::size_t recency = 8;
  std::string rule = "recency";
  std::string all_class_config;
  std::size_t changes = 0;
  bool no_frames = false;

  SimConfig config(std::uint64_t seed) const {
    SimConfig sim;
    if (mode == "cloud") {
      sim.mode = SimMode::Cloud;
    } else if (mode == "local") {
      sim.mode = SimMode::Local;
    } else {
      throw Error(ErrorKind::Usage, "--mode must be cloud or local");
    }
    sim.device = device;
    sim.data_rate_mbps = rate;
    sim.context_interval = interval;
    sim.theta = theta;
    sim.m_set.clear();
    for (const auto& tok : split_list(m_set)) sim.m_set.push_back(static_cast<std::size_t>(parse_int(tok)));
    sim.cache_capacity = cache_capacity == 0 ? kUnbounded : cache_capacity;
    sim.frame_bytes = frame_bytes;
    sim.cloud_ms = cloud_ms;
    sim.recency_capacity = recency;
    if (rule == "recency") {
      sim.rule = CompanionRule::Recency;
    } else if (rule == "farthest") {
      sim.rule = CompanionRule::Farthest;
    } else {
      throw Error(ErrorKind::Usage, "--rule must be recency or farthest");
    }
    sim.log_frames = !no_frames;
    sim.seed = seed;
    sim.validate();
    return sim;
  }
};

// Context size of the synthesized walk: three classes, fewer on tiny datasets.
std::size_t walk_size(std::size_t n_classes) {
  if (n_classes < 3) throw Error(ErrorKind::BadM, "a context walk needs at least 3 classes");
  return std::min<std::size_t>(3, n_classes - 1);
}

struct SelectFlags {
  std::string mode = "greedy";
  std::size_t n = 0;
  double budget_mb = 0.0;
  std::size_t m = 3;
  double acc_thr = 0.0;
  std::string criterion = "average";
  bool save_heads = false;
};

int cmd_select(const std::string& manifest_path, const std::vector<std::string>& knn, const SelectFlags& f,
               const SimFlags& sf, const HyperFlags& h, const Common& c) {
  const auto ds = load_dataset(fs::path(manifest_path));
  const auto& manifest = ds.manifest();
  const auto s = similarity_matrix(ds);
  const auto predictors = load_predictors(knn);
  auto hp = h.hp;
  hp.seed = c.seed;
  TrainingHeadSource trainer(ds, hp);
  const std::string all_cfg = sf.all_class_config.empty() ? manifest.reference() : sf.all_class_config;
  const auto& all_desc = manifest.config(all_cfg);
  const std::size_t dim_of_all = all_desc.embedding_dim;

  std::vector<Candidate> candidates;
  if (f.mode == "greedy") {
    auto it = predictors.find(f.m);
    if (it == predictors.end()) throw Error(ErrorKind::PredictorError, "no --knn file for m=" + std::to_string(f.m));
    const auto combos = enumerate_combinations(ds.num_classes(), f.m);
    candidates.resize(combos.size());
    const double ccr = 1.0 / static_cast<double>(sf.interval);
    std::vector<HeadPtr> heads(combos.size());
    for (std::size_t i = 0; i < combos.size(); ++i) {
      candidates[i].combo = combos[i];
      candidates[i].config_id = it->second.predict(context_representation(s, combos[i]));
    }
    parallel_for(combos.size(), c.jobs, [&](std::size_t i) {
      auto mc = train_heads(ds, candidates[i].config_id, combos[i], hp);
      const auto rates = evaluate_fpfn(mc, ds, "val", sf.theta);
      candidates[i].expected_flops = expected_flops(manifest.config(candidates[i].config_id).flops_m,
                                                    all_desc.flops_m, ccr, rates.fp_rate, rates.fn_rate);
      candidates[i].accuracy = mc.val_accuracy;
    });
  } else if (f.mode == "topk") {
    // Frequencies come from running the cloud policy over the train split.
    auto sim = sf.config(c.seed);
    sim.mode = SimMode::Cloud;
    sim.log_frames = false;
    const std::size_t wm = walk_size(ds.num_classes());
    const std::size_t changes =
        sf.changes ? sf.changes
                   : context_changes_for(1.0 / static_cast<double>(sf.interval), ds.split_size("train"));
    const auto trace = synthesize_sequence(ds, wm, changes, sf.interval, c.seed, "train");
    SimSystem system;
    system.dataset = &ds;
    system.similarity = s;
    system.predictors = predictors;
    system.all_class = train_all_class_model(ds, all_cfg, hp);
    system.heads = &trainer;
    const auto rep = run(sim, trace, system);
    std::map<Combo, std::string> config_of;
    for (const auto& combo : rep.context_log) {
      auto pit = predictors.find(combo.size());
      config_of[combo] = pit != predictors.end() ? pit->second.predict(context_representation(s, combo))
                                                 : manifest.reference();
    }
    const auto top = topk_frequent(rep.context_log, f.n ? f.n : rep.context_log.size());
    for (const auto& combo : top) {
      Candidate cand{combo, config_of[combo], manifest.config(config_of[combo]).flops_m, std::nullopt};
      cand.accuracy = trainer.fetch(combo, cand.config_id)->val_accuracy;
      candidates.push_back(std::move(cand));
    }
  } else {
    throw Error(ErrorKind::Usage, "--mode must be greedy or topk");
  }

  const auto head_size = [&](const Candidate& cand) {
    return head_bytes({manifest.config(cand.config_id).embedding_dim, hp.hidden_dim, cand.combo.size(),
                       manifest.config(cand.config_id).param_bytes_per_weight});
  };
  const std::uint64_t all_class_bytes = head_bytes({dim_of_all, hp.hidden_dim, ds.num_classes(),
                                                    all_desc.param_bytes_per_weight});

  std::size_t n = f.n;
  if (f.budget_mb > 0.0) {
    // Largest set whose worst-case footprint fits: every config's extractor,
    // the all-class model, and n of the largest heads.
    const auto budget = static_cast<std::uint64_t>(f.budget_mb * 1.0e6);
    std::uint64_t fixed = all_class_bytes;
    for (const auto& cfg : manifest.configs) fixed += cfg.extractor_bytes;
    std::uint64_t largest = 0;
    for (const auto& cand : candidates) largest = std::max(largest, head_size(cand));
    const std::size_t fit = budget > fixed && largest > 0 ? static_cast<std::size_t>((budget - fixed) / largest) : 0;
    n = n ? std::min(n, fit) : fit;
    if (n == 0) throw Error(ErrorKind::CoverageInfeasible, "storage budget leaves room for no heads");
  }

  SelectionResult res;
  if (f.mode == "greedy") {
    if (n == 0) throw Error(ErrorKind::Usage, "--n or --budget-mb is required for greedy selection");
    GreedyOptions opt;
    opt.n = n;
    opt.num_classes = ds.num_classes();
    opt.acc_thr = f.acc_thr;
    opt.seed = c.seed;
    if (f.criterion == "minimum") {
      opt.criterion = AccuracyCriterion::Minimum;
    } else if (f.criterion != "average") {
      throw Error(ErrorKind::Usage, "--criterion must be average or minimum");
    }
    res = greedy_select(candidates, opt);
  } else {
    if (n && candidates.size() > n) candidates.resize(n);
    res.candidates = candidates;
    res.members.resize(candidates.size());
    std::iota(res.members.begin(), res.members.end(), 0);
    double sum = 0.0;
    for (const auto& cand : candidates) sum += cand.expected_flops;
    res.avg_flops = res.initial_avg_flops = candidates.empty() ? 0.0 : sum / static_cast<double>(candidates.size());
  }

  StorageModel storage;
  storage.all_class_bytes = all_class_bytes;
  storage.extractor_bytes[all_cfg] = all_desc.extractor_bytes;
  std::vector<StoredHead> stored;
  for (const auto& cand : res.selected()) {
    const auto& cfg = manifest.config(cand.config_id);
    storage.extractor_bytes[cfg.id] = cfg.extractor_bytes;
    stored.push_back({cfg.embedding_dim, hp.hidden_dim, cand.combo.size(), cfg.param_bytes_per_weight});
  }
  const auto bytes = storage_footprint(stored, storage, StorageMode::Unattended);
  auto doc = selection_to_json(res, bytes);
  doc["mode"] = f.mode;
  doc["all_class_config"] = all_cfg;
  const fs::path path = fs::path(c.out) / "selection.json";
  write_text(path, doc.dump(2) + "\n");
  if (f.save_heads) {
    for (const auto& cand : res.selected()) {
      save_heads(checkpoint_path(c.out, cand.config_id, cand.combo), *trainer.fetch(cand.combo, cand.config_id));
    }
  }
  std::cout << "select ok: " << res.members.size() << " contexts, avg " << format_double(res.avg_flops)
            << " MFLOPs, " << bytes << " bytes, " << path.string() << '\n';
  return 0;
}

int cmd_simulate(const std::string& manifest_path, const std::vector<std::string>& knn, const std::string& selection,
                 const std::string& heads_dir, const SimFlags& sf, const HyperFlags& h, const Common& c) {
  const auto ds = load_dataset(fs::path(manifest_path));
  const auto& manifest = ds.manifest();
  const auto sim = sf.config(c.seed);
  auto hp = h.hp;
  hp.seed = c.seed;

  SimSystem system;
  system.dataset = &ds;
  system.similarity = similarity_matrix(ds);
  system.predictors = load_predictors(knn);
  const std::string all_cfg = sf.all_class_config.empty() ? manifest.reference() : sf.all_class_config;
  system.all_class = train_all_class_model(ds, all_cfg, hp);
  TrainingHeadSource trainer(ds, hp);
  InstalledHeadSource store;
  system.heads = &trainer;
  if (sim.mode == SimMode::Local) {
    if (selection.empty()) throw Error(ErrorKind::Usage, "--selection is required in local mode");
    const auto doc = read_json(selection);
    if (!doc.contains("contexts") || !doc["contexts"].is_array()) {
      throw Error(ErrorKind::SchemaViolation, selection + ": contexts must be an array");
    }
    if (!heads_dir.empty()) store.load_directory(heads_dir);
    for (const auto& e : doc["contexts"]) {
      const Combo combo = make_combo(e.at("combo").get<std::vector<int>>());
      const std::string cfg = e.at("config").get<std::string>();
      system.installed.push_back({combo, cfg, manifest.config(cfg).flops_m});
      if (heads_dir.empty()) store.install(trainer.fetch(combo, cfg));
    }
    system.heads = &store;
  }

  const std::size_t changes =
      sf.changes ? sf.changes : context_changes_for(1.0 / static_cast<double>(sf.interval), ds.split_size("test"));
  const auto trace = synthesize_sequence(ds, walk_size(ds.num_classes()), changes, sf.interval, c.seed);
  const auto rep = run(sim, trace, system);

  const fs::path out(c.out);
  auto doc = report_to_json(rep);
  doc["seed"] = c.seed;
  doc["context_changes"] = changes;
  write_text(out / "report.json", doc.dump(2) + "\n");
  std::ostringstream csv;
  csv << kReportCsvHeader << '\n';
  write_report_csv_row(csv, rep);
  write_text(out / "report.csv", csv.str());
  if (rep.frame_log_enabled) {
    std::ostringstream frames;
    write_frames_csv(frames, rep);
    write_text(out / "frames.csv", frames.str());
  }
  std::cout << "simulate ok: acc " << format_double(rep.accuracy) << ", avg " << format_double(rep.avg_latency_ms)
            << " ms, speedup " << format_double(rep.speedup_vs_allclass) << "x, " << (out / "report.json").string()
            << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-aware micro-classifier switching toolkit"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  Common common;
  const auto add_common = [&](CLI::App* sub, bool jobs) {
    sub->add_option("--seed", common.seed, "Random seed (env CTXSWITCH_SEED overrides the default)");
    sub->add_option("--out", common.out, "Output directory");
    if (jobs) sub->add_option("--jobs", common.jobs, "Parallel training jobs")->check(CLI::PositiveNumber);
  };

  std::string manifest;
  std::string similarity_out;
  auto* ingest = app.add_subcommand("ingest", "Validate a dataset manifest and its embeddings");
  ingest->add_option("--manifest", manifest, "Path to manifest.json")->required();
  ingest->add_option("--similarity", similarity_out, "Also write the class similarity matrix CSV here");

  SynthFlags synth_flags;
  auto* synth = app.add_subcommand("synth", "Write a synthetic Gaussian-cluster dataset");
  add_common(synth, false);
  synth->add_option("--classes", synth_flags.classes, "Number of classes");
  synth->add_option("--dim", synth_flags.dim, "Embedding dimension");
  synth->add_option("--spread", synth_flags.spread, "Within-class standard deviation");
  synth->add_option("--layout", synth_flags.layout, "Center distances: graded (base + step*|i-j|) or uniform (base)");
  synth->add_option("--base", synth_flags.base, "Base center distance");
  synth->add_option("--step", synth_flags.step, "Distance added per index gap (graded)");
  synth->add_option("--train", synth_flags.train, "Train samples per class");
  synth->add_option("--val", synth_flags.val, "Validation samples per class");
  synth->add_option("--test", synth_flags.test, "Test samples per class");
  synth->add_option("--configs", synth_flags.configs, "Comma list of flops_m:noise_scale");
  synth->add_option("--name", synth_flags.name, "Dataset name");

  SampleFlags sample_flags;
  HyperFlags hyper;
  std::string oracle_output = "oracle.csv";
  auto* oracle = app.add_subcommand("oracle", "Train every configuration per combo and tabulate oracle picks");
  add_common(oracle, true);
  oracle->add_option("--manifest", manifest, "Path to manifest.json")->required();
  oracle->add_option("--m", sample_flags.m, "Context size");
  oracle->add_option("--acc-thr", sample_flags.acc_thr, "Target accuracy: median of trained accuracies, or a value");
  oracle->add_option("--sample", sample_flags.sample, "Combos to evaluate: all, sd or random");
  oracle->add_option("--fraction", sample_flags.fraction, "Sampling fraction for sd/random");
  oracle->add_option("--output", oracle_output, "File name inside --out");
  hyper.attach(oracle);

  std::size_t k_start = 3;
  bool normalize = false;
  std::string knn_output = "knn.json";
  auto* build = app.add_subcommand("build-knn", "Build the kNN configuration predictor");
  add_common(build, true);
  build->add_option("--manifest", manifest, "Path to manifest.json")->required();
  build->add_option("--m", sample_flags.m, "Context size");
  build->add_option("--acc-thr", sample_flags.acc_thr, "Target accuracy: median of trained accuracies, or a value");
  build->add_option("--sample", sample_flags.sample, "Combos to label: all, sd or random");
  build->add_option("--fraction", sample_flags.fraction, "Sampling fraction");
  build->add_option("--k-start", k_start, "Initial neighbour count");
  build->add_flag("--normalize", normalize, "Rescale features by their training range");
  build->add_option("--output", knn_output, "File name inside --out");
  hyper.attach(build);

  std::vector<std::string> knn;
  std::string classes;
  auto* pred = app.add_subcommand("predict", "Predict the configuration for a class combination");
  pred->add_option("--manifest", manifest, "Path to manifest.json")->required();
  pred->add_option("--knn", knn, "Predictor file(s)")->required();
  pred->add_option("--classes", classes, "Comma list of class names or indices")->required();

  SelectFlags select_flags;
  SimFlags sim_flags;
  auto* select = app.add_subcommand("select", "Choose the micro-classifiers to pre-install");
  add_common(select, true);
  select->add_option("--manifest", manifest, "Path to manifest.json")->required();
  select->add_option("--knn", knn, "Predictor file(s)")->required();
  select->add_option("--mode", select_flags.mode, "greedy or topk");
  select->add_option("--n", select_flags.n, "Number of contexts (0: derive from budget or trace)");
  select->add_option("--budget-mb", select_flags.budget_mb, "Storage budget in MB (0: none)");
  select->add_option("--m", select_flags.m, "Candidate context size (greedy)");
  select->add_option("--acc-thr", select_flags.acc_thr, "Accuracy target for the second stage (0: skip)");
  select->add_option("--criterion", select_flags.criterion, "average or minimum");
  select->add_option("--interval", sim_flags.interval, "Context interval in frames (sets CCR)");
  select->add_option("--theta", sim_flags.theta, "Change threshold used for FP/FN rates");
  select->add_option("--m-set", sim_flags.m_set, "Context sizes for the topk trace");
  select->add_option("--changes", sim_flags.changes, "Context changes in the topk trace (0: from CCR)");
  select->add_option("--all-class-config", sim_flags.all_class_config, "Config of the all-class model");
  select->add_flag("--save-heads", select_flags.save_heads, "Write selected heads under <out>/heads");
  hyper.attach(select);

  std::string selection, heads_dir;
  auto* simulate = app.add_subcommand("simulate", "Replay a synthetic context trace through the pipeline");
  add_common(simulate, false);
  simulate->add_option("--manifest", manifest, "Path to manifest.json")->required();
  simulate->add_option("--knn", knn, "Predictor file(s), one per context size")->required();
  simulate->add_option("--selection", selection, "selection.json (local mode)");
  simulate->add_option("--heads-dir", heads_dir, "Pre-installed heads root (local mode)");
  simulate->add_option("--mode", sim_flags.mode, "cloud or local");
  simulate->add_option("--device", sim_flags.device, "Device latency table");
  simulate->add_option("--rate-mbps", sim_flags.rate, "Link data rate");
  simulate->add_option("--interval", sim_flags.interval, "Frames per context");
  simulate->add_option("--theta", sim_flags.theta, "Change threshold");
  simulate->add_option("--m-set", sim_flags.m_set, "Allowed context sizes");
  simulate->add_option("--cache-capacity", sim_flags.cache_capacity, "Head cache entries (0: unbounded)");
  simulate->add_option("--frame-bytes", sim_flags.frame_bytes, "Uplink bytes per triggered frame");
  simulate->add_option("--cloud-ms", sim_flags.cloud_ms, "Cloud all-class latency");
  simulate->add_option("--recency", sim_flags.recency, "Recent classes remembered");
  simulate->add_option("--rule", sim_flags.rule, "Companion rule: recency or farthest");
  simulate->add_option("--all-class-config", sim_flags.all_class_config, "Config of the all-class model");
  simulate->add_option("--changes", sim_flags.changes, "Context changes (0: ceil(|test| / interval))");
  simulate->add_flag("--no-frames", sim_flags.no_frames, "Skip frames.csv");
  hyper.attach(simulate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error: Usage: " << msg << '\n';
    return 2;
  }

  try {
    if (*ingest) return cmd_ingest(manifest, similarity_out);
    if (*synth) return cmd_synth(synth_flags, common);
    if (*oracle) return cmd_oracle(manifest, sample_flags, hyper, common, oracle_output);
    if (*build) return cmd_build_knn(manifest, sample_flags, hyper, common, k_start, normalize, knn_output);
    if (*pred) return cmd_predict(manifest, knn, classes);
    if (*select) return cmd_select(manifest, knn, select_flags, sim_flags, hyper, common);
    if (*simulate) return cmd_simulate(manifest, knn, selection, heads_dir, sim_flags, hyper, common);
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error: " << msg << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: Internal: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
