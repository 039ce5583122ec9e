#pragma once

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxswitch/common.hpp"
#include "ctxswitch/dataset.hpp"

namespace ctxswitch {

struct HeadHyperparams {
  std::size_t hidden_dim = 64;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  // Out-of-context negatives per in-context sample for the change head.
  double negative_ratio = 1.0;
  std::uint64_t seed = 42;

  void validate() const {
    if (hidden_dim == 0 || epochs == 0 || batch_size == 0) {
      throw Error(ErrorKind::Usage, "hidden_dim, epochs and batch_size must be positive");
    }
    if (!(learning_rate > 0.0) || momentum < 0.0 || momentum >= 1.0) {
      throw Error(ErrorKind::Usage, "learning_rate must be positive and momentum in [0, 1)");
    }
    if (negative_ratio < 0.0) throw Error(ErrorKind::Usage, "negative_ratio must be non-negative");
  }
};

// input -> hidden (ReLU) -> outputs
struct DenseHead {
  std::size_t in = 0;
  std::size_t hidden = 0;
  std::size_t out = 0;
  std::vector<double> w1;  // hidden x in
  std::vector<double> b1;
  std::vector<double> w2;  // out x hidden
  std::vector<double> b2;

  DenseHead() = default;
  DenseHead(std::size_t in_dim, std::size_t hidden_dim, std::size_t out_dim)
      : in(in_dim), hidden(hidden_dim), out(out_dim),
        w1(in_dim * hidden_dim, 0.0), b1(hidden_dim, 0.0),
        w2(hidden_dim * out_dim, 0.0), b2(out_dim, 0.0) {}

  std::size_t param_count() const { return w1.size() + b1.size() + w2.size() + b2.size(); }

  void glorot_init(Rng& rng) {
    const double a1 = std::sqrt(6.0 / static_cast<double>(in + hidden));
    for (double& w : w1) w = rng.uniform(-a1, a1);
    const double a2 = std::sqrt(6.0 / static_cast<double>(hidden + out));
    for (double& w : w2) w = rng.uniform(-a2, a2);
    std::fill(b1.begin(), b1.end(), 0.0);
    std::fill(b2.begin(), b2.end(), 0.0);
  }

  void forward(std::span<const double> x, std::span<double> h, std::span<double> y) const {
    for (std::size_t j = 0; j < hidden; ++j) {
      const double* wr = w1.data() + j * in;
      double acc = b1[j];
      for (std::size_t k = 0; k < in; ++k) acc += wr[k] * x[k];
      h[j] = acc > 0.0 ? acc : 0.0;
    }
    for (std::size_t o = 0; o < out; ++o) {
      const double* wr = w2.data() + o * hidden;
      double acc = b2[o];
      for (std::size_t j = 0; j < hidden; ++j) acc += wr[j] * h[j];
      y[o] = acc;
    }
  }

  // Adds d(loss)/d(params) for one sample, given d(loss)/d(outputs).
  void backward(std::span<const double> x, std::span<const double> h, std::span<const double> dy,
                DenseHead& grad, std::span<double> dh) const {
    std::fill(dh.begin(), dh.end(), 0.0);
    for (std::size_t o = 0; o < out; ++o) {
      grad.b2[o] += dy[o];
      double* gr = grad.w2.data() + o * hidden;
      const double* wr = w2.data() + o * hidden;
      for (std::size_t j = 0; j < hidden; ++j) {
        gr[j] += dy[o] * h[j];
        dh[j] += dy[o] * wr[j];
      }
    }
    for (std::size_t j = 0; j < hidden; ++j) {
      if (h[j] <= 0.0) continue;
      grad.b1[j] += dh[j];
      double* gr = grad.w1.data() + j * in;
      for (std::size_t k = 0; k < in; ++k) gr[k] += dh[j] * x[k];
    }
  }

  std::array<std::span<double>, 4> blocks() { return {w1, b1, w2, b2}; }
  std::array<std::span<const double>, 4> blocks() const { return {w1, b1, w2, b2}; }
};

// Parameter count of a classification + change-detection head pair:
// two input->hidden layers, an m-way output and a single change output.
constexpr std::size_t head_param_count(std::size_t dim, std::size_t hidden, std::size_t m) {
  return 2 * (dim * hidden + hidden) + (hidden * m + m) + (hidden + 1);
}

struct MicroClassifier {
  std::string config_id;
  Combo combo;
  DenseHead classifier;  // m logits
  DenseHead change;      // 1 logit, sigmoid gives the change score
  double theta = 0.5;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  std::uint64_t seed = 0;

  std::size_t input_dim() const { return classifier.in; }
  std::size_t hidden_dim() const { return classifier.hidden; }
  std::size_t num_classes() const { return combo.size(); }
  std::size_t param_count() const { return classifier.param_count() + change.param_count(); }

  // Local slot of a global class, or -1.
  int slot_of(int cls) const {
    auto it = std::lower_bound(combo.begin(), combo.end(), cls);
    return (it != combo.end() && *it == cls) ? static_cast<int>(it - combo.begin()) : -1;
  }

  std::array<std::span<double>, 8> blocks() {
    auto a = classifier.blocks();
    auto b = change.blocks();
    return {a[0], a[1], a[2], a[3], b[0], b[1], b[2], b[3]};
  }
  std::array<std::span<const double>, 8> blocks() const {
    auto a = classifier.blocks();
    auto b = change.blocks();
    return {a[0], a[1], a[2], a[3], b[0], b[1], b[2], b[3]};
  }
};

inline MicroClassifier make_micro_classifier(std::string config_id, Combo combo, std::size_t dim,
                                             std::size_t hidden) {
  MicroClassifier mc;
  mc.config_id = std::move(config_id);
  mc.combo = std::move(combo);
  mc.classifier = DenseHead(dim, hidden, mc.combo.size());
  mc.change = DenseHead(dim, hidden, 1);
  return mc;
}

struct PredictionOutcome {
  std::vector<double> class_probs;
  int predicted_slot = 0;   // argmax position within the combo
  int predicted_class = 0;  // global class index
  double change_score = 0.0;
};

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Max-subtracted softmax, in place.
inline void softmax(std::span<double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double& v : logits) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : logits) v /= sum;
}

// First index of the maximum.
inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline PredictionOutcome predict(const MicroClassifier& mc, std::span<const double> embedding) {
  if (embedding.size() != mc.input_dim()) {
    throw Error(ErrorKind::DimensionMismatch, "embedding has dimension " + std::to_string(embedding.size()) +
                                                  ", classifier expects " + std::to_string(mc.input_dim()));
  }
  std::vector<double> h(mc.hidden_dim());
  PredictionOutcome out;
  out.class_probs.assign(mc.num_classes(), 0.0);
  mc.classifier.forward(embedding, h, out.class_probs);
  softmax(out.class_probs);
  out.predicted_slot = static_cast<int>(argmax(out.class_probs));
  out.predicted_class = mc.combo[static_cast<std::size_t>(out.predicted_slot)];
  double z = 0.0;
  mc.change.forward(embedding, h, std::span<double>(&z, 1));
  out.change_score = sigmoid(z);
  return out;
}

// A batch for the joint loss. A row contributes cross-entropy when it has a
// class slot (>= 0) and binary cross-entropy when it has a change target
// (0 or 1; negative means none).
struct HeadBatch {
  std::vector<std::vector<double>> inputs;
  std::vector<int> class_slots;
  std::vector<double> change_targets;

  std::size_t size() const { return inputs.size(); }

  void add(std::span<const double> x, int slot, double target) {
    inputs.emplace_back(x.begin(), x.end());
    class_slots.push_back(slot);
    change_targets.push_back(target);
  }
};

namespace detail {

// Mean cross-entropy over labelled rows plus mean BCE over rows with a change
// target. Accumulates gradients into `grad` (zeroed first) when non-null.
inline double joint_loss(const MicroClassifier& mc, const std::vector<std::span<const double>>& xs,
                         std::span<const int> slots, std::span<const double> targets, MicroClassifier* grad) {
  std::size_t n_cls = 0, n_chg = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    n_cls += slots[i] >= 0 ? 1 : 0;
    n_chg += targets[i] >= 0.0 ? 1 : 0;
  }
  if (grad) {
    for (auto blk : grad->blocks()) std::fill(blk.begin(), blk.end(), 0.0);
  }
  const std::size_t hdim = mc.hidden_dim();
  std::vector<double> h(hdim), dh(hdim), y(mc.num_classes());
  double loss_cls = 0.0, loss_chg = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (slots[i] >= 0) {
      mc.classifier.forward(xs[i], h, y);
      const double mx = *std::max_element(y.begin(), y.end());
      double sum = 0.0;
      for (double v : y) sum += std::exp(v - mx);
      const double lse = mx + std::log(sum);
      const auto s = static_cast<std::size_t>(slots[i]);
      loss_cls += lse - y[s];
      if (grad) {
        for (std::size_t o = 0; o < y.size(); ++o) {
          y[o] = (std::exp(y[o] - lse) - (o == s ? 1.0 : 0.0)) / static_cast<double>(n_cls);
        }
        mc.classifier.backward(xs[i], h, y, grad->classifier, dh);
      }
    }
    if (targets[i] >= 0.0) {
      double z = 0.0;
      mc.change.forward(xs[i], h, std::span<double>(&z, 1));
      const double t = targets[i];
      // log(1 + e^z) - t z, stable for both signs of z
      const double softplus = z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
      loss_chg += softplus - t * z;
      if (grad) {
        double dz = (sigmoid(z) - t) / static_cast<double>(n_chg);
        mc.change.backward(xs[i], h, std::span<const double>(&dz, 1), grad->change, dh);
      }
    }
  }
  double loss = 0.0;
  if (n_cls) loss += loss_cls / static_cast<double>(n_cls);
  if (n_chg) loss += loss_chg / static_cast<double>(n_chg);
  return loss;
}

inline std::vector<std::span<const double>> row_views(const HeadBatch& batch) {
  std::vector<std::span<const double>> xs;
  xs.reserve(batch.size());
  for (const auto& r : batch.inputs) xs.emplace_back(r);
  return xs;
}

}  // namespace detail

inline double batch_loss(const MicroClassifier& mc, const HeadBatch& batch) {
  return detail::joint_loss(mc, detail::row_views(batch), batch.class_slots, batch.change_targets, nullptr);
}

// Analytic gradient of batch_loss, laid out like mc.blocks().
inline MicroClassifier batch_gradient(const MicroClassifier& mc, const HeadBatch& batch) {
  MicroClassifier grad = mc;
  detail::joint_loss(mc, detail::row_views(batch), batch.class_slots, batch.change_targets, &grad);
  return grad;
}

// Max relative error between analytic gradients and central differences
// (step 1e-5) over every parameter. Pairs whose absolute difference is within
// 1e-8 count as exact.
inline double gradient_check(const MicroClassifier& mc, const HeadBatch& batch) {
  constexpr double kStep = 1e-5;
  constexpr double kAbsTol = 1e-8;
  const MicroClassifier analytic = batch_gradient(mc, batch);
  MicroClassifier probe = mc;
  auto probe_blocks = probe.blocks();
  const auto grad_blocks = analytic.blocks();
  double worst = 0.0;
  for (std::size_t b = 0; b < probe_blocks.size(); ++b) {
    for (std::size_t k = 0; k < probe_blocks[b].size(); ++k) {
      double& p = probe_blocks[b][k];
      const double orig = p;
      p = orig + kStep;
      const double up = batch_loss(probe, batch);
      p = orig - kStep;
      const double down = batch_loss(probe, batch);
      p = orig;
      const double numeric = (up - down) / (2.0 * kStep);
      const double a = grad_blocks[b][k];
      const double diff = std::abs(a - numeric);
      if (diff <= kAbsTol) continue;
      worst = std::max(worst, diff / std::max(std::abs(a), std::abs(numeric)));
    }
  }
  return worst;
}

struct TrainingLog {
  std::vector<double> classifier_loss;  // mean minibatch loss per epoch
  std::vector<double> change_loss;
};

namespace detail {

// Minibatch SGD with momentum over one head's sample list.
inline void sgd_epoch(MicroClassifier& mc, MicroClassifier& velocity, MicroClassifier& grad,
                      const EmbeddingMatrix& mat, std::vector<std::size_t>& order,
                      const std::vector<std::size_t>& rows, const std::vector<int>& slots,
                      const std::vector<double>& targets, const HeadHyperparams& hp, Rng& rng,
                      double* epoch_loss) {
  rng.shuffle(order);
  double total = 0.0;
  std::size_t batches = 0;
  std::vector<std::span<const double>> xs;
  std::vector<int> bs;
  std::vector<double> bt;
  for (std::size_t start = 0; start < order.size(); start += hp.batch_size) {
    const std::size_t end = std::min(order.size(), start + hp.batch_size);
    xs.clear();
    bs.clear();
    bt.clear();
    for (std::size_t i = start; i < end; ++i) {
      const std::size_t s = order[i];
      xs.push_back(mat.row(rows[s]));
      bs.push_back(slots[s]);
      bt.push_back(targets[s]);
    }
    total += joint_loss(mc, xs, bs, bt, &grad);
    ++batches;
    auto pb = mc.blocks();
    auto vb = velocity.blocks();
    auto gb = grad.blocks();
    for (std::size_t b = 0; b < pb.size(); ++b) {
      for (std::size_t k = 0; k < pb[b].size(); ++k) {
        vb[b][k] = hp.momentum * vb[b][k] - hp.learning_rate * gb[b][k];
        pb[b][k] += vb[b][k];
      }
    }
  }
  if (epoch_loss) *epoch_loss = batches ? total / static_cast<double>(batches) : 0.0;
}

}  // namespace detail

// Fraction of the split's combo-class samples classified correctly.
inline double evaluate_accuracy(const MicroClassifier& mc, const EmbeddingDataset& ds, const std::string& split) {
  const auto& mat = ds.matrix(mc.config_id, split);
  std::size_t total = 0, correct = 0;
  for (int cls : mc.combo) {
    for (std::size_t r : ds.rows_of(split, cls)) {
      ++total;
      correct += predict(mc, mat.row(r)).predicted_class == cls ? 1 : 0;
    }
  }
  if (total == 0) throw Error(ErrorKind::EmptySplit, "split '" + split + "' has no samples of the combo");
  return static_cast<double>(correct) / static_cast<double>(total);
}

struct FpFnRates {
  double fp_rate = 0.0;
  double fn_rate = 0.0;
};

// FP: in-combo samples scored above theta. FN: out-of-combo samples scored at
// or below theta.
inline FpFnRates evaluate_fpfn(const MicroClassifier& mc, const EmbeddingDataset& ds, const std::string& split,
                               double theta) {
  const auto& mat = ds.matrix(mc.config_id, split);
  std::size_t in = 0, out = 0, fp = 0, fn = 0;
  for (std::size_t r = 0; r < mat.rows(); ++r) {
    const double score = predict(mc, mat.row(r)).change_score;
    if (mc.slot_of(mat.labels[r]) >= 0) {
      ++in;
      fp += score > theta ? 1 : 0;
    } else {
      ++out;
      fn += score <= theta ? 1 : 0;
    }
  }
  if (in == 0 || out == 0) {
    throw Error(ErrorKind::EmptySplit, "split '" + split + "' lacks in-combo or out-of-combo samples");
  }
  return {static_cast<double>(fp) / static_cast<double>(in), static_cast<double>(fn) / static_cast<double>(out)};
}

// True when the most confident class falls below the threshold.
inline bool maxprob_change_detector(std::span<const double> class_probs, double threshold) {
  double sum = 0.0;
  for (double p : class_probs) {
    if (p < 0.0 || p > 1.0) throw Error(ErrorKind::NotADistribution, "probability outside [0, 1]");
    sum += p;
  }
  if (class_probs.empty() || std::abs(sum - 1.0) > 1e-6) {
    throw Error(ErrorKind::NotADistribution, "probabilities sum to " + format_double(sum));
  }
  return *std::max_element(class_probs.begin(), class_probs.end()) < threshold;
}

inline MicroClassifier train_heads(const EmbeddingDataset& ds, const std::string& config_id, const Combo& combo_in,
                                   const HeadHyperparams& hp, TrainingLog* log = nullptr) {
  hp.validate();
  const Combo combo = make_combo(combo_in);
  if (combo.size() < 2) throw Error(ErrorKind::ComboTooSmall, "a micro-classifier needs at least 2 classes");
  const auto& cfg = ds.manifest().config(config_id);
  const auto& mat = ds.matrix(config_id, "train");

  MicroClassifier mc = make_micro_classifier(config_id, combo, cfg.embedding_dim, hp.hidden_dim);
  mc.seed = hp.seed;
  Rng rng(hp.seed);
  mc.classifier.glorot_init(rng);
  mc.change.glorot_init(rng);

  // Classification samples, then regression samples (positives + negatives).
  std::vector<std::size_t> cls_rows;
  std::vector<int> cls_slots;
  for (std::size_t s = 0; s < combo.size(); ++s) {
    const auto& rows = ds.rows_of("train", combo[s]);
    if (rows.empty()) {
      throw Error(ErrorKind::EmptyClass, "class " + std::to_string(combo[s]) + " has no train samples");
    }
    for (std::size_t r : rows) {
      cls_rows.push_back(r);
      cls_slots.push_back(static_cast<int>(s));
    }
  }
  const std::vector<double> no_targets(cls_rows.size(), -1.0);

  std::vector<std::size_t> chg_rows = cls_rows;
  std::vector<double> chg_targets(cls_rows.size(), 0.0);
  if (hp.negative_ratio > 0.0) {
    std::vector<std::size_t> pool;
    for (std::size_t r = 0; r < mat.rows(); ++r) {
      if (mc.slot_of(mat.labels[r]) < 0) pool.push_back(r);
    }
    if (pool.empty()) {
      throw Error(ErrorKind::NoNegativesAvailable,
                  "combo " + combo_key(combo) + " leaves no out-of-combo train samples");
    }
    const auto wanted = static_cast<std::size_t>(
        std::llround(hp.negative_ratio * static_cast<double>(cls_rows.size())));
    rng.shuffle(pool);
    for (std::size_t i = 0; i < wanted; ++i) {
      chg_rows.push_back(pool[i % pool.size()]);
      chg_targets.push_back(1.0);
    }
  }
  const std::vector<int> no_slots(chg_rows.size(), -1);

  MicroClassifier velocity = mc;
  for (auto blk : velocity.blocks()) std::fill(blk.begin(), blk.end(), 0.0);
  MicroClassifier grad = velocity;
  std::vector<std::size_t> cls_order(cls_rows.size()), chg_order(chg_rows.size());
  std::iota(cls_order.begin(), cls_order.end(), 0);
  std::iota(chg_order.begin(), chg_order.end(), 0);
  for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
    double l1 = 0.0, l2 = 0.0;
    detail::sgd_epoch(mc, velocity, grad, mat, cls_order, cls_rows, cls_slots, no_targets, hp, rng, &l1);
    if (hp.negative_ratio > 0.0) {
      detail::sgd_epoch(mc, velocity, grad, mat, chg_order, chg_rows, no_slots, chg_targets, hp, rng, &l2);
    }
    if (log) {
      log->classifier_loss.push_back(l1);
      log->change_loss.push_back(l2);
    }
  }

  mc.train_accuracy = evaluate_accuracy(mc, ds, "train");
  mc.val_accuracy = ds.has_split("val") ? evaluate_accuracy(mc, ds, "val") : mc.train_accuracy;
  return mc;
}

// ---------------------------------------------------------------------------
// Checkpoints: one JSON header line, then little-endian float32 parameters.

inline std::filesystem::path checkpoint_path(const std::filesystem::path& root, const std::string& config_id,
                                             const Combo& combo) {
  return root / "heads" / config_id / (combo_key(combo) + ".bin");
}

inline void save_heads(std::ostream& out, const MicroClassifier& mc) {
  nlohmann::json header;
  header["config_id"] = mc.config_id;
  header["combo"] = mc.combo;
  header["theta"] = mc.theta;
  header["seed"] = mc.seed;
  header["input_dim"] = mc.input_dim();
  header["hidden_dim"] = mc.hidden_dim();
  header["param_count"] = mc.param_count();
  header["train_accuracy"] = mc.train_accuracy;
  header["val_accuracy"] = mc.val_accuracy;
  out << header.dump() << '\n';
  for (auto blk : mc.blocks()) {
    for (double v : blk) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      const unsigned char bytes[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                      static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
      out.write(reinterpret_cast<const char*>(bytes), 4);
    }
  }
}

inline MicroClassifier load_heads(std::istream& in, const std::string& source = "checkpoint") {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::SchemaViolation, source + ": missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error&) {
    throw Error(ErrorKind::SchemaViolation, source + ": header is not JSON");
  }
  const auto dim = detail::get_field<std::size_t>(header, "input_dim", source + ": ");
  const auto hidden = detail::get_field<std::size_t>(header, "hidden_dim", source + ": ");
  const auto combo = make_combo(detail::get_field<std::vector<int>>(header, "combo", source + ": "));
  const auto count = detail::get_field<std::size_t>(header, "param_count", source + ": ");
  if (combo.size() < 2 || count != head_param_count(dim, hidden, combo.size())) {
    throw Error(ErrorKind::SchemaViolation, source + ": param_count does not match dimensions");
  }
  MicroClassifier mc = make_micro_classifier(detail::get_field<std::string>(header, "config_id", source + ": "),
                                             combo, dim, hidden);
  mc.theta = detail::get_field<double>(header, "theta", source + ": ");
  mc.seed = detail::get_field<std::uint64_t>(header, "seed", source + ": ");
  mc.train_accuracy = detail::get_field<double>(header, "train_accuracy", source + ": ");
  mc.val_accuracy = detail::get_field<double>(header, "val_accuracy", source + ": ");
  for (auto blk : mc.blocks()) {
    for (double& v : blk) {
      unsigned char bytes[4];
      if (!in.read(reinterpret_cast<char*>(bytes), 4)) {
        throw Error(ErrorKind::SchemaViolation, source + ": parameter blob is truncated");
      }
      const std::uint32_t bits = std::uint32_t(bytes[0]) | (std::uint32_t(bytes[1]) << 8) |
                                 (std::uint32_t(bytes[2]) << 16) | (std::uint32_t(bytes[3]) << 24);
      v = static_cast<double>(std::bit_cast<float>(bits));
      if (!std::isfinite(v)) throw Error(ErrorKind::NonFiniteValue, source + ": non-finite parameter");
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw Error(ErrorKind::SchemaViolation, source + ": trailing bytes after parameters");
  }
  return mc;
}

inline void save_heads(const std::filesystem::path& path, const MicroClassifier& mc) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::MissingFile, "cannot write " + path.string());
  save_heads(out, mc);
}

inline MicroClassifier load_heads(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::MissingFile, path.string());
  return load_heads(in, path.string());
}

}  // namespace ctxswitch
