#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ctxswitch/common.hpp"

namespace ctxswitch {

// One feature-extractor configuration: (pruning level, input resolution)
// plus its costs.
struct ConfigDescriptor {
  std::string id;
  int pruning_pct = 0;
  int resolution = 0;
  double flops_m = 0.0;
  std::size_t embedding_dim = 0;
  std::map<std::string, double> device_latency_ms;
  int param_bytes_per_weight = 4;
  // On-device size of this configuration's feature extractor. Optional; 0
  // when the manifest does not declare it.
  std::uint64_t extractor_bytes = 0;

  double latency_ms(const std::string& device) const {
    auto it = device_latency_ms.find(device);
    if (it == device_latency_ms.end()) {
      throw Error(ErrorKind::SchemaViolation,
                  "config '" + id + "' has no latency for device '" + device + "'");
    }
    return it->second;
  }
};

struct Manifest {
  std::string dataset_name;
  std::vector<std::string> classes;
  std::vector<ConfigDescriptor> configs;
  std::map<std::string, std::vector<std::string>> splits;
  std::string notes;
  // Configuration whose embeddings define class similarity. Empty means the
  // highest-FLOPs configuration.
  std::string reference_config;
  // Directory the embeddings/ tree is resolved against.
  std::filesystem::path root;

  std::size_t num_classes() const { return classes.size(); }

  const ConfigDescriptor& config(const std::string& id) const {
    for (const auto& c : configs) {
      if (c.id == id) return c;
    }
    throw Error(ErrorKind::SchemaViolation, "unknown config id '" + id + "'");
  }

  bool has_split(const std::string& name) const { return splits.count(name) > 0; }

  int class_index(const std::string& name) const {
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (classes[i] == name) return static_cast<int>(i);
    }
    throw Error(ErrorKind::UnknownClassIndex, "unknown class name '" + name + "'");
  }

  const std::string& reference() const {
    if (!reference_config.empty()) return reference_config;
    return configs_by_flops().back().id;
  }

  // Ascending by flops_m; equal FLOPs keep manifest order.
  std::vector<ConfigDescriptor> configs_by_flops() const {
    auto sorted = configs;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const auto& a, const auto& b) { return a.flops_m < b.flops_m; });
    return sorted;
  }

  std::filesystem::path embedding_path(const std::string& config_id,
                                       const std::string& split) const {
    return root / "embeddings" / config_id / (split + ".csv");
  }
};

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& obj, const char* field,
                                     const std::string& where) {
  if (!obj.is_object() || !obj.contains(field)) {
    throw Error(ErrorKind::SchemaViolation, where + field + " is missing");
  }
  return obj.at(field);
}

template <typename T>
T get_field(const nlohmann::json& obj, const char* field, const std::string& where) {
  const auto& v = require(obj, field, where);
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorKind::SchemaViolation, where + field + " has the wrong type");
  }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline std::string embedding_header(std::size_t dim) {
  std::string h = "sample_id,class_index,seq_index";
  for (std::size_t i = 0; i < dim; ++i) h += ",e" + std::to_string(i);
  return h;
}

}  // namespace detail

// Parses and validates a manifest document. Does not touch the filesystem.
inline Manifest parse_manifest(const nlohmann::json& doc) {
  using detail::get_field;
  Manifest m;
  if (!doc.is_object()) throw Error(ErrorKind::SchemaViolation, "manifest is not an object");
  m.dataset_name = get_field<std::string>(doc, "dataset_name", "");
  m.classes = get_field<std::vector<std::string>>(doc, "classes", "");
  if (m.classes.size() < 2) {
    throw Error(ErrorKind::SchemaViolation, "classes must list at least 2 classes");
  }
  {
    std::set<std::string> seen;
    for (const auto& c : m.classes) {
      if (!seen.insert(c).second) {
        throw Error(ErrorKind::DuplicateClass, "class '" + c + "' listed twice");
      }
    }
  }

  const auto& configs = detail::require(doc, "configs", "");
  if (!configs.is_array() || configs.empty()) {
    throw Error(ErrorKind::SchemaViolation, "configs must be a non-empty array");
  }
  std::set<std::string> ids;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const auto& cj = configs[i];
    const std::string where = "configs[" + std::to_string(i) + "].";
    ConfigDescriptor c;
    c.id = get_field<std::string>(cj, "id", where);
    c.pruning_pct = get_field<int>(cj, "pruning_pct", where);
    c.resolution = get_field<int>(cj, "resolution", where);
    c.flops_m = get_field<double>(cj, "flops_m", where);
    const auto dim = get_field<long long>(cj, "embedding_dim", where);
    c.device_latency_ms = get_field<std::map<std::string, double>>(cj, "device_latency_ms", where);
    if (cj.contains("param_bytes_per_weight")) {
      c.param_bytes_per_weight = get_field<int>(cj, "param_bytes_per_weight", where);
    }
    if (cj.contains("extractor_bytes")) {
      c.extractor_bytes = get_field<std::uint64_t>(cj, "extractor_bytes", where);
    }
    if (c.id.empty()) throw Error(ErrorKind::SchemaViolation, where + "id is empty");
    if (!ids.insert(c.id).second) {
      throw Error(ErrorKind::SchemaViolation, where + "id '" + c.id + "' is not unique");
    }
    if (c.pruning_pct < 0 || c.pruning_pct > 99) {
      throw Error(ErrorKind::SchemaViolation, where + "pruning_pct must be in 0..99");
    }
    if (c.resolution <= 0) throw Error(ErrorKind::SchemaViolation, where + "resolution must be positive");
    if (!(c.flops_m > 0.0) || !std::isfinite(c.flops_m)) {
      throw Error(ErrorKind::SchemaViolation, where + "flops_m must be positive");
    }
    if (dim <= 0) throw Error(ErrorKind::SchemaViolation, where + "embedding_dim must be positive");
    c.embedding_dim = static_cast<std::size_t>(dim);
    for (const auto& [dev, ms] : c.device_latency_ms) {
      if (!(ms > 0.0) || !std::isfinite(ms)) {
        throw Error(ErrorKind::SchemaViolation,
                    where + "device_latency_ms." + dev + " must be positive");
      }
    }
    if (c.param_bytes_per_weight <= 0) {
      throw Error(ErrorKind::SchemaViolation, where + "param_bytes_per_weight must be positive");
    }
    m.configs.push_back(std::move(c));
  }

  m.splits = get_field<std::map<std::string, std::vector<std::string>>>(doc, "splits", "");
  for (const char* required : {"train", "test"}) {
    auto it = m.splits.find(required);
    if (it == m.splits.end() || it->second.empty()) {
      throw Error(ErrorKind::EmptySplit, std::string("split '") + required + "' is missing or empty");
    }
  }
  {
    std::unordered_map<std::string, std::string> owner;
    for (const auto& [name, ids_in_split] : m.splits) {
      for (const auto& sid : ids_in_split) {
        auto [it, inserted] = owner.emplace(sid, name);
        if (!inserted) {
          throw Error(ErrorKind::SchemaViolation,
                      "splits." + name + ": sample '" + sid + "' also appears in split '" +
                          it->second + "'");
        }
      }
    }
  }
  if (doc.contains("notes")) m.notes = get_field<std::string>(doc, "notes", "");
  if (doc.contains("reference_config")) {
    m.reference_config = get_field<std::string>(doc, "reference_config", "");
    if (!ids.count(m.reference_config)) {
      throw Error(ErrorKind::SchemaViolation,
                  "reference_config '" + m.reference_config + "' is not a config id");
    }
  }
  return m;
}

inline nlohmann::json manifest_to_json(const Manifest& m) {
  nlohmann::json doc;
  doc["dataset_name"] = m.dataset_name;
  doc["classes"] = m.classes;
  doc["configs"] = nlohmann::json::array();
  for (const auto& c : m.configs) {
    nlohmann::json cj;
    cj["id"] = c.id;
    cj["pruning_pct"] = c.pruning_pct;
    cj["resolution"] = c.resolution;
    cj["flops_m"] = c.flops_m;
    cj["embedding_dim"] = c.embedding_dim;
    cj["device_latency_ms"] = c.device_latency_ms;
    cj["param_bytes_per_weight"] = c.param_bytes_per_weight;
    cj["extractor_bytes"] = c.extractor_bytes;
    doc["configs"].push_back(std::move(cj));
  }
  doc["splits"] = m.splits;
  doc["notes"] = m.notes;
  if (!m.reference_config.empty()) doc["reference_config"] = m.reference_config;
  return doc;
}

// Reads manifest.json, validates it and checks that every embeddings file it
// implies exists and carries the expected header.
inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::MissingFile, path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::SchemaViolation, path.string() + ": " + e.what());
  }
  Manifest m = parse_manifest(doc);
  m.root = path.parent_path();
  for (const auto& c : m.configs) {
    for (const auto& [split, ids] : m.splits) {
      const auto file = m.embedding_path(c.id, split);
      std::ifstream ef(file);
      if (!ef) throw Error(ErrorKind::MissingFile, file.string());
      std::string header;
      std::getline(ef, header);
      if (header != detail::embedding_header(c.embedding_dim)) {
        throw Error(ErrorKind::SchemaViolation, file.string() + ": malformed header");
      }
    }
  }
  return m;
}

// Row-major embeddings of one (config, split) pair.
struct EmbeddingMatrix {
  std::size_t dim = 0;
  std::vector<std::string> sample_ids;
  std::vector<int> labels;
  std::vector<std::int64_t> seq_index;
  std::vector<double> values;

  std::size_t rows() const { return labels.size(); }

  std::span<const double> row(std::size_t i) const {
    return {values.data() + i * dim, dim};
  }

  void push_row(std::string id, int label, std::int64_t seq, std::span<const double> emb) {
    sample_ids.push_back(std::move(id));
    labels.push_back(label);
    seq_index.push_back(seq);
    values.insert(values.end(), emb.begin(), emb.end());
  }
};

// Parses the embeddings CSV format. `source` only labels error messages.
inline EmbeddingMatrix parse_embeddings(std::istream& in, std::size_t dim, std::size_t n_classes,
                                        const std::string& source = "embeddings") {
  EmbeddingMatrix mat;
  mat.dim = dim;
  std::string line;
  if (!std::getline(in, line) || line != detail::embedding_header(dim)) {
    throw Error(ErrorKind::SchemaViolation, source + ": malformed header");
  }
  std::vector<double> emb(dim);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    auto cells = detail::split_csv_line(line);
    if (cells.size() != dim + 3) {
      throw Error(ErrorKind::DimensionMismatch,
                  where + ": expected " + std::to_string(dim) + " embedding values, got " +
                      std::to_string(cells.size() < 3 ? 0 : cells.size() - 3));
    }
    const long long label = parse_int(cells[1]);
    if (label < 0 || static_cast<std::size_t>(label) >= n_classes) {
      throw Error(ErrorKind::UnknownClassIndex, where + ": class_index " + cells[1]);
    }
    const long long seq = parse_int(cells[2]);
    for (std::size_t k = 0; k < dim; ++k) {
      double v;
      try {
        v = parse_double(cells[k + 3]);
      } catch (const Error&) {
        throw Error(ErrorKind::NonFiniteValue, where + ": value '" + cells[k + 3] + "'");
      }
      if (!std::isfinite(v)) {
        throw Error(ErrorKind::NonFiniteValue, where + ": value '" + cells[k + 3] + "'");
      }
      emb[k] = v;
    }
    mat.push_row(cells[0], static_cast<int>(label), seq, emb);
  }
  return mat;
}

inline void write_embeddings(std::ostream& out, const EmbeddingMatrix& mat) {
  out << detail::embedding_header(mat.dim) << '\n';
  for (std::size_t r = 0; r < mat.rows(); ++r) {
    out << mat.sample_ids[r] << ',' << mat.labels[r] << ',' << mat.seq_index[r];
    for (double v : mat.row(r)) out << ',' << format_double(v);
    out << '\n';
  }
}

inline EmbeddingMatrix load_embeddings(const Manifest& manifest, const std::string& config_id,
                                       const std::string& split) {
  const auto& cfg = manifest.config(config_id);
  auto sit = manifest.splits.find(split);
  if (sit == manifest.splits.end()) {
    throw Error(ErrorKind::SchemaViolation, "unknown split '" + split + "'");
  }
  const auto file = manifest.embedding_path(config_id, split);
  std::ifstream in(file);
  if (!in) throw Error(ErrorKind::MissingFile, file.string());
  auto mat = parse_embeddings(in, cfg.embedding_dim, manifest.num_classes(), file.string());
  if (mat.rows() != sit->second.size()) {
    throw Error(ErrorKind::SchemaViolation,
                file.string() + ": " + std::to_string(mat.rows()) + " rows but split '" + split +
                    "' lists " + std::to_string(sit->second.size()) + " samples");
  }
  std::set<std::string> expected(sit->second.begin(), sit->second.end());
  for (const auto& sid : mat.sample_ids) {
    if (!expected.erase(sid)) {
      throw Error(ErrorKind::SchemaViolation,
                  file.string() + ": sample '" + sid + "' is not in split '" + split + "'");
    }
  }
  return mat;
}

struct ClassRepresentation {
  std::string config_id;
  int class_index = 0;
  std::vector<double> vector;
  std::size_t sample_count = 0;
};

// All embeddings of a manifest, loaded and aligned so that row r of a split
// is the same sample under every configuration.
class EmbeddingDataset {
 public:
  EmbeddingDataset() = default;

  EmbeddingDataset(Manifest manifest, std::map<std::pair<std::string, std::string>, EmbeddingMatrix> data)
      : manifest_(std::move(manifest)), data_(std::move(data)) {
    align();
  }

  const Manifest& manifest() const { return manifest_; }
  std::size_t num_classes() const { return manifest_.num_classes(); }

  const EmbeddingMatrix& matrix(const std::string& config_id, const std::string& split) const {
    auto it = data_.find({config_id, split});
    if (it == data_.end()) {
      throw Error(ErrorKind::SchemaViolation,
                  "no embeddings for config '" + config_id + "' split '" + split + "'");
    }
    return it->second;
  }

  bool has_split(const std::string& split) const { return rows_by_class_.count(split) > 0; }

  // Row indices of `cls` within `split`, identical for every configuration.
  const std::vector<std::size_t>& rows_of(const std::string& split, int cls) const {
    static const std::vector<std::size_t> empty;
    auto it = rows_by_class_.find(split);
    if (it == rows_by_class_.end() || cls < 0 ||
        static_cast<std::size_t>(cls) >= it->second.size()) {
      return empty;
    }
    return it->second[static_cast<std::size_t>(cls)];
  }

  std::size_t split_size(const std::string& split) const {
    return matrix(manifest_.configs.front().id, split).rows();
  }

 private:
  void align() {
    rows_by_class_.clear();
    for (const auto& [split, ids] : manifest_.splits) {
      const auto& first_id = manifest_.configs.front().id;
      auto fit = data_.find({first_id, split});
      if (fit == data_.end()) continue;
      const EmbeddingMatrix& base = fit->second;
      std::unordered_map<std::string, std::size_t> pos;
      for (std::size_t r = 0; r < base.rows(); ++r) pos.emplace(base.sample_ids[r], r);
      for (std::size_t c = 1; c < manifest_.configs.size(); ++c) {
        auto& mat = data_.at({manifest_.configs[c].id, split});
        if (mat.rows() != base.rows()) {
          throw Error(ErrorKind::SchemaViolation, "split '" + split + "' differs in size across configs");
        }
        EmbeddingMatrix reordered;
        reordered.dim = mat.dim;
        reordered.sample_ids.resize(mat.rows());
        reordered.labels.resize(mat.rows());
        reordered.seq_index.resize(mat.rows());
        reordered.values.resize(mat.values.size());
        std::vector<bool> filled(mat.rows(), false);
        for (std::size_t r = 0; r < mat.rows(); ++r) {
          auto p = pos.find(mat.sample_ids[r]);
          if (p == pos.end() || filled[p->second]) {
            throw Error(ErrorKind::SchemaViolation, "sample '" + mat.sample_ids[r] + "' of config '" +
                                                        manifest_.configs[c].id +
                                                        "' is not aligned with other configs");
          }
          const std::size_t t = p->second;
          if (mat.labels[r] != base.labels[t]) {
            throw Error(ErrorKind::SchemaViolation,
                        "sample '" + mat.sample_ids[r] + "' has different labels across configs");
          }
          filled[t] = true;
          reordered.sample_ids[t] = mat.sample_ids[r];
          reordered.labels[t] = mat.labels[r];
          reordered.seq_index[t] = mat.seq_index[r];
          std::copy(mat.row(r).begin(), mat.row(r).end(), reordered.values.begin() + t * mat.dim);
        }
        mat = std::move(reordered);
      }
      auto& by_class = rows_by_class_[split];
      by_class.assign(manifest_.num_classes(), {});
      for (std::size_t r = 0; r < base.rows(); ++r) {
        by_class[static_cast<std::size_t>(base.labels[r])].push_back(r);
      }
    }
  }

  Manifest manifest_;
  std::map<std::pair<std::string, std::string>, EmbeddingMatrix> data_;
  std::map<std::string, std::vector<std::vector<std::size_t>>> rows_by_class_;
};

inline EmbeddingDataset load_dataset(const Manifest& manifest) {
  std::map<std::pair<std::string, std::string>, EmbeddingMatrix> data;
  for (const auto& c : manifest.configs) {
    for (const auto& [split, ids] : manifest.splits) {
      data.emplace(std::make_pair(c.id, split), load_embeddings(manifest, c.id, split));
    }
  }
  return EmbeddingDataset(manifest, std::move(data));
}

inline EmbeddingDataset load_dataset(const std::filesystem::path& manifest_path) {
  return load_dataset(load_manifest(manifest_path));
}

// Writes manifest.json plus embeddings/<config>/<split>.csv under `dir`.
inline void write_dataset(const EmbeddingDataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    out << manifest_to_json(ds.manifest()).dump(2) << '\n';
  }
  for (const auto& c : ds.manifest().configs) {
    fs::create_directories(dir / "embeddings" / c.id);
    for (const auto& [split, ids] : ds.manifest().splits) {
      std::ofstream out(dir / "embeddings" / c.id / (split + ".csv"), std::ios::binary);
      write_embeddings(out, ds.matrix(c.id, split));
    }
  }
}

// Component-wise mean of a class's train-split embeddings.
inline ClassRepresentation class_representation(const EmbeddingDataset& ds, const std::string& config_id,
                                                int class_index) {
  const auto& mat = ds.matrix(config_id, "train");
  const auto& rows = ds.rows_of("train", class_index);
  if (rows.empty()) {
    throw Error(ErrorKind::EmptyClass,
                "class " + std::to_string(class_index) + " has no train samples");
  }
  ClassRepresentation rep;
  rep.config_id = config_id;
  rep.class_index = class_index;
  rep.sample_count = rows.size();
  rep.vector.assign(mat.dim, 0.0);
  for (std::size_t r : rows) {
    auto e = mat.row(r);
    for (std::size_t k = 0; k < mat.dim; ++k) rep.vector[k] += e[k];
  }
  for (double& v : rep.vector) v /= static_cast<double>(rows.size());
  return rep;
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian embeddings

struct SyntheticConfig {
  double flops_m = 1.0;
  double noise_scale = 0.0;
};

struct SyntheticSpec {
  std::size_t n_classes = 0;
  std::size_t dim = 0;
  double cluster_spread = 1.0;
  std::vector<std::vector<double>> center_distances;
  std::size_t samples_per_class = 100;
  // Per-class counts for the val/test splits; 0 means samples_per_class.
  std::size_t val_per_class = 0;
  std::size_t test_per_class = 0;
  std::vector<SyntheticConfig> configs;
  std::uint64_t seed = 42;
  std::string dataset_name = "synthetic";
  // Device latency is flops_m times this factor.
  std::map<std::string, double> ms_per_mflop = {{"pi0", 1.0}, {"gap8", 0.4}};
};

// Places n points in `dim` dimensions whose pairwise distances equal
// `distances`, by classical multidimensional scaling.
inline std::vector<std::vector<double>> place_centers(const std::vector<std::vector<double>>& distances,
                                                      std::size_t dim) {
  const std::size_t n = distances.size();
  if (n < 2) throw Error(ErrorKind::InfeasibleGeometry, "need at least 2 centers");
  Eigen::MatrixXd d2(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    if (distances[i].size() != n) throw Error(ErrorKind::InfeasibleGeometry, "distance matrix is not square");
    for (std::size_t j = 0; j < n; ++j) {
      const double dij = distances[i][j];
      if (!std::isfinite(dij) || dij < 0.0 || std::abs(dij - distances[j][i]) > 1e-12 * (1.0 + dij) ||
          (i == j && dij != 0.0)) {
        throw Error(ErrorKind::InfeasibleGeometry,
                    "distances must be finite, non-negative, symmetric with zero diagonal");
      }
      d2(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = dij * dij;
    }
  }
  const Eigen::MatrixXd centering =
      Eigen::MatrixXd::Identity(n, n) - Eigen::MatrixXd::Constant(n, n, 1.0 / static_cast<double>(n));
  const Eigen::MatrixXd gram = -0.5 * centering * d2 * centering;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
  const auto& values = eig.eigenvalues();
  const double scale = std::max(1.0, values.cwiseAbs().maxCoeff());
  const double tol = 1e-9 * scale;
  std::size_t positive = 0;
  for (Eigen::Index k = 0; k < values.size(); ++k) {
    if (values(k) < -tol) {
      throw Error(ErrorKind::InfeasibleGeometry, "distances are not Euclidean");
    }
    if (values(k) > tol) ++positive;
  }
  if (positive > dim) {
    throw Error(ErrorKind::InfeasibleGeometry,
                "distances need " + std::to_string(positive) + " dimensions, only " +
                    std::to_string(dim) + " available");
  }
  std::vector<std::vector<double>> centers(n, std::vector<double>(dim, 0.0));
  // Eigenvalues come sorted ascending; take the largest ones.
  for (std::size_t a = 0; a < positive; ++a) {
    const Eigen::Index k = values.size() - 1 - static_cast<Eigen::Index>(a);
    const double s = std::sqrt(values(k));
    Eigen::VectorXd v = eig.eigenvectors().col(k);
    // Fix the sign so the output does not depend on solver sign conventions.
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    for (std::size_t i = 0; i < n; ++i) centers[i][a] = s * v(static_cast<Eigen::Index>(i));
  }
  return centers;
}

inline EmbeddingDataset synthesize_gaussian_dataset(const SyntheticSpec& spec) {
  if (spec.n_classes < 2) throw Error(ErrorKind::SchemaViolation, "n_classes must be at least 2");
  if (spec.dim == 0) throw Error(ErrorKind::SchemaViolation, "dim must be positive");
  if (spec.configs.empty()) throw Error(ErrorKind::SchemaViolation, "at least one config is required");
  if (spec.center_distances.size() != spec.n_classes) {
    throw Error(ErrorKind::InfeasibleGeometry, "distance matrix size does not match n_classes");
  }
  const auto centers = place_centers(spec.center_distances, spec.dim);

  Manifest m;
  m.dataset_name = spec.dataset_name;
  for (std::size_t c = 0; c < spec.n_classes; ++c) m.classes.push_back("class" + std::to_string(c));
  double max_flops = 0.0;
  for (const auto& sc : spec.configs) {
    if (!(sc.flops_m > 0.0)) throw Error(ErrorKind::SchemaViolation, "config flops_m must be positive");
    if (sc.noise_scale < 0.0) throw Error(ErrorKind::SchemaViolation, "noise_scale must be non-negative");
    max_flops = std::max(max_flops, sc.flops_m);
  }
  for (std::size_t i = 0; i < spec.configs.size(); ++i) {
    ConfigDescriptor c;
    c.id = "cfg" + std::to_string(i);
    c.flops_m = spec.configs[i].flops_m;
    c.pruning_pct = std::clamp(static_cast<int>(std::lround(100.0 * (1.0 - c.flops_m / max_flops))), 0, 99);
    c.resolution = 224;
    c.embedding_dim = spec.dim;
    for (const auto& [dev, factor] : spec.ms_per_mflop) c.device_latency_ms[dev] = factor * c.flops_m;
    c.extractor_bytes = static_cast<std::uint64_t>(std::llround(c.flops_m * 1.0e4));
    m.configs.push_back(std::move(c));
  }
  m.notes = "synthetic Gaussian clusters, seed " + std::to_string(spec.seed);

  Rng rng(spec.seed);
  std::map<std::pair<std::string, std::string>, EmbeddingMatrix> data;
  const std::pair<std::string, std::size_t> splits[] = {
      {"train", spec.samples_per_class},
      {"val", spec.val_per_class ? spec.val_per_class : spec.samples_per_class},
      {"test", spec.test_per_class ? spec.test_per_class : spec.samples_per_class},
  };
  std::vector<double> base(spec.dim), noisy(spec.dim);
  for (const auto& [split, per_class] : splits) {
    for (const auto& c : m.configs) data[{c.id, split}].dim = spec.dim;
    auto& ids = m.splits[split];
    for (std::size_t cls = 0; cls < spec.n_classes; ++cls) {
      for (std::size_t s = 0; s < per_class; ++s) {
        const std::string sid = split + "-" + std::to_string(ids.size());
        ids.push_back(sid);
        for (std::size_t k = 0; k < spec.dim; ++k) {
          base[k] = centers[cls][k] + spec.cluster_spread * rng.normal();
        }
        for (std::size_t i = 0; i < spec.configs.size(); ++i) {
          for (std::size_t k = 0; k < spec.dim; ++k) {
            noisy[k] = base[k] + spec.configs[i].noise_scale * rng.normal();
          }
          data[{m.configs[i].id, split}].push_row(sid, static_cast<int>(cls), -1, noisy);
        }
      }
    }
  }
  return EmbeddingDataset(std::move(m), std::move(data));
}

}  // namespace ctxswitch
