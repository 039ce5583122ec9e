#pragma once

#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctxswitch/common.hpp"
#include "ctxswitch/dataset.hpp"

namespace ctxswitch {

// Pairwise cosine similarities between class representations.
struct SimilarityMatrix {
  std::string config_id;
  std::size_t n = 0;
  std::vector<double> values;  // row-major n x n

  double at(int i, int j) const {
    return values[static_cast<std::size_t>(i) * n + static_cast<std::size_t>(j)];
  }
};

// (mean, population std) of the pairwise similarities inside a combo.
struct ContextRepresentation {
  Combo combo;
  double mean_sim = 0.0;
  double std_sim = 0.0;
};

inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw Error(ErrorKind::DimensionMismatch, "cosine of unequal-length vectors");
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    dot += u[k] * v[k];
    nu += u[k] * u[k];
    nv += v[k] * v[k];
  }
  if (!(nu > 0.0) || !(nv > 0.0)) throw Error(ErrorKind::ZeroVector, "cosine of a zero vector");
  return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

inline SimilarityMatrix similarity_matrix(const EmbeddingDataset& ds, const std::string& config_id) {
  const std::size_t n = ds.num_classes();
  std::vector<ClassRepresentation> reps;
  reps.reserve(n);
  for (std::size_t c = 0; c < n; ++c) reps.push_back(class_representation(ds, config_id, static_cast<int>(c)));
  SimilarityMatrix s;
  s.config_id = config_id;
  s.n = n;
  s.values.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (std::all_of(reps[i].vector.begin(), reps[i].vector.end(), [](double v) { return v == 0.0; })) {
      throw Error(ErrorKind::ZeroVector, "class " + std::to_string(i) + " has a zero mean embedding");
    }
    s.values[i * n + i] = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = cosine_similarity(reps[i].vector, reps[j].vector);
      s.values[i * n + j] = v;
      s.values[j * n + i] = v;
    }
  }
  return s;
}

// Similarity over the manifest's reference configuration.
inline SimilarityMatrix similarity_matrix(const EmbeddingDataset& ds) {
  return similarity_matrix(ds, ds.manifest().reference());
}

namespace detail {

inline void check_combo(const Combo& combo, std::size_t n) {
  if (combo.size() < 2) throw Error(ErrorKind::ComboTooSmall, "a context needs at least 2 classes");
  Combo sorted = combo;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw Error(ErrorKind::DuplicateClassInCombo, "combo " + combo_key(sorted) + " repeats a class");
  }
  if (sorted.front() < 0 || static_cast<std::size_t>(sorted.back()) >= n) {
    throw Error(ErrorKind::UnknownClassIndex, "combo " + combo_key(sorted) + " names an unknown class");
  }
}

inline std::vector<double> pair_values(const SimilarityMatrix& s, const Combo& combo) {
  check_combo(combo, s.n);
  Combo sorted = combo;
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> vals;
  vals.reserve(sorted.size() * (sorted.size() - 1) / 2);
  for (std::size_t a = 0; a < sorted.size(); ++a) {
    for (std::size_t b = a + 1; b < sorted.size(); ++b) vals.push_back(s.at(sorted[a], sorted[b]));
  }
  return vals;
}

}  // namespace detail

inline ContextRepresentation context_representation(const SimilarityMatrix& s, const Combo& combo) {
  const auto vals = detail::pair_values(s, combo);
  const double k = static_cast<double>(vals.size());
  double mean = 0.0;
  for (double v : vals) mean += v;
  mean /= k;
  double var = 0.0;
  for (double v : vals) var += (v - mean) * (v - mean);
  var /= k;
  ContextRepresentation rep;
  rep.combo = combo;
  std::sort(rep.combo.begin(), rep.combo.end());
  rep.mean_sim = std::clamp(mean, -1.0, 1.0);
  rep.std_sim = std::sqrt(var);
  return rep;
}

// Largest and smallest pairwise similarity inside a combo.
inline std::pair<double, double> minmax_representation(const SimilarityMatrix& s, const Combo& combo) {
  const auto vals = detail::pair_values(s, combo);
  const auto [lo, hi] = std::minmax_element(vals.begin(), vals.end());
  return {*hi, *lo};
}

// Min-max scaling onto [0, 1]; a constant list maps to zeros.
inline std::vector<double> normalize_similarities(std::span<const double> values) {
  std::vector<double> out(values.size(), 0.0);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - *lo) / range;
  return out;
}

// Confusion-based similarity: cross-misclassifications between i and j over
// the total number of samples of both classes (row sums).
inline double confusion_similarity(const std::vector<std::vector<double>>& confusion, int i, int j) {
  const auto row_sum = [&](int r) {
    double s = 0.0;
    for (double v : confusion.at(static_cast<std::size_t>(r))) s += v;
    return s;
  };
  const double ni = row_sum(i);
  const double nj = row_sum(j);
  if (!(ni > 0.0) || !(nj > 0.0)) {
    throw Error(ErrorKind::EmptyRow, "class without samples in confusion matrix");
  }
  const auto ui = static_cast<std::size_t>(i);
  const auto uj = static_cast<std::size_t>(j);
  return (confusion[ui][uj] + confusion[uj][ui]) / (ni + nj);
}

// Square similarity table whose entries are confusion_similarity(i, j), with
// ones on the diagonal. Plugs into context_representation.
inline SimilarityMatrix confusion_similarity_matrix(const std::vector<std::vector<double>>& confusion,
                                                    std::string label = "confusion") {
  SimilarityMatrix s;
  s.config_id = std::move(label);
  s.n = confusion.size();
  s.values.assign(s.n * s.n, 1.0);
  for (std::size_t i = 0; i < s.n; ++i) {
    for (std::size_t j = i + 1; j < s.n; ++j) {
      const double v = confusion_similarity(confusion, static_cast<int>(i), static_cast<int>(j));
      s.values[i * s.n + j] = v;
      s.values[j * s.n + i] = v;
    }
  }
  return s;
}

// sim_matrix.csv: header row of class names, then one row per class.
inline void write_similarity_csv(std::ostream& out, const SimilarityMatrix& s,
                                 const std::vector<std::string>& class_names) {
  out << "class";
  for (const auto& name : class_names) out << ',' << name;
  out << '\n';
  for (std::size_t i = 0; i < s.n; ++i) {
    out << class_names.at(i);
    for (std::size_t j = 0; j < s.n; ++j) out << ',' << format_double(s.values[i * s.n + j]);
    out << '\n';
  }
}

}  // namespace ctxswitch
