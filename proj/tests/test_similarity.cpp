#include <gtest/gtest.h>

#include "fixtures.hpp"

using namespace ctxswitch;

namespace {

SimilarityMatrix from_values(std::size_t n, std::vector<double> v) {
  SimilarityMatrix s;
  s.n = n;
  s.values = std::move(v);
  return s;
}

// Four classes with s01 = 0.2, s02 = 0.4, s12 = 0.6 and 0.5 to class 3.
SimilarityMatrix four_class() {
  return from_values(4, {1.0, 0.2, 0.4, 0.5,
                         0.2, 1.0, 0.6, 0.5,
                         0.4, 0.6, 1.0, 0.5,
                         0.5, 0.5, 0.5, 1.0});
}

EmbeddingDataset centers_dataset(const std::vector<std::vector<double>>& centers) {
  Manifest m;
  m.dataset_name = "centers";
  ConfigDescriptor c;
  c.id = "ref";
  c.resolution = 1;
  c.flops_m = 1.0;
  c.embedding_dim = centers.front().size();
  m.configs = {c};
  EmbeddingMatrix train;
  train.dim = c.embedding_dim;
  for (std::size_t i = 0; i < centers.size(); ++i) {
    m.classes.push_back("k" + std::to_string(i));
    m.splits["train"].push_back("s" + std::to_string(i));
    train.push_row("s" + std::to_string(i), static_cast<int>(i), -1, centers[i]);
  }
  std::map<std::pair<std::string, std::string>, EmbeddingMatrix> data;
  data[{"ref", "train"}] = std::move(train);
  return EmbeddingDataset(std::move(m), std::move(data));
}

}  // namespace

TEST(Cosine, BasicCases) {
  const std::vector<double> u{1, 2, 3};
  EXPECT_DOUBLE_EQ(cosine_similarity(u, u), 1.0);
  EXPECT_DOUBLE_EQ(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 0.0);
  EXPECT_DOUBLE_EQ(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{-1, 0}), -1.0);
  EXPECT_THROW(cosine_similarity(std::vector<double>{0, 0}, std::vector<double>{1, 0}), Error);
}

TEST(Cosine, ClampedAgainstRounding) {
  Rng rng(11);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> u(7);
    for (double& x : u) x = rng.uniform(-1e3, 1e3);
    std::vector<double> v = u;
    for (double& x : v) x *= 3.7;
    const double c = cosine_similarity(u, v);
    EXPECT_LE(c, 1.0);
    EXPECT_NEAR(c, 1.0, 1e-12);
  }
}

TEST(SimilarityMatrix, IdenticalAndOrthogonalCenters) {
  auto same = similarity_matrix(centers_dataset({{2, 1}, {4, 2}}), "ref");
  EXPECT_DOUBLE_EQ(same.at(0, 1), 1.0);
  auto ortho = similarity_matrix(centers_dataset({{1, 0}, {0, 1}}), "ref");
  EXPECT_DOUBLE_EQ(ortho.at(0, 1), 0.0);
  EXPECT_EQ(ortho.at(1, 1), 1.0);
}

TEST(SimilarityMatrix, ThreeCentersByHand) {
  // (1,0).(0,1) = 0; (1,0).(1,1)/sqrt2 = 1/sqrt2; (0,1).(1,1)/sqrt2 = 1/sqrt2.
  const double r = 1.0 / std::sqrt(2.0);
  auto s = similarity_matrix(centers_dataset({{1, 0}, {0, 1}, {r, r}}), "ref");
  EXPECT_NEAR(s.at(0, 1), 0.0, 1e-15);
  EXPECT_NEAR(s.at(0, 2), r, 1e-15);
  EXPECT_NEAR(s.at(1, 2), r, 1e-15);
  EXPECT_NEAR(s.at(2, 0), r, 1e-15);
}

TEST(SimilarityMatrix, ZeroMeanClassRejected) {
  EXPECT_THROW(similarity_matrix(centers_dataset({{0, 0}, {0, 1}}), "ref"), Error);
}

TEST(SimilarityMatrix, SymmetricUnitDiagonalInRange) {
  auto ds = ctxswitch::testing::separable_dataset(6, 5, 20);
  const auto s = similarity_matrix(ds);
  EXPECT_EQ(s.config_id, "cfg1");
  for (int i = 0; i < 6; ++i) {
    EXPECT_EQ(s.at(i, i), 1.0);
    for (int j = 0; j < 6; ++j) {
      EXPECT_NEAR(s.at(i, j), s.at(j, i), 1e-12);
      EXPECT_GE(s.at(i, j), -1.0);
      EXPECT_LE(s.at(i, j), 1.0);
    }
  }
}

TEST(ContextRepresentation, Examples) {
  const auto s = four_class();
  auto rep = context_representation(s, {0, 1, 2});
  EXPECT_NEAR(rep.mean_sim, 0.4, 1e-12);
  EXPECT_NEAR(rep.std_sim, 0.1633, 1e-4);
  EXPECT_NEAR(rep.std_sim, std::sqrt(0.08 / 3.0), 1e-12);

  auto constant = context_representation(s, {0, 3});
  EXPECT_DOUBLE_EQ(constant.mean_sim, 0.5);
  EXPECT_DOUBLE_EQ(constant.std_sim, 0.0);

  try {
    context_representation(s, {2});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ComboTooSmall);
  }
  try {
    context_representation(s, {1, 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DuplicateClassInCombo);
  }
}

TEST(ContextRepresentation, PermutationInvariant) {
  auto ds = ctxswitch::testing::separable_dataset(7, 9, 10);
  const auto s = similarity_matrix(ds);
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    std::vector<int> combo{0, 1, 2, 3, 4, 5, 6};
    rng.shuffle(combo);
    combo.resize(2 + rng.below(5));
    auto shuffled = combo;
    rng.shuffle(shuffled);
    const auto a = context_representation(s, combo);
    const auto b = context_representation(s, shuffled);
    EXPECT_EQ(a.mean_sim, b.mean_sim);
    EXPECT_EQ(a.std_sim, b.std_sim);
    EXPECT_EQ(a.combo, b.combo);
  }
}

TEST(MinMaxRepresentation, Examples) {
  const auto s = four_class();
  EXPECT_EQ(minmax_representation(s, {0, 1, 2}), std::make_pair(0.6, 0.2));
  EXPECT_EQ(minmax_representation(s, {0, 3}), std::make_pair(0.5, 0.5));
  auto single = from_values(2, {1.0, 0.3, 0.3, 1.0});
  EXPECT_EQ(minmax_representation(single, {0, 1}), std::make_pair(0.3, 0.3));
}

TEST(NormalizeSimilarities, Examples) {
  const auto a = normalize_similarities(std::vector<double>{0.2, 0.4, 0.6});
  EXPECT_NEAR(a[0], 0.0, 1e-15);
  EXPECT_NEAR(a[1], 0.5, 1e-15);
  EXPECT_NEAR(a[2], 1.0, 1e-15);
  EXPECT_EQ(normalize_similarities(std::vector<double>{0.7}), std::vector<double>{0.0});
  EXPECT_EQ(normalize_similarities(std::vector<double>{-1.0, 1.0}), (std::vector<double>{0.0, 1.0}));
}

TEST(ConfusionSimilarity, Examples) {
  std::vector<std::vector<double>> none = {{100, 0}, {0, 100}};
  EXPECT_EQ(confusion_similarity(none, 0, 1), 0.0);
  std::vector<std::vector<double>> some = {{95, 5}, {5, 95}};
  EXPECT_DOUBLE_EQ(confusion_similarity(some, 0, 1), 0.05);
  EXPECT_DOUBLE_EQ(confusion_similarity(some, 1, 0), 0.05);
  std::vector<std::vector<double>> empty = {{10, 0}, {0, 0}};
  try {
    confusion_similarity(empty, 0, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyRow);
  }
  const auto table = confusion_similarity_matrix(some);
  EXPECT_DOUBLE_EQ(table.at(0, 1), 0.05);
  EXPECT_EQ(table.at(1, 1), 1.0);
}

TEST(SimilarityCsv, HeaderAndRows) {
  std::ostringstream out;
  write_similarity_csv(out, from_values(2, {1.0, 0.25, 0.25, 1.0}), {"deer", "elk"});
  EXPECT_EQ(out.str(), "class,deer,elk\ndeer,1,0.25\nelk,0.25,1\n");
}
