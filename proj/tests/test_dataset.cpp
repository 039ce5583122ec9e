#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "fixtures.hpp"

using namespace ctxswitch;
using ctxswitch::testing::TempDir;

namespace {

const char* kManifest = R"({
  "dataset_name": "tiny",
  "classes": ["a", "b", "c"],
  "configs": [
    {"id": "c0", "pruning_pct": 50, "resolution": 112, "flops_m": 10, "embedding_dim": 3,
     "device_latency_ms": {"pi0": 5}},
    {"id": "c1", "pruning_pct": 0, "resolution": 224, "flops_m": 40, "embedding_dim": 3,
     "device_latency_ms": {"pi0": 20}}
  ],
  "splits": {"train": ["s0", "s1", "s2", "s3"], "test": ["t0", "t1", "t2"]}
})";

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << text;
}

const char* kTrain =
    "sample_id,class_index,seq_index,e0,e1,e2\n"
    "s0,0,-1,1,0,0\n"
    "s1,0,-1,3,0,0\n"
    "s2,1,-1,0,1,0\n"
    "s3,2,-1,0,0,5\n";

const char* kTest =
    "sample_id,class_index,seq_index,e0,e1,e2\n"
    "t0,0,0,1,0.5,0\n"
    "t1,1,1,0,1,0.25\n"
    "t2,2,2,0,0,1\n";

void write_tiny(const std::filesystem::path& root, const std::string& manifest = kManifest) {
  write_file(root / "manifest.json", manifest);
  for (const char* cfg : {"c0", "c1"}) {
    write_file(root / "embeddings" / cfg / "train.csv", kTrain);
    write_file(root / "embeddings" / cfg / "test.csv", kTest);
  }
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorKind::Usage;
}

}  // namespace

TEST(Manifest, LoadsValidManifest) {
  TempDir dir("manifest");
  write_tiny(dir.path());
  const Manifest m = load_manifest(dir.path() / "manifest.json");
  EXPECT_EQ(m.num_classes(), 3u);
  EXPECT_EQ(m.configs.size(), 2u);
  EXPECT_EQ(m.configs[0].param_bytes_per_weight, 4);
  EXPECT_EQ(m.reference(), "c1");
  EXPECT_EQ(m.class_index("c"), 2);
}

TEST(Manifest, DuplicateClassRejected) {
  std::string doc = kManifest;
  doc.replace(doc.find("\"c\"]"), 3, "\"a\"");
  EXPECT_EQ(kind_of([&] { parse_manifest(nlohmann::json::parse(doc)); }), ErrorKind::DuplicateClass);
}

TEST(Manifest, MissingEmbeddingFile) {
  TempDir dir("missing");
  write_tiny(dir.path());
  std::filesystem::remove(dir.path() / "embeddings" / "c1" / "train.csv");
  try {
    load_manifest(dir.path() / "manifest.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingFile);
    EXPECT_NE(std::string(e.what()).find("c1/train.csv"), std::string::npos);
  }
}

TEST(Manifest, SchemaViolationNamesField) {
  auto doc = nlohmann::json::parse(kManifest);
  doc["configs"][1].erase("flops_m");
  try {
    parse_manifest(doc);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::SchemaViolation);
    EXPECT_NE(std::string(e.what()).find("configs[1].flops_m"), std::string::npos);
  }
  doc = nlohmann::json::parse(kManifest);
  doc["configs"][0]["device_latency_ms"]["pi0"] = -1;
  EXPECT_EQ(kind_of([&] { parse_manifest(doc); }), ErrorKind::SchemaViolation);
  doc = nlohmann::json::parse(kManifest);
  doc["configs"][1]["id"] = "c0";
  EXPECT_EQ(kind_of([&] { parse_manifest(doc); }), ErrorKind::SchemaViolation);
}

TEST(Manifest, SplitRules) {
  auto doc = nlohmann::json::parse(kManifest);
  doc["splits"]["test"] = nlohmann::json::array();
  EXPECT_EQ(kind_of([&] { parse_manifest(doc); }), ErrorKind::EmptySplit);
  doc = nlohmann::json::parse(kManifest);
  doc["splits"]["test"].push_back("s0");
  EXPECT_EQ(kind_of([&] { parse_manifest(doc); }), ErrorKind::SchemaViolation);
  doc = nlohmann::json::parse(kManifest);
  doc["classes"] = {"only"};
  EXPECT_EQ(kind_of([&] { parse_manifest(doc); }), ErrorKind::SchemaViolation);
}

TEST(Embeddings, ParsesRowsInFileOrder) {
  std::istringstream in(kTrain);
  const auto mat = parse_embeddings(in, 3, 3);
  ASSERT_EQ(mat.rows(), 4u);
  EXPECT_EQ(mat.dim, 3u);
  EXPECT_EQ(mat.sample_ids[1], "s1");
  EXPECT_EQ(mat.labels[3], 2);
  EXPECT_EQ(mat.row(1)[0], 3.0);
  EXPECT_EQ(mat.seq_index[0], -1);
}

TEST(Embeddings, ValidationErrors) {
  {
    std::istringstream in("sample_id,class_index,seq_index,e0,e1,e2\ns0,0,-1,1,2\n");
    EXPECT_EQ(kind_of([&] { parse_embeddings(in, 3, 3); }), ErrorKind::DimensionMismatch);
  }
  {
    std::istringstream in("sample_id,class_index,seq_index,e0,e1,e2\ns0,0,-1,1,NaN,2\n");
    EXPECT_EQ(kind_of([&] { parse_embeddings(in, 3, 3); }), ErrorKind::NonFiniteValue);
  }
  {
    std::istringstream in("sample_id,class_index,seq_index,e0,e1,e2\ns0,0,-1,1,inf,2\n");
    EXPECT_EQ(kind_of([&] { parse_embeddings(in, 3, 3); }), ErrorKind::NonFiniteValue);
  }
  {
    std::istringstream in("sample_id,class_index,seq_index,e0,e1,e2\ns0,3,-1,1,1,2\n");
    EXPECT_EQ(kind_of([&] { parse_embeddings(in, 3, 3); }), ErrorKind::UnknownClassIndex);
  }
}

TEST(Embeddings, LoadChecksSplitMembership) {
  TempDir dir("membership");
  write_tiny(dir.path());
  write_file(dir.path() / "embeddings" / "c0" / "test.csv",
             "sample_id,class_index,seq_index,e0,e1,e2\nt0,0,0,1,0,0\nt1,1,1,0,1,0\n");
  const Manifest m = load_manifest(dir.path() / "manifest.json");
  EXPECT_EQ(kind_of([&] { load_embeddings(m, "c0", "test"); }), ErrorKind::SchemaViolation);
  EXPECT_EQ(load_embeddings(m, "c1", "test").rows(), 3u);
}

TEST(Embeddings, CanonicalRoundTripIsByteIdentical) {
  // Shortest round-trip formatting: awkward doubles survive unchanged.
  const std::string text =
      "sample_id,class_index,seq_index,e0,e1\n"
      "x,1,-1,0.1,-2.5e-300\n"
      "y,0,7,0.30000000000000004,123456789.125\n";
  std::istringstream in(text);
  const auto mat = parse_embeddings(in, 2, 2);
  std::ostringstream out;
  write_embeddings(out, mat);
  EXPECT_EQ(out.str(), text);
}

TEST(Dataset, AlignsSamplesAcrossConfigs) {
  TempDir dir("align");
  write_tiny(dir.path());
  write_file(dir.path() / "embeddings" / "c1" / "train.csv",
             "sample_id,class_index,seq_index,e0,e1,e2\n"
             "s3,2,-1,0,0,7\n"
             "s2,1,-1,0,2,0\n"
             "s1,0,-1,6,0,0\n"
             "s0,0,-1,2,0,0\n");
  const auto ds = load_dataset(dir.path() / "manifest.json");
  const auto& c1 = ds.matrix("c1", "train");
  EXPECT_EQ(c1.sample_ids, ds.matrix("c0", "train").sample_ids);
  EXPECT_EQ(c1.row(0)[0], 2.0);
  EXPECT_EQ(c1.row(3)[2], 7.0);
}

TEST(ClassRepresentation, ArithmeticMeanOfTrainSplit) {
  TempDir dir("rep");
  write_tiny(dir.path());
  const auto ds = load_dataset(dir.path() / "manifest.json");
  const auto a = class_representation(ds, "c0", 0);
  EXPECT_EQ(a.vector, (std::vector<double>{2.0, 0.0, 0.0}));
  EXPECT_EQ(a.sample_count, 2u);
  const auto c = class_representation(ds, "c0", 2);
  EXPECT_EQ(c.vector, (std::vector<double>{0.0, 0.0, 5.0}));
}

TEST(ClassRepresentation, EmptyClass) {
  TempDir dir("empty");
  std::string doc = kManifest;
  doc.replace(doc.find("[\"a\", \"b\", \"c\"]"), 15, "[\"a\", \"b\", \"c\", \"d\"]");
  write_tiny(dir.path(), doc);
  const auto ds = load_dataset(dir.path() / "manifest.json");
  EXPECT_EQ(kind_of([&] { class_representation(ds, "c0", 3); }), ErrorKind::EmptyClass);
}

TEST(ClassRepresentation, PermutationInvariant) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto ds = ctxswitch::testing::separable_dataset(3, 100 + trial, 12);
    auto mats = std::map<std::pair<std::string, std::string>, EmbeddingMatrix>{};
    for (const auto& c : ds.manifest().configs) {
      for (const auto& [split, ids] : ds.manifest().splits) {
        const auto& src = ds.matrix(c.id, split);
        std::vector<std::size_t> order(src.rows());
        std::iota(order.begin(), order.end(), 0);
        Rng shuffler(trial);
        shuffler.shuffle(order);
        EmbeddingMatrix dst;
        dst.dim = src.dim;
        for (auto r : order) dst.push_row(src.sample_ids[r], src.labels[r], src.seq_index[r], src.row(r));
        mats.emplace(std::make_pair(c.id, split), std::move(dst));
      }
    }
    EmbeddingDataset shuffled(ds.manifest(), std::move(mats));
    for (int cls = 0; cls < 3; ++cls) {
      const auto a = class_representation(ds, "cfg0", cls).vector;
      const auto b = class_representation(shuffled, "cfg0", cls).vector;
      for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
    }
  }
}

TEST(Synthetic, PlaceCentersReproducesDistances) {
  // Equilateral triangle: the double-centred Gram matrix has eigenvalues
  // {1/2, 1/2, 0} for unit sides, so it needs exactly two dimensions.
  const auto d = ctxswitch::testing::uniform_distances(3, 1.0);
  EXPECT_EQ(kind_of([&] { place_centers(d, 1); }), ErrorKind::InfeasibleGeometry);
  const auto centers = place_centers(d, 2);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const double dx = centers[i][0] - centers[j][0];
      const double dy = centers[i][1] - centers[j][1];
      EXPECT_NEAR(std::sqrt(dx * dx + dy * dy), d[i][j], 1e-9);
    }
  }
  // Violates the triangle inequality: not Euclidean in any dimension.
  std::vector<std::vector<double>> bad = {{0, 1, 5}, {1, 0, 1}, {5, 1, 0}};
  EXPECT_EQ(kind_of([&] { place_centers(bad, 5); }), ErrorKind::InfeasibleGeometry);
}

TEST(Synthetic, TwoDistantClassesAreLinearlySeparable) {
  SyntheticSpec spec;
  spec.n_classes = 2;
  spec.dim = 2;
  spec.cluster_spread = 0.1;
  spec.center_distances = ctxswitch::testing::uniform_distances(2, 10.0);
  spec.samples_per_class = 200;
  spec.configs = {{5.0, 0.0}};
  const auto ds = synthesize_gaussian_dataset(spec);
  const auto c0 = class_representation(ds, "cfg0", 0).vector;
  const auto c1 = class_representation(ds, "cfg0", 1).vector;
  for (const char* split : {"train", "val", "test"}) {
    const auto& mat = ds.matrix("cfg0", split);
    for (std::size_t r = 0; r < mat.rows(); ++r) {
      double proj = 0.0;
      for (int k = 0; k < 2; ++k) proj += (mat.row(r)[k] - 0.5 * (c0[k] + c1[k])) * (c1[k] - c0[k]);
      EXPECT_EQ(proj > 0.0, mat.labels[r] == 1);
    }
  }
}

TEST(Synthetic, SameSeedGivesByteIdenticalFiles) {
  SyntheticSpec spec;
  spec.n_classes = 4;
  spec.dim = 4;
  spec.center_distances = ctxswitch::testing::graded_distances(4, 2.0, 1.0);
  spec.samples_per_class = 10;
  spec.configs = {{10.0, 1.0}, {20.0, 0.0}};
  spec.seed = 99;
  TempDir a("synth-a"), b("synth-b");
  write_dataset(synthesize_gaussian_dataset(spec), a.path());
  write_dataset(synthesize_gaussian_dataset(spec), b.path());
  for (const auto& entry : std::filesystem::recursive_directory_iterator(a.path())) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), a.path());
    std::ifstream fa(entry.path(), std::ios::binary), fb(b.path() / rel, std::ios::binary);
    std::stringstream sa, sb;
    sa << fa.rdbuf();
    sb << fb.rdbuf();
    EXPECT_EQ(sa.str(), sb.str()) << rel;
  }
  // The written tree loads back and matches in memory.
  const auto reloaded = load_dataset(a.path() / "manifest.json");
  const auto fresh = synthesize_gaussian_dataset(spec);
  EXPECT_EQ(reloaded.matrix("cfg1", "test").values, fresh.matrix("cfg1", "test").values);
}

TEST(Synthetic, CenterDistanceConvergesWithSamples) {
  SyntheticSpec spec;
  spec.n_classes = 4;
  spec.dim = 6;
  spec.cluster_spread = 1.0;
  spec.center_distances = ctxswitch::testing::graded_distances(4, 3.0, 1.5);
  spec.samples_per_class = 1000;
  spec.val_per_class = 1;
  spec.test_per_class = 1;
  spec.configs = {{10.0, 0.0}};
  spec.seed = 42;
  const auto ds = synthesize_gaussian_dataset(spec);
  for (int i = 0; i < 4; ++i) {
    for (int j = i + 1; j < 4; ++j) {
      const auto a = class_representation(ds, "cfg0", i).vector;
      const auto b = class_representation(ds, "cfg0", j).vector;
      double d2 = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) d2 += (a[k] - b[k]) * (a[k] - b[k]);
      const double want = spec.center_distances[i][j];
      EXPECT_NEAR(std::sqrt(d2), want, 0.05 * want) << i << "," << j;
    }
  }
}
