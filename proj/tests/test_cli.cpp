#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "fixtures.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

// Runs the CLI with stderr folded into the captured output.
Result cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " '" CTXSWITCH_CLI "' " + args + " 2>&1";
  Result r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) r.out += buf;
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

// A small dataset plus predictors for m = 2 and 3, built once.
class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new ctxswitch::testing::TempDir("cli");
    const auto d = dir_->path().string();
    ASSERT_EQ(cli("synth --out " + d + "/data --classes 6 --dim 8 --train 30 --val 15 --test 15").code, 0);
    for (const char* m : {"2", "3"}) {
      const auto r = cli("build-knn --manifest " + d + "/data/manifest.json --m " + m + " --epochs 20 --out " + d +
                         " --output knn" + m + ".json");
      ASSERT_EQ(r.code, 0) << r.out;
    }
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static std::string d() { return dir_->path().string(); }
  static std::string manifest() { return d() + "/data/manifest.json"; }
  static std::string knns() { return " --knn " + d() + "/knn2.json --knn " + d() + "/knn3.json"; }

  static ctxswitch::testing::TempDir* dir_;
};

ctxswitch::testing::TempDir* CliPipeline::dir_ = nullptr;

}  // namespace

TEST_F(CliPipeline, IngestSummaryAndSimilarity) {
  const auto r = cli("ingest --manifest " + manifest() + " --similarity " + d() + "/sim.csv");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(lines(r.out), 1u);
  EXPECT_NE(r.out.find("6 classes"), std::string::npos);
  const auto csv = slurp(d() + "/sim.csv");
  EXPECT_EQ(lines(csv), 7u);
  EXPECT_EQ(csv.rfind("class,class0,", 0), 0u);
}

TEST_F(CliPipeline, PredictPrintsOneConfigId) {
  const auto r = cli("predict --manifest " + manifest() + knns() + " --classes class0,class2,class5");
  EXPECT_EQ(r.code, 0) << r.out;
  ASSERT_EQ(lines(r.out), 1u);
  EXPECT_EQ(r.out.rfind("cfg", 0), 0u) << r.out;
  // Indices name the same classes.
  EXPECT_EQ(cli("predict --manifest " + manifest() + knns() + " --classes 5,0,2").out, r.out);
  const auto bad = cli("predict --manifest " + manifest() + knns() + " --classes class0,nosuch");
  EXPECT_EQ(bad.code, 3);
  EXPECT_EQ(lines(bad.out), 1u);
}

TEST_F(CliPipeline, OracleTable) {
  const auto r = cli("oracle --manifest " + manifest() + " --m 2 --sample all --epochs 10 --jobs 2 --out " + d());
  EXPECT_EQ(r.code, 0) << r.out;
  const auto csv = slurp(d() + "/oracle.csv");
  EXPECT_EQ(lines(csv), 1u + 15u);
  EXPECT_EQ(csv.rfind("combo,mean_sim,std_sim,cfg0,cfg1,cfg2,cfg3,oracle,unmet\n", 0), 0u);
  EXPECT_NE(r.out.find("acc-thr "), std::string::npos) << r.out;
  const auto fixed = cli("oracle --manifest " + manifest() + " --m 2 --sample all --epochs 10 --acc-thr 0.5 --out " +
                         d() + " --output fixed.csv");
  EXPECT_EQ(fixed.code, 0) << fixed.out;
  EXPECT_NE(fixed.out.find("acc-thr 0.5,"), std::string::npos) << fixed.out;
  EXPECT_EQ(cli("oracle --manifest " + manifest() + " --acc-thr high --out " + d()).code, 2);
}

TEST_F(CliPipeline, SimulateWritesReportsIdempotently) {
  const std::string args = "simulate --manifest " + manifest() + knns() +
                           " --mode cloud --interval 30 --device pi0 --rate-mbps 3 --seed 42 --m-set 2,3 --epochs 20";
  const auto a = cli(args + " --out " + d() + "/simA");
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_EQ(lines(a.out), 1u);
  for (const char* f : {"report.json", "report.csv", "frames.csv"}) EXPECT_TRUE(fs::exists(d() + "/simA/" + f)) << f;
  const auto b = cli(args + " --out " + d() + "/simB");
  ASSERT_EQ(b.code, 0);
  for (const char* f : {"report.json", "report.csv", "frames.csv"}) {
    EXPECT_EQ(slurp(d() + "/simA/" + f), slurp(d() + "/simB/" + f)) << f;
  }
  const auto doc = nlohmann::json::parse(slurp(d() + "/simA/report.json"));
  EXPECT_EQ(doc["seed"], 42);
  EXPECT_EQ(doc["interval"], 30);
  // 90 test samples at interval 30: three changes, four contexts.
  EXPECT_EQ(doc["context_changes"], 3);
  EXPECT_EQ(doc["frames"], 120);
  const auto csv = slurp(d() + "/simA/report.csv");
  EXPECT_EQ(csv.rfind(std::string(ctxswitch::kReportCsvHeader) + "\ncloud,pi0,30,", 0), 0u);
}

TEST_F(CliPipeline, SelectThenLocalSimulation) {
  const auto s = cli("select --manifest " + manifest() + knns() + " --mode greedy --m 2 --n 4 --epochs 20 --save-heads --out " +
                     d() + "/sel");
  ASSERT_EQ(s.code, 0) << s.out;
  const auto doc = nlohmann::json::parse(slurp(d() + "/sel/selection.json"));
  ASSERT_EQ(doc["contexts"].size(), 4u);
  std::set<int> covered;
  for (const auto& c : doc["contexts"]) {
    for (int cls : c["combo"]) covered.insert(cls);
  }
  EXPECT_EQ(covered.size(), 6u);
  EXPECT_GT(doc["storage_bytes"].get<std::uint64_t>(), 0u);
  EXPECT_TRUE(fs::exists(d() + "/sel/heads"));

  const auto local = cli("simulate --manifest " + manifest() + knns() + " --m-set 2 --mode local --selection " + d() +
                         "/sel/selection.json --heads-dir " + d() + "/sel --interval 10 --epochs 20 --out " + d() +
                         "/local");
  EXPECT_EQ(local.code, 0) << local.out;
  const auto rep = nlohmann::json::parse(slurp(d() + "/local/report.json"));
  EXPECT_EQ(rep["mode"], "local");
  EXPECT_EQ(rep["breakdown_ns"]["uplink"], 0);

  const auto missing = cli("simulate --manifest " + manifest() + knns() + " --mode local --out " + d() + "/x");
  EXPECT_EQ(missing.code, 2);
}

TEST_F(CliPipeline, BudgetTooSmallIsInfeasible) {
  const auto r = cli("select --manifest " + manifest() + knns() + " --m 2 --budget-mb 0.001 --epochs 5 --out " + d() +
                     "/tiny");
  EXPECT_EQ(r.code, 4) << r.out;
  EXPECT_EQ(r.out.rfind("error: CoverageInfeasible: ", 0), 0u) << r.out;
}

TEST(Cli, MissingManifestNamesPath) {
  const auto r = cli("simulate --manifest /nonexistent/dir/manifest.json --knn k.json");
  EXPECT_NE(r.code, 0);
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(lines(r.out), 1u);
  EXPECT_NE(r.out.find("/nonexistent/dir/manifest.json"), std::string::npos) << r.out;
}

TEST(Cli, UsageErrorsNameTheFlag) {
  const auto r = cli("simulate --manifest m.json --knn k.json --interval abc");
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(lines(r.out), 1u);
  EXPECT_NE(r.out.find("--interval"), std::string::npos) << r.out;
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
}

TEST(Cli, HelpListsDefaults) {
  const auto r = cli("simulate --help");
  EXPECT_EQ(r.code, 0);
  for (const char* needle : {"--interval UINT [30]", "--rate-mbps FLOAT [3]", "--device TEXT [pi0]",
                             "--seed UINT [42]", "--theta FLOAT [0.5]", "--m-set TEXT [2,3,4]",
                             "--frame-bytes UINT [30000]", "--cloud-ms FLOAT [0]", "--hidden UINT [64]"}) {
    EXPECT_NE(r.out.find(needle), std::string::npos) << needle;
  }
}

TEST(Cli, SeedFromEnvironment) {
  ctxswitch::testing::TempDir dir("cli-env");
  const auto d = dir.path().string();
  const std::string args = " --classes 3 --dim 3 --train 4 --val 2 --test 2 --configs 10:0";
  ASSERT_EQ(cli("synth --out " + d + "/a" + args).code, 0);
  ASSERT_EQ(cli("synth --out " + d + "/b" + args, "CTXSWITCH_SEED=42").code, 0);
  ASSERT_EQ(cli("synth --out " + d + "/c" + args, "CTXSWITCH_SEED=7").code, 0);
  ASSERT_EQ(cli("synth --out " + d + "/e" + args + " --seed 7").code, 0);
  const auto train = [&](const char* sub) { return slurp(d + "/" + sub + "/embeddings/cfg0/train.csv"); };
  EXPECT_EQ(train("a"), train("b"));
  EXPECT_NE(train("a"), train("c"));
  EXPECT_EQ(train("c"), train("e"));
}
