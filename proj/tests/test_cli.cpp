#include <sys/wait.h>

#include "json.hpp"
#include "test_util.hpp"

using namespace tsrec;
using namespace tsrec::test_support;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code;
  std::string output;
};

RunResult run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(TSREC_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult r{WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(log)};
  return r;
}

// A small synthetic dataset and config shared by the tests in this file.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    auto r = run_cli("synth --out " + (dir_->path() / "data").string() + " --seed 7", dir_->path() / "synth.log");
    ASSERT_EQ(r.code, 0) << r.output;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string conf() { return (dir_->path() / "data" / "pipeline.conf").string(); }
  static fs::path work() { return dir_->path() / "data" / "work"; }
  static RunResult tsrec(const std::string& args) { return run_cli(args, dir_->path() / "last.log"); }

  static TempDir* dir_;
};
TempDir* CliTest::dir_ = nullptr;

}  // namespace

TEST_F(CliTest, SynthWritesInputs) {
  for (auto f : {"catalog.jsonl", "interactions.jsonl", "embeddings.txt", "word_vectors.txt", "pipeline.conf"})
    EXPECT_TRUE(fs::exists(dir_->path() / "data" / f)) << f;
}

TEST_F(CliTest, BadUsageAndConfigExitTwo) {
  EXPECT_EQ(tsrec("frobnicate").code, 2);
  auto r = tsrec("quantize -c " + conf() + " --set model.nonsense=1");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("model.nonsense"), std::string::npos);
  EXPECT_EQ(tsrec("quantize -c /nonexistent/pipeline.conf").code, 2);
}

TEST_F(CliTest, StageOrderAndFullChain) {
  // Nothing has run yet: train must name its missing upstream.
  auto early = tsrec("train -c " + conf());
  EXPECT_EQ(early.code, 3);
  EXPECT_NE(early.output.find("corpus"), std::string::npos) << early.output;

  for (auto stage : {"quantize", "mint", "extract", "init", "corpus", "train", "eval"}) {
    auto r = tsrec(std::string(stage) + " -c " + conf() + " --set train.steps=60");
    ASSERT_EQ(r.code, 0) << stage << ": " << r.output;
  }
  auto report = nlohmann::json::parse(read_file(work() / "eval" / "report.json"));
  for (auto k : {"3", "5", "10"}) {
    EXPECT_GE(report.at("hr").at(k).get<double>(), 0.0);
    EXPECT_LE(report.at("ndcg").at(k).get<double>(), report.at("hr").at(k).get<double>());
  }
  EXPECT_TRUE(report.at("acc1").is_number());
  EXPECT_TRUE(fs::exists(work() / "mint" / "sid_map.tsv"));
  EXPECT_TRUE(fs::exists(work() / "train" / "model.ckpt"));

  // Changing an upstream setting makes downstream stages stale.
  auto stale = tsrec("eval -c " + conf() + " --set train.steps=61");
  EXPECT_EQ(stale.code, 3) << stale.output;
  EXPECT_NE(stale.output.find("train"), std::string::npos) << stale.output;
}

TEST_F(CliTest, JsonLogLines) {
  auto r = tsrec("--json-log quantize -c " + conf());
  ASSERT_EQ(r.code, 0) << r.output;
  bool saw = false;
  for (const auto& line : split(r.output, '\n')) {
    if (trim(line).empty()) continue;
    auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("level"));
    saw = true;
  }
  EXPECT_TRUE(saw);
}

TEST_F(CliTest, AblateWritesEightReportsAndSummary) {
  for (auto stage : {"quantize", "mint", "extract"}) ASSERT_EQ(tsrec(std::string(stage) + " -c " + conf()).code, 0) << stage;
  auto r = tsrec("ablate -c " + conf() + " --set train.steps=20 --set train.eval_every=10 --set eval.max_users=20 "
                 "--set eval.probe_items=10");
  ASSERT_EQ(r.code, 0) << r.output;
  std::size_t reports = 0;
  for (const auto& d : {"random", "sa1", "sa2", "sa3"})
    for (const auto& t : {"with", "without"})
      reports += fs::exists(work() / "ablate" / (std::string(d) + "_" + t) / "eval" / "report.json");
  EXPECT_EQ(reports, 8u);
  auto csv = split(read_file(work() / "ablate" / "summary.csv"), '\n');
  std::erase_if(csv, [](const std::string& l) { return trim(l).empty(); });
  ASSERT_EQ(csv.size(), 9u);
  EXPECT_EQ(csv[0].rfind("run,init,tsalign,", 0), 0u);
  EXPECT_TRUE(fs::exists(work() / "ablate" / "curves.csv"));
}
