// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const char* cli = std::getenv("SCALE_CLI");
    ASSERT_NE(cli, nullptr) << "SCALE_CLI must point at the scale_cli binary";
    cli_ = cli;
    root_ = fs::temp_directory_path() / ("scale_cli_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    const json cfg = {{"corpus",
                       {{"num_samples", 240}, {"num_categories", 10}, {"instances_per_category", 4},
                        {"word_vocab", 24}, {"num_properties", 12}, {"image_dim", 6}, {"video_dim", 5},
                        {"audio_coeffs", 4}}},
                      {"splits", {{"min_gallery_members", 3}}},
                      {"model", {{"hidden", 8}, {"layers", 1}, {"heads", 2}, {"ffn", 12}, {"dropout", 0.0}}},
                      {"epochs", 1},
                      {"batch_size", 16},
                      {"warmup_steps", 2},
                      {"finetune_epochs", 1}};
    std::ofstream(root_ / "config.json") << cfg.dump(2);
  }

  static void TearDownTestSuite() { fs::remove_all(root_); }

  static CliRun run(const std::string& args, const std::string& env = "") {
    const fs::path out = root_ / "stdout.txt", err = root_ / "stderr.txt";
    const std::string cmd = env + " '" + cli_ + "' " + args + " > '" + out.string() + "' 2> '" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    CliRun r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  static std::string cfg() { return "-c '" + (root_ / "config.json").string() + "'"; }
  static std::string path(const std::string& rel) { return "'" + (root_ / rel).string() + "'"; }

  static void expect_error_json(const CliRun& r, const std::string& kind) {
    ASSERT_FALSE(r.err.empty());
    const std::string line = r.err.substr(0, r.err.find('\n'));
    const json j = json::parse(line);
    EXPECT_EQ(j.at("error"), kind) << line;
    EXPECT_FALSE(j.at("message").get<std::string>().empty());
  }

  static inline std::string cli_;
  static inline fs::path root_;
};

}  // namespace

TEST_F(CliTest, GenDataIsDeterministic) {
  ASSERT_EQ(run("gen-data " + cfg() + " -o " + path("c1")).code, 0);
  ASSERT_EQ(run("gen-data " + cfg() + " -o " + path("c2")).code, 0);
  for (const char* f : {"manifest.json", "payloads.bin", "stats.json"}) {
    ASSERT_TRUE(fs::exists(root_ / "c1" / f)) << f;
    EXPECT_EQ(slurp(root_ / "c1" / f), slurp(root_ / "c2" / f)) << f;
  }
}

TEST_F(CliTest, GenDataReportsIncompleteRate) {
  const CliRun r = run("gen-data " + cfg() + " --samples 5000 --incomplete-rate 0.2 -o " + path("c_inc"));
  ASSERT_EQ(r.code, 0) << r.err;
  const json stats = json::parse(slurp(root_ / "c_inc" / "stats.json"));
  EXPECT_NEAR(stats.at("incomplete_rate").get<double>(), 0.2, 0.02);
}

TEST_F(CliTest, PretrainEvalReportPipeline) {
  ASSERT_EQ(run("gen-data " + cfg() + " -o " + path("corpus")).code, 0);
  const CliRun p = run("pretrain " + cfg() + " -d " + path("corpus") + " -o " + path("run"));
  ASSERT_EQ(p.code, 0) << p.err;
  const json pj = json::parse(p.out);
  EXPECT_GT(pj.at("steps").get<int>(), 0);
  EXPECT_TRUE(fs::exists(root_ / "run" / "final.ckpt"));
  EXPECT_TRUE(fs::exists(root_ / "run" / "epoch-1.ckpt"));
  EXPECT_TRUE(fs::exists(root_ / "run" / "run.json"));
  EXPECT_FALSE(slurp(root_ / "run" / "pretrain.jsonl").empty());

  const CliRun again = run("pretrain " + cfg() + " -d " + path("corpus") + " -o " + path("run2"));
  ASSERT_EQ(again.code, 0);
  EXPECT_EQ(json::parse(again.out).at("checkpoint_hash"), pj.at("checkpoint_hash"));

  const CliRun e = run("eval " + cfg() + " -d " + path("corpus") + " --checkpoint " + path("run/final.ckpt") +
                    " --tasks retrieval-coarse,correlation -o " + path("metrics.jsonl"));
  ASSERT_EQ(e.code, 0) << e.err;
  std::istringstream lines(slurp(root_ / "metrics.jsonl"));
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(json::parse(line).at("record"), "manifest");
  std::set<std::string> seen;
  while (std::getline(lines, line)) {
    const json j = json::parse(line);
    seen.insert(j.at("metric").get<std::string>() + (j.contains("k") ? "@" + std::to_string(j.at("k").get<int>()) : ""));
  }
  for (const char* m : {"mAP@1", "mAP@5", "mAP@10", "Prec@1", "Prec@5", "Prec@10", "image_text_cosine"}) {
    EXPECT_TRUE(seen.count(m)) << m;
  }

  const CliRun rep = run("report " + path("metrics.jsonl"));
  ASSERT_EQ(rep.code, 0);
  EXPECT_NE(rep.out.find("retrieval-coarse"), std::string::npos);

  const CliRun f = run("finetune " + cfg() + " -d " + path("corpus") + " --checkpoint " + path("run/final.ckpt") + " -o " +
                    path("ft.ckpt"));
  ASSERT_EQ(f.code, 0) << f.err;
  EXPECT_TRUE(fs::exists(root_ / "ft.ckpt"));
}

TEST_F(CliTest, DataRootEnvironmentVariable) {
  const std::string env = "SCALE_DATA_ROOT='" + (root_ / "dataroot").string() + "'";
  ASSERT_EQ(run("gen-data " + cfg(), env).code, 0);
  EXPECT_TRUE(fs::exists(root_ / "dataroot" / "corpus" / "manifest.json"));
  const CliRun p = run("pretrain " + cfg() + " -o " + path("run_env"), env);
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_EQ(json::parse(slurp(root_ / "run_env" / "run.json")).at("config").at("corpus_path"),
            (root_ / "dataroot" / "corpus").string());
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  CliRun r = run("");
  EXPECT_EQ(r.code, 2);
  expect_error_json(r, "usage");
  r = run("pretrain " + cfg());
  EXPECT_EQ(r.code, 2);
  expect_error_json(r, "usage");
  r = run("frobnicate");
  EXPECT_EQ(r.code, 2);
}

TEST_F(CliTest, NoActiveLossTermsExitsOne) {
  const CliRun r = run("pretrain " + cfg() + " --no-imcl --no-pretext -o " + path("none"));
  EXPECT_EQ(r.code, 1);
  expect_error_json(r, "runtime");
  EXPECT_NE(r.err.find("no active loss terms"), std::string::npos);
}

TEST_F(CliTest, CheckpointErrorsExitFour) {
  std::ofstream(root_ / "junk.ckpt") << "not a checkpoint at all";
  CliRun r = run("eval " + cfg() + " --checkpoint " + path("junk.ckpt") + " --tasks retrieval-coarse");
  EXPECT_EQ(r.code, 4);
  expect_error_json(r, "checkpoint");
  r = run("eval " + cfg() + " --checkpoint " + path("missing.ckpt"));
  EXPECT_EQ(r.code, 4);
}

TEST_F(CliTest, DivergenceExitsThree) {
  const CliRun r = run("pretrain " + cfg() + " --lr 1e300 -o " + path("diverge"));
  EXPECT_EQ(r.code, 3) << r.err;
  expect_error_json(r, "numeric");
  EXPECT_NE(r.err.find("non-finite"), std::string::npos);
}

TEST_F(CliTest, AblationTable5HasTwoRows) {
  const CliRun r = run("ablation " + cfg() + " --grid table5-mem -o " + path("abl"));
  ASSERT_EQ(r.code, 0) << r.err;
  const json t = json::parse(slurp(root_ / "abl" / "table5-mem.json"));
  EXPECT_EQ(t.at("rows").size(), 2u);
  EXPECT_EQ(run("report " + path("abl/table5-mem.json")).code, 0);
}
