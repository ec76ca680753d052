#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dvad/model/weights_io.hpp"

using namespace dvad;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(DVAD_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dvad_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(cli("--help").code, 0);
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("dataset split").code, 2);  // --data missing
}

TEST(Cli, InvalidMethodIsUsageErrorListingMethods) {
  const auto dir = scratch("method");
  const auto r = cli("distill --method distance --student student4 --data " + q(dir) + " --out " + q(dir / "o"));
  EXPECT_EQ(r.code, 2) << r.out;
  for (const char* m : {"response", "feature", "relational"}) EXPECT_NE(r.out.find(m), std::string::npos) << r.out;
}

TEST(Cli, DistillNeedsTeacherWeights) {
  const auto dir = scratch("noteacher");
  const auto r = cli("distill --method response --student student4 --data " + q(dir) + " --out " + q(dir / "o"));
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_NE(r.out.find("--teacher-weights"), std::string::npos) << r.out;
}

TEST(Cli, ProfileRows) {
  const auto dir = scratch("profile");
  const auto r = cli("profile --reps 0 --out " + q(dir / "p.json"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto j = nlohmann::json::parse(slurp(dir / "p.json"));
  ASSERT_EQ(j["models"].size(), 5u);
  for (const auto& row : j["models"]) {
    EXPECT_EQ(row["multiplications"].get<std::uint64_t>(), row["flops"].get<std::uint64_t>() / 2);
    EXPECT_TRUE(row.contains("relative_deviation"));
  }
  const auto& t = j["models"][0];
  EXPECT_EQ(t["model"], "teacher");
  EXPECT_EQ(t["parameters"], 59568769u);
  EXPECT_NEAR(t["flops"].get<double>(), 2485390000.0, 0.01 * 2485390000.0);
  EXPECT_EQ(t["memory_mib"], 227.0);
}

TEST(Cli, DatasetCommandsAreByteIdentical) {
  const auto dir = scratch("dataset");
  ASSERT_EQ(cli("dataset synth-pools --seed 5 --per-pool 2 --seconds 4 --out " + q(dir / "pools")).code, 0);
  for (const char* d : {"a", "b"}) {
    const auto r = cli("dataset build --pools " + q(dir / "pools") + " --n 12 --seed 9 --out " + q(dir / d));
    ASSERT_EQ(r.code, 0) << r.out;
  }
  EXPECT_EQ(slurp(dir / "a" / "manifest.jsonl"), slurp(dir / "b" / "manifest.jsonl"));
  EXPECT_EQ(slurp(dir / "a" / "clips" / "clip_00007.wav"), slurp(dir / "b" / "clips" / "clip_00007.wav"));
  for (const char* d : {"s1", "s2"}) {
    const auto r = cli("dataset split --data " + q(dir / "a") + " --ratios 0.5,0.25,0.25 --seed 3 --out " + q(dir / d));
    ASSERT_EQ(r.code, 0) << r.out;
  }
  const auto s1 = slurp(dir / "s1" / "manifest.jsonl");
  EXPECT_EQ(s1, slurp(dir / "s2" / "manifest.jsonl"));
  EXPECT_NE(s1.find("\"split\":\"train\""), std::string::npos);
  const auto bad = cli("dataset split --data " + q(dir / "a") + " --ratios 0.5,0.5,0.5 --out " + q(dir / "s3"));
  EXPECT_EQ(bad.code, 2) << bad.out;
}

TEST(Cli, EvalWeightMismatchNamesTensor) {
  const auto dir = scratch("eval");
  Model<float> s3(load_model_config(std::string(DVAD_CONFIG_DIR) + "/student3.json"), 1);
  save_weights(s3, (dir / "s3.dvad").string());
  const auto r = cli("eval --weights " + q(dir / "s3.dvad") + " --model student4 --data " + q(dir));
  EXPECT_EQ(r.code, 1) << r.out;
  EXPECT_NE(r.out.find("mismatch at tensor '"), std::string::npos) << r.out;
}
