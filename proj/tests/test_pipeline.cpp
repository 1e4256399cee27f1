#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "helpers.hpp"

using namespace ugeforge;

namespace {

const char* kTiny = R"(run_name = "tiny"
master_seed = 3
[dataset]
source = "blobs:K=4,N=240,H=8,amp=0.5,jitter=0.5,sigma=1"
[trajectory]
epochs = 2
batch_size = 32
learning_rate = 0.05
keep_every = 1
[[authorized]]
family = "tiny-mlp"
[embedding]
family = "plain-cnn"
width_scale = 0.25
dim = 4
epochs = 2
batch_size = 32
[generation]
max_steps = 3
batch_size = 32
num_res_blocks = 1
base_channels = 2
generator_lr = 0.01
[generation.hacker_proxy]
family = "plain-cnn"
width_scale = 0.25
[evaluation]
epochs = 2
batch_size = 32
learning_rate = 0.05
methods = ["Original", "UGEs"]
[[evaluation.hackers]]
family = "plain-cnn"
width_scale = 0.25
)";

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::map<std::string, std::string> directory_bytes(const std::filesystem::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[std::filesystem::relative(e.path(), dir).string()] = file_bytes(e.path());
  return out;
}

std::filesystem::path fresh_dir(const std::string& name) {
  const auto d = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(d);
  return d;
}

}  // namespace

TEST(Pipeline, LayoutIdempotenceAndStaleRefusal) {
  const auto c = parse_config_text(kTiny);
  const auto dir = fresh_dir("ugeforge_test_pipeline");
  const auto first = execute_pipeline(c, dir);
  EXPECT_EQ(first.ran, (std::vector<std::string>{"trajectory", "embed", "generate", "evaluate:ablation"}));
  for (const char* sub : {"traj", "space", "uge", "report"}) EXPECT_TRUE(std::filesystem::is_directory(dir / sub)) << sub;
  for (const char* f : {"config.toml", "log.jsonl", "uge/manifest.json", "uge/labels.csv", "report/report.json", "report/report.csv"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  // Every artifact directory records the config hash that produced it.
  for (const char* sub : {"traj", "space", "uge", "report"}) {
    const auto j = nlohmann::json::parse(file_bytes(dir / sub / "stamp.json"));
    EXPECT_EQ(j.at("config_hash"), c.hash) << sub;
  }
  EXPECT_EQ(file_bytes(dir / "config.toml"), c.materialized);
  const auto report = load_report(dir / "report");
  EXPECT_EQ(report.rows.size(), 6u);
  EXPECT_EQ(report.metadata.at("config_hash"), c.hash);

  const auto before = directory_bytes(dir);
  const auto second = execute_pipeline(c, dir);
  EXPECT_TRUE(second.ran.empty());
  EXPECT_EQ(second.skipped, (std::vector<std::string>{"trajectory", "embed", "generate", "evaluate:ablation"}));
  EXPECT_EQ(directory_bytes(dir), before);

  const auto changed = parse_config_text(std::regex_replace(std::string(kTiny), std::regex("max_steps = 3"),
                                                      "max_steps = 3\nrho = 0.08"));
  const std::string old_hash = stage_hash(c, "generate"), new_hash = stage_hash(changed, "generate");
  try {
    execute_pipeline(changed, dir);
    FAIL() << "expected stale-artifact refusal";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("stale artifact"), std::string::npos) << msg;
    EXPECT_NE(msg.find("uge"), std::string::npos) << msg;
    EXPECT_NE(msg.find(old_hash), std::string::npos) << msg;
    EXPECT_NE(msg.find(new_hash), std::string::npos) << msg;
  }
  // The refused run rewrote only config.toml; every artifact is intact.
  auto after = directory_bytes(dir);
  after.erase("config.toml");
  auto kept = before;
  kept.erase("config.toml");
  EXPECT_EQ(after, kept);
  std::filesystem::remove_all(dir);
}

TEST(Pipeline, TwoRunsByteIdentical) {
  const auto c = parse_config_text(kTiny);
  const auto a = fresh_dir("ugeforge_test_pipeline_a"), b = fresh_dir("ugeforge_test_pipeline_b");
  execute_pipeline(c, a);
  execute_pipeline(c, b);
  EXPECT_EQ(directory_bytes(a / "uge"), directory_bytes(b / "uge"));
  EXPECT_EQ(file_bytes(a / "report" / "report.json"), file_bytes(b / "report" / "report.json"));
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
}

TEST(Pipeline, LaterStageNeedsEarlierArtifacts) {
  const auto c = parse_config_text(kTiny);
  const auto dir = fresh_dir("ugeforge_test_pipeline_partial");
  PipelineOptions opt;
  opt.stages = {"generate"};
  EXPECT_THROW(execute_pipeline(c, dir, opt), Error);
  opt.stages = {"bogus"};
  EXPECT_THROW(execute_pipeline(c, dir, opt), Error);
  opt.stages = {"trajectory"};
  const auto r = execute_pipeline(c, dir, opt);
  EXPECT_EQ(r.ran, (std::vector<std::string>{"trajectory"}));
  EXPECT_FALSE(std::filesystem::exists(dir / "uge"));
  std::filesystem::remove_all(dir);
}
