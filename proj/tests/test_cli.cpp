#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <regex>
#include <sstream>

#include "commands.hpp"
#include "config_file.hpp"
#include "dslstm/archive.hpp"
#include "dslstm/error.hpp"
#include "dslstm/manifest.hpp"
#include "test_support.hpp"

namespace dslstm::cli {
namespace {

using testing::TempDir;

void dump(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

struct Outcome {
  int code;
  std::string out;
};

Outcome cli(std::vector<std::string> args) {
  args.insert(args.begin(), "dslstm");
  ::testing::internal::CaptureStdout();
  const int code = run_cli(std::move(args));
  std::fflush(stdout);
  return {code, ::testing::internal::GetCapturedStdout()};
}

std::size_t field(const std::string& text, const std::string& key) {
  std::smatch m;
  if (!std::regex_search(text, m, std::regex("(^|\\n)" + key + "=([0-9]+)"))) return 0;
  return std::stoul(m[2]);
}

TEST(ConfigFile, ParsesAndNormalizesKeys) {
  TempDir dir("cli");
  dump(dir / "c.cfg", "# comment\n\nper_class = 7\nseed=3\n");
  const auto entries = read_config_file(dir / "c.cfg");
  ASSERT_EQ(entries.size(), 2u);
  EXPECT_EQ(entries[0].key, "per-class");
  EXPECT_EQ(entries[0].value, "7");
  EXPECT_EQ(entries[0].line, 3u);
  dump(dir / "bad.cfg", "novalue\n");
  EXPECT_THROW(read_config_file(dir / "bad.cfg"), ValidationError);
  EXPECT_THROW(read_config_file(dir / "absent.cfg"), ValidationError);
}

TEST(ConfigFile, SplicedAheadOfUserFlags) {
  TempDir dir("cli");
  dump(dir / "c.cfg", "per_class=7\n");
  const auto known = [](const std::string& k) { return k == "per-class"; };
  const auto args = splice_config({"dslstm", "synth", "--config", (dir / "c.cfg").string(), "--per-class", "2"}, known);
  EXPECT_EQ(args, (std::vector<std::string>{"dslstm", "synth", "--per-class=7", "--per-class", "2"}));
  dump(dir / "u.cfg", "x=1\nbogus=2\n");
  try {
    splice_config({"dslstm", "synth", "--config=" + (dir / "u.cfg").string()}, known);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("u.cfg:1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(splice_config({"dslstm", "--config", (dir / "c.cfg").string()}, known), ValidationError);
}

TEST(Cli, ExitCodes) {
  TempDir dir("cli");
  EXPECT_EQ(cli({"--help"}).code, 0);
  EXPECT_EQ(cli({}).code, 1);
  EXPECT_EQ(cli({"frobnicate"}).code, 1);
  EXPECT_EQ(cli({"params", "--variant", "base9"}).code, 1);
  EXPECT_EQ(cli({"params", "--hidden", "0"}).code, 1);
  EXPECT_EQ(cli({"preprocess", "--manifest", (dir / "none.csv").string()}).code, 1);
  EXPECT_EQ(cli({"train", "--archive", (dir / "none.dsl").string()}).code, 1);
  EXPECT_EQ(cli({"gradcheck", "--scope", "nothing"}).code, 1);
  dump(dir / "u.cfg", "hidden=8\nwhatever=1\n");
  EXPECT_EQ(cli({"params", "--config", (dir / "u.cfg").string()}).code, 1);
}

TEST(Cli, ConfigValuesReachTheCommand) {
  TempDir dir("cli");
  dump(dir / "p.cfg", "variant=base4\nhidden=16\n");
  const auto r = cli({"params", "--config", (dir / "p.cfg").string(), "--hidden", "8"});
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("variant base4  hidden 8"), std::string::npos) << r.out;
}

TEST(Cli, ParamsMatchesModel) {
  for (auto v : model::kAllVariants) {
    const auto r = cli({"params", "--variant", std::string(model::to_string(v))});
    ASSERT_EQ(r.code, 0) << model::to_string(v);
    model::ModelConfig cfg;
    cfg.variant = v;
    EXPECT_EQ(field(r.out, "total"), model::Model<float>(cfg).parameter_count()) << r.out;
    EXPECT_TRUE(std::regex_search(r.out, std::regex("ds_only/base4 ratio=[0-9]+\\.[0-9]{3}\\n"))) << r.out;
  }
}

TEST(Cli, GradcheckOpsScope) {
  const auto r = cli({"gradcheck", "--scope", "ops", "--instances", "2"});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("conv2d"), std::string::npos) << r.out;
  EXPECT_EQ(cli({"gradcheck", "--scope", "ops", "--instances", "2", "--tolerance", "0"}).code, 2);
}

TEST(Cli, PipelineEndToEnd) {
  TempDir dir("cli");
  const std::string synth = (dir / "synth").string(), archive = (dir / "f.dsl").string(),
                    run = (dir / "run").string();
  ASSERT_EQ(cli({"synth", "--out", synth, "--per-class", "4", "--groups", "2"}).code, 0);
  const auto manifest = io::load_manifest(dir / "synth/manifest.csv");
  ASSERT_EQ(manifest.size(), 16u);
  EXPECT_EQ(manifest[1].group, std::optional<std::string>("g1"));

  const auto prep = cli({"preprocess", "--manifest", synth + "/manifest.csv", "--out", archive});
  ASSERT_EQ(prep.code, 0);
  EXPECT_NE(prep.out.find("records: 16"), std::string::npos) << prep.out;

  const std::vector<std::string> train{"train", "--archive", archive, "--out", run, "--folds", "2",
                                       "--epochs", "1", "--hidden", "4", "--conv1-channels", "2",
                                       "--conv2-channels", "2", "--batch-size", "4"};
  ASSERT_EQ(cli(train).code, 0);
  const std::string metrics = slurp(dir / "run/metrics.txt");
  EXPECT_NE(metrics.find("complete=1"), std::string::npos) << metrics;
  EXPECT_EQ(field(metrics, "folds_completed"), 2u);
  EXPECT_TRUE(fs::exists(dir / "run/fold0.dslp"));
  EXPECT_TRUE(fs::exists(dir / "run/fold1.dslp"));
  EXPECT_TRUE(fs::exists(dir / "run/report.txt"));
  EXPECT_NE(slurp(dir / "run/run.log").find("hidden=4"), std::string::npos);

  const auto params = cli({"params", "--checkpoint", run + "/fold0.dslp"});
  ASSERT_EQ(params.code, 0);
  EXPECT_EQ(field(params.out, "total"), io::read_checkpoint(dir / "run/fold0.dslp").parameter_count());

  const auto ev = cli({"evaluate", "--checkpoint", run + "/fold0.dslp", "--archive", archive});
  ASSERT_EQ(ev.code, 0);
  EXPECT_NE(ev.out.find("items 8"), std::string::npos) << ev.out;
  EXPECT_TRUE(fs::exists(dir / "run/fold0_confusion.csv"));
  EXPECT_EQ(cli({"evaluate", "--checkpoint", run + "/fold0.dslp", "--archive", archive, "--split", "dev"}).code, 1);

  // by_group folds need the manifest for their keys.
  auto grouped = train;
  grouped[4] = run + "_g";
  grouped.insert(grouped.end(), {"--fold-strategy", "by_group"});
  EXPECT_EQ(cli(grouped).code, 1);
  grouped.insert(grouped.end(), {"--manifest", synth + "/manifest.csv"});
  EXPECT_EQ(cli(grouped).code, 0);
}

}  // namespace
}  // namespace dslstm::cli
