#include <sys/wait.h>

#include <cstdlib>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "dpc/affinity.hpp"
#include "dpc/datagen.hpp"
#include "dpc/matcher.hpp"
#include "test_util.hpp"

using dpc::test::read_text;
using dpc::test::TempDir;
using dpc::test::write_text;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = "DPC_LOG=quiet " + std::string(DPC_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(read_text(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string c;
    while (std::getline(ls, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

const char* kTinyNet =
    "edge_widths = 8,8,8,8\n"
    "head_widths = 16,8\n"
    "knn_k = 5\n";

void write_train_config(const fs::path& p, const fs::path& data, const fs::path& out) {
  write_text(p, std::string(kTinyNet) +
                    "epochs = 3\nbatch_size = 2\nprecision = double\nseed = 4\n"
                    "data_dir = " + data.string() + "\nout_dir = " + out.string() + "\n");
}

}  // namespace

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir();
    ASSERT_EQ(run("gen-synth -s out_dir=" + q(data()) + " -s n=64 -s num_pairs=3 -s seed=2"), 0);
    write_train_config(root() / "train.cfg", data(), run_dir());
    ASSERT_EQ(run("train -c " + q(root() / "train.cfg")), 0);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path root() { return dir_->path(); }
  static fs::path data() { return root() / "data"; }
  static fs::path run_dir() { return root() / "run"; }
  static fs::path ckpt() { return run_dir() / "final.ckpt"; }

  static TempDir* dir_;
};

TempDir* CliPipeline::dir_ = nullptr;

TEST_F(CliPipeline, TrainWritesLogAndCheckpoint) {
  EXPECT_TRUE(fs::exists(ckpt()));
  EXPECT_TRUE(fs::exists(run_dir() / "effective_config.txt"));
  const auto rows = csv_rows(run_dir() / "loss.csv");
  // 6 clouds in batches of 2: 3 steps per epoch.
  ASSERT_EQ(rows.size(), 1u + 9u);
  EXPECT_EQ(rows[0][0], "step");
  EXPECT_EQ(rows.back()[0], "9");
  EXPECT_EQ(rows.back()[1], "2");
}

TEST_F(CliPipeline, EffectiveConfigReproducesTheRun) {
  const auto again = root() / "again";
  ASSERT_EQ(run("train -c " + q(run_dir() / "effective_config.txt") + " -s out_dir=" + q(again)), 0);
  EXPECT_EQ(read_text(again / "loss.csv"), read_text(run_dir() / "loss.csv"));
  EXPECT_EQ(read_text(again / "final.ckpt"), read_text(ckpt()));
}

TEST_F(CliPipeline, InferThenEvalGivesMonotoneCurve) {
  const auto pred = root() / "pred";
  ASSERT_EQ(run("infer -s checkpoint=" + q(ckpt()) + " -s manifest=" + q(data() / "manifest.txt") +
                " -s out_dir=" + q(pred) + " -s edge_widths=8,8,8,8 -s head_widths=16,8 -s knn_k=5"),
            0);
  ASSERT_TRUE(fs::exists(pred / "pair_0002_pred.txt"));
  const auto curve = root() / "curve.csv";
  ASSERT_EQ(run("eval -s manifest=" + q(pred / "eval_manifest.txt") + " -s output=" + q(curve)), 0);
  const auto rows = csv_rows(curve);
  ASSERT_EQ(rows.size(), 21u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"epsilon", "accuracy", "err", "d"}));
  EXPECT_EQ(rows[1][0], "0.01");
  EXPECT_EQ(rows[20][0], "0.20");
  for (std::size_t r = 2; r < rows.size(); ++r) EXPECT_GE(std::stod(rows[r][1]), std::stod(rows[r - 1][1]));
  EXPECT_GT(std::stod(rows[1][2]), 0.0);
}

TEST_F(CliPipeline, SinglePairInferWithAffinityDump) {
  const auto entries = dpc::read_manifest(data() / "manifest.txt");
  const auto out = root() / "single.txt";
  const auto dump = root() / "s.bin";
  ASSERT_EQ(run("infer -s checkpoint=" + q(ckpt()) + " -s source=" + q(entries[0].source) + " -s target=" +
                q(entries[0].target) + " -s output=" + q(out) + " -s affinity_dump=" + q(dump)),
            0);
  const auto map = dpc::read_correspondence(out);
  const auto s = dpc::read_affinity_dump(dump);
  ASSERT_EQ(s.rows(), 64);
  ASSERT_EQ(s.cols(), 64);
  EXPECT_EQ(map.target_index, dpc::row_argmax(s));
  EXPECT_EQ(map.source_id, "pair_0000_source");
}

TEST_F(CliPipeline, MismatchedNetworkConfigIsADataError) {
  EXPECT_EQ(run("infer -s checkpoint=" + q(ckpt()) + " -s manifest=" + q(data() / "manifest.txt") +
                " -s out_dir=" + q(root() / "bad") + " -s edge_widths=8,8,8,16"),
            2);
}

TEST_F(CliPipeline, ExportColoredWritesTwoPlyFiles) {
  const auto entries = dpc::read_manifest(data() / "manifest.txt");
  const auto out = root() / "colored";
  ASSERT_EQ(run("export-colored -s checkpoint=" + q(ckpt()) + " -s source=" + q(entries[1].source) +
                " -s target=" + q(entries[1].target) + " -s out_dir=" + q(out)),
            0);
  EXPECT_TRUE(fs::exists(out / "pair_0001_source_colored.ply"));
  const auto ply = read_text(out / "pair_0001_target_colored.ply");
  EXPECT_EQ(ply.rfind("ply\n", 0), 0u);
  EXPECT_NE(ply.find("property uchar red"), std::string::npos);
}

TEST(Cli, PerfectPredictionsScoreExactly) {
  TempDir dir;
  dpc::SynthConfig cfg;
  cfg.n = 64;
  cfg.num_pairs = 2;
  dpc::gen_dataset(cfg, dir / "data");
  std::string manifest;
  for (std::size_t p = 0; p < 2; ++p) {
    const auto pair = dpc::gen_pair(cfg, p);
    dpc::CorrespondenceMap m;
    m.target_index = pair.gt;
    const auto name = "perfect_" + std::to_string(p) + ".txt";
    dpc::write_correspondence(dir / name, m);
    manifest += name + " data/pair_000" + std::to_string(p) + "_gt.txt data/" + pair.target.id + ".xyz\n";
  }
  write_text(dir / "eval.txt", manifest);
  ASSERT_EQ(run("eval -s manifest=" + q(dir / "eval.txt") + " -s output=" + q(dir / "curve.csv")), 0);
  const auto rows = csv_rows(dir / "curve.csv");
  ASSERT_EQ(rows.size(), 21u);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    EXPECT_EQ(std::stod(rows[r][1]), 1.0);
    EXPECT_EQ(std::stod(rows[r][2]), 0.0);
  }
}

TEST(Cli, UsageErrorsExitWithOne) {
  TempDir dir;
  EXPECT_EQ(run("gen-synth -s out_dir=" + q(dir / "x") + " -s no_such_key=1"), 1);
  write_text(dir / "c.cfg", "bogus = 3\n");
  EXPECT_EQ(run("eval -c " + q(dir / "c.cfg")), 1);
  EXPECT_EQ(run("train -s epochs=1"), 1);
  EXPECT_EQ(run("no-such-command"), 1);
  EXPECT_EQ(run(""), 1);
}

TEST(Cli, DataErrorsExitWithTwo) {
  TempDir dir;
  EXPECT_EQ(run("eval -s manifest=" + q(dir / "missing.txt") + " -s output=" + q(dir / "o.csv")), 2);
  write_text(dir / "broken.xyz", "1 2 3\n4 five 6\n");
  EXPECT_EQ(run("infer -s checkpoint=" + q(dir / "none.ckpt") + " -s source=" + q(dir / "broken.xyz") +
                " -s target=" + q(dir / "broken.xyz") + " -s output=" + q(dir / "o.txt")),
            2);
  write_text(dir / "fake.ckpt", "not a checkpoint");
  EXPECT_EQ(run("infer -s checkpoint=" + q(dir / "fake.ckpt") + " -s source=a.xyz -s target=b.xyz -s output=o.txt"), 2);
}

TEST(Cli, SelfcheckPasses) {
  TempDir dir;
  EXPECT_EQ(run("selfcheck -s work_dir=" + q(dir.path())), 0);
}
