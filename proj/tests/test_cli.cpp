#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <sstream>

#include "cli.hpp"
#include "support.hpp"
#include "volseq/data.hpp"
#include "volseq/model.hpp"

using namespace volseq;
using testing_support::ScratchDir;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "volseq");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> m;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) m[fs::relative(e.path(), root).string()] = slurp(e.path());
  return m;
}

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"inspect"}).code, 2);
  EXPECT_EQ(run({"inspect", "--arch", "lstm", "--checkpoint", "x"}).code, 2);
  EXPECT_EQ(run({"synth"}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST(Cli, InspectGoldenForEveryArchitecture) {
  for (ArchitectureId id : all_architectures()) {
    const auto r = run({"inspect", "--arch", to_string(id), "--golden"});
    EXPECT_EQ(r.code, 0) << to_string(id) << r.err;
    EXPECT_NE(r.out.find("matches the reference table"), std::string::npos);
  }
  const auto reduced = run({"inspect", "--arch", "lstm", "--profile", "reduced", "--golden"});
  EXPECT_EQ(reduced.code, 2);
}

TEST(Cli, InspectTotalIsSumOfRows) {
  ScratchDir dir("cli");
  const auto r = run({"inspect", "--arch", "gru", "--table-out", (dir / "t.tsv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(dir / "t.tsv");
  std::string line;
  std::getline(in, line);
  std::size_t sum = 0, total = 0;
  while (std::getline(in, line)) {
    const auto n = std::stoul(line.substr(line.rfind('\t') + 1));
    if (line.rfind("Total", 0) == 0) total = n;
    else sum += n;
  }
  EXPECT_EQ(sum, total);
  EXPECT_GT(total, 0u);
}

TEST(Cli, UnknownArchitectureListsValidIds) {
  const auto r = run({"inspect", "--arch", "bogus"});
  EXPECT_EQ(r.code, 2);
  for (const char* id : {"gru", "sgru", "sbigru", "lstm", "slstm", "sbilstm"}) {
    EXPECT_NE(r.err.find(id), std::string::npos) << r.err;
  }
}

TEST(Cli, SynthArithmeticDeterminismAndContract) {
  ScratchDir dir("cli");
  const auto a = run({"synth", "--out", (dir / "a").string(), "--per-class", "10", "--visits", "2", "--shape",
                      "16x16x16", "--seed", "3"});
  ASSERT_EQ(a.code, 0) << a.err;
  const auto files = tree(dir / "a");
  EXPECT_EQ(files.size(), 81u);  // 80 volumes + manifest
  EXPECT_EQ(read_manifest(dir / "a" / "manifest.tsv").rows.size(), 80u);

  ASSERT_EQ(run({"synth", "--out", (dir / "b").string(), "--per-class", "10", "--visits", "2", "--shape", "16x16x16",
                 "--seed", "3", "--jobs", "3"})
                .code,
            0);
  EXPECT_EQ(tree(dir / "b"), files);

  EXPECT_EQ(run({"synth", "--out", (dir / "c").string(), "--shape", "8x8x8"}).code, 2);
  EXPECT_EQ(run({"synth", "--out", "/proc/volseq-denied/x", "--shape", "16x16x16"}).code, 2);
  EXPECT_EQ(run({"synth", "--out", (dir / "d").string(), "--per-class", "1,2"}).code, 2);
}

TEST(Cli, ConfigFileMergesAndFlagsWin) {
  ScratchDir dir("cli");
  std::ofstream(dir / "run.cfg") << "# cohort settings\nper-class = 1\nvisits=1\nshape=16x16x16\nseed=4\njobs=2\n";
  ASSERT_EQ(run({"--config", (dir / "run.cfg").string(), "synth", "--out", (dir / "a").string()}).code, 0);
  EXPECT_EQ(read_manifest(dir / "a" / "manifest.tsv").rows.size(), 4u);
  ASSERT_EQ(run({"--config", (dir / "run.cfg").string(), "synth", "--out", (dir / "b").string(), "--visits", "3"}).code,
            0);
  EXPECT_EQ(read_manifest(dir / "b" / "manifest.tsv").rows.size(), 12u);
  EXPECT_EQ(read_manifest(dir / "b" / "manifest.tsv").seed, 4u);

  std::ofstream(dir / "bad.cfg") << "colour=blue\n";
  const auto r = run({"--config", (dir / "bad.cfg").string(), "synth", "--out", (dir / "c").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("colour"), std::string::npos);
  std::ofstream(dir / "junk.cfg") << "no equals sign\n";
  EXPECT_EQ(run({"--config", (dir / "junk.cfg").string(), "synth", "--out", (dir / "c").string()}).code, 2);
  EXPECT_EQ(run({"--config", (dir / "missing.cfg").string(), "synth", "--out", (dir / "c").string()}).code, 2);
}

TEST(Cli, AugmentBalancesAndReportsCounts) {
  ScratchDir dir("cli");
  ASSERT_EQ(run({"synth", "--out", (dir / "in").string(), "--per-class", "3,5,2,1", "--visits", "2", "--shape",
                 "16x16x16"})
                .code,
            0);
  const auto r = run({"augment", "--manifest", (dir / "in" / "manifest.tsv").string(), "--target", "6", "--out",
                      (dir / "out" / "balanced.tsv").string(), "--seed", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("1\t3\t6"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("4\t1\t6"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(dir / "out" / "balanced.tsv.counts.tsv"));
  const auto m = read_manifest(dir / "out" / "balanced.tsv");
  EXPECT_EQ(class_counts(group_sequences(m)), (std::array<std::size_t, 4>{6, 6, 6, 6}));
  for (const auto& row : m.rows) {
    EXPECT_FALSE(row.source_patient.empty());
    EXPECT_TRUE(fs::exists(dir / "out" / row.path)) << row.path;
  }
  const auto low = run({"augment", "--manifest", (dir / "in" / "manifest.tsv").string(), "--target", "4", "--out",
                        (dir / "low" / "m.tsv").string()});
  EXPECT_EQ(low.code, 2);
  EXPECT_NE(low.err.find("largest class"), std::string::npos);
}

TEST(Cli, TrainEvaluatePredictInspectPipeline) {
  ScratchDir dir("cli");
  ASSERT_EQ(run({"synth", "--out", (dir / "d").string(), "--per-class", "2", "--visits", "2", "--seed", "1"}).code, 0);
  const std::string manifest = (dir / "d" / "manifest.tsv").string();
  const std::string ckpt = (dir / "m.ckpt").string();

  EXPECT_EQ(run({"train", "--manifest", manifest, "--arch", "bogus", "--out", ckpt}).code, 2);

  const auto t = run({"train", "--manifest", manifest, "--arch", "lstm", "--profile", "reduced", "--epochs", "30",
                      "--lr", "0.01", "--dropout", "0", "--test-fraction", "0", "--seed", "3", "--out", ckpt});
  ASSERT_EQ(t.code, 0) << t.err;
  for (const char* suffix : {"", ".history.tsv", ".split.tsv"}) EXPECT_TRUE(fs::exists(ckpt + suffix)) << suffix;

  // Evaluating the overfit model on its own training data gives a near-diagonal confusion matrix.
  const auto e = run({"evaluate", "--checkpoint", ckpt, "--manifest", manifest, "--report", (dir / "rep").string()});
  ASSERT_EQ(e.code, 0) << e.err;
  std::ifstream cm(dir / "rep" / "confusion.tsv");
  std::string line;
  std::getline(cm, line);
  std::size_t diag = 0, total = 0;
  for (std::size_t i = 0; std::getline(cm, line); ++i) {
    std::istringstream is(line);
    std::size_t label, v;
    is >> label;
    for (std::size_t j = 0; is >> v; ++j) {
      total += v;
      if (i == j) diag += v;
    }
  }
  EXPECT_EQ(total, 8u);
  EXPECT_GE(diag, 7u) << e.out;

  const auto m = read_manifest(manifest);
  const auto p = run({"predict", "--checkpoint", ckpt, "--sequence", (dir / "d" / m.rows[0].path).string(),
                      (dir / "d" / m.rows[1].path).string()});
  ASSERT_EQ(p.code, 0) << p.err;
  std::istringstream ps(p.out);
  double sum = 0;
  int lines = 0;
  while (std::getline(ps, line)) {
    if (line.rfind("class ", 0) != 0) continue;
    sum += std::stod(line.substr(line.find('\t') + 1));
    ++lines;
  }
  EXPECT_EQ(lines, 4);
  EXPECT_NEAR(sum, 1.0, 4e-6);  // four values printed to six decimals
  EXPECT_NE(p.out.find("predicted class"), std::string::npos);

  const auto from_ckpt = run({"inspect", "--checkpoint", ckpt});
  const auto from_arch = run({"inspect", "--arch", "lstm", "--profile", "reduced"});
  ASSERT_EQ(from_ckpt.code, 0);
  EXPECT_EQ(from_ckpt.out, from_arch.out);

  EXPECT_EQ(run({"predict", "--checkpoint", (dir / "none.ckpt").string(), "--sequence", "x.nii"}).code, 2);
  EXPECT_EQ(run({"evaluate", "--checkpoint", (dir / "none.ckpt").string(), "--manifest", manifest, "--report",
                 (dir / "r2").string()})
                .code,
            2);

  std::string bytes = slurp(ckpt);
  bytes[bytes.size() / 2] ^= 0x40;
  std::ofstream(dir / "bad.ckpt", std::ios::binary) << bytes;
  const auto bad = run({"inspect", "--checkpoint", (dir / "bad.ckpt").string()});
  EXPECT_EQ(bad.code, 2);
  EXPECT_FALSE(bad.err.empty());
}

TEST(Cli, HeldOutSplitAndEvaluateSubset) {
  ScratchDir dir("cli");
  ASSERT_EQ(run({"synth", "--out", (dir / "d").string(), "--per-class", "5", "--visits", "2", "--seed", "2"}).code, 0);
  const std::string manifest = (dir / "d" / "manifest.tsv").string();
  const std::string ckpt = (dir / "m.ckpt").string();
  const auto t = run({"train", "--manifest", manifest, "--arch", "gru", "--epochs", "1", "--folds", "2", "--out", ckpt,
                      "--report", (dir / "held").string()});
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_NE(t.out.find("16 train, 4 held out"), std::string::npos) << t.out;
  EXPECT_TRUE(fs::exists(ckpt + ".folds.tsv"));
  EXPECT_TRUE(fs::exists(dir / "held" / "metrics.txt"));
  const auto e = run({"evaluate", "--checkpoint", ckpt, "--manifest", manifest, "--split", ckpt + ".split.tsv",
                      "--report", (dir / "rep").string()});
  ASSERT_EQ(e.code, 0) << e.err;
  // Same model, same held-out sequences: identical report.
  EXPECT_EQ(slurp(dir / "rep" / "metrics.txt"), slurp(dir / "held" / "metrics.txt"));
}

TEST(Cli, GradcheckCommand) {
  const auto ok = run({"gradcheck", "--component", "dense"});
  EXPECT_EQ(ok.code, 0) << ok.out << ok.err;
  EXPECT_NE(ok.out.find("all within tolerance"), std::string::npos);
  EXPECT_EQ(run({"gradcheck", "--component", "attention"}).code, 2);
  EXPECT_EQ(run({"gradcheck", "--component", "dense", "--tolerance", "0"}).code, 1);
}
