// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails. Pass criterion numbers as arguments to run a
// subset, e.g. `acceptance 1 3 9`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "oracles.hpp"
#include "volseq/data.hpp"
#include "volseq/layers.hpp"
#include "volseq/metrics.hpp"
#include "volseq/model.hpp"
#include "volseq/nifti.hpp"
#include "volseq/train.hpp"

using namespace volseq;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------- pinned limits

constexpr double kGoldenBudgetSeconds = 1.0;
constexpr double kGradTolerance = 1e-4;
constexpr std::size_t kGradModelSamples = 50;
constexpr double kGradBudgetSeconds = 300.0;
constexpr int kOracleInstances = 100;
constexpr double kOracleBudgetSeconds = 60.0;
constexpr double kAucTolerance = 1e-12;
constexpr double kFixtureTolerance = 1e-15;  // averaging per-class rates rounds in the last bit
constexpr int kAucInstances = 100;
constexpr double kMacroAucTolerance = 0.05;
constexpr double kMinMacroAccuracy = 0.90;
constexpr double kMinMacroAuc = 0.95;
constexpr double kTrainBudgetSeconds = 15 * 60.0;
constexpr double kAugmentBudgetSeconds = 120.0;
constexpr std::size_t kAugmentTarget = 375;
constexpr std::size_t kFolds = 10;
constexpr std::size_t kSampledCorruptBytes = 3000;

// ---------------------------------------------------------------- harness

struct Check {
  bool ok = true;
  std::vector<std::string> notes;

  void expect(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      if (notes.size() < 12) notes.push_back(what);
    }
  }
  void note(const std::string& s) { notes.push_back(s); }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  args.insert(args.begin(), "volseq");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void dump(const fs::path& p, const std::vector<char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
}

class Scratch {
 public:
  explicit Scratch(const std::string& tag) : path_(fs::temp_directory_path() / ("volseq_acceptance_" + tag)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  fs::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  fs::path path_;
};

template <typename F>
std::optional<ErrorKind> kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

// ---------------------------------------------------------------- 1: architecture tables

std::size_t conv_params(std::size_t ci, std::size_t co) { return 27 * ci * co + co; }
std::size_t lstm_params(std::size_t in, std::size_t h) { return 4 * (h * (in + h) + h); }
std::size_t gru_params(std::size_t in, std::size_t h) { return 3 * (h * (in + h) + 2 * h); }
std::size_t dense_params(std::size_t in, std::size_t out) { return in * out + out; }

std::string tuple(const std::vector<std::string>& parts) {
  std::string s = "(None";
  for (const auto& p : parts) s += ", " + p;
  return s + ")";
}

// Rows derived from shape arithmetic (valid 3x3x3 conv, floor 2x pooling) and
// the per-layer parameter formulas, with no reference to the library tables.
std::vector<LayerRow> expected_rows(ArchitectureId id) {
  const bool bi = id == ArchitectureId::SbiGru || id == ArchitectureId::SbiLstm;
  const bool stacked = id != ArchitectureId::Gru && id != ArchitectureId::Lstm;
  const bool lstm = id == ArchitectureId::Lstm || id == ArchitectureId::SLstm || id == ArchitectureId::SbiLstm;
  const std::size_t h = 128;
  std::vector<LayerRow> rows;
  std::size_t d[3] = {128, 128, 64}, c = 1;
  auto vol = [&](std::size_t ch) {
    return tuple({std::to_string(d[0]), std::to_string(d[1]), std::to_string(d[2]), std::to_string(ch)});
  };
  rows.push_back({"InputLayer", "[" + vol(1) + "]", 0});
  for (std::size_t co : {64, 64, 128, 256}) {
    for (auto& e : d) e -= 2;
    rows.push_back({"Conv3D", vol(co), conv_params(c, co)});
    for (auto& e : d) e /= 2;
    rows.push_back({"MaxPooling3D", vol(co), 0});
    rows.push_back({"BatchNormalization", vol(co), 4 * co});
    c = co;
  }
  rows.push_back({"GlobalMaxPooling3D", tuple({std::to_string(c)}), 0});
  const std::string cell = lstm ? "LSTM" : "GRU";
  const std::size_t width = bi ? 2 * h : h;
  auto cell_params = [&](std::size_t in) { return (bi ? 2 : 1) * (lstm ? lstm_params(in, h) : gru_params(in, h)); };
  if (stacked) {
    rows.push_back({cell, "[(None, None, " + std::to_string(width) + ")]", cell_params(c)});
    rows.push_back({cell, "[" + tuple({std::to_string(width)}) + "]", cell_params(width)});
  } else {
    rows.push_back({cell, "[" + tuple({std::to_string(width)}) + "]", cell_params(c)});
  }
  std::size_t in = width;
  const std::size_t widths[] = {1024, 512, 128, 64};
  for (std::size_t i = 0; i < 4; ++i) {
    rows.push_back({"Dense", "[" + tuple({std::to_string(widths[i])}) + "]", dense_params(in, widths[i])});
    if (i < 3) rows.push_back({"Dropout", "[" + tuple({std::to_string(widths[i])}) + "]", 0});
    in = widths[i];
  }
  rows.push_back({"Dense", "[" + tuple({"4"}) + "]", dense_params(in, 4)});
  return rows;
}

// Parses "Type   Shape   Params" rows between the column header and "Total".
std::vector<LayerRow> parse_printed(const std::string& text, std::size_t* total) {
  std::vector<LayerRow> rows;
  std::istringstream in(text);
  std::string line;
  bool inside = false;
  while (std::getline(in, line)) {
    if (line.rfind("Layer (type)", 0) == 0) {
      inside = true;
      continue;
    }
    if (!inside) continue;
    const auto last_space = line.find_last_of(' ');
    const std::size_t n = std::stoul(line.substr(last_space + 1));
    if (line.rfind("Total", 0) == 0) {
      *total = n;
      break;
    }
    const auto type_end = line.find(' ');
    auto shape = line.substr(type_end, last_space - type_end);
    shape.erase(0, shape.find_first_not_of(' '));
    shape.erase(shape.find_last_not_of(' ') + 1);
    rows.push_back({line.substr(0, type_end), shape, n});
  }
  return rows;
}

Check golden_tables() {
  Check c;
  // Reference per-layer counts, spelled out.
  c.expect(conv_params(1, 64) == 1792 && conv_params(64, 64) == 110656 && conv_params(64, 128) == 221312 &&
               conv_params(128, 256) == 884992,
           "conv formula");
  c.expect(gru_params(256, 128) == 148224 && lstm_params(256, 128) == 197120 &&
               2 * gru_params(256, 128) == 296448 && 2 * lstm_params(256, 128) == 394240,
           "recurrent formula");
  c.expect(dense_params(128, 1024) == 132096 && dense_params(256, 1024) == 263168 &&
               dense_params(1024, 512) == 524800 && dense_params(512, 128) == 65664 && dense_params(128, 64) == 8256 &&
               dense_params(64, 4) == 260,
           "dense formula");

  const auto t0 = Clock::now();
  for (ArchitectureId id : all_architectures()) {
    const auto r = cli({"inspect", "--arch", to_string(id), "--golden"});
    c.expect(r.code == 0, to_string(id) + ": inspect --golden exit " + std::to_string(r.code) + " " + r.err);
    std::size_t total = 0;
    const auto printed = parse_printed(r.out, &total);
    const auto expect = expected_rows(id);
    c.expect(printed.size() == expect.size(), to_string(id) + ": row count " + std::to_string(printed.size()));
    std::size_t sum = 0;
    for (std::size_t i = 0; i < std::min(printed.size(), expect.size()); ++i) {
      c.expect(printed[i] == expect[i], to_string(id) + " row " + std::to_string(i) + ": got " + printed[i].type +
                                            " " + printed[i].output_shape + " " + std::to_string(printed[i].params));
      sum += expect[i].params;
    }
    c.expect(total == sum, to_string(id) + ": total " + std::to_string(total) + " != " + std::to_string(sum));
  }
  const double secs = seconds_since(t0);
  c.expect(secs < kGoldenBudgetSeconds, "took " + fmt(secs) + " s");
  c.note("6 architectures, " + fmt(secs, 3) + " s");
  return c;
}

// ---------------------------------------------------------------- 2: gradients

Check gradients() {
  Check c;
  const auto t0 = Clock::now();
  GradCheckOptions opt;
  opt.tolerance = kGradTolerance;
  opt.model_samples = kGradModelSamples;
  const auto report = gradient_check({"all"}, opt);
  const double secs = seconds_since(t0);

  std::set<std::string> seen;
  double worst = 0;
  std::size_t model_checked = 0;
  for (const auto& e : report.entries) {
    seen.insert(e.block.substr(0, e.block.find('.')));
    worst = std::max(worst, e.max_relative_error);
    c.expect(e.passed && e.max_relative_error <= kGradTolerance,
             e.block + ": max relative error " + fmt(e.max_relative_error));
    if (e.block.rfind("model", 0) == 0) model_checked += e.checked;
  }
  c.expect(report.passed, "report flagged a failure");
  for (const auto& comp : gradient_check_components()) c.expect(seen.count(comp) == 1, "component missing: " + comp);
  c.expect(model_checked == kGradModelSamples, "model parameters checked: " + std::to_string(model_checked));
  c.expect(secs < kGradBudgetSeconds, "took " + fmt(secs) + " s");

  // Independent finite differences on a conv layer, through the test oracle.
  Rng rng(11);
  Tensor x = oracle::random({2, 5, 4, 4, 2}, rng);
  Conv3DParams p{oracle::random({3, 2, 3, 2, 3}, rng, -0.5, 0.5), oracle::random({3}, rng), Activation::Relu};
  const auto f = conv3d_forward(x, p);
  const Tensor w = oracle::random(f.y.shape(), rng);
  const auto g = conv3d_backward(p, f.cache, w);
  auto loss = [&] { return oracle::weighted_sum(conv3d_forward(x, p).y, w); };
  const double conv_err = std::max({oracle::max_rel_error(g.input, oracle::numeric_grad(loss, x)),
                                    oracle::max_rel_error(g.kernel, oracle::numeric_grad(loss, p.kernel)),
                                    oracle::max_rel_error(g.bias, oracle::numeric_grad(loss, p.bias))});
  c.expect(conv_err <= kGradTolerance, "independent conv check " + fmt(conv_err));

  // A deliberately broken conv backward must be caught.
  GradCheckOptions bad = opt;
  bad.corrupt_conv_backward = true;
  const auto neg = gradient_check({"conv3d"}, bad);
  c.expect(!neg.passed, "corrupted conv gradients were not detected");

  c.note(std::to_string(report.entries.size()) + " blocks, worst " + fmt(worst, 3) + ", " + fmt(secs, 3) + " s");
  return c;
}

// ---------------------------------------------------------------- 3: oracles

Check oracles() {
  Check c;
  const auto t0 = Clock::now();
  Rng rng(303);
  int conv = 0, pool = 0, gmp = 0, mm = 0;
  for (int i = 0; i < kOracleInstances; ++i) {
    const std::size_t ci = 1 + rng.below(3), co = 1 + rng.below(4);
    const std::size_t k[3] = {1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3)};
    Shape xs{k[0] + rng.below(5), k[1] + rng.below(5), k[2] + rng.below(5), ci};
    xs.insert(xs.begin(), 1 + rng.below(3));
    const Tensor x = oracle::random(xs, rng);
    Conv3DParams p{oracle::random({k[0], k[1], k[2], ci, co}, rng), oracle::random({co}, rng), Activation::Linear};
    conv += conv3d_forward(x, p).y == oracle::conv3d(x, p.kernel, p.bias);

    const std::size_t pq[3] = {1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3)};
    const Tensor xp = oracle::random({1 + rng.below(3), pq[0] + rng.below(6), pq[1] + rng.below(6),
                                      pq[2] + rng.below(6), 1 + rng.below(4)},
                                     rng);
    pool += maxpool3d_forward(xp, {pq[0], pq[1], pq[2]}).y == oracle::maxpool3d(xp, pq[0], pq[1], pq[2]);

    gmp += global_maxpool3d(xp).y == oracle::global_maxpool(xp);

    const std::size_t n = 1 + rng.below(9), kk = 1 + rng.below(9), m = 1 + rng.below(9);
    const Tensor a = oracle::random({n, kk}, rng), b = oracle::random({kk, m}, rng);
    mm += matmul(a, b) == oracle::matmul(a, b);
  }
  const double secs = seconds_since(t0);
  const int n = kOracleInstances;
  c.expect(conv == n, "conv3d " + std::to_string(conv) + "/" + std::to_string(n));
  c.expect(pool == n, "maxpool3d " + std::to_string(pool) + "/" + std::to_string(n));
  c.expect(gmp == n, "global maxpool " + std::to_string(gmp) + "/" + std::to_string(n));
  c.expect(mm == n, "matmul " + std::to_string(mm) + "/" + std::to_string(n));
  c.expect(secs < kOracleBudgetSeconds, "took " + fmt(secs) + " s");
  c.note(std::to_string(4 * n) + " instances bitwise equal, " + fmt(secs, 3) + " s");
  return c;
}

// ---------------------------------------------------------------- 4: metrics

Check metrics() {
  Check c;
  const auto s = macro_summary(confusion({0, 0, 1, 1}, {0, 1, 1, 1}, 2));
  auto near = [](double a, double b) { return std::abs(a - b) <= kFixtureTolerance; };
  c.expect(near(s.precision, 5.0 / 6.0), "MAPrecision " + fmt(s.precision, 17));
  c.expect(near(s.recall, 3.0 / 4.0), "MARecall " + fmt(s.recall, 17));
  c.expect(near(s.f1, 2 * (5.0 / 6.0) * 0.75 / (5.0 / 6.0 + 0.75)), "MAF1 " + fmt(s.f1, 17));
  c.expect(near(s.accuracy, 0.75), "MAAccuracy " + fmt(s.accuracy, 17));

  // Three classes: true 0,0,1,2,2,2 predicted 0,1,1,2,0,2.
  const auto s3 = macro_summary(confusion({0, 0, 1, 2, 2, 2}, {0, 1, 1, 2, 0, 2}, 3));
  const double p3 = (1.0 / 2 + 1.0 / 2 + 2.0 / 2) / 3, r3 = (1.0 / 2 + 1.0 + 2.0 / 3) / 3;
  c.expect(near(s3.precision, p3), "3-class MAPrecision");
  c.expect(near(s3.recall, r3), "3-class MARecall");

  Rng rng(404);
  double worst = 0;
  for (int t = 0; t < kAucInstances; ++t) {
    const std::size_t n = 2 + rng.below(300), k = 2 + rng.below(4);
    std::vector<std::size_t> y(n);
    for (auto& v : y) v = rng.below(k);
    y[0] = 0;
    y[1] = 1;
    Tensor sc({n, k});
    for (auto& v : sc.data()) v = t % 2 ? std::round(rng.uniform() * 8) / 8 : rng.uniform();
    for (std::size_t cls = 0; cls < 2; ++cls)
      worst = std::max(worst, std::abs(roc_ovr(y, sc, cls).auc - oracle::rank_auc(y, sc, cls)));
  }
  c.expect(worst <= kAucTolerance, "trapezoid vs rank statistic " + fmt(worst, 3));

  const double ma = mean({99.4, 87.5, 86.3, 94.4});
  c.expect(std::abs(ma - 91.9) <= kMacroAucTolerance, "macro of reference per-class AUCs " + fmt(ma));
  c.note("worst AUC gap " + fmt(worst, 3) + ", reference macro " + fmt(ma));
  return c;
}

// ---------------------------------------------------------------- 5: learnability

std::map<std::string, double> read_metrics(const fs::path& p) {
  std::map<std::string, double> m;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) m[line.substr(0, eq)] = std::stod(line.substr(eq + 1));
  }
  return m;
}

Check learnability() {
  Check c;
  Scratch dir("learn");
  const std::string data = (dir / "data").string(), manifest = (dir / "data" / "manifest.tsv").string();
  auto r = cli({"synth", "--out", data, "--per-class", "50", "--visits", "2", "--shape", "32x32x16", "--seed", "1"});
  c.expect(r.code == 0, "synth: " + r.err);
  if (r.code != 0) return c;

  auto train = [&](const std::string& tag) {
    const auto t0 = Clock::now();
    const auto res = cli({"train", "--manifest", manifest, "--arch", "lstm", "--profile", "reduced", "--epochs", "35",
                          "--seed", "1", "--test-fraction", "0.2", "--report", (dir / ("rep_" + tag)).string(),
                          "--out", (dir / (tag + ".ckpt")).string()});
    const double secs = seconds_since(t0);
    c.expect(res.code == 0, "train " + tag + ": exit " + std::to_string(res.code) + " " + res.err);
    c.expect(secs <= kTrainBudgetSeconds, "train " + tag + " took " + fmt(secs) + " s");
    return secs;
  };
  const double secs = train("a");

  // 40 train and 10 held-out sequences per class.
  std::map<std::string, int> label;
  for (const auto& s : group_sequences(read_manifest(manifest))) label[s.patient_id] = s.label;
  std::map<std::string, std::array<int, 4>> per_side;
  {
    std::ifstream in(dir / "a.ckpt.split.tsv");
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      const auto tab = line.find('\t');
      per_side[line.substr(tab + 1)][static_cast<std::size_t>(label[line.substr(0, tab)] - 1)]++;
    }
  }
  c.expect(per_side["train"] == std::array<int, 4>{40, 40, 40, 40}, "train side is not 40 per class");
  c.expect(per_side["test"] == std::array<int, 4>{10, 10, 10, 10}, "test side is not 10 per class");

  const auto m = read_metrics(dir / "rep_a" / "metrics.txt");
  const double acc = m.count("ma_accuracy") ? m.at("ma_accuracy") : 0, auc = m.count("macro_ovr_auc") ? m.at("macro_ovr_auc") : 0;
  c.expect(acc >= kMinMacroAccuracy, "MAAccuracy " + fmt(acc));
  c.expect(auc >= kMinMacroAuc, "macro OVR AUC " + fmt(auc));

  const double secs2 = train("b");
  c.expect(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"), "second run produced a different checkpoint");
  c.expect(slurp(dir / "rep_a" / "metrics.txt") == slurp(dir / "rep_b" / "metrics.txt"), "reports differ");

  c.note("MAAccuracy " + fmt(acc) + ", MARecall " + fmt(m.count("ma_recall") ? m.at("ma_recall") : 0) +
         ", AUC " + fmt(auc) + ", " + fmt(secs, 4) + " s + " + fmt(secs2, 4) + " s rerun");
  return c;
}

// ---------------------------------------------------------------- 6: augmentation

Check augmentation() {
  Check c;
  Scratch dir("augment");
  const auto t0 = Clock::now();
  auto r = cli({"synth", "--out", (dir / "in").string(), "--per-class", "43,124,42,22", "--visits", "2", "--shape",
                "16x16x16", "--seed", "5"});
  c.expect(r.code == 0, "synth: " + r.err);
  if (r.code != 0) return c;
  const auto before = read_manifest(dir / "in" / "manifest.tsv");
  c.expect(class_counts(group_sequences(before)) == std::array<std::size_t, 4>{43, 124, 42, 22}, "starting counts");

  r = cli({"augment", "--manifest", (dir / "in" / "manifest.tsv").string(), "--target", std::to_string(kAugmentTarget),
           "--out", (dir / "out" / "balanced.tsv").string(), "--seed", "5"});
  const double secs = seconds_since(t0);
  c.expect(r.code == 0, "augment: exit " + std::to_string(r.code) + " " + r.err);
  if (r.code != 0) return c;

  const auto after = read_manifest(dir / "out" / "balanced.tsv");
  const auto seqs = group_sequences(after);
  const std::size_t t = kAugmentTarget;
  c.expect(class_counts(seqs) == std::array<std::size_t, 4>{t, t, t, t}, "balanced counts");

  std::map<std::string, int> original_label;
  for (const auto& s : group_sequences(before)) original_label[s.patient_id] = s.label;
  std::set<std::string> seen_ids;
  std::size_t generated = 0, missing = 0;
  for (const auto& s : seqs) {
    c.expect(seen_ids.insert(s.patient_id).second, "duplicate patient " + s.patient_id);
    const auto it = original_label.find(s.lineage);
    c.expect(it != original_label.end(), s.patient_id + ": unknown source " + s.lineage);
    if (it != original_label.end()) c.expect(it->second == s.label, s.patient_id + ": lineage crosses classes");
    if (s.patient_id != s.lineage) ++generated;
    for (const auto& v : s.visits) missing += !fs::exists(dir / "out" / v.path);
  }
  for (const auto& row : after.rows) {
    const auto prov = Provenance::parse(row.provenance);
    c.expect(prov.original() == (row.patient_id == row.source_patient), row.patient_id + ": provenance mismatch");
  }
  c.expect(generated == 4 * t - (43 + 124 + 42 + 22), "generated " + std::to_string(generated));
  c.expect(missing == 0, std::to_string(missing) + " volumes missing");
  c.expect(secs < kAugmentBudgetSeconds, "took " + fmt(secs) + " s");
  c.note(std::to_string(generated) + " generated sequences, " + fmt(secs, 3) + " s");
  return c;
}

// ---------------------------------------------------------------- 7: NIfTI

Check nifti() {
  Check c;
  Scratch dir("nifti");
  Rng rng(707);
  int round_trips = 0;
  for (NiftiType type : {NiftiType::U8, NiftiType::I16, NiftiType::F32, NiftiType::F64}) {
    for (bool gz : {false, true}) {
      Volume v;
      v.grid = Tensor({6, 5, 4});
      for (auto& x : v.grid.data()) {
        switch (type) {
          case NiftiType::U8: x = static_cast<double>(rng.below(256)); break;
          case NiftiType::I16: x = static_cast<double>(static_cast<int>(rng.below(65536)) - 32768); break;
          case NiftiType::F32: x = static_cast<float>(rng.normal() * 50); break;
          case NiftiType::F64: x = rng.normal() * 50; break;
        }
      }
      v.spacing = {0.75, 1.25, 2.5};
      v.affine = {0, 0, 2.5, -5.0, -0.75, 0, 0, 18.5, 0, 1.25, 0, -2.25, 0, 0, 0, 1};
      const fs::path p = dir / (std::to_string(static_cast<int>(type)) + (gz ? ".nii.gz" : ".nii"));
      write_nifti(v, p, type);
      const Volume back = read_nifti(p);
      const auto raw = slurp(p);
      const bool is_gz = raw.size() > 2 && static_cast<unsigned char>(raw[0]) == 0x1f &&
                         static_cast<unsigned char>(raw[1]) == 0x8b;
      const bool same = back.grid == v.grid && back.spacing == v.spacing && back.affine == v.affine && is_gz == gz;
      c.expect(same, "round trip type " + std::to_string(static_cast<int>(type)) + (gz ? " gz" : ""));
      round_trips += same;
    }
  }

  Volume v;
  v.grid = Tensor({4, 4, 4});
  write_nifti(v, dir / "m.nii", NiftiType::F32);
  const auto good = slurp(dir / "m.nii");
  auto bad = good;
  std::memcpy(bad.data() + 344, "nx1\0", 4);
  dump(dir / "bad.nii", bad);
  c.expect(kind_of([&] { read_nifti(dir / "bad.nii"); }) == ErrorKind::Format, "bad magic not a format error");

  int truncations = 0;
  for (std::size_t keep : {std::size_t{0}, std::size_t{200}, std::size_t{347}, std::size_t{348}, good.size() - 1}) {
    dump(dir / "cut.nii", std::vector<char>(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(keep)));
    const bool ok = kind_of([&] { read_nifti(dir / "cut.nii"); }) == ErrorKind::Length;
    c.expect(ok, "truncation to " + std::to_string(keep) + " bytes not a length error");
    truncations += ok;
  }
  c.note(std::to_string(round_trips) + "/8 round trips, " + std::to_string(truncations) + "/5 truncations rejected");
  return c;
}

// ---------------------------------------------------------------- 8: splits and folds

void check_partition(Check& c, const std::vector<SplitIndices>& folds, std::size_t n, const std::string& what) {
  std::vector<int> hits(n, 0);
  std::size_t lo = n, hi = 0;
  for (const auto& f : folds) {
    for (auto i : f.test) hits.at(i)++;
    lo = std::min(lo, f.test.size());
    hi = std::max(hi, f.test.size());
    std::set<std::size_t> tr(f.train.begin(), f.train.end());
    for (auto i : f.test) c.expect(!tr.count(i), what + ": index on both sides");
    c.expect(f.train.size() + f.test.size() == n, what + ": fold does not cover every item");
  }
  c.expect(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }), what + ": test folds not a partition");
  c.expect(hi - lo <= 1, what + ": fold sizes " + std::to_string(lo) + ".." + std::to_string(hi));
}

Check splits() {
  Check c;
  Scratch dir("splits");
  auto r = cli({"synth", "--out", (dir / "in").string(), "--per-class", "43,124,42,22", "--visits", "2", "--shape",
                "16x16x16", "--seed", "8"});
  c.expect(r.code == 0, "synth: " + r.err);
  if (r.code != 0) return c;
  const auto original = group_sequences(read_manifest(dir / "in" / "manifest.tsv"));
  // Lineage only: no volumes need to exist for balancing the manifest itself.
  const auto augmented = group_sequences(balance_dataset(read_manifest(dir / "in" / "manifest.tsv"), 6, 375, 8));

  std::vector<std::string> lineages;
  for (const auto& s : augmented) lineages.push_back(s.lineage);
  const auto folds = kfold_grouped(lineages, kFolds, 8);
  c.expect(folds.size() == kFolds, "fold count");
  check_partition(c, folds, lineages.size(), "grouped folds");
  for (const auto& f : folds) {
    std::set<std::string> test_lineages;
    for (auto i : f.test) test_lineages.insert(lineages[i]);
    for (auto i : f.train) c.expect(!test_lineages.count(lineages[i]), "lineage " + lineages[i] + " split across sides");
  }
  for (std::size_t n : {100u, 103u, 231u}) check_partition(c, kfold_indices(n, kFolds, 3), n, "plain folds");

  std::vector<std::string> orig_lineages;
  std::vector<std::size_t> labels;
  for (const auto& s : original) {
    orig_lineages.push_back(s.lineage);
    labels.push_back(static_cast<std::size_t>(s.label - 1));
  }
  const auto split = stratified_split(orig_lineages, labels, 0.2, 8);
  {
    std::vector<int> side(original.size(), 0);
    for (auto i : split.train) side.at(i) += 1;
    for (auto i : split.test) side.at(i) += 2;
    c.expect(std::all_of(side.begin(), side.end(), [](int v) { return v == 1 || v == 2; }),
             "stratified split: sides overlap or miss items");
  }
  std::array<double, 4> total{}, test{};
  for (auto l : labels) total[l]++;
  for (auto i : split.test) test[labels[i]]++;
  std::string shares;
  for (std::size_t k = 0; k < 4; ++k) {
    c.expect(std::abs(test[k] - 0.2 * total[k]) <= 1.0,
             "class " + std::to_string(k + 1) + ": " + fmt(test[k]) + " of " + fmt(total[k]) + " held out");
    shares += (k ? "," : "") + fmt(test[k]) + "/" + fmt(total[k]);
  }
  c.note(std::to_string(augmented.size()) + " augmented sequences in " + std::to_string(kFolds) +
         " folds; held out " + shares);
  return c;
}

// ---------------------------------------------------------------- 9: checkpoints

Profile tiny_profile() {
  Profile p = Profile::reduced();
  p.name = "tiny";
  p.input = {8, 8, 6};
  p.conv_channels = {3};
  p.hidden = 4;
  p.dense = {6, 5};
  p.dropout_layers = 1;
  return p;
}

std::size_t undetected_corruptions(const std::vector<char>& bytes, const std::vector<std::size_t>& offsets) {
  std::size_t undetected = 0;
  for (auto i : offsets) {
    for (unsigned char flip : {0x01, 0x80, 0xff}) {
      auto bad = bytes;
      bad[i] = static_cast<char>(static_cast<unsigned char>(bad[i]) ^ flip);
      if (!kind_of([&] { deserialize_checkpoint(bad); })) ++undetected;
    }
  }
  return undetected;
}

Check checkpoints() {
  Check c;
  Scratch dir("ckpt");
  Rng rng(909);
  for (ArchitectureId id : all_architectures()) {
    const Model m = Model::build(id, Profile::reduced(), 40 + static_cast<std::uint64_t>(id));
    std::vector<Tensor> seq;
    for (int t = 0; t < 3; ++t) seq.push_back(oracle::random(m.profile.volume_shape(), rng, 0, 1));
    const Tensor before = m.predict(seq);
    const fs::path p = dir / (to_string(id) + ".ckpt");
    save_checkpoint(m, p, {{"arch", to_string(id)}});
    const auto loaded = load_checkpoint(p);
    c.expect(loaded.model.predict(seq) == before, to_string(id) + ": forward differs after reload");
    c.expect(loaded.config.at("arch") == to_string(id), to_string(id) + ": config echo");
    c.expect(serialize_checkpoint(loaded.model, loaded.config) == slurp(p), to_string(id) + ": re-save differs");
  }

  const auto tiny = serialize_checkpoint(Model::build(ArchitectureId::SbiLstm, tiny_profile(), 3), {{"lr", "0.001"}});
  std::vector<std::size_t> every(tiny.size());
  std::iota(every.begin(), every.end(), 0);
  const auto tiny_miss = undetected_corruptions(tiny, every);
  c.expect(tiny_miss == 0, std::to_string(tiny_miss) + " undetected corruptions in the small checkpoint");

  const auto reduced = slurp(dir / "lstm.ckpt");
  std::vector<std::size_t> sampled;
  for (std::size_t i = 0; i < kSampledCorruptBytes; ++i) sampled.push_back(rng.below(reduced.size()));
  const auto reduced_miss = undetected_corruptions(reduced, sampled);
  c.expect(reduced_miss == 0, std::to_string(reduced_miss) + " undetected corruptions in the reduced checkpoint");

  auto on_disk = reduced;
  on_disk[on_disk.size() / 2] ^= 0x10;
  dump(dir / "bad.ckpt", on_disk);
  c.expect(kind_of([&] { load_checkpoint(dir / "bad.ckpt"); }).has_value(), "corrupted file loaded");

  c.note("6 architectures bitwise; " + std::to_string(3 * tiny.size()) + " + " +
         std::to_string(3 * kSampledCorruptBytes) + " corruptions rejected");
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Check()>>> criteria = {
      {"architecture tables", golden_tables}, {"gradient suite", gradients},  {"oracle equivalence", oracles},
      {"metrics", metrics},                   {"learnability", learnability}, {"augmentation balancing", augmentation},
      {"NIfTI round trip", nifti},            {"split and fold invariants", splits},
      {"checkpoint fidelity", checkpoints},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!wanted.empty() && !wanted.count(n)) continue;
    Check c;
    try {
      c = criteria[i].second();
    } catch (const std::exception& e) {
      c.ok = false;
      c.notes.push_back(std::string("exception: ") + e.what());
    }
    std::string detail;
    for (const auto& s : c.notes) detail += (detail.empty() ? "" : "; ") + s;
    std::cout << (c.ok ? "PASS" : "FAIL") << " criterion " << n << ": " << criteria[i].first << " (" << detail
              << ")" << std::endl;
    failures += !c.ok;
  }
  return failures == 0 ? 0 : 1;
}
