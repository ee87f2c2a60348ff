#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "oracles.hpp"
#include "support.hpp"
#include "volseq/train.hpp"

using namespace volseq;
using testing_support::kind_of;
using testing_support::ScratchDir;

namespace {

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

// Class k gets a brighter cube at a class-specific corner so the tiny model has something to learn.
std::vector<LoadedSequence> tiny_data(std::size_t per_class, std::size_t visits, std::uint64_t seed) {
  const Profile p = tiny_profile();
  Rng rng(seed);
  std::vector<LoadedSequence> out;
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      LoadedSequence s;
      s.patient_id = "c" + std::to_string(c) + "-" + std::to_string(i);
      s.lineage = s.patient_id;
      s.label = c;
      for (std::size_t t = 0; t < visits; ++t) {
        Tensor v = oracle::random(p.volume_shape(), rng, 0.0, 0.3);
        for (std::size_t x = 0; x < 4; ++x)
          for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t z = 0; z < 3; ++z) v.at({x + 4 * (c & 1), y + 4 * (c >> 1), z, 0}) += 0.7;
        s.volumes.push_back(std::move(v));
      }
      out.push_back(std::move(s));
    }
  return out;
}

std::vector<Tensor> snapshot(Model& m) {
  std::vector<Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(*p.value);
  return out;
}

TrainConfig quick_config(std::size_t epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 4;
  cfg.seed = 21;
  return cfg;
}

void expect_split(const SplitIndices& s, std::size_t n) {
  std::vector<int> seen(n, 0);
  for (auto i : s.train) seen.at(i)++;
  for (auto i : s.test) seen.at(i)++;
  for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(seen[i], 1) << i;
}

// Every index validates exactly once and never trains in its own fold.
void expect_partition(const std::vector<SplitIndices>& folds, std::size_t n) {
  std::vector<int> seen(n, 0);
  for (const auto& f : folds) {
    EXPECT_EQ(f.train.size() + f.test.size(), n);
    std::set<std::size_t> test(f.test.begin(), f.test.end());
    for (auto i : f.train) EXPECT_FALSE(test.count(i));
    for (auto i : f.test) seen.at(i)++;
  }
  for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(seen[i], 1) << i;
}

}  // namespace

TEST(Config, Validation) {
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    return kind_of([&] { c.validate(); });
  };
  EXPECT_EQ(bad([](TrainConfig& c) { c.epochs = 0; }), ErrorKind::Config);
  EXPECT_EQ(bad([](TrainConfig& c) { c.batch_size = 0; }), ErrorKind::Config);
  EXPECT_EQ(bad([](TrainConfig& c) { c.learning_rate = -1e-3; }), ErrorKind::Config);
  EXPECT_EQ(bad([](TrainConfig& c) { c.learning_rate = std::nan(""); }), ErrorKind::Config);
  EXPECT_EQ(bad([](TrainConfig& c) { c.dropout = 1.0; }), ErrorKind::Config);
  EXPECT_EQ(bad([](TrainConfig& c) { c.momentum = 1.0; }), ErrorKind::Config);
  EXPECT_EQ(bad([](TrainConfig& c) { c.profile = "huge"; }), ErrorKind::Config);
  EXPECT_NO_THROW(TrainConfig{}.validate());
  EXPECT_EQ(TrainConfig{}.epochs, 35u);
  EXPECT_EQ(optimizer_from_string("sgd"), OptimizerKind::Sgd);
  EXPECT_EQ(kind_of([] { optimizer_from_string("rmsprop"); }), ErrorKind::Config);
  const auto echo = TrainConfig{}.echo();
  EXPECT_EQ(echo.at("optimizer"), "adam");
  EXPECT_EQ(echo.at("learning_rate"), "0.001");
}

TEST(Optimizer, AdamMatchesHandComputedSteps) {
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  Tensor w({2}, {1.0, -2.0});
  Optimizer opt(cfg);
  const std::vector<ParamRef> params{{"w", &w, true}};
  const double g1[2] = {0.5, -4.0}, g2[2] = {-1.0, 2.0};
  opt.step(params, {Tensor({2}, {g1[0], g1[1]})});
  opt.step(params, {Tensor({2}, {g2[0], g2[1]})});
  EXPECT_EQ(opt.steps(), 2u);
  const double w0[2] = {1.0, -2.0};
  for (int j = 0; j < 2; ++j) {
    double m = 0, v = 0, x = w0[j];
    const double gs[2] = {g1[j], g2[j]};
    for (int t = 1; t <= 2; ++t) {
      m = 0.9 * m + 0.1 * gs[t - 1];
      v = 0.999 * v + 0.001 * gs[t - 1] * gs[t - 1];
      const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
      x -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    }
    EXPECT_NEAR(w[j], x, 1e-15);
  }
  // The first Adam step moves every coordinate by almost exactly the learning rate.
  Tensor u({1}, {0.0});
  Optimizer fresh(cfg);
  fresh.step({{"u", &u, true}}, {Tensor({1}, {123.0})});
  EXPECT_NEAR(u[0], -0.1, 1e-9);
}

TEST(Optimizer, MomentumSgdMatchesHandComputedSteps) {
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::Sgd;
  cfg.learning_rate = 0.5;
  cfg.momentum = 0.9;
  Tensor w({1}, {2.0});
  Optimizer opt(cfg);
  opt.step({{"w", &w, true}}, {Tensor({1}, {1.0})});
  EXPECT_EQ(w[0], 1.5);  // v = -0.5
  opt.step({{"w", &w, true}}, {Tensor({1}, {1.0})});
  EXPECT_EQ(w[0], 1.5 - 0.95);  // v = 0.9 * -0.5 - 0.5
  EXPECT_EQ(kind_of([&] { opt.step({{"w", &w, true}}, {}); }), ErrorKind::Shape);
}

TEST(Training, ZeroLearningRateLeavesWeightsUntouched) {
  const auto data = tiny_data(2, 2, 1);
  Model m = Model::build(ArchitectureId::Lstm, tiny_profile(), 5);
  std::vector<Tensor> before;
  for (const auto& p : m.trainable_parameters()) before.push_back(*p.value);
  TrainConfig cfg = quick_config(3);
  cfg.learning_rate = 0;
  const auto h = train_model(m, data, cfg);
  EXPECT_EQ(h.size(), 3u);
  const auto after = m.trainable_parameters();
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(*after[i].value, before[i]) << after[i].name;
}

TEST(Training, FirstEpochLossNearUniformSoftmax) {
  const auto data = tiny_data(6, 2, 2);
  for (ArchitectureId id : all_architectures()) {
    Model m = Model::build(id, tiny_profile(), 8);
    TrainConfig cfg = quick_config(1);
    cfg.learning_rate = 0;
    const auto h = train_model(m, data, cfg);
    EXPECT_NEAR(h[0].loss, std::log(4.0), 0.2) << to_string(id);
  }
}

TEST(Training, BitwiseDeterministicUnderSeed) {
  const auto data = tiny_data(3, 2, 3);
  auto run = [&](std::uint64_t seed) {
    Model m = Model::build(ArchitectureId::SbiGru, tiny_profile(), 9);
    TrainConfig cfg = quick_config(3);
    cfg.seed = seed;
    const auto h = train_model(m, data, cfg);
    return std::make_pair(snapshot(m), h);
  };
  const auto a = run(4), b = run(4), c = run(5);
  EXPECT_EQ(a.first, b.first);
  ASSERT_EQ(a.second.size(), b.second.size());
  for (std::size_t i = 0; i < a.second.size(); ++i) {
    EXPECT_EQ(a.second[i].loss, b.second[i].loss);
    EXPECT_EQ(a.second[i].accuracy, b.second[i].accuracy);
  }
  EXPECT_NE(a.first, c.first);
}

TEST(Training, TinyModelLearnsSeparableClasses) {
  const auto data = tiny_data(6, 2, 4);
  Model m = Model::build(ArchitectureId::Lstm, tiny_profile(), 10);
  TrainConfig cfg = quick_config(40);
  cfg.learning_rate = 1e-2;
  cfg.dropout = 0.0;
  const auto h = train_model(m, data, cfg);
  EXPECT_LT(h.back().loss, h.front().loss * 0.5);
  EXPECT_GE(evaluate(m, data).summary.accuracy, 0.9);
}

TEST(Training, SingleSequenceOverfit) {
  Profile p = Profile::reduced();
  LoadedSequence s;
  s.patient_id = s.lineage = "solo";
  s.label = 2;
  for (std::size_t t = 0; t < 2; ++t) {
    s.volumes.push_back(preprocess_volume(synthetic_volume(3, t, {32, 32, 16}, 99), {32, 32, 16}));
  }
  Model m = Model::build(ArchitectureId::Lstm, p, 12);
  TrainConfig cfg = quick_config(200);
  cfg.batch_size = 1;
  cfg.dropout = 0.0;
  cfg.recalibrate_batchnorm = false;
  const auto h = train_model(m, {s}, cfg);
  std::size_t reached = 0;
  for (const auto& e : h)
    if (e.loss < 0.01) {
      reached = e.epoch;
      break;
    }
  EXPECT_GT(reached, 0u) << "final loss " << h.back().loss;
  EXPECT_LE(reached, 200u);

  // Smoothed over 10 steps the loss never rises after step 5.
  std::vector<double> smooth;
  for (std::size_t i = 5; i + 10 <= h.size(); ++i) {
    double acc = 0;
    for (std::size_t j = i; j < i + 10; ++j) acc += h[j].loss;
    smooth.push_back(acc / 10);
  }
  for (std::size_t i = 1; i < smooth.size(); ++i) EXPECT_LE(smooth[i], smooth[i - 1] + 1e-12) << "window " << i;
}

TEST(Training, NonFiniteLossIsDivergence) {
  const auto data = tiny_data(1, 2, 5);
  Model m = Model::build(ArchitectureId::Gru, tiny_profile(), 1);
  m.head.back().dense.bias[0] = std::nan("");
  try {
    train_model(m, data, quick_config(2));
    ADD_FAILURE() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Divergence);
    EXPECT_NE(std::string(e.what()).find("epoch 1, batch 1"), std::string::npos) << e.what();
  }
}

TEST(Training, InputErrors) {
  Model m = Model::build(ArchitectureId::Lstm, tiny_profile(), 1);
  EXPECT_EQ(kind_of([&] { train_model(m, {}, quick_config(1)); }), ErrorKind::Input);
  auto data = tiny_data(1, 2, 1);
  data[0].label = 7;
  EXPECT_EQ(kind_of([&] { train_model(m, data, quick_config(1)); }), ErrorKind::Label);
  data = tiny_data(1, 2, 1);
  data[1].volumes[0] = Tensor({8, 8, 5, 1});
  EXPECT_EQ(kind_of([&] { train_model(m, data, quick_config(1)); }), ErrorKind::Shape);
  EXPECT_EQ(kind_of([&] { evaluate(m, {}); }), ErrorKind::Input);
}

TEST(Evaluation, IdempotentAndConstantPredictor) {
  const auto data = tiny_data(3, 2, 6);
  Model m = Model::build(ArchitectureId::SLstm, tiny_profile(), 2);
  const auto a = evaluate(m, data), b = evaluate(m, data);
  EXPECT_EQ(a.confusion, b.confusion);
  EXPECT_EQ(a.macro_auc, b.macro_auc);

  m.head.back().dense.bias[0] = 1e3;  // every sequence lands in class 1
  const auto c = evaluate(m, data);
  EXPECT_DOUBLE_EQ(c.summary.recall, 0.25);
  for (std::size_t k = 1; k < 4; ++k) EXPECT_EQ(c.confusion.tp(k), 0u);
}

TEST(Split, StratifiedArithmeticAndDeterminism) {
  std::vector<std::string> lineage;
  std::vector<std::size_t> label;
  for (std::size_t i = 0; i < 100; ++i) {
    lineage.push_back("p" + std::to_string(i));
    label.push_back(i % 4);
  }
  const auto s = stratified_split(lineage, label, 0.2, 3);
  EXPECT_EQ(s.test.size(), 20u);
  std::array<int, 4> per{};
  for (auto i : s.test) per[label[i]]++;
  EXPECT_EQ(per, (std::array<int, 4>{5, 5, 5, 5}));
  expect_split(s, 100);
  const auto again = stratified_split(lineage, label, 0.2, 3);
  EXPECT_EQ(again.test, s.test);
  EXPECT_NE(stratified_split(lineage, label, 0.2, 4).test, s.test);
}

TEST(Split, LineageNeverCrossesSides) {
  // 20 originals per class, each with 0..3 generated descendants.
  std::vector<std::string> lineage;
  std::vector<std::size_t> label;
  Rng rng(12);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t p = 0; p < 20; ++p) {
      const std::size_t copies = 1 + rng.below(4);
      for (std::size_t j = 0; j < copies; ++j) {
        lineage.push_back("c" + std::to_string(c) + "p" + std::to_string(p));
        label.push_back(c);
      }
    }
  const auto s = stratified_split(lineage, label, 0.2, 7);
  std::set<std::string> test_lineages;
  for (auto i : s.test) test_lineages.insert(lineage[i]);
  for (auto i : s.train) EXPECT_FALSE(test_lineages.count(lineage[i])) << lineage[i];
  expect_split(s, lineage.size());
}

TEST(Split, SparseClassIsPooledWithWarning) {
  const std::vector<std::string> lineage{"a", "b", "c", "d", "e", "f", "g", "h", "solo"};
  const std::vector<std::size_t> label{0, 0, 0, 0, 1, 1, 1, 1, 2};
  std::vector<std::string> warnings;
  const auto s = stratified_split(lineage, label, 0.25, 1, &warnings);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("class 3"), std::string::npos);
  expect_split(s, 9);
  EXPECT_EQ(kind_of([&] { stratified_split(lineage, label, 1.0, 1); }), ErrorKind::Config);
  EXPECT_EQ(kind_of([&] { stratified_split({"a"}, {0, 1}, 0.2, 1); }), ErrorKind::Shape);
}

TEST(Split, TinyClassesStillGetATestMember) {
  std::vector<std::string> lineage;
  std::vector<std::size_t> label;
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t p = 0; p < 2; ++p) {
      lineage.push_back(std::to_string(c) + "/" + std::to_string(p));
      label.push_back(c);
    }
  // round(0.2 * 2) = 0 would leave the test side empty, 0.25 * 2 rounds to 1 and ties.
  const auto s = stratified_split(lineage, label, 0.25, 2);
  std::array<int, 4> per{};
  for (auto i : s.test) per[label[i]]++;
  EXPECT_EQ(per, (std::array<int, 4>{1, 1, 1, 1}));
}

TEST(KFold, SizesAndPartition) {
  const auto f = kfold_indices(100, 10, 1);
  ASSERT_EQ(f.size(), 10u);
  for (const auto& x : f) EXPECT_EQ(x.test.size(), 10u);
  expect_partition(f, 100);

  const auto g = kfold_indices(103, 10, 1);
  std::vector<std::size_t> sizes;
  for (const auto& x : g) sizes.push_back(x.test.size());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{11, 11, 11, 10, 10, 10, 10, 10, 10, 10}));
  expect_partition(g, 103);

  EXPECT_EQ(kind_of([] { kfold_indices(9, 10, 1); }), ErrorKind::Size);
  EXPECT_EQ(kind_of([] { kfold_indices(9, 1, 1); }), ErrorKind::Config);
}

TEST(KFold, GroupedFoldsBalanceAugmentedLineages) {
  // Originals {43,124,42,22} each with enough descendants to reach 375 per class.
  const std::array<std::size_t, 4> originals{43, 124, 42, 22};
  std::vector<std::string> lineage;
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < 375; ++i) lineage.push_back("c" + std::to_string(c) + "-" + std::to_string(i % originals[c]));
  }
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto f = kfold_grouped(lineage, 10, seed);
    expect_partition(f, lineage.size());
    std::size_t lo = SIZE_MAX, hi = 0;
    for (const auto& x : f) {
      lo = std::min(lo, x.test.size());
      hi = std::max(hi, x.test.size());
      std::set<std::string> val;
      for (auto i : x.test) val.insert(lineage[i]);
      for (auto i : x.train) EXPECT_FALSE(val.count(lineage[i]));
    }
    EXPECT_LE(hi - lo, 1u) << "seed " << seed;
  }
  EXPECT_EQ(kind_of([] { kfold_grouped({"a", "a", "b"}, 3, 1); }), ErrorKind::Size);
}

TEST(CrossValidation, TwoFoldsOnTinyData) {
  const auto data = tiny_data(2, 2, 7);
  std::size_t epochs_seen = 0;
  const auto r = kfold_cross_validate(ArchitectureId::Gru, tiny_profile(), data, quick_config(2), 2,
                                      [&](std::size_t, const EpochRecord&) { ++epochs_seen; });
  ASSERT_EQ(r.folds.size(), 2u);
  EXPECT_EQ(epochs_seen, 4u);
  EXPECT_EQ(r.folds[0].train_size + r.folds[0].validation_size, data.size());
  std::vector<double> acc;
  for (const auto& f : r.folds) acc.push_back(f.metrics.summary.accuracy);
  EXPECT_EQ(r.mean.at("ma_accuracy"), (acc[0] + acc[1]) / 2);
  EXPECT_EQ(r.stddev.at("ma_accuracy"), std::abs(acc[0] - acc[1]) / 2);

  ScratchDir dir("train");
  write_fold_report(r, dir / "folds.tsv");
  write_history({{1, 1.5, 0.25}}, dir / "h.tsv");
  EXPECT_TRUE(std::filesystem::exists(dir / "folds.tsv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "h.tsv"));
}

TEST(GradCheck, RelativeErrorDefinition) {
  EXPECT_EQ(relative_error(1.0, 1.0, 1e-6), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0, 1e-6), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0, 1e-6), 1e-3);
  EXPECT_EQ(kind_of([] { gradient_check({"attention"}); }), ErrorKind::Config);
}
