#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "volseq/data.hpp"
#include "volseq/metrics.hpp"
#include "volseq/model.hpp"

namespace volseq {

enum class OptimizerKind { Adam, Sgd };

std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& name);

struct TrainConfig {
  std::size_t epochs = 35;
  std::size_t batch_size = 4;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double momentum = 0.9;  // SGD only
  std::optional<double> dropout;
  std::uint64_t seed = 0;
  bool deterministic = true;
  // After the last epoch, replace the lagging running batchnorm statistics
  // with exact ones over the training volumes.
  bool recalibrate_batchnorm = true;
  std::string profile = "reduced";

  void validate() const;
  std::map<std::string, std::string> echo() const;
};

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}
  void step(const std::vector<ParamRef>& params, const std::vector<Tensor>& grads);
  std::size_t steps() const { return t_; }

 private:
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0;        // mean per-sequence training loss
  double accuracy = 0;    // fraction of training sequences predicted correctly (train mode)
};

using History = std::vector<EpochRecord>;

void write_history(const History& h, const std::filesystem::path& path);

/// Trains in place. Mini-batches are drawn from a per-epoch shuffle seeded by
/// (cfg.seed, epoch); the optional callback sees every finished epoch.
History train_model(Model& model, const std::vector<LoadedSequence>& data, const TrainConfig& cfg,
                    const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Infer-mode evaluation; AUC scores are the softmax probabilities.
MetricsBundle evaluate(const Model& model, const std::vector<LoadedSequence>& data);

// ---------------------------------------------------------------- splitting

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Items sharing a lineage (an original patient and everything generated from
/// it) always land on the same side. Per class, shuffled lineage groups are
/// added to the test side while that moves its size closer to
/// round(test_fraction * class size); on a tie the first group is still taken
/// when the test side is empty. Classes with fewer than two lineages are
/// pooled and split without stratification; a warning is appended for each.
SplitIndices stratified_split(const std::vector<std::string>& lineages, const std::vector<std::size_t>& labels,
                              double test_fraction, std::uint64_t seed, std::vector<std::string>* warnings = nullptr);

/// k folds over n independent items; fold sizes differ by at most one and the
/// first n mod k folds are the larger ones.
std::vector<SplitIndices> kfold_indices(std::size_t n, std::size_t k, std::uint64_t seed);

/// k folds that never split a lineage. Groups are placed largest first on the
/// smallest fold, then single moves and pairwise swaps between the largest and
/// smallest folds even out the sizes.
std::vector<SplitIndices> kfold_grouped(const std::vector<std::string>& lineages, std::size_t k, std::uint64_t seed);

std::vector<std::string> lineages_of(const std::vector<LoadedSequence>& data);
std::vector<std::size_t> labels_of(const std::vector<LoadedSequence>& data);

template <typename T>
std::vector<T> subset(const std::vector<T>& items, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(items.at(i));
  return out;
}

// ---------------------------------------------------------------- cross-validation

struct FoldResult {
  std::size_t fold = 0;
  std::size_t train_size = 0;
  std::size_t validation_size = 0;
  MetricsBundle metrics;
};

struct FoldReport {
  std::vector<FoldResult> folds;
  std::map<std::string, double> mean;    // keyed by metric name
  std::map<std::string, double> stddev;  // population
};

/// Fresh model per fold, all initialised from the same seed-derived stream.
FoldReport kfold_cross_validate(ArchitectureId arch, const Profile& profile, const std::vector<LoadedSequence>& data,
                                const TrainConfig& cfg, std::size_t k,
                                const std::function<void(std::size_t, const EpochRecord&)>& on_epoch = {});

void write_fold_report(const FoldReport& r, const std::filesystem::path& path);

std::uint64_t init_seed(std::uint64_t seed);

// ---------------------------------------------------------------- gradient check

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  double floor = 1e-6;  // relative error = |a - n| / max(|a|, |n|, floor)
  std::uint64_t seed = 7;
  std::size_t model_samples = 50;
  bool corrupt_conv_backward = false;  // negative control: flips the analytic conv gradients
};

struct GradCheckEntry {
  std::string block;
  std::size_t checked = 0;
  double max_relative_error = 0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool passed = true;
};

/// Components: dense, conv3d, maxpool3d, batchnorm, global_maxpool, dropout,
/// softmax_ce, lstm, gru, bptt_lstm, bptt_gru, bidirectional, model. "all"
/// expands to every one of them.
GradCheckReport gradient_check(const std::vector<std::string>& components, const GradCheckOptions& opt = {});
const std::vector<std::string>& gradient_check_components();

double relative_error(double analytic, double numeric, double floor);

}  // namespace volseq
