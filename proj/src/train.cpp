#include "volseq/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "volseq/random.hpp"

namespace volseq {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }

OptimizerKind optimizer_from_string(const std::string& name) {
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "sgd") return OptimizerKind::Sgd;
  throw Error(ErrorKind::Config, "unknown optimizer '" + name + "'; valid: adam|sgd");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw Error(ErrorKind::Config, "epochs must be at least 1");
  if (batch_size < 1) throw Error(ErrorKind::Config, "batch size must be at least 1");
  // Zero is accepted so a run can be checked for leaving parameters untouched.
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) {
    throw Error(ErrorKind::Config, "learning rate must be a finite non-negative number");
  }
  if (dropout && !(*dropout >= 0 && *dropout < 1)) throw Error(ErrorKind::Config, "dropout must be in [0, 1)");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(epsilon > 0)) {
    throw Error(ErrorKind::Config, "invalid moment decay or epsilon");
  }
  if (!(momentum >= 0 && momentum < 1)) throw Error(ErrorKind::Config, "momentum must be in [0, 1)");
  Profile::by_name(profile);
}

std::map<std::string, std::string> TrainConfig::echo() const {
  auto num = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.17g", v);
    return std::string(b);
  };
  std::map<std::string, std::string> m{
      {"epochs", std::to_string(epochs)},
      {"batch_size", std::to_string(batch_size)},
      {"learning_rate", num(learning_rate)},
      {"optimizer", to_string(optimizer)},
      {"seed", std::to_string(seed)},
      {"deterministic", deterministic ? "true" : "false"},
      {"recalibrate_batchnorm", recalibrate_batchnorm ? "true" : "false"},
      {"profile", profile},
  };
  if (optimizer == OptimizerKind::Adam) {
    m["beta1"] = num(beta1);
    m["beta2"] = num(beta2);
    m["epsilon"] = num(epsilon);
  } else {
    m["momentum"] = num(momentum);
  }
  if (dropout) m["dropout"] = num(*dropout);
  return m;
}

void Optimizer::step(const std::vector<ParamRef>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size()) throw Error(ErrorKind::Shape, "one gradient per parameter tensor required");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.value->shape());
      if (cfg_.optimizer == OptimizerKind::Adam) v_.emplace_back(p.value->shape());
    }
  }
  ++t_;
  const double lr = cfg_.learning_rate;
  if (cfg_.optimizer == OptimizerKind::Adam) {
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto w = params[i].value->data();
      auto g = grads[i].data();
      auto m = m_[i].data();
      auto v = v_[i].data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * g[j] * g[j];
        w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.epsilon);
      }
    }
  } else {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto w = params[i].value->data();
      auto g = grads[i].data();
      auto vel = m_[i].data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        vel[j] = cfg_.momentum * vel[j] - lr * g[j];
        w[j] += vel[j];
      }
    }
  }
}

void write_history(const History& h, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::Write, "cannot write history '" + path.string() + "'");
  f << "epoch\tloss\taccuracy\n";
  char b[96];
  for (const auto& e : h) {
    std::snprintf(b, sizeof b, "%zu\t%.10g\t%.6f\n", e.epoch, e.loss, e.accuracy);
    f << b;
  }
}

History train_model(Model& model, const std::vector<LoadedSequence>& data, const TrainConfig& cfg,
                    const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  if (data.empty()) throw Error(ErrorKind::Input, "no training sequences");
  for (const auto& s : data) {
    if (s.label >= model.profile.classes) throw Error(ErrorKind::Label, "label out of range for " + s.patient_id);
    for (const auto& v : s.volumes) model.check_volume(v);
  }
  if (cfg.dropout) model.profile.dropout = *cfg.dropout;

  Optimizer opt(cfg);
  const auto params = model.trainable_parameters();
  History history;
  std::vector<std::size_t> order(data.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(derive_seed(cfg.seed, 2 * epoch));
    shuffle.shuffle(order);
    Rng noise(derive_seed(cfg.seed, 2 * epoch + 1));
    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t start = 0, batch = 0; start < order.size(); start += cfg.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<std::vector<Tensor>> seqs;
      std::vector<std::size_t> labels;
      for (std::size_t i = start; i < end; ++i) {
        seqs.push_back(data[order[i]].volumes);
        labels.push_back(data[order[i]].label);
      }
      BatchPass p = model.pass(seqs, labels, Mode::Train, noise, true);
      if (!std::isfinite(p.loss)) {
        throw Error(ErrorKind::Divergence, "non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                               std::to_string(batch + 1));
      }
      opt.step(params, p.grads);
      loss_sum += p.loss * static_cast<double>(labels.size());
      const auto pred = argmax_last(p.probs);
      for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i];
    }
    EpochRecord rec{epoch, loss_sum / static_cast<double>(data.size()),
                    static_cast<double>(correct) / static_cast<double>(data.size())};
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (cfg.recalibrate_batchnorm && cfg.epochs > 0) {
    std::vector<const Tensor*> volumes;
    for (const auto& s : data)
      for (const auto& v : s.volumes) volumes.push_back(&v);
    model.recalibrate_batchnorm(volumes);
  }
  return history;
}

MetricsBundle evaluate(const Model& model, const std::vector<LoadedSequence>& data) {
  if (data.empty()) throw Error(ErrorKind::Input, "no evaluation sequences");
  const std::size_t K = model.profile.classes;
  Tensor scores({data.size(), K});
  std::vector<std::size_t> y;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor p = model.predict(data[i].volumes);
    std::copy(p.data().begin(), p.data().end(), scores.data().begin() + i * K);
    y.push_back(data[i].label);
  }
  return metrics_bundle(y, scores);
}

// ---------------------------------------------------------------- splitting

std::vector<std::string> lineages_of(const std::vector<LoadedSequence>& data) {
  std::vector<std::string> out;
  for (const auto& s : data) out.push_back(s.lineage.empty() ? s.patient_id : s.lineage);
  return out;
}

std::vector<std::size_t> labels_of(const std::vector<LoadedSequence>& data) {
  std::vector<std::size_t> out;
  for (const auto& s : data) out.push_back(s.label);
  return out;
}

namespace {

struct Group {
  std::string lineage;
  std::vector<std::size_t> members;
};

std::vector<Group> group_by_lineage(const std::vector<std::string>& lineages) {
  std::map<std::string, std::vector<std::size_t>> m;
  for (std::size_t i = 0; i < lineages.size(); ++i) m[lineages[i]].push_back(i);
  std::vector<Group> out;
  for (auto& [k, v] : m) out.push_back({k, std::move(v)});
  return out;
}

long gap(std::size_t a, std::size_t b) {
  return std::labs(static_cast<long>(a) - static_cast<long>(b));
}

// Adds groups to the test side whenever doing so moves its size closer to the target.
void take_towards(std::vector<const Group*>& groups, std::size_t target, std::vector<std::size_t>& test,
                  std::vector<std::size_t>& train) {
  std::size_t count = 0;
  std::vector<bool> chosen(groups.size(), false);
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const std::size_t s = groups[i]->members.size();
    // a tie still takes the first group so a nonzero target never leaves the test side empty
    const bool closer = gap(count + s, target) < gap(count, target);
    const bool tie_on_empty = count == 0 && target > 0 && gap(s, target) == gap(0, target);
    if (closer || tie_on_empty) {
      chosen[i] = true;
      count += s;
    }
  }
  // keep at least one group for training
  if (groups.size() >= 2 && std::all_of(chosen.begin(), chosen.end(), [](bool b) { return b; })) chosen.back() = false;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    auto& side = chosen[i] ? test : train;
    side.insert(side.end(), groups[i]->members.begin(), groups[i]->members.end());
  }
}

}  // namespace

SplitIndices stratified_split(const std::vector<std::string>& lineages, const std::vector<std::size_t>& labels,
                              double test_fraction, std::uint64_t seed, std::vector<std::string>* warnings) {
  if (lineages.size() != labels.size()) throw Error(ErrorKind::Shape, "one lineage per label required");
  if (!(test_fraction >= 0 && test_fraction < 1)) throw Error(ErrorKind::Config, "test fraction must be in [0, 1)");
  const auto groups = group_by_lineage(lineages);
  std::map<std::size_t, std::vector<const Group*>> by_class;
  for (const auto& g : groups) by_class[labels[g.members.front()]].push_back(&g);

  SplitIndices out;
  std::vector<const Group*> pooled;
  std::size_t pooled_size = 0;
  for (auto& [cls, gs] : by_class) {
    std::size_t n = 0;
    for (const auto* g : gs) n += g->members.size();
    if (gs.size() < 2) {
      if (warnings) {
        warnings->push_back("class " + std::to_string(cls + 1) + " has " + std::to_string(gs.size()) +
                            " patient lineage(s); it is split without stratification");
      }
      pooled.insert(pooled.end(), gs.begin(), gs.end());
      pooled_size += n;
      continue;
    }
    Rng rng(derive_seed(seed, 11 + cls));
    rng.shuffle(gs);
    take_towards(gs, static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n))), out.test,
                 out.train);
  }
  if (!pooled.empty()) {
    Rng rng(derive_seed(seed, 997));
    rng.shuffle(pooled);
    take_towards(pooled, static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(pooled_size))),
                 out.test, out.train);
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

std::vector<SplitIndices> kfold_indices(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw Error(ErrorKind::Config, "k-fold needs k >= 2");
  if (n < k) throw Error(ErrorKind::Size, "cannot make " + std::to_string(k) + " folds from " + std::to_string(n) + " items");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 31));
  rng.shuffle(perm);
  std::vector<SplitIndices> folds(k);
  std::size_t start = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f < n % k ? 1 : 0);
    std::vector<bool> in(n, false);
    for (std::size_t i = start; i < start + size; ++i) in[perm[i]] = true;
    for (std::size_t i = 0; i < n; ++i) (in[i] ? folds[f].test : folds[f].train).push_back(i);
    start += size;
  }
  return folds;
}

std::vector<SplitIndices> kfold_grouped(const std::vector<std::string>& lineages, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw Error(ErrorKind::Config, "k-fold needs k >= 2");
  auto groups = group_by_lineage(lineages);
  if (groups.size() < k) {
    throw Error(ErrorKind::Size, "cannot make " + std::to_string(k) + " folds from " + std::to_string(groups.size()) +
                                     " patient lineages");
  }
  Rng rng(derive_seed(seed, 31));
  rng.shuffle(groups);
  std::stable_sort(groups.begin(), groups.end(),
                   [](const Group& a, const Group& b) { return a.members.size() > b.members.size(); });

  std::vector<std::vector<std::size_t>> fold_groups(k);
  std::vector<std::size_t> size(k, 0);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const std::size_t f = static_cast<std::size_t>(std::min_element(size.begin(), size.end()) - size.begin());
    fold_groups[f].push_back(g);
    size[f] += groups[g].members.size();
  }

  // Each accepted move or swap shifts 0 < d' < d items from the largest to the
  // smallest fold, which strictly lowers the sum of squared sizes.
  for (;;) {
    const std::size_t L = static_cast<std::size_t>(std::max_element(size.begin(), size.end()) - size.begin());
    const std::size_t S = static_cast<std::size_t>(std::min_element(size.begin(), size.end()) - size.begin());
    const std::size_t d = size[L] - size[S];
    if (d <= 1) break;
    auto score = [&](std::size_t delta) { return gap(2 * delta, d); };
    long best = -1;
    std::size_t bi = 0, bj = 0;
    bool swap = false;
    for (std::size_t i = 0; i < fold_groups[L].size(); ++i) {
      const std::size_t s = groups[fold_groups[L][i]].members.size();
      if (s < d && (best < 0 || score(s) < best)) {
        best = score(s);
        bi = i;
        swap = false;
      }
      for (std::size_t j = 0; j < fold_groups[S].size(); ++j) {
        const std::size_t t = groups[fold_groups[S][j]].members.size();
        if (s > t && s - t < d && (best < 0 || score(s - t) < best)) {
          best = score(s - t);
          bi = i;
          bj = j;
          swap = true;
        }
      }
    }
    if (best < 0) break;
    const std::size_t g = fold_groups[L][bi];
    const std::size_t s = groups[g].members.size();
    fold_groups[L].erase(fold_groups[L].begin() + static_cast<long>(bi));
    fold_groups[S].push_back(g);
    size[L] -= s;
    size[S] += s;
    if (swap) {
      const std::size_t h = fold_groups[S][bj];
      const std::size_t t = groups[h].members.size();
      fold_groups[S].erase(fold_groups[S].begin() + static_cast<long>(bj));
      fold_groups[L].push_back(h);
      size[S] -= t;
      size[L] += t;
    }
  }

  std::vector<SplitIndices> folds(k);
  const std::size_t n = lineages.size();
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<bool> in(n, false);
    for (auto g : fold_groups[f]) {
      for (auto i : groups[g].members) in[i] = true;
    }
    for (std::size_t i = 0; i < n; ++i) (in[i] ? folds[f].test : folds[f].train).push_back(i);
  }
  return folds;
}

// ---------------------------------------------------------------- cross-validation

std::uint64_t init_seed(std::uint64_t seed) { return derive_seed(seed, 0x1417); }

FoldReport kfold_cross_validate(ArchitectureId arch, const Profile& profile, const std::vector<LoadedSequence>& data,
                                const TrainConfig& cfg, std::size_t k,
                                const std::function<void(std::size_t, const EpochRecord&)>& on_epoch) {
  cfg.validate();
  const auto folds = kfold_grouped(lineages_of(data), k, cfg.seed);
  FoldReport report;
  std::map<std::string, std::vector<double>> values;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    Model model = Model::build(arch, profile, init_seed(cfg.seed));
    TrainConfig fc = cfg;
    fc.seed = derive_seed(cfg.seed, 100 + f);
    const auto train = subset(data, folds[f].train);
    const auto val = subset(data, folds[f].test);
    train_model(model, train, fc, [&](const EpochRecord& e) {
      if (on_epoch) on_epoch(f, e);
    });
    FoldResult r{f + 1, train.size(), val.size(), evaluate(model, val)};
    values["ma_accuracy"].push_back(r.metrics.summary.accuracy);
    values["ma_precision"].push_back(r.metrics.summary.precision);
    values["ma_recall"].push_back(r.metrics.summary.recall);
    values["ma_f1"].push_back(r.metrics.summary.f1);
    values["macro_ovr_auc"].push_back(r.metrics.macro_auc);
    report.folds.push_back(std::move(r));
  }
  for (const auto& [key, v] : values) {
    report.mean[key] = mean(v);
    report.stddev[key] = stddev(v);
  }
  return report;
}

void write_fold_report(const FoldReport& r, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::Write, "cannot write fold report '" + path.string() + "'");
  f << "fold\ttrain\tvalidation\tma_accuracy\tma_precision\tma_recall\tma_f1\tmacro_ovr_auc\n";
  char b[256];
  for (const auto& x : r.folds) {
    const auto& s = x.metrics.summary;
    std::snprintf(b, sizeof b, "%zu\t%zu\t%zu\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\n", x.fold, x.train_size,
                  x.validation_size, s.accuracy, s.precision, s.recall, s.f1, x.metrics.macro_auc);
    f << b;
  }
  for (const auto* which : {"mean", "stddev"}) {
    const auto& m = std::string(which) == "mean" ? r.mean : r.stddev;
    auto get = [&](const char* key) {
      const auto it = m.find(key);
      return it == m.end() ? std::nan("") : it->second;
    };
    std::snprintf(b, sizeof b, "%s\t\t\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\n", which, get("ma_accuracy"), get("ma_precision"),
                  get("ma_recall"), get("ma_f1"), get("macro_ovr_auc"));
    f << b;
  }
}

// ---------------------------------------------------------------- gradient check

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

const std::vector<std::string>& gradient_check_components() {
  static const std::vector<std::string> names = {"dense",     "conv3d",    "maxpool3d", "batchnorm", "global_maxpool",
                                                 "dropout",   "softmax_ce", "lstm",     "gru",       "bptt_lstm",
                                                 "bptt_gru",  "bidirectional", "model"};
  return names;
}

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

class Checker {
 public:
  Checker(const GradCheckOptions& opt, GradCheckReport& report) : opt_(opt), report_(report) {}

  /// Compares `analytic` against central differences of `loss` in `x`.
  /// Checks every element, or `limit` elements sampled with `rng` when smaller.
  void check(const std::string& block, Tensor& x, const Tensor& analytic, const std::function<double()>& loss,
             std::size_t limit = 0, Rng* rng = nullptr, double step = 0) {
    if (step == 0) step = opt_.step;
    if (analytic.size() != x.size()) throw Error(ErrorKind::Shape, "gradient for " + block + " has the wrong size");
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (limit && limit < idx.size() && rng) {
      rng->shuffle(idx);
      idx.resize(limit);
    }
    GradCheckEntry e{block, 0, 0.0, true};
    for (auto i : idx) {
      const double keep = x[i];
      x[i] = keep + step;
      const double up = loss();
      x[i] = keep - step;
      const double down = loss();
      x[i] = keep;
      const double numeric = (up - down) / (2 * step);
      e.max_relative_error = std::max(e.max_relative_error, relative_error(analytic[i], numeric, opt_.floor));
      ++e.checked;
    }
    e.passed = e.max_relative_error <= opt_.tolerance;
    report_.passed = report_.passed && e.passed;
    report_.entries.push_back(e);
  }

  /// Samples elements across several tensors at once (used for the full model).
  void check_sampled(const std::string& block, const std::vector<ParamRef>& params, const std::vector<Tensor>& grads,
                     const std::function<double()>& loss, std::size_t samples, Rng& rng) {
    GradCheckEntry e{block, 0, 0.0, true};
    for (std::size_t s = 0; s < samples; ++s) {
      const std::size_t t = rng.below(params.size());
      Tensor& x = *params[t].value;
      const std::size_t i = rng.below(x.size());
      const double keep = x[i];
      x[i] = keep + opt_.step;
      const double up = loss();
      x[i] = keep - opt_.step;
      const double down = loss();
      x[i] = keep;
      const double numeric = (up - down) / (2 * opt_.step);
      e.max_relative_error = std::max(e.max_relative_error, relative_error(grads[t][i], numeric, opt_.floor));
      ++e.checked;
    }
    e.passed = e.max_relative_error <= opt_.tolerance;
    report_.passed = report_.passed && e.passed;
    report_.entries.push_back(e);
  }

  double sign_conv() const { return opt_.corrupt_conv_backward ? -1.0 : 1.0; }

 private:
  const GradCheckOptions& opt_;
  GradCheckReport& report_;
};

// Multiples of 1/64 with a power-of-two step keep every product and sum of the
// linear layer exact, so the central difference carries no rounding error.
Tensor dyadic(Tensor t) {
  for (auto& v : t.data()) v = std::round(v * 64.0) / 64.0;
  return t;
}

void check_dense(Checker& c, Rng& rng) {
  for (Activation act : {Activation::Linear, Activation::Tanh, Activation::Sigmoid}) {
    const bool linear = act == Activation::Linear;
    auto draw = [&](Shape s) { return linear ? dyadic(random_tensor(std::move(s), rng)) : random_tensor(std::move(s), rng); };
    Tensor x = draw({3, 5});
    DenseParams p{draw({5, 4}), draw({4}), act};
    const Tensor w = draw({3, 4});
    auto loss = [&] { return dot(dense_forward(x, p).y, w); };
    const auto f = dense_forward(x, p);
    const auto g = dense_backward(p, f.cache, w);
    const std::string tag = "dense." + to_string(act);
    const double step = linear ? 0x1p-16 : 0.0;
    c.check(tag + ".input", x, g.input, loss, 0, nullptr, step);
    c.check(tag + ".weights", p.weights, g.weights, loss, 0, nullptr, step);
    c.check(tag + ".bias", p.bias, g.bias, loss, 0, nullptr, step);
  }
}

void check_conv(Checker& c, Rng& rng) {
  for (Activation act : {Activation::Linear, Activation::Tanh}) {
    Tensor x = random_tensor({2, 5, 4, 4, 2}, rng);
    Conv3DParams p{random_tensor({3, 3, 2, 2, 3}, rng, -0.5, 0.5), random_tensor({3}, rng), act};
    const Tensor w = random_tensor({2, 3, 2, 3, 3}, rng);
    auto loss = [&] { return dot(conv3d_forward(x, p).y, w); };
    const auto f = conv3d_forward(x, p);
    const auto g = conv3d_backward(p, f.cache, w);
    const double s = c.sign_conv();
    const std::string tag = "conv3d." + to_string(act);
    c.check(tag + ".input", x, scale(g.input, s), loss);
    c.check(tag + ".kernel", p.kernel, scale(g.kernel, s), loss);
    c.check(tag + ".bias", p.bias, scale(g.bias, s), loss);
  }
}

// Distinct values at least 0.01 apart so a step of 1e-5 never changes a maximum.
Tensor spaced_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  std::vector<double> v(t.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.01 * static_cast<double>(i);
  rng.shuffle(v);
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = v[i] - 0.005 * static_cast<double>(v.size());
  return t;
}

void check_maxpool(Checker& c, Rng& rng) {
  Tensor x = spaced_tensor({2, 5, 4, 4, 2}, rng);  // odd extent exercises the floor rule
  const Pool3DConfig cfg{};
  const auto f = maxpool3d_forward(x, cfg);
  const Tensor w = random_tensor(f.y.shape(), rng);
  auto loss = [&] { return dot(maxpool3d_forward(x, cfg).y, w); };
  c.check("maxpool3d.input", x, maxpool3d_backward(f.cache, w), loss);
}

void check_batchnorm(Checker& c, Rng& rng) {
  Tensor x = random_tensor({3, 3, 2, 2, 3}, rng, -2, 2);
  BatchNormState s = BatchNormState::identity(3);
  s.gamma = random_tensor({3}, rng, 0.5, 1.5);
  s.beta = random_tensor({3}, rng);
  s.running_mean = random_tensor({3}, rng);
  s.running_var = random_tensor({3}, rng, 0.5, 2);
  const Tensor w = random_tensor(x.shape(), rng);
  {
    auto loss = [&] {
      BatchNormState tmp = s;
      return dot(batchnorm_forward(x, tmp, Mode::Train).y, w);
    };
    BatchNormState tmp = s;
    const auto f = batchnorm_forward(x, tmp, Mode::Train);
    const auto g = batchnorm_backward(s, f.cache, w);
    c.check("batchnorm.train.input", x, g.input, loss);
    c.check("batchnorm.train.gamma", s.gamma, g.gamma, loss);
    c.check("batchnorm.train.beta", s.beta, g.beta, loss);
  }
  {
    auto loss = [&] { return dot(batchnorm_forward(x, std::as_const(s)).y, w); };
    const auto f = batchnorm_forward(x, std::as_const(s));
    const auto g = batchnorm_backward(s, f.cache, w);
    c.check("batchnorm.infer.input", x, g.input, loss);
    c.check("batchnorm.infer.gamma", s.gamma, g.gamma, loss);
    c.check("batchnorm.infer.beta", s.beta, g.beta, loss);
  }
}

void check_global_maxpool(Checker& c, Rng& rng) {
  Tensor x = spaced_tensor({2, 3, 3, 2, 4}, rng);
  const auto f = global_maxpool3d(x);
  const Tensor w = random_tensor(f.y.shape(), rng);
  auto loss = [&] { return dot(global_maxpool3d(x).y, w); };
  c.check("global_maxpool.input", x, global_maxpool3d_backward(f.cache, w), loss);
}

void check_dropout(Checker& c, Rng& rng) {
  Tensor x = random_tensor({4, 6}, rng);
  const Tensor w = random_tensor({4, 6}, rng);
  const std::uint64_t mask_seed = rng.next();
  auto run = [&] {
    Rng r(mask_seed);
    return dropout(x, 0.5, Mode::Train, r);
  };
  auto loss = [&] { return dot(run().y, w); };
  c.check("dropout.input", x, dropout_backward(run().mask, w), loss);
}

void check_softmax(Checker& c, Rng& rng) {
  Tensor z = random_tensor({3, 4}, rng, -2, 2);
  const std::vector<std::size_t> labels{0, 3, 2};
  auto loss = [&] { return softmax_cross_entropy(z, labels).loss; };
  c.check("softmax_ce.logits", z, softmax_cross_entropy(z, labels).grad_logits, loss);
}

Tensor as_tensor(const std::vector<double>& v) { return Tensor({v.size()}, v); }

void check_lstm_step(Checker& c, Rng& rng) {
  const std::size_t in = 3, H = 4;
  LstmParams p = LstmParams::glorot(in, H, rng);
  for (auto& b : p.bias.data()) b += rng.uniform(-0.3, 0.3);
  Tensor x = random_tensor({in}, rng), h = random_tensor({H}, rng), cs = random_tensor({H}, rng);
  const Tensor wh = random_tensor({H}, rng), wc = random_tensor({H}, rng);
  auto loss = [&] {
    const auto s = lstm_step(x.data(), RecurrentState{h.storage(), cs.storage()}, p);
    return dot(as_tensor(s.state.h), wh) + dot(as_tensor(s.state.c), wc);
  };
  const auto s = lstm_step(x.data(), RecurrentState{h.storage(), cs.storage()}, p);
  LstmParams g = LstmParams::zeros(in, H);
  const auto b = lstm_step_backward(p, s.cache, wh.data(), wc.data(), g);
  c.check("lstm.x", x, as_tensor(b.dx), loss);
  c.check("lstm.h_prev", h, as_tensor(b.dh_prev), loss);
  c.check("lstm.c_prev", cs, as_tensor(b.dc_prev), loss);
  c.check("lstm.input_weights", p.input_weights, g.input_weights, loss);
  c.check("lstm.recurrent_weights", p.recurrent_weights, g.recurrent_weights, loss);
  c.check("lstm.bias", p.bias, g.bias, loss);
}

void check_gru_step(Checker& c, Rng& rng) {
  const std::size_t in = 3, H = 4;
  GruParams p = GruParams::glorot(in, H, rng);
  for (auto& b : p.input_bias.data()) b = rng.uniform(-0.3, 0.3);
  for (auto& b : p.recurrent_bias.data()) b = rng.uniform(-0.3, 0.3);
  Tensor x = random_tensor({in}, rng), h = random_tensor({H}, rng);
  const Tensor wh = random_tensor({H}, rng);
  auto loss = [&] { return dot(as_tensor(gru_step(x.data(), h.data(), p).h), wh); };
  const auto s = gru_step(x.data(), h.data(), p);
  GruParams g = GruParams::zeros(in, H);
  const auto b = gru_step_backward(p, s.cache, wh.data(), g);
  c.check("gru.x", x, as_tensor(b.dx), loss);
  c.check("gru.h_prev", h, as_tensor(b.dh_prev), loss);
  c.check("gru.input_weights", p.input_weights, g.input_weights, loss);
  c.check("gru.recurrent_weights", p.recurrent_weights, g.recurrent_weights, loss);
  c.check("gru.input_bias", p.input_bias, g.input_bias, loss);
  c.check("gru.recurrent_bias", p.recurrent_bias, g.recurrent_bias, loss);
}

CellParams random_cell(CellKind kind, std::size_t in, std::size_t H, Rng& rng) {
  if (kind == CellKind::Lstm) {
    auto p = LstmParams::glorot(in, H, rng);
    for (auto& b : p.bias.data()) b += rng.uniform(-0.3, 0.3);
    return p;
  }
  auto p = GruParams::glorot(in, H, rng);
  for (auto& b : p.input_bias.data()) b = rng.uniform(-0.3, 0.3);
  for (auto& b : p.recurrent_bias.data()) b = rng.uniform(-0.3, 0.3);
  return p;
}

void check_cell_tensors(Checker& c, const std::string& tag, CellParams& cell, const CellParams& grads,
                        const std::function<double()>& loss) {
  static const char* lstm_names[] = {"input_weights", "recurrent_weights", "bias"};
  static const char* gru_names[] = {"input_weights", "recurrent_weights", "input_bias", "recurrent_bias"};
  const auto ts = cell_tensors(cell);
  const auto gs = cell_tensors(grads);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    c.check(tag + "." + (cell_kind(cell) == CellKind::Lstm ? lstm_names[i] : gru_names[i]), *ts[i], *gs[i], loss);
  }
}

void check_bptt(Checker& c, Rng& rng, CellKind kind) {
  const std::string base = kind == CellKind::Lstm ? "bptt_lstm" : "bptt_gru";
  const std::size_t B = 2, T = 3, F = 3, H = 4;
  for (Direction dir : {Direction::Forward, Direction::Backward}) {
    for (ReturnMode mode : {ReturnMode::Last, ReturnMode::All}) {
      CellParams cell = random_cell(kind, F, H, rng);
      SequenceBatch seq;
      seq.features = random_tensor({B, T, F}, rng);
      seq.lengths = {3, 2};
      const Tensor w = random_tensor(mode == ReturnMode::Last ? Shape{B, H} : Shape{B, T, H}, rng);
      auto loss = [&] { return dot(run_sequence(seq, cell, dir, mode).output, w); };
      const auto r = run_sequence(seq, cell, dir, mode);
      const auto g = bptt_backward(cell, r.cache, w);
      const std::string tag = base + (dir == Direction::Forward ? ".fwd" : ".bwd") +
                              (mode == ReturnMode::Last ? ".last" : ".all");
      c.check(tag + ".features", seq.features, g.features, loss);
      check_cell_tensors(c, tag, cell, g.grads, loss);
    }
  }
}

void check_bidirectional(Checker& c, Rng& rng) {
  const std::size_t B = 2, T = 3, F = 3, H = 3;
  for (CellKind kind : {CellKind::Lstm, CellKind::Gru}) {
    for (ReturnMode mode : {ReturnMode::Last, ReturnMode::All}) {
      CellParams fwd = random_cell(kind, F, H, rng), bwd = random_cell(kind, F, H, rng);
      SequenceBatch seq;
      seq.features = random_tensor({B, T, F}, rng);
      seq.lengths = {2, 3};
      const Tensor w = random_tensor(mode == ReturnMode::Last ? Shape{B, 2 * H} : Shape{B, T, 2 * H}, rng);
      auto loss = [&] { return dot(bidirectional(seq, fwd, bwd, mode).output, w); };
      const auto r = bidirectional(seq, fwd, bwd, mode);
      const auto g = bidirectional_backward(fwd, bwd, r.cache, w);
      const std::string tag = std::string("bidirectional.") + (kind == CellKind::Lstm ? "lstm" : "gru") +
                              (mode == ReturnMode::Last ? ".last" : ".all");
      c.check(tag + ".features", seq.features, g.features, loss);
      check_cell_tensors(c, tag + ".fwd", fwd, g.forward, loss);
      check_cell_tensors(c, tag + ".bwd", bwd, g.backward, loss);
    }
  }
}

void check_model(Checker& c, Rng& rng, std::size_t samples) {
  Profile profile = Profile::reduced();
  profile.dropout = 0.0;
  Model model = Model::build(ArchitectureId::Lstm, profile, rng.next());
  const Shape vs = profile.volume_shape();
  std::vector<std::vector<Tensor>> batch(3);
  const std::size_t visits[] = {2, 1, 2};
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t t = 0; t < visits[b]; ++t) batch[b].push_back(random_tensor(vs, rng, 0, 1));
  }
  const std::vector<std::size_t> labels{0, 2, 3};
  auto loss = [&] {
    Model tmp = model;  // train-mode batchnorm updates running statistics
    Rng r(0);
    return tmp.pass(batch, labels, Mode::Train, r, false).loss;
  };
  Model tmp = model;
  Rng r(0);
  auto grads = tmp.pass(batch, labels, Mode::Train, r, true).grads;
  const auto params = model.trainable_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name.rfind("conv", 0) == 0) grads[i] = scale(grads[i], c.sign_conv());
  }
  c.check_sampled("model.lstm.reduced", params, grads, loss, samples, rng);
}

}  // namespace

GradCheckReport gradient_check(const std::vector<std::string>& components, const GradCheckOptions& opt) {
  std::vector<std::string> list;
  for (const auto& name : components) {
    if (name == "all") {
      list.insert(list.end(), gradient_check_components().begin(), gradient_check_components().end());
    } else if (std::find(gradient_check_components().begin(), gradient_check_components().end(), name) ==
               gradient_check_components().end()) {
      throw Error(ErrorKind::Config, "unknown gradient-check component '" + name + "'");
    } else {
      list.push_back(name);
    }
  }
  GradCheckReport report;
  Checker c(opt, report);
  for (const auto& name : list) {
    const auto& all = gradient_check_components();
    Rng rng(derive_seed(opt.seed, static_cast<std::uint64_t>(std::find(all.begin(), all.end(), name) - all.begin())));
    if (name == "dense") check_dense(c, rng);
    else if (name == "conv3d") check_conv(c, rng);
    else if (name == "maxpool3d") check_maxpool(c, rng);
    else if (name == "batchnorm") check_batchnorm(c, rng);
    else if (name == "global_maxpool") check_global_maxpool(c, rng);
    else if (name == "dropout") check_dropout(c, rng);
    else if (name == "softmax_ce") check_softmax(c, rng);
    else if (name == "lstm") check_lstm_step(c, rng);
    else if (name == "gru") check_gru_step(c, rng);
    else if (name == "bptt_lstm") check_bptt(c, rng, CellKind::Lstm);
    else if (name == "bptt_gru") check_bptt(c, rng, CellKind::Gru);
    else if (name == "bidirectional") check_bidirectional(c, rng);
    else if (name == "model") check_model(c, rng, opt.model_samples);
  }
  return report;
}

}  // namespace volseq
