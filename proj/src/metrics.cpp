#include "volseq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace volseq {

std::size_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::size_t{0}); }

std::size_t ConfusionMatrix::fp(std::size_t k) const {
  std::size_t s = 0;
  for (std::size_t i = 0; i < k_; ++i) {
    if (i != k) s += at(i, k);
  }
  return s;
}

std::size_t ConfusionMatrix::fn(std::size_t k) const {
  std::size_t s = 0;
  for (std::size_t j = 0; j < k_; ++j) {
    if (j != k) s += at(k, j);
  }
  return s;
}

ConfusionMatrix confusion(const std::vector<std::size_t>& y_true, const std::vector<std::size_t>& y_pred,
                          std::size_t classes) {
  if (y_true.size() != y_pred.size()) {
    throw Error(ErrorKind::Shape, "confusion needs equal-length label lists (" + std::to_string(y_true.size()) +
                                      " vs " + std::to_string(y_pred.size()) + ")");
  }
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i] >= classes || y_pred[i] >= classes) {
      throw Error(ErrorKind::Label, "label at position " + std::to_string(i) + " is outside [0," +
                                        std::to_string(classes) + ")");
    }
    ++cm.at(y_true[i], y_pred[i]);
  }
  return cm;
}

namespace {

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

MacroSummary macro_summary(const ConfusionMatrix& cm) {
  MacroSummary s;
  const std::size_t K = cm.classes();
  if (K == 0) return s;
  const std::size_t total = cm.total();
  for (std::size_t k = 0; k < K; ++k) {
    s.accuracy += ratio(cm.tp(k) + cm.tn(k), total);
    s.precision += ratio(cm.tp(k), cm.tp(k) + cm.fp(k));
    s.recall += ratio(cm.tp(k), cm.tp(k) + cm.fn(k));
  }
  s.accuracy /= static_cast<double>(K);
  s.precision /= static_cast<double>(K);
  s.recall /= static_cast<double>(K);
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

double literal_class_accuracy(const ConfusionMatrix& cm, std::size_t k) { return ratio(cm.tp(k), cm.tp(k) + cm.tn(k)); }

RocCurve roc_ovr(const std::vector<std::size_t>& y_true, const Tensor& scores, std::size_t k) {
  if (scores.rank() != 2 || scores.dim(0) != y_true.size()) {
    throw Error(ErrorKind::Shape, "scores must be [n x K] with one row per label");
  }
  const std::size_t n = y_true.size(), K = scores.dim(1);
  if (k >= K) throw Error(ErrorKind::Label, "class " + std::to_string(k) + " has no score column");
  std::vector<std::pair<double, bool>> items;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = scores[i * K + k];
    if (!std::isfinite(s)) throw Error(ErrorKind::Input, "non-finite score in row " + std::to_string(i));
    const bool p = y_true[i] == k;
    pos += p;
    items.push_back({s, p});
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) {
    throw Error(ErrorKind::DegenerateClass, "class " + std::to_string(k) + " has " + std::to_string(pos) +
                                                " positive and " + std::to_string(neg) + " negative samples");
  }
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

  RocCurve c;
  c.points.push_back({0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  double area = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    const std::size_t tp0 = tp, fp0 = fp;
    while (j < n && items[j].first == items[i].first) {
      (items[j].second ? tp : fp)++;
      ++j;
    }
    // trapezoid in count units; normalized once at the end
    area += static_cast<double>(fp - fp0) * static_cast<double>(tp + tp0) / 2.0;
    c.points.push_back({static_cast<double>(fp) / static_cast<double>(neg), static_cast<double>(tp) / static_cast<double>(pos)});
    i = j;
  }
  c.auc = area / (static_cast<double>(pos) * static_cast<double>(neg));
  return c;
}

double macro_ovr_auc(const std::vector<std::size_t>& y_true, const Tensor& scores) {
  if (scores.rank() != 2) throw Error(ErrorKind::Shape, "scores must be [n x K]");
  std::vector<double> aucs;
  for (std::size_t k = 0; k < scores.dim(1); ++k) aucs.push_back(roc_ovr(y_true, scores, k).auc);
  return mean(aucs);
}

double mean(const std::vector<double>& values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

double stddev(const std::vector<double>& values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double m = mean(values);
  double s = 0;
  for (double v : values) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(values.size()));
}

MetricsBundle metrics_bundle(const std::vector<std::size_t>& y_true, const Tensor& scores) {
  if (scores.rank() != 2 || scores.dim(0) != y_true.size()) {
    throw Error(ErrorKind::Shape, "scores must be [n x K] with one row per label");
  }
  const std::size_t K = scores.dim(1);
  MetricsBundle m;
  m.confusion = confusion(y_true, argmax_last(scores), K);
  m.summary = macro_summary(m.confusion);
  bool all = true;
  for (std::size_t k = 0; k < K; ++k) {
    try {
      m.curves.push_back(roc_ovr(y_true, scores, k));
      m.class_auc.push_back(m.curves.back().auc);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::DegenerateClass) throw;
      m.curves.emplace_back();
      m.class_auc.push_back(std::numeric_limits<double>::quiet_NaN());
      all = false;
    }
  }
  m.macro_auc = all ? mean(m.class_auc) : std::numeric_limits<double>::quiet_NaN();
  return m;
}

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char b[32];
  std::snprintf(b, sizeof b, "%.6f", v);
  return b;
}

}  // namespace

std::string format_summary(const MetricsBundle& m) {
  std::ostringstream os;
  os << "samples      " << m.confusion.total() << '\n';
  os << "MAAccuracy   " << num(m.summary.accuracy) << '\n';
  os << "MAPrecision  " << num(m.summary.precision) << '\n';
  os << "MARecall     " << num(m.summary.recall) << '\n';
  os << "MAF1         " << num(m.summary.f1) << '\n';
  os << "macro AUC    " << num(m.macro_auc) << '\n';
  for (std::size_t k = 0; k < m.class_auc.size(); ++k) os << "AUC class " << k + 1 << "  " << num(m.class_auc[k]) << '\n';
  os << "confusion (rows = true class)\n";
  for (std::size_t i = 0; i < m.confusion.classes(); ++i) {
    os << "  ";
    for (std::size_t j = 0; j < m.confusion.classes(); ++j) {
      char b[16];
      std::snprintf(b, sizeof b, "%6zu", m.confusion.at(i, j));
      os << b;
    }
    os << '\n';
  }
  return os.str();
}

void write_report(const MetricsBundle& m, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::Write, "cannot create report directory '" + dir.string() + "'");
  auto open = [&](const std::string& name) {
    std::ofstream f(dir / name);
    if (!f) throw Error(ErrorKind::Write, "cannot write '" + (dir / name).string() + "'");
    return f;
  };
  {
    auto f = open("metrics.txt");
    f << "samples=" << m.confusion.total() << '\n'
      << "ma_accuracy=" << num(m.summary.accuracy) << '\n'
      << "ma_precision=" << num(m.summary.precision) << '\n'
      << "ma_recall=" << num(m.summary.recall) << '\n'
      << "ma_f1=" << num(m.summary.f1) << '\n'
      << "macro_ovr_auc=" << num(m.macro_auc) << '\n';
  }
  {
    auto f = open("confusion.tsv");
    f << "true\\pred";
    for (std::size_t j = 0; j < m.confusion.classes(); ++j) f << '\t' << j + 1;
    f << '\n';
    for (std::size_t i = 0; i < m.confusion.classes(); ++i) {
      f << i + 1;
      for (std::size_t j = 0; j < m.confusion.classes(); ++j) f << '\t' << m.confusion.at(i, j);
      f << '\n';
    }
  }
  {
    auto f = open("per_class.tsv");
    f << "class\ttp\tfp\tfn\ttn\tprecision\trecall\tauc\n";
    for (std::size_t k = 0; k < m.confusion.classes(); ++k) {
      const auto& c = m.confusion;
      const double p = c.tp(k) + c.fp(k) ? double(c.tp(k)) / double(c.tp(k) + c.fp(k)) : 0.0;
      const double r = c.tp(k) + c.fn(k) ? double(c.tp(k)) / double(c.tp(k) + c.fn(k)) : 0.0;
      f << k + 1 << '\t' << c.tp(k) << '\t' << c.fp(k) << '\t' << c.fn(k) << '\t' << c.tn(k) << '\t' << num(p) << '\t'
        << num(r) << '\t' << num(k < m.class_auc.size() ? m.class_auc[k] : std::nan("")) << '\n';
    }
  }
  for (std::size_t k = 0; k < m.curves.size(); ++k) {
    if (m.curves[k].points.empty()) continue;
    auto f = open("roc_class" + std::to_string(k + 1) + ".tsv");
    f << "fpr\ttpr\n";
    for (const auto& [x, y] : m.curves[k].points) f << num(x) << '\t' << num(y) << '\n';
  }
}

}  // namespace volseq
