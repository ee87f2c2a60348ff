#pragma once

// Brute-force reference implementations used only by the tests. They index raw
// storage with their own arithmetic so they share no code with the library.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "volseq/random.hpp"
#include "volseq/tensor.hpp"

namespace oracle {

using volseq::Rng;
using volseq::Shape;
using volseq::Tensor;

inline Tensor random(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Small integers keep sums exact, so oracles can demand bitwise equality
// regardless of accumulation order.
inline Tensor random_int(Shape shape, Rng& rng, int lo = -4, int hi = 4) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<double>(lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))));
  return t;
}

// a [n x k] * b [k x m]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  Tensor c({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0;
      for (std::size_t t = 0; t < k; ++t) s += a.storage()[i * k + t] * b.storage()[t * m + j];
      c.storage()[i * m + j] = s;
    }
  return c;
}

// x [B,D1,D2,D3,Ci], w [L,M,N,Ci,Co], b [Co]; valid padding, stride 1, no activation.
inline Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const std::size_t B = xs[0], D1 = xs[1], D2 = xs[2], D3 = xs[3], Ci = xs[4];
  const std::size_t L = ws[0], M = ws[1], N = ws[2], Co = ws[4];
  const std::size_t O1 = D1 - L + 1, O2 = D2 - M + 1, O3 = D3 - N + 1;
  Tensor y({B, O1, O2, O3, Co});
  auto X = [&](std::size_t bb, std::size_t i, std::size_t j, std::size_t k, std::size_t c) {
    return x.storage()[(((bb * D1 + i) * D2 + j) * D3 + k) * Ci + c];
  };
  auto W = [&](std::size_t l, std::size_t m, std::size_t n, std::size_t ci, std::size_t co) {
    return w.storage()[(((l * M + m) * N + n) * Ci + ci) * Co + co];
  };
  for (std::size_t bb = 0; bb < B; ++bb)
    for (std::size_t i = 0; i < O1; ++i)
      for (std::size_t j = 0; j < O2; ++j)
        for (std::size_t k = 0; k < O3; ++k)
          for (std::size_t co = 0; co < Co; ++co) {
            double s = 0;
            for (std::size_t l = 0; l < L; ++l)
              for (std::size_t m = 0; m < M; ++m)
                for (std::size_t n = 0; n < N; ++n)
                  for (std::size_t ci = 0; ci < Ci; ++ci) s += X(bb, i + l, j + m, k + n, ci) * W(l, m, n, ci, co);
            y.storage()[(((bb * O1 + i) * O2 + j) * O3 + k) * Co + co] = s + b.storage()[co];
          }
  return y;
}

// Non-overlapping p x q x r windows, floor mode.
inline Tensor maxpool3d(const Tensor& x, std::size_t p, std::size_t q, std::size_t r) {
  const auto& xs = x.shape();
  const std::size_t B = xs[0], D1 = xs[1], D2 = xs[2], D3 = xs[3], C = xs[4];
  const std::size_t O1 = D1 / p, O2 = D2 / q, O3 = D3 / r;
  Tensor y({B, O1, O2, O3, C});
  for (std::size_t bb = 0; bb < B; ++bb)
    for (std::size_t i = 0; i < O1; ++i)
      for (std::size_t j = 0; j < O2; ++j)
        for (std::size_t k = 0; k < O3; ++k)
          for (std::size_t c = 0; c < C; ++c) {
            double best = -std::numeric_limits<double>::infinity();
            for (std::size_t a = 0; a < p; ++a)
              for (std::size_t e = 0; e < q; ++e)
                for (std::size_t f = 0; f < r; ++f)
                  best = std::max(best, x.storage()[(((bb * D1 + i * p + a) * D2 + j * q + e) * D3 + k * r + f) * C + c]);
            y.storage()[(((bb * O1 + i) * O2 + j) * O3 + k) * C + c] = best;
          }
  return y;
}

// [B,D1,D2,D3,C] -> [B,C]
inline Tensor global_maxpool(const Tensor& x) {
  const auto& xs = x.shape();
  const std::size_t B = xs[0], V = xs[1] * xs[2] * xs[3], C = xs[4];
  Tensor y({B, C});
  for (std::size_t bb = 0; bb < B; ++bb)
    for (std::size_t c = 0; c < C; ++c) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t v = 0; v < V; ++v) best = std::max(best, x.storage()[(bb * V + v) * C + c]);
      y.storage()[bb * C + c] = best;
    }
  return y;
}

// Mann-Whitney form of the one-vs-rest AUC: P(score_pos > score_neg) + 0.5 P(tie).
inline double rank_auc(const std::vector<std::size_t>& y, const Tensor& scores, std::size_t k) {
  const std::size_t K = scores.shape()[1];
  double wins = 0;
  std::size_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] != k) continue;
    ++pos;
    for (std::size_t j = 0; j < y.size(); ++j) {
      if (y[j] == k) continue;
      const double a = scores.storage()[i * K + k], b = scores.storage()[j * K + k];
      wins += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
    }
  }
  for (auto v : y) neg += v != k;
  return wins / (static_cast<double>(pos) * static_cast<double>(neg));
}

// Central differences of a scalar function with respect to every entry of x.
inline Tensor numeric_grad(const std::function<double()>& f, Tensor& x, double h = 1e-5) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x.storage()[i];
    x.storage()[i] = keep + h;
    const double up = f();
    x.storage()[i] = keep - h;
    const double down = f();
    x.storage()[i] = keep;
    g.storage()[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double max_rel_error(const Tensor& a, const Tensor& n, double floor = 1e-6) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a.storage()[i], y = n.storage()[i];
    worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
  }
  return worst;
}

inline double weighted_sum(const Tensor& y, const Tensor& w) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y.storage()[i] * w.storage()[i];
  return s;
}

}  // namespace oracle
