#include "volseq/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace volseq {

namespace {

struct VolumeDims {
  std::size_t batch, d1, d2, d3, c;
  std::size_t spatial() const { return d1 * d2 * d3; }
};

VolumeDims volume_dims(const Tensor& x, const char* what) {
  if (x.rank() == 4) return {1, x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
  if (x.rank() == 5) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4)};
  throw Error(ErrorKind::Shape, std::string(what) + " expects a [D1xD2xD3xC] or [BxD1xD2xD3xC] tensor, got " +
                                    shape_string(x.shape()));
}

Shape volume_shape(bool batched, std::size_t b, std::size_t d1, std::size_t d2, std::size_t d3, std::size_t c) {
  if (batched) return {b, d1, d2, d3, c};
  return {d1, d2, d3, c};
}

void require_same_shape(const Shape& expected, const Tensor& upstream, const char* what) {
  if (upstream.shape() != expected) {
    throw Error(ErrorKind::Contract, std::string(what) + ": upstream " + shape_string(upstream.shape()) +
                                         " does not match forward output " + shape_string(expected));
  }
}

}  // namespace

// ---------------------------------------------------------------- conv3d

Conv3DForward conv3d_forward(const Tensor& x, const Conv3DParams& p) {
  const auto in = volume_dims(x, "conv3d");
  if (p.kernel.rank() != 5) throw Error(ErrorKind::Shape, "conv3d kernel must be rank 5");
  const std::size_t kl = p.kernel.dim(0), km = p.kernel.dim(1), kn = p.kernel.dim(2);
  const std::size_t cin = p.kernel.dim(3), cout = p.kernel.dim(4);
  if (cin != in.c) {
    throw Error(ErrorKind::Shape, "conv3d input has " + std::to_string(in.c) + " channels, kernel expects " +
                                      std::to_string(cin));
  }
  if (p.bias.size() != cout) throw Error(ErrorKind::Shape, "conv3d bias length does not match Cout");
  if (in.d1 < kl || in.d2 < km || in.d3 < kn) {
    throw Error(ErrorKind::Shape, "conv3d input " + shape_string(x.shape()) + " smaller than kernel " +
                                      shape_string(p.kernel.shape()));
  }
  const std::size_t o1 = in.d1 - kl + 1, o2 = in.d2 - km + 1, o3 = in.d3 - kn + 1;
  Tensor y(volume_shape(x.rank() == 5, in.batch, o1, o2, o3, cout));

  const double* px = x.data().data();
  const double* pw = p.kernel.data().data();
  const double* pb = p.bias.data().data();
  double* py = y.data().data();
  std::vector<double> acc(cout);

  for (std::size_t b = 0; b < in.batch; ++b) {
    const double* xb = px + b * in.spatial() * cin;
    for (std::size_t i = 0; i < o1; ++i)
      for (std::size_t j = 0; j < o2; ++j)
        for (std::size_t k = 0; k < o3; ++k) {
          std::fill(acc.begin(), acc.end(), 0.0);
          for (std::size_t l = 0; l < kl; ++l)
            for (std::size_t m = 0; m < km; ++m)
              for (std::size_t n = 0; n < kn; ++n) {
                const double* xv = xb + (((i + l) * in.d2 + (j + m)) * in.d3 + (k + n)) * cin;
                const double* wv = pw + ((l * km + m) * kn + n) * cin * cout;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                  const double xs = xv[ci];
                  const double* wrow = wv + ci * cout;
                  for (std::size_t co = 0; co < cout; ++co) acc[co] += xs * wrow[co];
                }
              }
          double* yv = py + (((b * o1 + i) * o2 + j) * o3 + k) * cout;
          for (std::size_t co = 0; co < cout; ++co) yv[co] = activate(acc[co] + pb[co], p.activation);
        }
  }
  Conv3DForward out{y, {x, y}};
  return out;
}

Conv3DGrads conv3d_backward(const Conv3DParams& p, const Conv3DCache& cache, const Tensor& upstream,
                            bool want_input_grad) {
  require_same_shape(cache.output.shape(), upstream, "conv3d backward");
  const auto in = volume_dims(cache.input, "conv3d backward");
  const auto out = volume_dims(cache.output, "conv3d backward");
  const std::size_t kl = p.kernel.dim(0), km = p.kernel.dim(1), kn = p.kernel.dim(2);
  const std::size_t cin = p.kernel.dim(3), cout = p.kernel.dim(4);

  Conv3DGrads g;
  g.kernel = Tensor(p.kernel.shape());
  g.bias = Tensor(p.bias.shape());
  if (want_input_grad) g.input = Tensor(cache.input.shape());

  // Gradient with respect to the pre-activation.
  std::vector<double> local(upstream.size());
  for (std::size_t t = 0; t < local.size(); ++t) {
    local[t] = upstream[t] * activation_grad_from_output(cache.output[t], p.activation);
  }

  const double* px = cache.input.data().data();
  const double* pw = p.kernel.data().data();
  double* gk = g.kernel.data().data();
  double* gb = g.bias.data().data();
  double* gx = want_input_grad ? g.input.data().data() : nullptr;

  for (std::size_t b = 0; b < in.batch; ++b) {
    const double* xb = px + b * in.spatial() * cin;
    double* gxb = gx ? gx + b * in.spatial() * cin : nullptr;
    for (std::size_t i = 0; i < out.d1; ++i)
      for (std::size_t j = 0; j < out.d2; ++j)
        for (std::size_t k = 0; k < out.d3; ++k) {
          const double* gv = local.data() + (((b * out.d1 + i) * out.d2 + j) * out.d3 + k) * cout;
          for (std::size_t co = 0; co < cout; ++co) gb[co] += gv[co];
          for (std::size_t l = 0; l < kl; ++l)
            for (std::size_t m = 0; m < km; ++m)
              for (std::size_t n = 0; n < kn; ++n) {
                const std::size_t xoff = (((i + l) * in.d2 + (j + m)) * in.d3 + (k + n)) * cin;
                const std::size_t woff = ((l * km + m) * kn + n) * cin * cout;
                const double* xv = xb + xoff;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                  const double xs = xv[ci];
                  double* gkrow = gk + woff + ci * cout;
                  for (std::size_t co = 0; co < cout; ++co) gkrow[co] += xs * gv[co];
                }
                if (gxb) {
                  double* gxv = gxb + xoff;
                  for (std::size_t ci = 0; ci < cin; ++ci) {
                    const double* wrow = pw + woff + ci * cout;
                    double s = 0.0;
                    for (std::size_t co = 0; co < cout; ++co) s += wrow[co] * gv[co];
                    gxv[ci] += s;
                  }
                }
              }
        }
  }
  return g;
}

// ---------------------------------------------------------------- maxpool3d

MaxPoolForward maxpool3d_forward(const Tensor& x, const Pool3DConfig& cfg) {
  const auto in = volume_dims(x, "maxpool3d");
  if (cfg.p == 0 || cfg.q == 0 || cfg.r == 0) throw Error(ErrorKind::Shape, "pool window extents must be >= 1");
  if (in.d1 < cfg.p || in.d2 < cfg.q || in.d3 < cfg.r) {
    throw Error(ErrorKind::Shape, "maxpool3d window larger than input " + shape_string(x.shape()));
  }
  const std::size_t o1 = in.d1 / cfg.p, o2 = in.d2 / cfg.q, o3 = in.d3 / cfg.r, c = in.c;
  MaxPoolForward out;
  out.y = Tensor(volume_shape(x.rank() == 5, in.batch, o1, o2, o3, c));
  out.cache.input_shape = x.shape();
  out.cache.argmax.resize(out.y.size());
  const double* px = x.data().data();

  std::size_t o = 0;
  for (std::size_t b = 0; b < in.batch; ++b)
    for (std::size_t i = 0; i < o1; ++i)
      for (std::size_t j = 0; j < o2; ++j)
        for (std::size_t k = 0; k < o3; ++k)
          for (std::size_t ch = 0; ch < c; ++ch, ++o) {
            std::size_t best = 0;
            double best_v = -std::numeric_limits<double>::infinity();
            bool first = true;
            // Scan order is ascending in flat offset, so strict '>' keeps the lowest index on ties.
            for (std::size_t l = 0; l < cfg.p; ++l)
              for (std::size_t m = 0; m < cfg.q; ++m)
                for (std::size_t n = 0; n < cfg.r; ++n) {
                  const std::size_t off =
                      (((b * in.d1 + i * cfg.p + l) * in.d2 + j * cfg.q + m) * in.d3 + k * cfg.r + n) * c + ch;
                  if (first || px[off] > best_v) {
                    best_v = px[off];
                    best = off;
                    first = false;
                  }
                }
            out.y[o] = best_v;
            out.cache.argmax[o] = best;
          }
  return out;
}

Tensor maxpool3d_backward(const MaxPoolCache& cache, const Tensor& upstream) {
  if (upstream.size() != cache.argmax.size()) {
    throw Error(ErrorKind::Contract, "maxpool3d backward: upstream " + shape_string(upstream.shape()) +
                                         " does not match cached forward output");
  }
  Tensor g(cache.input_shape);
  for (std::size_t o = 0; o < cache.argmax.size(); ++o) g[cache.argmax[o]] += upstream[o];
  return g;
}

// ---------------------------------------------------------------- batchnorm

BatchNormState BatchNormState::identity(std::size_t channels) {
  BatchNormState s;
  s.gamma = Tensor({channels}, 1.0);
  s.beta = Tensor({channels}, 0.0);
  s.running_mean = Tensor({channels}, 0.0);
  s.running_var = Tensor({channels}, 1.0);
  return s;
}

namespace {

BatchNormForward batchnorm_apply(const Tensor& x, const BatchNormState& s, Mode mode, BatchNormState* update) {
  const std::size_t c = x.shape().back();
  if (s.gamma.size() != c || s.beta.size() != c || s.running_mean.size() != c || s.running_var.size() != c) {
    throw Error(ErrorKind::Shape, "batchnorm state has " + std::to_string(s.gamma.size()) +
                                      " channels, input has " + std::to_string(c));
  }
  const std::size_t rows = x.size() / c;
  BatchNormForward out;
  out.cache.mode = mode;
  out.cache.normalized = Tensor(x.shape());
  out.cache.invstd.assign(c, 0.0);
  out.y = Tensor(x.shape());

  std::vector<double> mean(c, 0.0), var(c, 0.0);
  if (mode == Mode::Train) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t ch = 0; ch < c; ++ch) mean[ch] += x[r * c + ch];
    for (std::size_t ch = 0; ch < c; ++ch) mean[ch] /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double d = x[r * c + ch] - mean[ch];
        var[ch] += d * d;
      }
    for (std::size_t ch = 0; ch < c; ++ch) {
      var[ch] /= static_cast<double>(rows);
      if (update) {
        update->running_mean[ch] = s.momentum * s.running_mean[ch] + (1.0 - s.momentum) * mean[ch];
        update->running_var[ch] = s.momentum * s.running_var[ch] + (1.0 - s.momentum) * var[ch];
      }
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = s.running_mean[ch];
      var[ch] = s.running_var[ch];
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) out.cache.invstd[ch] = 1.0 / std::sqrt(var[ch] + s.epsilon);

  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t t = r * c + ch;
      const double xhat = (x[t] - mean[ch]) * out.cache.invstd[ch];
      out.cache.normalized[t] = xhat;
      out.y[t] = s.gamma[ch] * xhat + s.beta[ch];
    }
  return out;
}

}  // namespace

BatchNormForward batchnorm_forward(const Tensor& x, BatchNormState& s, Mode mode) {
  return batchnorm_apply(x, s, mode, &s);
}

BatchNormForward batchnorm_forward(const Tensor& x, const BatchNormState& s) {
  return batchnorm_apply(x, s, Mode::Infer, nullptr);
}

BatchNormGrads batchnorm_backward(const BatchNormState& s, const BatchNormCache& cache, const Tensor& upstream) {
  require_same_shape(cache.normalized.shape(), upstream, "batchnorm backward");
  const std::size_t c = s.gamma.size();
  const std::size_t rows = upstream.size() / c;
  BatchNormGrads g;
  g.gamma = Tensor({c});
  g.beta = Tensor({c});
  g.input = Tensor(upstream.shape());

  std::vector<double> sum_dxhat(c, 0.0), sum_dxhat_xhat(c, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t t = r * c + ch;
      const double xhat = cache.normalized[t];
      g.gamma[ch] += upstream[t] * xhat;
      g.beta[ch] += upstream[t];
      const double dxhat = upstream[t] * s.gamma[ch];
      sum_dxhat[ch] += dxhat;
      sum_dxhat_xhat[ch] += dxhat * xhat;
    }

  if (cache.mode == Mode::Infer) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t t = r * c + ch;
        g.input[t] = upstream[t] * s.gamma[ch] * cache.invstd[ch];
      }
    return g;
  }

  const double n = static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t t = r * c + ch;
      const double dxhat = upstream[t] * s.gamma[ch];
      g.input[t] = cache.invstd[ch] / n *
                   (n * dxhat - sum_dxhat[ch] - cache.normalized[t] * sum_dxhat_xhat[ch]);
    }
  return g;
}

// ---------------------------------------------------------------- global max pool

GlobalMaxPoolForward global_maxpool3d(const Tensor& x) {
  const auto in = volume_dims(x, "global_maxpool3d");
  GlobalMaxPoolForward out;
  out.y = x.rank() == 5 ? Tensor({in.batch, in.c}) : Tensor({in.c});
  out.cache.input_shape = x.shape();
  out.cache.argmax.assign(in.batch * in.c, 0);
  const std::size_t spatial = in.spatial();
  for (std::size_t b = 0; b < in.batch; ++b)
    for (std::size_t ch = 0; ch < in.c; ++ch) {
      std::size_t best = b * spatial * in.c + ch;
      for (std::size_t s = 1; s < spatial; ++s) {
        const std::size_t off = (b * spatial + s) * in.c + ch;
        if (x[off] > x[best]) best = off;
      }
      out.y[b * in.c + ch] = x[best];
      out.cache.argmax[b * in.c + ch] = best;
    }
  return out;
}

Tensor global_maxpool3d_backward(const GlobalMaxPoolCache& cache, const Tensor& upstream) {
  if (upstream.size() != cache.argmax.size()) {
    throw Error(ErrorKind::Contract, "global_maxpool3d backward: upstream size mismatch");
  }
  Tensor g(cache.input_shape);
  for (std::size_t o = 0; o < cache.argmax.size(); ++o) g[cache.argmax[o]] += upstream[o];
  return g;
}

// ---------------------------------------------------------------- dense

DenseForward dense_forward(const Tensor& x, const DenseParams& p) {
  if (x.rank() != 2 || x.dim(1) != p.in()) {
    throw Error(ErrorKind::Shape, "dense input " + shape_string(x.shape()) + " does not match weights " +
                                      shape_string(p.weights.shape()));
  }
  Tensor y = matmul(x, p.weights);
  const std::size_t b = y.dim(0), n = y.dim(1);
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] = activate(y[r * n + j] + p.bias[j], p.activation);
  return {y, {x, y}};
}

DenseGrads dense_backward(const DenseParams& p, const DenseCache& cache, const Tensor& upstream) {
  require_same_shape(cache.output.shape(), upstream, "dense backward");
  Tensor local = upstream;
  if (p.activation != Activation::Linear) {
    for (std::size_t t = 0; t < local.size(); ++t) {
      local[t] *= activation_grad_from_output(cache.output[t], p.activation);
    }
  }
  DenseGrads g;
  g.weights = matmul(transpose(cache.input), local);
  g.bias = Tensor({p.out()});
  const std::size_t b = local.dim(0), n = local.dim(1);
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t j = 0; j < n; ++j) g.bias[j] += local[r * n + j];
  g.input = matmul(local, transpose(p.weights));
  return g;
}

// ---------------------------------------------------------------- dropout

DropoutForward dropout(const Tensor& x, double rate, Mode mode, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw Error(ErrorKind::Input, "dropout rate must be in [0, 1)");
  DropoutForward out{x, Tensor(x.shape(), 1.0)};
  if (mode == Mode::Infer || rate == 0.0) return out;
  const double keep_scale = 1.0 / (1.0 - rate);
  for (std::size_t t = 0; t < x.size(); ++t) {
    const double m = rng.uniform() < rate ? 0.0 : keep_scale;
    out.mask[t] = m;
    out.y[t] = x[t] * m;
  }
  return out;
}

Tensor dropout_backward(const Tensor& mask, const Tensor& upstream) {
  if (mask.shape() != upstream.shape()) throw Error(ErrorKind::Contract, "dropout backward: shape mismatch");
  Tensor g = upstream;
  for (std::size_t t = 0; t < g.size(); ++t) g[t] *= mask[t];
  return g;
}

// ---------------------------------------------------------------- loss head

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw Error(ErrorKind::Shape, "softmax expects [B x K]");
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  Tensor p(logits.shape());
  for (std::size_t r = 0; r < b; ++r) {
    const double* z = logits.data().data() + r * k;
    double* pr = p.data().data() + r * k;
    const double mx = *std::max_element(z, z + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      pr[j] = std::exp(z[j] - mx);
      s += pr[j];
    }
    for (std::size_t j = 0; j < k; ++j) pr[j] /= s;
  }
  return p;
}

SoftmaxCrossEntropy softmax_cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw Error(ErrorKind::Shape, "logits " + shape_string(logits.shape()) + " vs " +
                                      std::to_string(labels.size()) + " labels");
  }
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  for (auto y : labels) {
    if (y >= k) throw Error(ErrorKind::Label, "label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
  }
  SoftmaxCrossEntropy out;
  out.probs = softmax(logits);
  out.grad_logits = out.probs;
  double total = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    const double* z = logits.data().data() + r * k;
    const double mx = *std::max_element(z, z + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(z[j] - mx);
    total += -(z[labels[r]] - mx - std::log(s));
    out.grad_logits[r * k + labels[r]] -= 1.0;
  }
  const double inv_b = 1.0 / static_cast<double>(b);
  out.loss = total * inv_b;
  for (auto& v : out.grad_logits.data()) v *= inv_b;
  return out;
}

}  // namespace volseq
