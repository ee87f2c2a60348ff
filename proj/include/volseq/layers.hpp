#pragma once

#include <cstddef>
#include <vector>

#include "volseq/random.hpp"
#include "volseq/tensor.hpp"

namespace volseq {

enum class Mode { Train, Infer };

// Volumes are channel-last: [D1 x D2 x D3 x C] for one volume, or
// [B x D1 x D2 x D3 x C] for a stack of B volumes. Every volume layer below
// accepts either and returns a result of the same rank.

// ---------------------------------------------------------------- conv3d

/// Valid-padding, stride-1 3D convolution.
/// y(i,j,k,co) = sum_{l,m,n,ci} x(i+l, j+m, k+n, ci) * kernel(l,m,n,ci,co) + bias(co)
struct Conv3DParams {
  Tensor kernel;  // [L x M x N x Cin x Cout]
  Tensor bias;    // [Cout]
  Activation activation = Activation::Linear;

  std::size_t in_channels() const { return kernel.dim(3); }
  std::size_t out_channels() const { return kernel.dim(4); }
  std::size_t parameter_count() const { return kernel.size() + bias.size(); }
};

struct Conv3DCache {
  Tensor input;
  Tensor output;  // post-activation
};

struct Conv3DForward {
  Tensor y;
  Conv3DCache cache;
};

struct Conv3DGrads {
  Tensor input;  // empty when not requested
  Tensor kernel;
  Tensor bias;
};

Conv3DForward conv3d_forward(const Tensor& x, const Conv3DParams& p);
Conv3DGrads conv3d_backward(const Conv3DParams& p, const Conv3DCache& cache, const Tensor& upstream,
                            bool want_input_grad = true);

// ---------------------------------------------------------------- maxpool3d

/// Non-overlapping window, stride equal to the window, floor semantics.
struct Pool3DConfig {
  std::size_t p = 2, q = 2, r = 2;
};

struct MaxPoolCache {
  Shape input_shape;
  std::vector<std::size_t> argmax;  // flat input offset for every output element
};

struct MaxPoolForward {
  Tensor y;
  MaxPoolCache cache;
};

MaxPoolForward maxpool3d_forward(const Tensor& x, const Pool3DConfig& cfg);
Tensor maxpool3d_backward(const MaxPoolCache& cache, const Tensor& upstream);

// ---------------------------------------------------------------- batchnorm

struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double epsilon = 1e-3;
  double momentum = 0.99;

  static BatchNormState identity(std::size_t channels);
  std::size_t channels() const { return gamma.size(); }
  // Includes the two running vectors, matching the usual per-layer summaries.
  std::size_t parameter_count() const { return 4 * gamma.size(); }
};

struct BatchNormCache {
  Mode mode = Mode::Infer;
  Tensor normalized;           // x-hat, same shape as input
  std::vector<double> invstd;  // per channel
};

struct BatchNormForward {
  Tensor y;
  BatchNormCache cache;
};

struct BatchNormGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};

/// Channel is the last axis; statistics are taken over every other axis.
/// Train mode normalizes with batch statistics and updates the running ones.
BatchNormForward batchnorm_forward(const Tensor& x, BatchNormState& s, Mode mode);
/// Infer-mode normalization with the running statistics; never mutates `s`.
BatchNormForward batchnorm_forward(const Tensor& x, const BatchNormState& s);
BatchNormGrads batchnorm_backward(const BatchNormState& s, const BatchNormCache& cache, const Tensor& upstream);

// ---------------------------------------------------------------- global max pool

struct GlobalMaxPoolCache {
  Shape input_shape;
  std::vector<std::size_t> argmax;
};

struct GlobalMaxPoolForward {
  Tensor y;  // [C] for one volume, [B x C] for a stack
  GlobalMaxPoolCache cache;
};

GlobalMaxPoolForward global_maxpool3d(const Tensor& x);
Tensor global_maxpool3d_backward(const GlobalMaxPoolCache& cache, const Tensor& upstream);

// ---------------------------------------------------------------- dense

struct DenseParams {
  Tensor weights;  // [in x out]
  Tensor bias;     // [out]
  Activation activation = Activation::Linear;

  std::size_t in() const { return weights.dim(0); }
  std::size_t out() const { return weights.dim(1); }
  std::size_t parameter_count() const { return weights.size() + bias.size(); }
};

struct DenseCache {
  Tensor input;
  Tensor output;
};

struct DenseForward {
  Tensor y;
  DenseCache cache;
};

struct DenseGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

DenseForward dense_forward(const Tensor& x, const DenseParams& p);
DenseGrads dense_backward(const DenseParams& p, const DenseCache& cache, const Tensor& upstream);

// ---------------------------------------------------------------- dropout

struct DropoutForward {
  Tensor y;
  Tensor mask;  // 0 or 1/(1-rate) per entry; all ones in infer mode
};

/// Inverted dropout.
DropoutForward dropout(const Tensor& x, double rate, Mode mode, Rng& rng);
Tensor dropout_backward(const Tensor& mask, const Tensor& upstream);

// ---------------------------------------------------------------- loss head

struct SoftmaxCrossEntropy {
  double loss = 0.0;
  Tensor probs;
  Tensor grad_logits;
};

Tensor softmax(const Tensor& logits);
SoftmaxCrossEntropy softmax_cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);

}  // namespace volseq
