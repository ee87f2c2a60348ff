#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <variant>
#include <vector>

#include "volseq/random.hpp"
#include "volseq/tensor.hpp"

namespace volseq {

enum class CellKind { Lstm, Gru };
enum class Direction { Forward, Backward };
enum class ReturnMode { Last, All };

/// LSTM weights with the four gates fused along the output axis in the order
/// input, forget, cell candidate, output. One bias vector per gate.
struct LstmParams {
  Tensor input_weights;      // [in x 4H]
  Tensor recurrent_weights;  // [H x 4H]
  Tensor bias;               // [4H]

  static LstmParams zeros(std::size_t in, std::size_t hidden);
  static LstmParams glorot(std::size_t in, std::size_t hidden, Rng& rng);

  std::size_t in() const { return input_weights.dim(0); }
  std::size_t hidden() const { return recurrent_weights.dim(0); }
  std::size_t parameter_count() const { return input_weights.size() + recurrent_weights.size() + bias.size(); }
  std::vector<Tensor*> tensors() { return {&input_weights, &recurrent_weights, &bias}; }
  std::vector<const Tensor*> tensors() const { return {&input_weights, &recurrent_weights, &bias}; }
};

/// GRU weights fused in the order update, reset, candidate. Input and
/// recurrent biases are kept apart because the reset gate multiplies the
/// recurrent term (bias included) of the candidate.
struct GruParams {
  Tensor input_weights;      // [in x 3H]
  Tensor recurrent_weights;  // [H x 3H]
  Tensor input_bias;         // [3H]
  Tensor recurrent_bias;     // [3H]

  static GruParams zeros(std::size_t in, std::size_t hidden);
  static GruParams glorot(std::size_t in, std::size_t hidden, Rng& rng);

  std::size_t in() const { return input_weights.dim(0); }
  std::size_t hidden() const { return recurrent_weights.dim(0); }
  std::size_t parameter_count() const {
    return input_weights.size() + recurrent_weights.size() + input_bias.size() + recurrent_bias.size();
  }
  std::vector<Tensor*> tensors() { return {&input_weights, &recurrent_weights, &input_bias, &recurrent_bias}; }
  std::vector<const Tensor*> tensors() const {
    return {&input_weights, &recurrent_weights, &input_bias, &recurrent_bias};
  }
};

std::size_t lstm_parameter_count(std::size_t in, std::size_t hidden);
std::size_t gru_parameter_count(std::size_t in, std::size_t hidden);

struct RecurrentState {
  std::vector<double> h;
  std::vector<double> c;  // LSTM only

  static RecurrentState zeros(std::size_t hidden, CellKind kind);
};

// ---------------------------------------------------------------- single steps

struct LstmStepCache {
  std::vector<double> x, h_prev, c_prev;
  std::vector<double> gates;  // activated i, f, g, o
  std::vector<double> c, tanh_c;
};

struct LstmStep {
  RecurrentState state;
  LstmStepCache cache;
};

LstmStep lstm_step(std::span<const double> x, const RecurrentState& state, const LstmParams& p);

struct GruStepCache {
  std::vector<double> x, h_prev;
  std::vector<double> z, r, n;
  std::vector<double> recurrent_candidate;  // (h U_h + c_h), before the reset gate
};

struct GruStep {
  std::vector<double> h;
  GruStepCache cache;
};

GruStep gru_step(std::span<const double> x, std::span<const double> h, const GruParams& p);

/// Gradient of one step. Parameter gradients are accumulated into `grads`.
struct StepBackward {
  std::vector<double> dx, dh_prev, dc_prev;
};

StepBackward lstm_step_backward(const LstmParams& p, const LstmStepCache& cache, std::span<const double> dh,
                                std::span<const double> dc, LstmParams& grads);
StepBackward gru_step_backward(const GruParams& p, const GruStepCache& cache, std::span<const double> dh,
                               GruParams& grads);

// ---------------------------------------------------------------- sequences

/// Right-padded batch of feature sequences. Steps t < lengths[b] are real.
struct SequenceBatch {
  Tensor features;  // [B x T x F]
  std::vector<std::size_t> lengths;

  static SequenceBatch from_rows(const std::vector<Tensor>& sequences);  // each [T_b x F]
  std::size_t batch() const { return features.dim(0); }
  std::size_t steps() const { return features.dim(1); }
  std::size_t width() const { return features.dim(2); }
  bool mask(std::size_t b, std::size_t t) const { return t < lengths[b]; }
  void validate() const;
};

using CellParams = std::variant<LstmParams, GruParams>;

CellKind cell_kind(const CellParams& p);
std::size_t cell_in(const CellParams& p);
std::size_t cell_hidden(const CellParams& p);
std::size_t cell_parameter_count(const CellParams& p);
std::vector<Tensor*> cell_tensors(CellParams& p);
std::vector<const Tensor*> cell_tensors(const CellParams& p);
CellParams cell_zeros_like(const CellParams& p);

struct RunCache {
  CellKind kind = CellKind::Lstm;
  Direction direction = Direction::Forward;
  ReturnMode mode = ReturnMode::Last;
  std::size_t batch = 0, steps = 0, width = 0, hidden = 0;
  std::vector<std::size_t> lengths;
  // Per sample, step caches in processing order.
  std::vector<std::vector<LstmStepCache>> lstm;
  std::vector<std::vector<GruStepCache>> gru;
};

struct RunResult {
  Tensor output;  // [B x H] for Last, [B x T x H] for All (zero at padded steps)
  RunCache cache;
};

RunResult run_sequence(const SequenceBatch& seq, const CellParams& cell, Direction direction, ReturnMode mode);

struct BpttResult {
  CellParams grads;
  Tensor features;  // [B x T x F]
};

BpttResult bptt_backward(const CellParams& cell, const RunCache& cache, const Tensor& upstream);

struct BidirectionalCache {
  RunCache forward, backward;
};

struct BidirectionalResult {
  Tensor output;  // width 2H: forward half first
  BidirectionalCache cache;
};

BidirectionalResult bidirectional(const SequenceBatch& seq, const CellParams& cell_fwd, const CellParams& cell_bwd,
                                  ReturnMode mode);

struct BidirectionalGrads {
  CellParams forward, backward;
  Tensor features;
};

BidirectionalGrads bidirectional_backward(const CellParams& cell_fwd, const CellParams& cell_bwd,
                                          const BidirectionalCache& cache, const Tensor& upstream);

/// Applies one shared-weight extractor to every volume of a sequence.
/// Returns a single-sample batch with features [1 x T x F].
using Extractor = std::function<Tensor(const Tensor&)>;
SequenceBatch time_distributed(const Extractor& extractor, const std::vector<Tensor>& volumes);

}  // namespace volseq
