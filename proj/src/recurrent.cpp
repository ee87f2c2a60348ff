#include "volseq/recurrent.hpp"

#include <cmath>

namespace volseq {

namespace {

double sigmoid(double x) { return activate(x, Activation::Sigmoid); }

void fill_glorot(Tensor& t, std::size_t row0, std::size_t rows, std::size_t col0, std::size_t cols, double bound,
                 Rng& rng) {
  const std::size_t width = t.dim(1);
  for (std::size_t r = row0; r < row0 + rows; ++r)
    for (std::size_t c = col0; c < col0 + cols; ++c) t[r * width + c] = rng.uniform(-bound, bound);
}

// out[j] = sum_i v[i] * m[i, j], summed in ascending i.
std::vector<double> vec_mat(std::span<const double> v, const Tensor& m) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  std::vector<double> out(cols, 0.0);
  const double* pm = m.data().data();
  for (std::size_t i = 0; i < rows; ++i) {
    const double vi = v[i];
    const double* row = pm + i * cols;
    for (std::size_t j = 0; j < cols; ++j) out[j] += vi * row[j];
  }
  return out;
}

// out[i] = sum_j m[i, j] * g[j]
std::vector<double> mat_vec(const Tensor& m, std::span<const double> g) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  std::vector<double> out(rows, 0.0);
  const double* pm = m.data().data();
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = pm + i * cols;
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += row[j] * g[j];
    out[i] = s;
  }
  return out;
}

void outer_accumulate(Tensor& m, std::span<const double> v, std::span<const double> g) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  double* pm = m.data().data();
  for (std::size_t i = 0; i < rows; ++i) {
    const double vi = v[i];
    double* row = pm + i * cols;
    for (std::size_t j = 0; j < cols; ++j) row[j] += vi * g[j];
  }
}

void check_step_dims(std::size_t x, std::size_t in, std::size_t h, std::size_t hidden, const char* what) {
  if (x != in || h != hidden) {
    throw Error(ErrorKind::Shape, std::string(what) + ": input width " + std::to_string(x) + " / state width " +
                                      std::to_string(h) + " vs cell " + std::to_string(in) + "/" +
                                      std::to_string(hidden));
  }
}

}  // namespace

// ---------------------------------------------------------------- params

LstmParams LstmParams::zeros(std::size_t in, std::size_t hidden) {
  return {Tensor({in, 4 * hidden}), Tensor({hidden, 4 * hidden}), Tensor({4 * hidden})};
}

LstmParams LstmParams::glorot(std::size_t in, std::size_t hidden, Rng& rng) {
  LstmParams p = zeros(in, hidden);
  const double wb = std::sqrt(6.0 / static_cast<double>(in + hidden));
  const double ub = std::sqrt(6.0 / static_cast<double>(2 * hidden));
  for (std::size_t g = 0; g < 4; ++g) fill_glorot(p.input_weights, 0, in, g * hidden, hidden, wb, rng);
  for (std::size_t g = 0; g < 4; ++g) fill_glorot(p.recurrent_weights, 0, hidden, g * hidden, hidden, ub, rng);
  for (std::size_t j = hidden; j < 2 * hidden; ++j) p.bias[j] = 1.0;  // forget gate
  return p;
}

GruParams GruParams::zeros(std::size_t in, std::size_t hidden) {
  return {Tensor({in, 3 * hidden}), Tensor({hidden, 3 * hidden}), Tensor({3 * hidden}), Tensor({3 * hidden})};
}

GruParams GruParams::glorot(std::size_t in, std::size_t hidden, Rng& rng) {
  GruParams p = zeros(in, hidden);
  const double wb = std::sqrt(6.0 / static_cast<double>(in + hidden));
  const double ub = std::sqrt(6.0 / static_cast<double>(2 * hidden));
  for (std::size_t g = 0; g < 3; ++g) fill_glorot(p.input_weights, 0, in, g * hidden, hidden, wb, rng);
  for (std::size_t g = 0; g < 3; ++g) fill_glorot(p.recurrent_weights, 0, hidden, g * hidden, hidden, ub, rng);
  return p;
}

std::size_t lstm_parameter_count(std::size_t in, std::size_t hidden) {
  return 4 * ((in + hidden) * hidden + hidden);
}

std::size_t gru_parameter_count(std::size_t in, std::size_t hidden) {
  return 3 * (in * hidden + hidden * hidden + 2 * hidden);
}

RecurrentState RecurrentState::zeros(std::size_t hidden, CellKind kind) {
  RecurrentState s;
  s.h.assign(hidden, 0.0);
  if (kind == CellKind::Lstm) s.c.assign(hidden, 0.0);
  return s;
}

// ---------------------------------------------------------------- LSTM step

LstmStep lstm_step(std::span<const double> x, const RecurrentState& state, const LstmParams& p) {
  const std::size_t hidden = p.hidden();
  check_step_dims(x.size(), p.in(), state.h.size(), hidden, "lstm_step");
  if (state.c.size() != hidden) throw Error(ErrorKind::Shape, "lstm_step: cell state width mismatch");

  const auto xw = vec_mat(x, p.input_weights);
  const auto hu = vec_mat(state.h, p.recurrent_weights);

  LstmStep out;
  auto& c = out.cache;
  c.x.assign(x.begin(), x.end());
  c.h_prev = state.h;
  c.c_prev = state.c;
  c.gates.resize(4 * hidden);
  for (std::size_t j = 0; j < 4 * hidden; ++j) {
    const double pre = xw[j] + hu[j] + p.bias[j];
    const bool candidate = j >= 2 * hidden && j < 3 * hidden;
    c.gates[j] = candidate ? std::tanh(pre) : sigmoid(pre);
  }
  c.c.resize(hidden);
  c.tanh_c.resize(hidden);
  out.state.h.resize(hidden);
  for (std::size_t k = 0; k < hidden; ++k) {
    const double i = c.gates[k], f = c.gates[hidden + k], g = c.gates[2 * hidden + k], o = c.gates[3 * hidden + k];
    c.c[k] = f * state.c[k] + i * g;
    c.tanh_c[k] = std::tanh(c.c[k]);
    out.state.h[k] = o * c.tanh_c[k];
  }
  out.state.c = c.c;
  return out;
}

StepBackward lstm_step_backward(const LstmParams& p, const LstmStepCache& cache, std::span<const double> dh,
                                std::span<const double> dc, LstmParams& grads) {
  const std::size_t hidden = p.hidden();
  std::vector<double> dpre(4 * hidden);
  StepBackward out;
  out.dc_prev.resize(hidden);
  for (std::size_t k = 0; k < hidden; ++k) {
    const double i = cache.gates[k], f = cache.gates[hidden + k], g = cache.gates[2 * hidden + k],
                 o = cache.gates[3 * hidden + k];
    const double tc = cache.tanh_c[k];
    const double dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
    dpre[k] = dct * g * i * (1.0 - i);
    dpre[hidden + k] = dct * cache.c_prev[k] * f * (1.0 - f);
    dpre[2 * hidden + k] = dct * i * (1.0 - g * g);
    dpre[3 * hidden + k] = dh[k] * tc * o * (1.0 - o);
    out.dc_prev[k] = dct * f;
  }
  outer_accumulate(grads.input_weights, cache.x, dpre);
  outer_accumulate(grads.recurrent_weights, cache.h_prev, dpre);
  for (std::size_t j = 0; j < 4 * hidden; ++j) grads.bias[j] += dpre[j];
  out.dx = mat_vec(p.input_weights, dpre);
  out.dh_prev = mat_vec(p.recurrent_weights, dpre);
  return out;
}

// ---------------------------------------------------------------- GRU step

GruStep gru_step(std::span<const double> x, std::span<const double> h, const GruParams& p) {
  const std::size_t hidden = p.hidden();
  check_step_dims(x.size(), p.in(), h.size(), hidden, "gru_step");

  const auto xw = vec_mat(x, p.input_weights);
  const auto hu = vec_mat(h, p.recurrent_weights);

  GruStep out;
  auto& c = out.cache;
  c.x.assign(x.begin(), x.end());
  c.h_prev.assign(h.begin(), h.end());
  c.z.resize(hidden);
  c.r.resize(hidden);
  c.n.resize(hidden);
  c.recurrent_candidate.resize(hidden);
  out.h.resize(hidden);
  for (std::size_t k = 0; k < hidden; ++k) {
    const std::size_t zj = k, rj = hidden + k, nj = 2 * hidden + k;
    c.z[k] = sigmoid(xw[zj] + hu[zj] + p.input_bias[zj] + p.recurrent_bias[zj]);
    c.r[k] = sigmoid(xw[rj] + hu[rj] + p.input_bias[rj] + p.recurrent_bias[rj]);
    c.recurrent_candidate[k] = hu[nj] + p.recurrent_bias[nj];
    c.n[k] = std::tanh(xw[nj] + p.input_bias[nj] + c.r[k] * c.recurrent_candidate[k]);
    out.h[k] = (1.0 - c.z[k]) * h[k] + c.z[k] * c.n[k];
  }
  return out;
}

StepBackward gru_step_backward(const GruParams& p, const GruStepCache& cache, std::span<const double> dh,
                               GruParams& grads) {
  const std::size_t hidden = p.hidden();
  std::vector<double> dx_pre(3 * hidden), dh_pre(3 * hidden);
  StepBackward out;
  out.dh_prev.resize(hidden);
  for (std::size_t k = 0; k < hidden; ++k) {
    const double z = cache.z[k], r = cache.r[k], n = cache.n[k];
    const double dz = dh[k] * (n - cache.h_prev[k]);
    const double dn = dh[k] * z;
    const double dn_pre = dn * (1.0 - n * n);
    const double dr = dn_pre * cache.recurrent_candidate[k];
    const double dr_pre = dr * r * (1.0 - r);
    const double dz_pre = dz * z * (1.0 - z);
    dx_pre[k] = dz_pre;
    dx_pre[hidden + k] = dr_pre;
    dx_pre[2 * hidden + k] = dn_pre;
    dh_pre[k] = dz_pre;
    dh_pre[hidden + k] = dr_pre;
    dh_pre[2 * hidden + k] = dn_pre * r;
    out.dh_prev[k] = dh[k] * (1.0 - z);
  }
  outer_accumulate(grads.input_weights, cache.x, dx_pre);
  outer_accumulate(grads.recurrent_weights, cache.h_prev, dh_pre);
  for (std::size_t j = 0; j < 3 * hidden; ++j) {
    grads.input_bias[j] += dx_pre[j];
    grads.recurrent_bias[j] += dh_pre[j];
  }
  out.dx = mat_vec(p.input_weights, dx_pre);
  const auto through_recurrent = mat_vec(p.recurrent_weights, dh_pre);
  for (std::size_t k = 0; k < hidden; ++k) out.dh_prev[k] += through_recurrent[k];
  return out;
}

// ---------------------------------------------------------------- variant helpers

CellKind cell_kind(const CellParams& p) {
  return std::holds_alternative<LstmParams>(p) ? CellKind::Lstm : CellKind::Gru;
}

std::size_t cell_in(const CellParams& p) {
  return std::visit([](const auto& c) { return c.in(); }, p);
}

std::size_t cell_hidden(const CellParams& p) {
  return std::visit([](const auto& c) { return c.hidden(); }, p);
}

std::size_t cell_parameter_count(const CellParams& p) {
  return std::visit([](const auto& c) { return c.parameter_count(); }, p);
}

std::vector<Tensor*> cell_tensors(CellParams& p) {
  return std::visit([](auto& c) { return c.tensors(); }, p);
}

std::vector<const Tensor*> cell_tensors(const CellParams& p) {
  return std::visit([](const auto& c) { return c.tensors(); }, p);
}

CellParams cell_zeros_like(const CellParams& p) {
  if (const auto* l = std::get_if<LstmParams>(&p)) return LstmParams::zeros(l->in(), l->hidden());
  const auto& g = std::get<GruParams>(p);
  return GruParams::zeros(g.in(), g.hidden());
}

// ---------------------------------------------------------------- sequences

SequenceBatch SequenceBatch::from_rows(const std::vector<Tensor>& sequences) {
  if (sequences.empty()) throw Error(ErrorKind::Input, "empty sequence batch");
  std::size_t steps = 0, width = sequences.front().dim(1);
  for (const auto& s : sequences) {
    if (s.rank() != 2 || s.dim(1) != width) throw Error(ErrorKind::Shape, "sequence rows must be [T x F]");
    steps = std::max(steps, s.dim(0));
  }
  SequenceBatch out;
  out.features = Tensor({sequences.size(), steps, width});
  for (std::size_t b = 0; b < sequences.size(); ++b) {
    const auto& s = sequences[b];
    std::copy(s.data().begin(), s.data().end(), out.features.data().begin() + b * steps * width);
    out.lengths.push_back(s.dim(0));
  }
  return out;
}

void SequenceBatch::validate() const {
  if (features.rank() != 3) throw Error(ErrorKind::Shape, "sequence features must be [B x T x F]");
  if (lengths.size() != features.dim(0)) throw Error(ErrorKind::Shape, "one length per sample required");
  for (auto len : lengths) {
    if (len == 0) throw Error(ErrorKind::Input, "sequence has no real timesteps");
    if (len > features.dim(1)) throw Error(ErrorKind::Shape, "sequence length exceeds padded extent");
  }
}

RunResult run_sequence(const SequenceBatch& seq, const CellParams& cell, Direction direction, ReturnMode mode) {
  seq.validate();
  const std::size_t batch = seq.batch(), steps = seq.steps(), width = seq.width();
  const std::size_t hidden = cell_hidden(cell);
  const CellKind kind = cell_kind(cell);
  if (width != cell_in(cell)) {
    throw Error(ErrorKind::Shape, "feature width " + std::to_string(width) + " does not match cell input " +
                                      std::to_string(cell_in(cell)));
  }

  RunResult res;
  auto& cache = res.cache;
  cache.kind = kind;
  cache.direction = direction;
  cache.mode = mode;
  cache.batch = batch;
  cache.steps = steps;
  cache.width = width;
  cache.hidden = hidden;
  cache.lengths = seq.lengths;
  if (kind == CellKind::Lstm) cache.lstm.resize(batch);
  else cache.gru.resize(batch);
  res.output = mode == ReturnMode::Last ? Tensor({batch, hidden}) : Tensor({batch, steps, hidden});

  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t len = seq.lengths[b];
    RecurrentState state = RecurrentState::zeros(hidden, kind);
    for (std::size_t s = 0; s < len; ++s) {
      const std::size_t t = direction == Direction::Forward ? s : len - 1 - s;
      std::span<const double> x(seq.features.data().data() + (b * steps + t) * width, width);
      if (kind == CellKind::Lstm) {
        auto step = lstm_step(x, state, std::get<LstmParams>(cell));
        state = std::move(step.state);
        cache.lstm[b].push_back(std::move(step.cache));
      } else {
        auto step = gru_step(x, state.h, std::get<GruParams>(cell));
        state.h = std::move(step.h);
        cache.gru[b].push_back(std::move(step.cache));
      }
      if (mode == ReturnMode::All) {
        std::copy(state.h.begin(), state.h.end(), res.output.data().begin() + (b * steps + t) * hidden);
      }
    }
    if (mode == ReturnMode::Last) {
      std::copy(state.h.begin(), state.h.end(), res.output.data().begin() + b * hidden);
    }
  }
  return res;
}

BpttResult bptt_backward(const CellParams& cell, const RunCache& cache, const Tensor& upstream) {
  const std::size_t hidden = cache.hidden, steps = cache.steps, width = cache.width;
  const Shape expected = cache.mode == ReturnMode::Last ? Shape{cache.batch, hidden} : Shape{cache.batch, steps, hidden};
  if (upstream.shape() != expected) {
    throw Error(ErrorKind::Contract, "bptt: upstream " + shape_string(upstream.shape()) + ", expected " +
                                         shape_string(expected));
  }
  if (cell_kind(cell) != cache.kind || cell_hidden(cell) != hidden) {
    throw Error(ErrorKind::Contract, "bptt: cell does not match the cached run");
  }

  BpttResult res{cell_zeros_like(cell), Tensor({cache.batch, steps, width})};
  for (std::size_t b = 0; b < cache.batch; ++b) {
    const std::size_t len = cache.lengths[b];
    std::vector<double> dh_next(hidden, 0.0), dc_next(hidden, 0.0);
    for (std::size_t s = len; s-- > 0;) {
      const std::size_t t = cache.direction == Direction::Forward ? s : len - 1 - s;
      std::vector<double> dh = dh_next;
      if (cache.mode == ReturnMode::All) {
        const double* u = upstream.data().data() + (b * steps + t) * hidden;
        for (std::size_t k = 0; k < hidden; ++k) dh[k] += u[k];
      } else if (s == len - 1) {
        const double* u = upstream.data().data() + b * hidden;
        for (std::size_t k = 0; k < hidden; ++k) dh[k] += u[k];
      }
      StepBackward step;
      if (cache.kind == CellKind::Lstm) {
        step = lstm_step_backward(std::get<LstmParams>(cell), cache.lstm[b][s], dh, dc_next,
                                  std::get<LstmParams>(res.grads));
        dc_next = std::move(step.dc_prev);
      } else {
        step = gru_step_backward(std::get<GruParams>(cell), cache.gru[b][s], dh, std::get<GruParams>(res.grads));
      }
      dh_next = std::move(step.dh_prev);
      std::copy(step.dx.begin(), step.dx.end(), res.features.data().begin() + (b * steps + t) * width);
    }
  }
  return res;
}

BidirectionalResult bidirectional(const SequenceBatch& seq, const CellParams& cell_fwd, const CellParams& cell_bwd,
                                  ReturnMode mode) {
  if (cell_in(cell_fwd) != cell_in(cell_bwd) || cell_hidden(cell_fwd) != cell_hidden(cell_bwd)) {
    throw Error(ErrorKind::Shape, "bidirectional cells must share input width and hidden size");
  }
  auto fwd = run_sequence(seq, cell_fwd, Direction::Forward, mode);
  auto bwd = run_sequence(seq, cell_bwd, Direction::Backward, mode);
  const std::size_t hidden = cell_hidden(cell_fwd);
  const std::size_t rows = fwd.output.size() / hidden;
  Shape shape = fwd.output.shape();
  shape.back() = 2 * hidden;
  BidirectionalResult res{Tensor(shape), {std::move(fwd.cache), std::move(bwd.cache)}};
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(fwd.output.data().begin() + r * hidden, hidden, res.output.data().begin() + r * 2 * hidden);
    std::copy_n(bwd.output.data().begin() + r * hidden, hidden, res.output.data().begin() + r * 2 * hidden + hidden);
  }
  return res;
}

BidirectionalGrads bidirectional_backward(const CellParams& cell_fwd, const CellParams& cell_bwd,
                                          const BidirectionalCache& cache, const Tensor& upstream) {
  const std::size_t hidden = cache.forward.hidden;
  if (upstream.shape().back() != 2 * hidden) throw Error(ErrorKind::Contract, "bidirectional upstream width");
  Shape half_shape = upstream.shape();
  half_shape.back() = hidden;
  Tensor up_f(half_shape), up_b(half_shape);
  const std::size_t rows = upstream.size() / (2 * hidden);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(upstream.data().begin() + r * 2 * hidden, hidden, up_f.data().begin() + r * hidden);
    std::copy_n(upstream.data().begin() + r * 2 * hidden + hidden, hidden, up_b.data().begin() + r * hidden);
  }
  auto gf = bptt_backward(cell_fwd, cache.forward, up_f);
  auto gb = bptt_backward(cell_bwd, cache.backward, up_b);
  return {std::move(gf.grads), std::move(gb.grads), add(gf.features, gb.features)};
}

SequenceBatch time_distributed(const Extractor& extractor, const std::vector<Tensor>& volumes) {
  if (volumes.empty()) throw Error(ErrorKind::Input, "time_distributed needs at least one volume");
  std::vector<Tensor> rows;
  rows.reserve(volumes.size());
  for (const auto& v : volumes) {
    if (v.shape() != volumes.front().shape()) {
      throw Error(ErrorKind::Shape, "time_distributed volumes differ in shape: " + shape_string(v.shape()) +
                                        " vs " + shape_string(volumes.front().shape()));
    }
    Tensor f = extractor(v);
    rows.push_back(f.reshaped({f.size()}));
  }
  const std::size_t width = rows.front().size();
  Tensor seq({volumes.size(), width});
  for (std::size_t t = 0; t < rows.size(); ++t) {
    if (rows[t].size() != width) throw Error(ErrorKind::Shape, "extractor output width changed between steps");
    std::copy(rows[t].data().begin(), rows[t].data().end(), seq.data().begin() + t * width);
  }
  return SequenceBatch::from_rows({seq});
}

}  // namespace volseq
