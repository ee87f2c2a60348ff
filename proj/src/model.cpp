#include "volseq/model.hpp"

#include <cmath>
#include <sstream>
#include <utility>

namespace volseq {

const std::vector<ArchitectureId>& all_architectures() {
  static const std::vector<ArchitectureId> ids{ArchitectureId::Gru,  ArchitectureId::SGru,  ArchitectureId::SbiGru,
                                               ArchitectureId::Lstm, ArchitectureId::SLstm, ArchitectureId::SbiLstm};
  return ids;
}

std::string to_string(ArchitectureId id) {
  switch (id) {
    case ArchitectureId::Gru: return "gru";
    case ArchitectureId::SGru: return "sgru";
    case ArchitectureId::SbiGru: return "sbigru";
    case ArchitectureId::Lstm: return "lstm";
    case ArchitectureId::SLstm: return "slstm";
    case ArchitectureId::SbiLstm: return "sbilstm";
  }
  return "lstm";
}

ArchitectureId architecture_from_string(const std::string& name) {
  for (auto id : all_architectures()) {
    if (to_string(id) == name) return id;
  }
  throw Error(ErrorKind::Config, "unknown architecture '" + name + "'; valid ids: gru|sgru|sbigru|lstm|slstm|sbilstm");
}

Profile Profile::full() { return Profile{}; }

Profile Profile::reduced() {
  Profile p;
  p.name = "reduced";
  p.input = {32, 32, 16};
  // Two conv blocks: a 16-deep volume cannot survive four valid-conv/pool stages.
  p.conv_channels = {16, 16};
  p.hidden = 32;
  p.dense = {256, 128, 32, 16};
  return p;
}

Profile Profile::by_name(const std::string& name) {
  if (name == "full") return full();
  if (name == "reduced") return reduced();
  throw Error(ErrorKind::Config, "unknown profile '" + name + "'; valid: full|reduced");
}

namespace {

bool is_lstm(ArchitectureId id) {
  return id == ArchitectureId::Lstm || id == ArchitectureId::SLstm || id == ArchitectureId::SbiLstm;
}

std::size_t recurrent_depth(ArchitectureId id) {
  return (id == ArchitectureId::Gru || id == ArchitectureId::Lstm) ? 1 : 2;
}

bool is_bidirectional(ArchitectureId id) { return id == ArchitectureId::SbiGru || id == ArchitectureId::SbiLstm; }

void fill_uniform(Tensor& t, double bound, Rng& rng) {
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
}

std::array<std::size_t, 3> spatial_after_blocks(const Profile& profile, std::size_t blocks) {
  auto dims = profile.input;
  for (std::size_t b = 0; b < blocks; ++b) {
    for (auto& d : dims) {
      if (d < profile.kernel || (d - profile.kernel + 1) < profile.pool) {
        throw Error(ErrorKind::Config, "profile '" + profile.name + "' input is too small for " +
                                           std::to_string(profile.conv_channels.size()) + " conv blocks");
      }
      d = (d - profile.kernel + 1) / profile.pool;
    }
  }
  return dims;
}

std::string none_shape(std::initializer_list<std::size_t> dims, bool bracket, bool time_axis = false) {
  std::ostringstream os;
  if (bracket) os << '[';
  os << "(None";
  if (time_axis) os << ", None";
  for (auto d : dims) os << ", " << d;
  os << ')';
  if (bracket) os << ']';
  return os.str();
}

std::string cell_type_name(const CellParams& p) { return cell_kind(p) == CellKind::Lstm ? "LSTM" : "GRU"; }

}  // namespace

// ---------------------------------------------------------------- construction

Model Model::build(ArchitectureId id, const Profile& profile, std::uint64_t seed) {
  if (profile.conv_channels.empty() || profile.dense.empty()) {
    throw Error(ErrorKind::Config, "profile needs at least one conv block and one hidden dense layer");
  }
  spatial_after_blocks(profile, profile.conv_channels.size());

  Model m;
  m.arch = id;
  m.profile = profile;
  Rng rng(seed);

  const std::size_t k3 = profile.kernel * profile.kernel * profile.kernel;
  std::size_t in_ch = 1;
  for (std::size_t ch : profile.conv_channels) {
    ConvBlock block;
    block.conv.kernel = Tensor({profile.kernel, profile.kernel, profile.kernel, in_ch, ch});
    block.conv.bias = Tensor({ch});
    block.conv.activation = Activation::Relu;
    fill_uniform(block.conv.kernel, std::sqrt(6.0 / static_cast<double>(k3 * in_ch + k3 * ch)), rng);
    block.pool = {profile.pool, profile.pool, profile.pool};
    block.norm = BatchNormState::identity(ch);
    m.blocks.push_back(std::move(block));
    in_ch = ch;
  }

  std::size_t width = in_ch;
  const std::size_t depth = recurrent_depth(id);
  const std::size_t directions = is_bidirectional(id) ? 2 : 1;
  for (std::size_t layer = 0; layer < depth; ++layer) {
    RecurrentLayer r;
    r.bidirectional = directions == 2;
    r.mode = layer + 1 == depth ? ReturnMode::Last : ReturnMode::All;
    for (std::size_t d = 0; d < directions; ++d) {
      if (is_lstm(id)) r.cells.emplace_back(LstmParams::glorot(width, profile.hidden, rng));
      else r.cells.emplace_back(GruParams::glorot(width, profile.hidden, rng));
    }
    width = r.output_width();
    m.recurrent.push_back(std::move(r));
  }

  auto add_dense = [&](std::size_t out, Activation act, bool drop) {
    HeadLayer h;
    h.dense.weights = Tensor({width, out});
    h.dense.bias = Tensor({out});
    h.dense.activation = act;
    fill_uniform(h.dense.weights, std::sqrt(6.0 / static_cast<double>(width + out)), rng);
    h.dropout_after = drop;
    m.head.push_back(std::move(h));
    width = out;
  };
  for (std::size_t i = 0; i < profile.dense.size(); ++i) {
    add_dense(profile.dense[i], Activation::Relu, i < profile.dropout_layers);
  }
  add_dense(profile.classes, Activation::Linear, false);
  return m;
}

namespace {

template <typename Ref, typename M>
std::vector<Ref> collect_parameters(M& m) {
  std::vector<Ref> out;
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const std::string c = "conv" + std::to_string(i + 1), b = "bn" + std::to_string(i + 1);
    out.push_back({c + ".kernel", &m.blocks[i].conv.kernel, true});
    out.push_back({c + ".bias", &m.blocks[i].conv.bias, true});
    out.push_back({b + ".gamma", &m.blocks[i].norm.gamma, true});
    out.push_back({b + ".beta", &m.blocks[i].norm.beta, true});
    out.push_back({b + ".running_mean", &m.blocks[i].norm.running_mean, false});
    out.push_back({b + ".running_var", &m.blocks[i].norm.running_var, false});
  }
  for (std::size_t i = 0; i < m.recurrent.size(); ++i) {
    for (std::size_t d = 0; d < m.recurrent[i].cells.size(); ++d) {
      auto& cell = m.recurrent[i].cells[d];
      const std::string prefix = "rnn" + std::to_string(i + 1) + (d == 0 ? ".fwd." : ".bwd.");
      auto tensors = cell_tensors(cell);
      out.push_back({prefix + "input_weights", tensors[0], true});
      out.push_back({prefix + "recurrent_weights", tensors[1], true});
      if (cell_kind(cell) == CellKind::Lstm) {
        out.push_back({prefix + "bias", tensors[2], true});
      } else {
        out.push_back({prefix + "input_bias", tensors[2], true});
        out.push_back({prefix + "recurrent_bias", tensors[3], true});
      }
    }
  }
  for (std::size_t i = 0; i < m.head.size(); ++i) {
    const std::string d = "dense" + std::to_string(i + 1);
    out.push_back({d + ".weights", &m.head[i].dense.weights, true});
    out.push_back({d + ".bias", &m.head[i].dense.bias, true});
  }
  return out;
}

}  // namespace

std::vector<ParamRef> Model::parameters() { return collect_parameters<ParamRef>(*this); }

std::vector<ConstParamRef> Model::parameters() const { return collect_parameters<ConstParamRef>(*this); }

std::vector<ParamRef> Model::trainable_parameters() {
  std::vector<ParamRef> out;
  for (auto& p : parameters()) {
    if (p.trainable) out.push_back(p);
  }
  return out;
}

void Model::check_volume(const Tensor& v) const {
  const Shape expected = profile.volume_shape();
  const bool ok = v.shape() == expected ||
                  (v.rank() == 3 && v.dim(0) == expected[0] && v.dim(1) == expected[1] && v.dim(2) == expected[2]);
  if (!ok) {
    throw Error(ErrorKind::Shape, "expected volume " + shape_string(expected) + ", got " + shape_string(v.shape()));
  }
}

// ---------------------------------------------------------------- inference

Tensor Model::extract(const Tensor& volume) const {
  check_volume(volume);
  Tensor h = volume.reshaped(profile.volume_shape());
  for (const auto& block : blocks) {
    h = conv3d_forward(h, block.conv).y;
    h = maxpool3d_forward(h, block.pool).y;
    h = batchnorm_forward(h, block.norm).y;
  }
  return global_maxpool3d(h).y;
}

void Model::recalibrate_batchnorm(const std::vector<const Tensor*>& volumes) {
  if (volumes.empty()) throw Error(ErrorKind::Input, "batchnorm recalibration needs at least one volume");
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::size_t c = blocks[b].norm.channels();
    // Chan's parallel merge of per-volume (count, mean, M2).
    std::vector<double> mean(c, 0.0), m2(c, 0.0);
    double count = 0;
    for (const Tensor* v : volumes) {
      check_volume(*v);
      Tensor h = v->reshaped(profile.volume_shape());
      for (std::size_t i = 0; i < b; ++i) {
        h = conv3d_forward(h, blocks[i].conv).y;
        h = maxpool3d_forward(h, blocks[i].pool).y;
        h = batchnorm_forward(h, blocks[i].norm).y;
      }
      h = conv3d_forward(h, blocks[b].conv).y;
      h = maxpool3d_forward(h, blocks[b].pool).y;
      const std::size_t rows = h.size() / c;
      for (std::size_t ch = 0; ch < c; ++ch) {
        double m = 0;
        for (std::size_t r = 0; r < rows; ++r) m += h[r * c + ch];
        m /= static_cast<double>(rows);
        double q = 0;
        for (std::size_t r = 0; r < rows; ++r) q += (h[r * c + ch] - m) * (h[r * c + ch] - m);
        const double n = static_cast<double>(rows);
        const double total = count + n;
        const double delta = m - mean[ch];
        mean[ch] += delta * n / total;
        m2[ch] += q + delta * delta * count * n / total;
      }
      count += static_cast<double>(rows);
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      blocks[b].norm.running_mean[ch] = mean[ch];
      blocks[b].norm.running_var[ch] = m2[ch] / count;
    }
  }
}

Tensor Model::predict(const std::vector<Tensor>& volumes) const {
  SequenceBatch seq = time_distributed([this](const Tensor& v) { return extract(v); }, volumes);
  Tensor z;
  for (const auto& layer : recurrent) {
    Tensor out = layer.bidirectional ? bidirectional(seq, layer.cells[0], layer.cells[1], layer.mode).output
                                     : run_sequence(seq, layer.cells[0], Direction::Forward, layer.mode).output;
    if (layer.mode == ReturnMode::All) seq.features = std::move(out);
    else z = std::move(out);
  }
  for (const auto& h : head) z = dense_forward(z, h.dense).y;
  return softmax(z).reshaped({profile.classes});
}

Tensor Model::forward(const std::vector<Tensor>& volumes, Mode mode, Rng* rng) {
  if (mode == Mode::Infer) return predict(volumes);
  Rng fallback(0);
  BatchPass p = pass({volumes}, {}, Mode::Train, rng ? *rng : fallback, false);
  return p.probs.reshaped({profile.classes});
}

// ---------------------------------------------------------------- training pass

BatchPass Model::pass(const std::vector<std::vector<Tensor>>& sequences, const std::vector<std::size_t>& labels,
                      Mode mode, Rng& rng, bool want_grads) {
  if (sequences.empty()) throw Error(ErrorKind::Input, "empty mini-batch");
  if (!labels.empty() && labels.size() != sequences.size()) {
    throw Error(ErrorKind::Shape, "one label per sequence required");
  }
  if (want_grads && labels.empty()) throw Error(ErrorKind::Input, "gradients need labels");

  // Stack every volume of the batch: [N x D1 x D2 x D3 x 1].
  const Shape vshape = profile.volume_shape();
  const std::size_t vsize = shape_volume(vshape);
  std::size_t total = 0;
  for (const auto& s : sequences) {
    if (s.empty()) throw Error(ErrorKind::Input, "sequence with no volumes");
    for (const auto& v : s) check_volume(v);
    total += s.size();
  }
  Tensor x({total, vshape[0], vshape[1], vshape[2], vshape[3]});
  {
    std::size_t n = 0;
    for (const auto& s : sequences)
      for (const auto& v : s) std::copy(v.data().begin(), v.data().end(), x.data().begin() + (n++) * vsize);
  }

  struct BlockCache {
    Conv3DCache conv;
    MaxPoolCache pool;
    BatchNormCache norm;
  };
  std::vector<BlockCache> block_caches;
  Tensor h = std::move(x);
  for (auto& block : blocks) {
    auto c = conv3d_forward(h, block.conv);
    auto p = maxpool3d_forward(c.y, block.pool);
    auto b = mode == Mode::Train ? batchnorm_forward(p.y, block.norm, Mode::Train)
                                 : batchnorm_forward(p.y, std::as_const(block.norm));
    h = std::move(b.y);
    if (want_grads) block_caches.push_back({std::move(c.cache), std::move(p.cache), std::move(b.cache)});
  }
  auto gmp = global_maxpool3d(h);
  const std::size_t feat = gmp.y.dim(1);

  SequenceBatch seq;
  std::size_t steps = 0;
  for (const auto& s : sequences) steps = std::max(steps, s.size());
  seq.features = Tensor({sequences.size(), steps, feat});
  {
    std::size_t n = 0;
    for (std::size_t b = 0; b < sequences.size(); ++b) {
      seq.lengths.push_back(sequences[b].size());
      for (std::size_t t = 0; t < sequences[b].size(); ++t, ++n) {
        std::copy_n(gmp.y.data().begin() + n * feat, feat, seq.features.data().begin() + (b * steps + t) * feat);
      }
    }
  }

  struct RecCache {
    BidirectionalCache bi;
    RunCache uni;
  };
  std::vector<RecCache> rec_caches;
  Tensor z;
  for (const auto& layer : recurrent) {
    RecCache rc;
    Tensor out;
    if (layer.bidirectional) {
      auto r = bidirectional(seq, layer.cells[0], layer.cells[1], layer.mode);
      out = std::move(r.output);
      rc.bi = std::move(r.cache);
    } else {
      auto r = run_sequence(seq, layer.cells[0], Direction::Forward, layer.mode);
      out = std::move(r.output);
      rc.uni = std::move(r.cache);
    }
    if (want_grads) rec_caches.push_back(std::move(rc));
    if (layer.mode == ReturnMode::All) seq.features = std::move(out);
    else z = std::move(out);
  }

  std::vector<DenseCache> dense_caches;
  std::vector<Tensor> masks;
  for (const auto& layer : head) {
    auto d = dense_forward(z, layer.dense);
    z = std::move(d.y);
    if (want_grads) dense_caches.push_back(std::move(d.cache));
    Tensor mask;
    if (layer.dropout_after) {
      auto dr = dropout(z, profile.dropout, mode, rng);
      z = std::move(dr.y);
      mask = std::move(dr.mask);
    }
    masks.push_back(std::move(mask));
  }

  BatchPass result;
  if (labels.empty()) {
    result.probs = softmax(z);
    return result;
  }
  auto sce = softmax_cross_entropy(z, labels);
  result.loss = sce.loss;
  result.probs = std::move(sce.probs);
  if (!want_grads) return result;

  // Gradient slots in trainable_parameters() order.
  std::vector<Tensor> block_grads, rec_grads, head_grads(2 * head.size());
  Tensor g = std::move(sce.grad_logits);
  for (std::size_t i = head.size(); i-- > 0;) {
    if (head[i].dropout_after) g = dropout_backward(masks[i], g);
    auto dg = dense_backward(head[i].dense, dense_caches[i], g);
    head_grads[2 * i] = std::move(dg.weights);
    head_grads[2 * i + 1] = std::move(dg.bias);
    g = std::move(dg.input);
  }

  std::vector<std::vector<Tensor>> per_layer(recurrent.size());
  for (std::size_t i = recurrent.size(); i-- > 0;) {
    const auto& layer = recurrent[i];
    if (layer.bidirectional) {
      auto bg = bidirectional_backward(layer.cells[0], layer.cells[1], rec_caches[i].bi, g);
      for (auto* t : cell_tensors(std::as_const(bg.forward))) per_layer[i].push_back(*t);
      for (auto* t : cell_tensors(std::as_const(bg.backward))) per_layer[i].push_back(*t);
      g = std::move(bg.features);
    } else {
      auto bg = bptt_backward(layer.cells[0], rec_caches[i].uni, g);
      for (auto* t : cell_tensors(std::as_const(bg.grads))) per_layer[i].push_back(*t);
      g = std::move(bg.features);
    }
  }
  for (auto& v : per_layer)
    for (auto& t : v) rec_grads.push_back(std::move(t));

  Tensor gfeat({total, feat});
  {
    std::size_t n = 0;
    for (std::size_t b = 0; b < sequences.size(); ++b)
      for (std::size_t t = 0; t < sequences[b].size(); ++t, ++n) {
        std::copy_n(g.data().begin() + (b * steps + t) * feat, feat, gfeat.data().begin() + n * feat);
      }
  }
  Tensor gh = global_maxpool3d_backward(gmp.cache, gfeat);
  std::vector<std::vector<Tensor>> per_block(blocks.size());
  for (std::size_t i = blocks.size(); i-- > 0;) {
    auto bn = batchnorm_backward(blocks[i].norm, block_caches[i].norm, gh);
    Tensor gp = maxpool3d_backward(block_caches[i].pool, bn.input);
    auto cg = conv3d_backward(blocks[i].conv, block_caches[i].conv, gp, i > 0);
    per_block[i] = {std::move(cg.kernel), std::move(cg.bias), std::move(bn.gamma), std::move(bn.beta)};
    gh = std::move(cg.input);
  }
  for (auto& v : per_block)
    for (auto& t : v) block_grads.push_back(std::move(t));

  result.grads = std::move(block_grads);
  for (auto& t : rec_grads) result.grads.push_back(std::move(t));
  for (auto& t : head_grads) result.grads.push_back(std::move(t));
  return result;
}

// ---------------------------------------------------------------- parameter tables

ParameterTable count_parameters(const Model& model) {
  const auto& pr = model.profile;
  ParameterTable table;
  auto add = [&](std::string type, std::string shape, std::size_t params) {
    table.rows.push_back({std::move(type), std::move(shape), params});
    table.total += params;
  };
  add("InputLayer", none_shape({pr.input[0], pr.input[1], pr.input[2], 1}, true), 0);
  auto dims = pr.input;
  for (const auto& block : model.blocks) {
    const std::size_t ch = block.conv.out_channels();
    for (std::size_t a = 0; a < 3; ++a) dims[a] = dims[a] - block.conv.kernel.dim(a) + 1;
    add("Conv3D", none_shape({dims[0], dims[1], dims[2], ch}, false), block.conv.parameter_count());
    dims[0] /= block.pool.p;
    dims[1] /= block.pool.q;
    dims[2] /= block.pool.r;
    add("MaxPooling3D", none_shape({dims[0], dims[1], dims[2], ch}, false), 0);
    add("BatchNormalization", none_shape({dims[0], dims[1], dims[2], ch}, false), block.norm.parameter_count());
  }
  add("GlobalMaxPooling3D", none_shape({model.feature_width()}, false), 0);
  for (const auto& layer : model.recurrent) {
    std::size_t params = 0;
    for (const auto& c : layer.cells) params += cell_parameter_count(c);
    add(cell_type_name(layer.cells.front()),
        none_shape({layer.output_width()}, true, layer.mode == ReturnMode::All), params);
  }
  for (const auto& h : model.head) {
    add("Dense", none_shape({h.dense.out()}, true), h.dense.parameter_count());
    if (h.dropout_after) add("Dropout", none_shape({h.dense.out()}, true), 0);
  }
  return table;
}

ParameterTable golden_table(ArchitectureId id) {
  ParameterTable t;
  auto add = [&](const char* type, const char* shape, std::size_t params) {
    t.rows.push_back({type, shape, params});
    t.total += params;
  };
  add("InputLayer", "[(None, 128, 128, 64, 1)]", 0);
  add("Conv3D", "(None, 126, 126, 62, 64)", 1792);
  add("MaxPooling3D", "(None, 63, 63, 31, 64)", 0);
  add("BatchNormalization", "(None, 63, 63, 31, 64)", 256);
  add("Conv3D", "(None, 61, 61, 29, 64)", 110656);
  add("MaxPooling3D", "(None, 30, 30, 14, 64)", 0);
  add("BatchNormalization", "(None, 30, 30, 14, 64)", 256);
  add("Conv3D", "(None, 28, 28, 12, 128)", 221312);
  add("MaxPooling3D", "(None, 14, 14, 6, 128)", 0);
  add("BatchNormalization", "(None, 14, 14, 6, 128)", 512);
  add("Conv3D", "(None, 12, 12, 4, 256)", 884992);
  add("MaxPooling3D", "(None, 6, 6, 2, 256)", 0);
  add("BatchNormalization", "(None, 6, 6, 2, 256)", 1024);
  add("GlobalMaxPooling3D", "(None, 256)", 0);

  switch (id) {
    case ArchitectureId::Gru:
      add("GRU", "[(None, 128)]", 148224);
      break;
    case ArchitectureId::SGru:
      add("GRU", "[(None, None, 128)]", 148224);
      add("GRU", "[(None, 128)]", 99072);
      break;
    case ArchitectureId::SbiGru:
      add("GRU", "[(None, None, 256)]", 296448);
      add("GRU", "[(None, 256)]", 296448);
      break;
    case ArchitectureId::Lstm:
      add("LSTM", "[(None, 128)]", 197120);
      break;
    case ArchitectureId::SLstm:
      add("LSTM", "[(None, None, 128)]", 197120);
      add("LSTM", "[(None, 128)]", 131584);
      break;
    case ArchitectureId::SbiLstm:
      add("LSTM", "[(None, None, 256)]", 394240);
      add("LSTM", "[(None, 256)]", 394240);
      break;
  }
  const bool wide = id == ArchitectureId::SbiGru || id == ArchitectureId::SbiLstm;
  add("Dense", "[(None, 1024)]", wide ? 263168 : 132096);
  add("Dropout", "[(None, 1024)]", 0);
  add("Dense", "[(None, 512)]", 524800);
  add("Dropout", "[(None, 512)]", 0);
  add("Dense", "[(None, 128)]", 65664);
  add("Dropout", "[(None, 128)]", 0);
  add("Dense", "[(None, 64)]", 8256);
  add("Dense", "[(None, 4)]", 260);
  return t;
}

std::vector<std::string> diff_tables(const ParameterTable& actual, const ParameterTable& expected) {
  std::vector<std::string> diffs;
  const std::size_t n = std::max(actual.rows.size(), expected.rows.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (i >= actual.rows.size()) {
      diffs.push_back("row " + std::to_string(i) + ": missing " + expected.rows[i].type);
      continue;
    }
    if (i >= expected.rows.size()) {
      diffs.push_back("row " + std::to_string(i) + ": unexpected " + actual.rows[i].type);
      continue;
    }
    const auto& a = actual.rows[i];
    const auto& e = expected.rows[i];
    if (!(a == e)) {
      diffs.push_back("row " + std::to_string(i) + ": got " + a.type + " " + a.output_shape + " " +
                      std::to_string(a.params) + ", expected " + e.type + " " + e.output_shape + " " +
                      std::to_string(e.params));
    }
  }
  if (actual.total != expected.total) {
    diffs.push_back("total: got " + std::to_string(actual.total) + ", expected " + std::to_string(expected.total));
  }
  return diffs;
}

std::string format_table(const ParameterTable& table) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-20s %-28s %10s\n", "Layer (type)", "Output Shape", "Param");
  os << line;
  for (const auto& r : table.rows) {
    std::snprintf(line, sizeof line, "%-20s %-28s %10zu\n", r.type.c_str(), r.output_shape.c_str(), r.params);
    os << line;
  }
  std::snprintf(line, sizeof line, "%-20s %-28s %10zu\n", "Total", "", table.total);
  os << line;
  return os.str();
}

}  // namespace volseq
