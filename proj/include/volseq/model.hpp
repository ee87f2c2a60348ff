#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "volseq/layers.hpp"
#include "volseq/recurrent.hpp"

namespace volseq {

/// 3D CNN extractor + recurrent stack + dense head. The ids spell out the
/// recurrent part: plain, stacked ("s") or stacked bidirectional ("sbi").
enum class ArchitectureId { Gru, SGru, SbiGru, Lstm, SLstm, SbiLstm };

const std::vector<ArchitectureId>& all_architectures();
std::string to_string(ArchitectureId id);
ArchitectureId architecture_from_string(const std::string& name);

/// Layer widths and input geometry. "full" is the reference network;
/// "reduced" keeps the same topology at a size that trains on a laptop.
struct Profile {
  std::string name = "full";
  std::array<std::size_t, 3> input{128, 128, 64};
  std::vector<std::size_t> conv_channels{64, 64, 128, 256};
  std::size_t kernel = 3;
  std::size_t pool = 2;
  std::size_t hidden = 128;
  std::vector<std::size_t> dense{1024, 512, 128, 64};
  std::size_t dropout_layers = 3;  // dropout follows the first N hidden dense layers
  std::size_t classes = 4;
  double dropout = 0.5;

  static Profile full();
  static Profile reduced();
  static Profile by_name(const std::string& name);

  Shape volume_shape() const { return {input[0], input[1], input[2], 1}; }
  bool operator==(const Profile&) const = default;
};

struct ConvBlock {
  Conv3DParams conv;
  Pool3DConfig pool;
  BatchNormState norm;
};

struct RecurrentLayer {
  bool bidirectional = false;
  ReturnMode mode = ReturnMode::Last;
  std::vector<CellParams> cells;  // [forward] or [forward, backward]

  std::size_t output_width() const { return cell_hidden(cells.front()) * cells.size(); }
};

struct HeadLayer {
  DenseParams dense;
  bool dropout_after = false;
};

struct ParamRef {
  std::string name;
  Tensor* value;
  bool trainable;
};

struct ConstParamRef {
  std::string name;
  const Tensor* value;
  bool trainable;
};

struct LayerRow {
  std::string type;
  std::string output_shape;
  std::size_t params = 0;
  bool operator==(const LayerRow&) const = default;
};

struct ParameterTable {
  std::vector<LayerRow> rows;
  std::size_t total = 0;
};

/// Loss, probabilities and (optionally) gradients for one mini-batch.
struct BatchPass {
  double loss = 0.0;
  Tensor probs;                // [B x classes]
  std::vector<Tensor> grads;   // aligned with Model::trainable_parameters()
};

class Model {
 public:
  ArchitectureId arch = ArchitectureId::Lstm;
  Profile profile;
  std::vector<ConvBlock> blocks;
  std::vector<RecurrentLayer> recurrent;
  std::vector<HeadLayer> head;

  /// Deterministic in (id, profile, seed).
  static Model build(ArchitectureId id, const Profile& profile, std::uint64_t seed);

  std::vector<ParamRef> parameters();
  std::vector<ConstParamRef> parameters() const;
  std::vector<ParamRef> trainable_parameters();

  std::size_t feature_width() const { return profile.conv_channels.back(); }

  /// Extractor on one volume in infer mode. Returns [F].
  Tensor extract(const Tensor& volume) const;

  /// Class probabilities for one sequence of volumes.
  Tensor forward(const std::vector<Tensor>& volumes, Mode mode = Mode::Infer, Rng* rng = nullptr);
  Tensor predict(const std::vector<Tensor>& volumes) const;

  /// Full pass over a mini-batch. Train mode uses batch statistics (and updates
  /// the running ones) and samples dropout masks from `rng`.
  BatchPass pass(const std::vector<std::vector<Tensor>>& sequences, const std::vector<std::size_t>& labels, Mode mode,
                 Rng& rng, bool want_grads);

  /// Replaces every batchnorm running mean and variance with the exact
  /// population statistics over `volumes`, block by block, each block seeing
  /// inputs normalized by the already recalibrated blocks before it.
  void recalibrate_batchnorm(const std::vector<const Tensor*>& volumes);

  void check_volume(const Tensor& v) const;
};

ParameterTable count_parameters(const Model& model);

/// Reference per-layer tables for the full-size networks.
ParameterTable golden_table(ArchitectureId id);

/// Row-by-row differences between two tables; empty when they agree.
std::vector<std::string> diff_tables(const ParameterTable& actual, const ParameterTable& expected);

std::string format_table(const ParameterTable& table);

// ---------------------------------------------------------------- checkpoints

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  std::map<std::string, std::string> config;  // training-config echo
};

void save_checkpoint(const Model& model, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& config = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<char> serialize_checkpoint(const Model& model, const std::map<std::string, std::string>& config = {});
Checkpoint deserialize_checkpoint(const std::vector<char>& bytes);

}  // namespace volseq
