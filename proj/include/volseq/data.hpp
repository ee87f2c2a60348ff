#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "volseq/nifti.hpp"
#include "volseq/tensor.hpp"

namespace volseq {

using Extents = std::array<std::size_t, 3>;

Extents parse_extents(const std::string& text);  // "32x32x16"
std::string extents_string(const Extents& e);

// ---------------------------------------------------------------- resampling

/// Trilinear resize of a [D1 x D2 x D3] grid. Output voxel o samples input
/// coordinate o * (n_in - 1) / (n_out - 1) on each axis (corners aligned);
/// a single-voxel output axis samples the input centre.
Tensor trilinear_resize(const Tensor& grid, const Extents& target);

/// Trilinear sample at continuous voxel coordinates; 0 outside the grid.
double trilinear_sample(const Tensor& grid, double x, double y, double z);

/// Mask, resize, then min-max normalize to [0, 1]. Returns [D1 x D2 x D3 x 1].
Tensor preprocess_volume(const Volume& v, const Extents& target, const Volume* mask = nullptr);

struct AffineTransform {
  std::array<double, 9> linear{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major 3x3
  std::array<double, 3> translation{0, 0, 0};               // mm
  std::string id = "identity";

  std::array<double, 3> apply(const std::array<double, 3>& p) const;
  AffineTransform inverse() const;  // TransformError when singular
  double determinant() const;
};

/// Output voxel x takes the value of `v` at t^-1(world(x)). Out-of-bounds samples are 0.
Volume affine_resample(const Volume& v, const AffineTransform& t, const Extents& target_extents,
                       const std::array<double, 16>& target_affine, const std::array<double, 3>& target_spacing);
/// Same grid as the input.
Volume affine_resample(const Volume& v, const AffineTransform& t);

/// The six registration templates shipped with the library: mild rotations
/// and scalings about the world origin.
const std::vector<AffineTransform>& builtin_templates();
std::vector<AffineTransform> read_templates(const std::filesystem::path& path);
void write_templates(const std::vector<AffineTransform>& templates, const std::filesystem::path& path);

// ---------------------------------------------------------------- manifests

/// One scan. `provenance` is "original", "template:K", "flip:A" or
/// "template:K+flip:A"; `source_patient` names the original patient a
/// generated row descends from (itself for originals).
struct ManifestRow {
  std::string patient_id;
  std::string visit_code;
  std::string path;
  int label = 1;  // 1..4
  std::string provenance = "original";
  std::string source_patient;
  std::string acquisition_date;  // optional, YYYY-MM-DD

  bool operator==(const ManifestRow&) const = default;
};

struct DatasetManifest {
  std::vector<ManifestRow> rows;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const DatasetManifest&) const = default;
};

/// Tab- or comma-separated text with a header row. Lines starting with '#'
/// are comments, except "# seed=N" which carries the dataset seed.
DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);

struct Provenance {
  std::optional<std::size_t> template_index;
  std::optional<std::size_t> flip_axis;

  static Provenance parse(const std::string& text);
  std::string str() const;
  bool original() const { return !template_index && !flip_axis; }
};

/// BL < V01 < ... < V15 < anything else (lexicographic).
int visit_rank(const std::string& code);

struct Visit {
  std::string visit_code;
  std::string acquisition_date;
  std::string path;
  int label = 1;
};

struct ScanSequence {
  std::string patient_id;
  std::string lineage;  // source patient
  std::vector<Visit> visits;
  int label = 1;  // label of the latest visit

  std::vector<int> visit_labels() const;
};

/// Groups rows by patient and orders visits by date (when every visit has
/// one) or by visit code. Sequences come back sorted by patient id.
std::vector<ScanSequence> group_sequences(const DatasetManifest& m, std::size_t min_visits = 2);

/// Per-class sequence counts, index 0 = class 1.
std::array<std::size_t, 4> class_counts(const std::vector<ScanSequence>& sequences);

// ---------------------------------------------------------------- augmentation

/// Adds generated sequences until every class holds `target` sequences.
/// Per class the original patients are shuffled once (seeded), then
/// candidates are taken in this order:
///   1. template passes: pass j gives the i-th patient template (i + j) mod T;
///   2. flip passes: axis 0, 1, 2 on each original patient;
///   3. template+flip passes: pass j, axis a, template (i + j) mod T.
/// Every visit of a patient gets the same transform. Generated rows point at
/// "augmented/<patient>_<visit>.nii.gz" and are produced by materialize_augmented.
DatasetManifest balance_dataset(const DatasetManifest& m, std::size_t n_templates, std::size_t target,
                                std::uint64_t seed);

/// Rewrites relative paths of rows that live under `from_dir` so they resolve from `to_dir`.
DatasetManifest rebase_paths(const DatasetManifest& m, const std::filesystem::path& from_dir,
                             const std::filesystem::path& to_dir);

/// Writes every generated volume listed in `out`. Sources are resolved
/// against `source_dir`, outputs against `out_dir`.
void materialize_augmented(const DatasetManifest& out, const std::vector<AffineTransform>& templates,
                           const std::filesystem::path& source_dir, const std::filesystem::path& out_dir,
                           std::size_t jobs = 1);

/// Applies one provenance to a volume: template resample (same grid), then flip.
Volume augment_volume(const Volume& v, const Provenance& p, const std::vector<AffineTransform>& templates);

// ---------------------------------------------------------------- synthetic cohort

struct SynthConfig {
  std::array<std::size_t, 4> per_class{10, 10, 10, 10};
  std::size_t visits = 2;
  Extents shape{32, 32, 16};
  std::uint64_t seed = 0;
  NiftiType datatype = NiftiType::F32;
  bool compress = true;
};

/// Patient volume: Gaussian background noise plus a bright ellipsoid whose
/// radius and intensity fall with class and shrink over visits at a
/// class-dependent rate.
Volume synthetic_volume(int label, std::size_t visit, const Extents& shape, std::uint64_t patient_seed);

/// The ellipsoid region used by synthetic_volume for a given class and visit
/// (before per-patient jitter), as a mask on the grid.
std::vector<bool> synthetic_structure_mask(int label, std::size_t visit, const Extents& shape);

/// Writes volumes plus "manifest.tsv" into `out_dir` and returns the manifest.
DatasetManifest generate_synthetic_cohort(const SynthConfig& cfg, const std::filesystem::path& out_dir,
                                          std::size_t jobs = 1);

// ---------------------------------------------------------------- loading

struct LoadedSequence {
  std::string patient_id;
  std::string lineage;
  std::vector<Tensor> volumes;  // each [D1 x D2 x D3 x 1]
  std::size_t label = 0;        // 0-based class index
};

std::vector<LoadedSequence> load_sequences(const std::vector<ScanSequence>& sequences,
                                           const std::filesystem::path& base_dir, const Extents& target,
                                           std::size_t jobs = 1);

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Work is split into
/// contiguous ranges so results do not depend on the thread count.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

}  // namespace volseq
