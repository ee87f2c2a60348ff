#pragma once

#include <array>
#include <filesystem>

#include "volseq/tensor.hpp"

namespace volseq {

/// A scalar 3D image with its voxel-to-world mapping.
struct Volume {
  Tensor grid;                              // [D1 x D2 x D3]
  std::array<double, 3> spacing{1, 1, 1};   // mm per axis
  std::array<double, 16> affine{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};  // row-major 4x4

  std::array<std::size_t, 3> extents() const { return {grid.dim(0), grid.dim(1), grid.dim(2)}; }
  void validate() const;

  /// Diagonal affine with the given spacing, centred so voxel (n-1)/2 sits at the world origin.
  static std::array<double, 16> centred_affine(const std::array<std::size_t, 3>& extents,
                                               const std::array<double, 3>& spacing);
};

enum class NiftiType : short { U8 = 2, I16 = 4, F32 = 16, F64 = 64 };

NiftiType nifti_type_from_string(const std::string& name);

/// Single-file NIfTI-1 (.nii or .nii.gz; gzip is detected from the content).
Volume read_nifti(const std::filesystem::path& path);

/// Writes with sform_code 1. Paths ending in ".gz" are gzip-compressed.
/// Integer datatypes require integral values inside the type's range.
void write_nifti(const Volume& v, const std::filesystem::path& path, NiftiType type = NiftiType::F32);

}  // namespace volseq
