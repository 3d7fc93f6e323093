#pragma once

#include "camlab/cam.hpp"
#include "camlab/localization.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace camlab {

inline constexpr double kWindowCenter = 40.0;
inline constexpr double kWindowWidth = 80.0;

/// Clamps Hounsfield units to [center - width/2, center + width/2] and maps that range
/// linearly onto [0, 1].
template <typename Scalar>
Image<Scalar> window_hu(const Image<Scalar>& hu, double center = kWindowCenter,
                        double width = kWindowWidth) {
  const Scalar lo = Scalar(center - width / 2.0);
  return ((hu - lo) / Scalar(width)).cwiseMax(Scalar(0)).cwiseMin(Scalar(1));
}

enum class Split { Unassigned, Train, Test };

std::string_view to_string(Split split);

struct SliceRecord {
  std::string patient_id;
  std::string slice_id;
  std::filesystem::path image_path;               // relative to the manifest directory
  std::optional<std::filesystem::path> mask_path;  // absent for negative slices
  int label = 0;
};

struct Manifest {
  std::vector<SliceRecord> slices;
  std::map<std::string, Split> split;  // per patient
  std::filesystem::path root;          // directory relative paths resolve against

  Split split_of(const SliceRecord& s) const;
  std::filesystem::path resolve(const std::filesystem::path& p) const;
  std::vector<const SliceRecord*> select(Split which) const;
};

/// `CAMI` + u32 H + u32 W + u32 reserved, then H*W little-endian f32 Hounsfield units.
Image<double> read_raw_image(const std::filesystem::path& path);
void write_raw_image(const std::filesystem::path& path, const Image<double>& hu);

/// Binary PGM (P5); 0 = background, 255 = lesion.
BinaryMask read_pgm_mask(const std::filesystem::path& path);
void write_pgm_mask(const std::filesystem::path& path, const BinaryMask& mask);

/// CSV `patient_id,slice_id,image_path,mask_path,label,split` with a header row.
Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

struct LoadedSlice {
  Image<double> image;  // windowed to [0, 1]
  BinaryMask truth;     // all-false for negative slices
};

/// Loads and windows one slice; throws DataError when the label disagrees with the mask.
LoadedSlice load_slice(const Manifest& manifest, const SliceRecord& record);

/// Patient-level split stratified on whether a patient has any positive slice. The test set
/// holds ceil(fraction * patients) patients, allocated to strata proportionally.
Manifest patient_split(Manifest manifest, double test_fraction, std::uint64_t seed);

struct SynthOptions {
  std::size_t patients = 40;
  std::size_t slices_per_patient = 30;
  std::uint64_t seed = 0;
  std::size_t height = 64;
  std::size_t width = 64;
  double test_fraction = 0.2;
};

/// Writes a synthetic CT dataset under `dir` (images/, masks/, manifest.csv) and returns its
/// manifest. Half of the patients carry a contiguous run of lesion slices covering half of
/// their study, so about a quarter of all slices are positive.
Manifest synth_dataset(const std::filesystem::path& dir, const SynthOptions& options);

}  // namespace camlab
