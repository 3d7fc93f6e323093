#pragma once

#include "camlab/cam.hpp"
#include "camlab/error.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace camlab {

using BinaryMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Bit set iff value > tau. Throws ValidationError when tau is outside [0, 1].
template <typename Scalar>
BinaryMask binarize(const Image<Scalar>& heatmap, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ValidationError("threshold must lie in [0, 1]");
  return heatmap > Scalar(tau);
}

/// Inclusive pixel box.
struct BBox {
  Eigen::Index row_min = 0;
  Eigen::Index col_min = 0;
  Eigen::Index row_max = 0;
  Eigen::Index col_max = 0;

  Eigen::Index area() const { return (row_max - row_min + 1) * (col_max - col_min + 1); }
  friend bool operator==(const BBox&, const BBox&) = default;
};

struct Pixel {
  Eigen::Index row = 0;
  Eigen::Index col = 0;
  friend auto operator<=>(const Pixel&, const Pixel&) = default;
};

struct Component {
  std::vector<Pixel> pixels;  // row-major order
  BBox box;
};

/// Maximal 8-connected components, ordered by (row_min, col_min) of their boxes.
std::vector<Component> connected_components(const BinaryMask& mask);

/// Union of the tight boxes of every component, rasterized.
BinaryMask box_mask(const BinaryMask& mask);

struct OverlapCounts {
  std::int64_t intersection = 0;
  std::int64_t predicted = 0;  // |M|
  std::int64_t truth = 0;      // |G|
  std::int64_t union_ = 0;

  OverlapCounts& operator+=(const OverlapCounts& o);
  friend bool operator==(const OverlapCounts&, const OverlapCounts&) = default;
};

struct Overlap {
  double dice = 0.0;
  double iou = 0.0;
  OverlapCounts counts;
};

/// Dice and IoU from raw counts; both are 0 when M and G are empty.
Overlap overlap_from_counts(const OverlapCounts& counts);

Overlap pixel_overlap(const BinaryMask& predicted, const BinaryMask& truth);
Overlap bbox_overlap(const BinaryMask& predicted, const BinaryMask& truth);
int loose_hit(const BinaryMask& predicted, const BinaryMask& truth);

struct EvalRecord {
  std::string slice_id;
  Overlap pixel;
  Overlap bbox;
  int loose_hit = 0;

  /// Slices with ground truth; only these contribute to summaries.
  bool positive() const { return pixel.counts.truth > 0; }
};

EvalRecord evaluate_slice(std::string slice_id, const BinaryMask& predicted, const BinaryMask& truth);

enum class Aggregation { Global, PerSlice };

std::string_view to_string(Aggregation mode);

struct Summary {
  double loose_hit_rate = 0.0;
  double pixel_dice = 0.0;
  double pixel_iou = 0.0;
  double bbox_dice = 0.0;
  double bbox_iou = 0.0;
  std::size_t positive_slices = 0;
};

/// Global: pool counts over positive slices then score once. Per-slice: mean of per-slice
/// scores over positive slices. Throws DataError on empty input or no positive slices.
Summary aggregate(std::span<const EvalRecord> records, Aggregation mode);

/// Candidate thresholds 0.05, 0.10, ..., 0.95.
std::array<double, 19> threshold_grid();

struct Calibration {
  double tau = 0.0;
  double dice = 0.0;
};

/// Streaming accumulator of pooled pixel counts at every grid threshold.
class ThresholdSweep {
 public:
  void add(const Heatmap& heatmap, const BinaryMask& truth);
  void merge(const ThresholdSweep& other);
  std::size_t positive_slices() const { return positives_; }
  const std::array<OverlapCounts, 19>& counts() const { return counts_; }

  /// Threshold maximizing global pixel Dice, ties toward the smaller threshold.
  Calibration best() const;

 private:
  std::array<OverlapCounts, 19> counts_{};
  std::size_t positives_ = 0;
};

/// Grid search over `threshold_grid()` on the positive slices of a calibration split.
Calibration calibrate_threshold(std::span<const Heatmap> heatmaps, std::span<const BinaryMask> truths);

}  // namespace camlab
