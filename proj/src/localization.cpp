#include "camlab/localization.hpp"

#include <algorithm>
#include <deque>
#include <tuple>

namespace camlab {
namespace {

void require_same_shape(const BinaryMask& a, const BinaryMask& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("mask shapes differ");
}

}  // namespace

std::vector<Component> connected_components(const BinaryMask& mask) {
  const Eigen::Index rows = mask.rows();
  const Eigen::Index cols = mask.cols();
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> visited =
      decltype(visited)::Constant(rows, cols, false);
  std::vector<Component> out;
  std::deque<Pixel> queue;
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      if (!mask(r, c) || visited(r, c)) continue;
      Component comp;
      comp.box = {r, c, r, c};
      visited(r, c) = true;
      queue.push_back({r, c});
      while (!queue.empty()) {
        Pixel p = queue.front();
        queue.pop_front();
        comp.pixels.push_back(p);
        comp.box.row_min = std::min(comp.box.row_min, p.row);
        comp.box.col_min = std::min(comp.box.col_min, p.col);
        comp.box.row_max = std::max(comp.box.row_max, p.row);
        comp.box.col_max = std::max(comp.box.col_max, p.col);
        for (Eigen::Index dr = -1; dr <= 1; ++dr) {
          for (Eigen::Index dc = -1; dc <= 1; ++dc) {
            const Eigen::Index nr = p.row + dr;
            const Eigen::Index nc = p.col + dc;
            if (nr < 0 || nc < 0 || nr >= rows || nc >= cols) continue;
            if (!mask(nr, nc) || visited(nr, nc)) continue;
            visited(nr, nc) = true;
            queue.push_back({nr, nc});
          }
        }
      }
      std::sort(comp.pixels.begin(), comp.pixels.end());
      out.push_back(std::move(comp));
    }
  }
  // Scan order already sorts by first pixel; boxes can start further left than the seed.
  std::stable_sort(out.begin(), out.end(), [](const Component& a, const Component& b) {
    return std::tie(a.box.row_min, a.box.col_min) < std::tie(b.box.row_min, b.box.col_min);
  });
  return out;
}

BinaryMask box_mask(const BinaryMask& mask) {
  BinaryMask out = BinaryMask::Constant(mask.rows(), mask.cols(), false);
  for (const auto& comp : connected_components(mask)) {
    const auto& b = comp.box;
    out.block(b.row_min, b.col_min, b.row_max - b.row_min + 1, b.col_max - b.col_min + 1) = true;
  }
  return out;
}

OverlapCounts& OverlapCounts::operator+=(const OverlapCounts& o) {
  intersection += o.intersection;
  predicted += o.predicted;
  truth += o.truth;
  union_ += o.union_;
  return *this;
}

Overlap overlap_from_counts(const OverlapCounts& counts) {
  Overlap o;
  o.counts = counts;
  if (counts.predicted + counts.truth > 0) {
    o.dice = 2.0 * static_cast<double>(counts.intersection) /
             static_cast<double>(counts.predicted + counts.truth);
  }
  if (counts.union_ > 0) {
    o.iou = static_cast<double>(counts.intersection) / static_cast<double>(counts.union_);
  }
  return o;
}

Overlap pixel_overlap(const BinaryMask& predicted, const BinaryMask& truth) {
  require_same_shape(predicted, truth);
  OverlapCounts c;
  c.intersection = (predicted && truth).count();
  c.predicted = predicted.count();
  c.truth = truth.count();
  c.union_ = c.predicted + c.truth - c.intersection;
  return overlap_from_counts(c);
}

Overlap bbox_overlap(const BinaryMask& predicted, const BinaryMask& truth) {
  require_same_shape(predicted, truth);
  return pixel_overlap(box_mask(predicted), box_mask(truth));
}

int loose_hit(const BinaryMask& predicted, const BinaryMask& truth) {
  require_same_shape(predicted, truth);
  return (predicted && truth).any() ? 1 : 0;
}

EvalRecord evaluate_slice(std::string slice_id, const BinaryMask& predicted, const BinaryMask& truth) {
  EvalRecord r;
  r.slice_id = std::move(slice_id);
  r.pixel = pixel_overlap(predicted, truth);
  r.bbox = bbox_overlap(predicted, truth);
  r.loose_hit = r.pixel.counts.intersection > 0 ? 1 : 0;
  return r;
}

std::string_view to_string(Aggregation mode) {
  return mode == Aggregation::Global ? "global" : "per-slice";
}

Summary aggregate(std::span<const EvalRecord> records, Aggregation mode) {
  if (records.empty()) throw DataError("cannot aggregate an empty record list");
  Summary s;
  OverlapCounts pixel;
  OverlapCounts bbox;
  double hits = 0.0;
  double sums[4] = {0.0, 0.0, 0.0, 0.0};
  for (const auto& r : records) {
    if (!r.positive()) continue;
    ++s.positive_slices;
    hits += r.loose_hit;
    pixel += r.pixel.counts;
    bbox += r.bbox.counts;
    sums[0] += r.pixel.dice;
    sums[1] += r.pixel.iou;
    sums[2] += r.bbox.dice;
    sums[3] += r.bbox.iou;
  }
  if (s.positive_slices == 0) throw DataError("no positive slices to aggregate");
  const double n = static_cast<double>(s.positive_slices);
  s.loose_hit_rate = hits / n;
  if (mode == Aggregation::Global) {
    const Overlap p = overlap_from_counts(pixel);
    const Overlap b = overlap_from_counts(bbox);
    s.pixel_dice = p.dice;
    s.pixel_iou = p.iou;
    s.bbox_dice = b.dice;
    s.bbox_iou = b.iou;
  } else {
    s.pixel_dice = sums[0] / n;
    s.pixel_iou = sums[1] / n;
    s.bbox_dice = sums[2] / n;
    s.bbox_iou = sums[3] / n;
  }
  return s;
}

std::array<double, 19> threshold_grid() {
  std::array<double, 19> grid{};
  for (std::size_t k = 0; k < grid.size(); ++k) grid[k] = static_cast<double>(k + 1) / 20.0;
  return grid;
}

void ThresholdSweep::add(const Heatmap& heatmap, const BinaryMask& truth) {
  if (heatmap.rows() != truth.rows() || heatmap.cols() != truth.cols()) {
    throw ShapeError("heatmap and ground truth differ in shape");
  }
  if (!truth.any()) return;
  ++positives_;
  const auto grid = threshold_grid();
  for (std::size_t k = 0; k < grid.size(); ++k) {
    counts_[k] += pixel_overlap(binarize(heatmap, grid[k]), truth).counts;
  }
}

void ThresholdSweep::merge(const ThresholdSweep& other) {
  for (std::size_t k = 0; k < counts_.size(); ++k) counts_[k] += other.counts_[k];
  positives_ += other.positives_;
}

Calibration ThresholdSweep::best() const {
  if (positives_ == 0) throw DataError("threshold calibration needs at least one positive slice");
  const auto grid = threshold_grid();
  Calibration best{grid[0], overlap_from_counts(counts_[0]).dice};
  for (std::size_t k = 1; k < grid.size(); ++k) {
    const double dice = overlap_from_counts(counts_[k]).dice;
    if (dice > best.dice) best = {grid[k], dice};
  }
  return best;
}

Calibration calibrate_threshold(std::span<const Heatmap> heatmaps, std::span<const BinaryMask> truths) {
  if (heatmaps.size() != truths.size()) throw ShapeError("heatmap and mask counts differ");
  ThresholdSweep sweep;
  for (std::size_t i = 0; i < heatmaps.size(); ++i) sweep.add(heatmaps[i], truths[i]);
  return sweep.best();
}

}  // namespace camlab
