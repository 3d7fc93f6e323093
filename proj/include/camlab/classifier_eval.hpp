#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace camlab {

struct ScoredSlice {
  std::string slice_id;
  double score = 0.0;  // probability in [0, 1]
  int label = 0;
};

struct Confusion {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;

  friend bool operator==(const Confusion&, const Confusion&) = default;
};

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct PrPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  Confusion counts;
};

/// A slice is predicted positive iff score >= threshold.
Confusion confusion_at(std::span<const ScoredSlice> slices, double threshold);

/// Precision, recall and F1 with 0 substituted for every 0/0.
PrecisionRecall prf(const Confusion& counts);

/// One point per threshold, ordered by descending threshold. Throws ValidationError when
/// `thresholds` is empty.
std::vector<PrPoint> pr_curve(std::span<const ScoredSlice> slices, std::span<const double> thresholds);

/// Reads `slice_id,score,label` rows (header optional). Throws ParseError on malformed rows,
/// non-finite or out-of-range scores, or labels other than 0/1.
std::vector<ScoredSlice> read_score_file(const std::filesystem::path& path);

/// `threshold,precision,recall,f1` rows in ascending threshold order.
std::string format_pr_csv(std::span<const PrPoint> points);

}  // namespace camlab
