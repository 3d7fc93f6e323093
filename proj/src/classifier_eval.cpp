#include "camlab/classifier_eval.hpp"

#include "camlab/csv.hpp"
#include "camlab/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/core.h>

namespace camlab {

Confusion confusion_at(std::span<const ScoredSlice> slices, double threshold) {
  Confusion c;
  for (const auto& s : slices) {
    const bool predicted = s.score >= threshold;
    if (predicted && s.label == 1) ++c.tp;
    else if (predicted) ++c.fp;
    else if (s.label == 1) ++c.fn;
    else ++c.tn;
  }
  return c;
}

PrecisionRecall prf(const Confusion& c) {
  PrecisionRecall r;
  if (c.tp + c.fp > 0) r.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  if (c.tp + c.fn > 0) r.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (r.precision + r.recall > 0.0) {
    r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  }
  return r;
}

std::vector<PrPoint> pr_curve(std::span<const ScoredSlice> slices, std::span<const double> thresholds) {
  if (thresholds.empty()) throw ValidationError("pr_curve needs at least one threshold");
  std::vector<double> sorted(thresholds.begin(), thresholds.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  std::vector<PrPoint> points;
  points.reserve(sorted.size());
  for (double t : sorted) {
    PrPoint p;
    p.threshold = t;
    p.counts = confusion_at(slices, t);
    const auto m = prf(p.counts);
    p.precision = m.precision;
    p.recall = m.recall;
    p.f1 = m.f1;
    points.push_back(p);
  }
  return points;
}

std::vector<ScoredSlice> read_score_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot open score file '{}'", path.string()));
  std::vector<ScoredSlice> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (lineno == 1 && !fields.empty() && fields[0] == "slice_id") continue;
    if (fields.size() != 3) {
      throw ParseError(fmt::format("{}:{}: expected slice_id,score,label", path.string(), lineno));
    }
    ScoredSlice s;
    s.slice_id = fields[0];
    s.score = parse_double(fields[1], fmt::format("{}:{}", path.string(), lineno));
    if (!(s.score >= 0.0 && s.score <= 1.0)) {
      throw ParseError(fmt::format("{}:{}: score must lie in [0, 1]", path.string(), lineno));
    }
    if (fields[2] == "0") s.label = 0;
    else if (fields[2] == "1") s.label = 1;
    else throw ParseError(fmt::format("{}:{}: label must be 0 or 1", path.string(), lineno));
    out.push_back(std::move(s));
  }
  return out;
}

std::string format_pr_csv(std::span<const PrPoint> points) {
  std::vector<PrPoint> ordered(points.begin(), points.end());
  std::sort(ordered.begin(), ordered.end(),
            [](const PrPoint& a, const PrPoint& b) { return a.threshold < b.threshold; });
  std::string out = "threshold,precision,recall,f1\n";
  for (const auto& p : ordered) {
    out += fmt::format("{},{},{},{}\n", p.threshold, p.precision, p.recall, p.f1);
  }
  return out;
}

}  // namespace camlab
