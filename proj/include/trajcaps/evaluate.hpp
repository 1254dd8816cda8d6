#pragma once

// Accuracy, relative improvement, per-grid vehicle distributions and error
// ratios.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "trajcaps/errors.hpp"
#include "trajcaps/geogrid.hpp"
#include "trajcaps/ingest.hpp"

namespace trajcaps {

struct PredictionRecord {
  std::string vehicle_id;
  std::int64_t time = 0;
  GridIndex predicted;
  GridIndex actual;
};

struct AccuracyReport {
  double percent = 0.0;  // unrounded
  std::size_t samples = 0;
  std::size_t correct = 0;
};

inline AccuracyReport accuracy(const std::vector<PredictionRecord>& records) {
  if (records.empty()) throw DataError("accuracy of an empty record set is undefined");
  AccuracyReport r;
  r.samples = records.size();
  for (const auto& rec : records) r.correct += rec.predicted == rec.actual ? 1 : 0;
  r.percent = 100.0 * static_cast<double>(r.correct) / static_cast<double>(r.samples);
  return r;
}

/// Relative improvement (in percent) of `p_model` over `p_baseline`.
inline double ima(double p_model, double p_baseline) {
  if (!(p_baseline > 0.0)) throw ConfigError("baseline accuracy must be positive");
  return 100.0 * (p_model - p_baseline) / p_baseline;
}

struct DistributionForecast {
  std::int64_t time = 0;
  std::vector<std::uint64_t> counts;  // per grid
  std::uint64_t vehicles = 0;
};

inline DistributionForecast distribution_of(const std::vector<GridIndex>& cells, std::uint32_t grid_count,
                                            std::int64_t time) {
  DistributionForecast d;
  d.time = time;
  d.counts.assign(grid_count, 0);
  for (auto g : cells) {
    if (g.value >= grid_count) throw OutOfBoundsError("grid index exceeds G in distribution");
    ++d.counts[g.value];
  }
  d.vehicles = cells.size();
  return d;
}

/// Vehicles per grid from the predicted cells of records sharing one time.
inline DistributionForecast distribution(const std::vector<PredictionRecord>& records, std::uint32_t grid_count) {
  std::vector<GridIndex> cells;
  cells.reserve(records.size());
  const std::int64_t t = records.empty() ? 0 : records.front().time;
  for (const auto& r : records) {
    if (r.time != t) throw DataError("distribution records must share one time instant");
    cells.push_back(r.predicted);
  }
  return distribution_of(cells, grid_count, t);
}

struct ErrorRatioReport {
  std::vector<std::optional<double>> ratios;  // nullopt where the true count is 0

  std::size_t defined() const {
    std::size_t n = 0;
    for (const auto& r : ratios) n += r ? 1 : 0;
    return n;
  }
};

inline ErrorRatioReport error_ratio(const DistributionForecast& predicted, const DistributionForecast& actual) {
  if (predicted.counts.size() != actual.counts.size()) throw DataError("error_ratio: grid counts differ");
  if (predicted.time != actual.time) throw DataError("error_ratio: forecasts are for different times");
  ErrorRatioReport r;
  r.ratios.resize(actual.counts.size());
  for (std::size_t i = 0; i < actual.counts.size(); ++i) {
    if (actual.counts[i] == 0) continue;
    const double diff = std::abs(static_cast<double>(predicted.counts[i]) - static_cast<double>(actual.counts[i]));
    r.ratios[i] = diff / static_cast<double>(actual.counts[i]);
  }
  return r;
}

/// "Stay put": the most recent grid of the history.
inline GridIndex persistence_baseline(const TrajectoryFrame& frame) {
  if (frame.window.empty()) throw DataError("persistence baseline needs a non-empty history");
  return frame.window.back();
}

using FramePredictor = std::function<GridIndex(const TrajectoryFrame&)>;

inline std::vector<PredictionRecord> predict_all(const FrameSet& frames, const FramePredictor& predictor) {
  std::vector<PredictionRecord> out;
  out.reserve(frames.size());
  for (const auto& f : frames.frames) out.push_back({f.vehicle_id, f.frame_time, predictor(f), f.label});
  return out;
}

struct BucketForecast {
  std::size_t bucket = 0;
  std::int64_t start = 0;
  DistributionForecast predicted;
  DistributionForecast actual;
};

/// Groups frames into [origin + k*width, origin + (k+1)*width) buckets by
/// frame_time and aggregates predicted and true next-grid counts in each.
/// Every bucket between the first and last occupied one is emitted; empty
/// ones carry V = 0. The origin defaults to the earliest frame time.
inline std::vector<BucketForecast> rolling_evaluation(const FrameSet& frames, const FramePredictor& predictor,
                                                      std::int64_t bucket_seconds = 300,
                                                      std::optional<std::int64_t> origin = std::nullopt) {
  if (bucket_seconds <= 0) throw ConfigError("bucket width must be positive");
  std::vector<BucketForecast> out;
  if (frames.empty()) return out;
  const std::uint32_t g = frames.grid_spec.grid_count();
  std::int64_t t0 = frames.frames.front().frame_time;
  for (const auto& f : frames.frames) t0 = std::min(t0, f.frame_time);
  if (origin) {
    if (*origin > t0) throw ConfigError("bucket origin lies after the first frame");
    t0 = *origin;
  }
  std::map<std::int64_t, std::pair<std::vector<GridIndex>, std::vector<GridIndex>>> buckets;
  for (const auto& f : frames.frames) {
    auto& [pred, act] = buckets[(f.frame_time - t0) / bucket_seconds];
    pred.push_back(predictor(f));
    act.push_back(f.label);
  }
  const std::int64_t last = buckets.rbegin()->first;
  const std::int64_t first = buckets.begin()->first;
  for (std::int64_t k = first; k <= last; ++k) {
    const std::int64_t start = t0 + k * bucket_seconds;
    BucketForecast b;
    b.bucket = static_cast<std::size_t>(k);
    b.start = start;
    auto it = buckets.find(k);
    static const std::vector<GridIndex> none;
    b.predicted = distribution_of(it == buckets.end() ? none : it->second.first, g, start);
    b.actual = distribution_of(it == buckets.end() ? none : it->second.second, g, start);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace trajcaps
