#pragma once

// Dataset adapters, grid conversion, sliding-window framing and train /
// validation / test splitting.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "trajcaps/csv.hpp"
#include "trajcaps/errors.hpp"
#include "trajcaps/geogrid.hpp"
#include "trajcaps/random.hpp"

namespace trajcaps {

inline constexpr std::int64_t kPortoSamplingSeconds = 15;

struct TimedPoint {
  std::int64_t timestamp = 0;
  GeoPoint point;

  friend bool operator==(const TimedPoint&, const TimedPoint&) = default;
};

struct RawTrajectory {
  std::string vehicle_id;
  std::string trip_id;
  std::vector<TimedPoint> points;

  friend bool operator==(const RawTrajectory&, const RawTrajectory&) = default;
};

struct GridStep {
  std::int64_t timestamp = 0;
  GridIndex cell;

  friend bool operator==(const GridStep&, const GridStep&) = default;
};

struct GridTrajectory {
  std::string vehicle_id;
  std::string trip_id;
  std::vector<GridStep> cells;
};

/// One supervised sample: the L most recent grids (oldest first) and the
/// grid visited next. The G x L binary history is stored as its column
/// indices; history_matrix() expands it.
struct TrajectoryFrame {
  std::vector<GridIndex> window;
  GridIndex label;
  std::int64_t frame_time = 0;
  std::string vehicle_id;
  std::string trip_id;

  std::size_t length() const noexcept { return window.size(); }

  /// Row-major G x L matrix; entry (g, t) is 1 iff window[t] == g.
  std::vector<std::uint8_t> history_matrix(std::uint32_t grid_count) const {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(grid_count) * window.size(), 0);
    for (std::size_t t = 0; t < window.size(); ++t) {
      m[static_cast<std::size_t>(window[t].value) * window.size() + t] = 1;
    }
    return m;
  }

  friend bool operator==(const TrajectoryFrame&, const TrajectoryFrame&) = default;
};

struct FrameSet {
  std::vector<TrajectoryFrame> frames;
  GridSpec grid_spec;
  std::uint32_t window_length = 0;

  std::size_t size() const noexcept { return frames.size(); }
  bool empty() const noexcept { return frames.empty(); }
};

enum class OutOfBoundsPolicy { drop_point, drop_trip };

struct SplitPolicy {
  enum class Kind { by_time, by_fraction };
  Kind kind = Kind::by_fraction;
  double fraction = 0.7;
  std::int64_t train_end = 0;   // by_time: train pool is frame_time < train_end
  std::int64_t test_start = 0;  // by_time: test is frame_time >= test_start
  double val_fraction = 0.3;

  static SplitPolicy by_fraction(double f, double val) {
    SplitPolicy p;
    p.kind = Kind::by_fraction;
    p.fraction = f;
    p.val_fraction = val;
    return p;
  }
  static SplitPolicy by_time(std::int64_t train_end, std::int64_t test_start, double val) {
    SplitPolicy p;
    p.kind = Kind::by_time;
    p.train_end = train_end;
    p.test_start = test_start;
    p.val_fraction = val;
    return p;
  }
};

struct DatasetSplit {
  FrameSet train;
  FrameSet validation;
  FrameSet test;
  SplitPolicy policy;
};

/// Counters reported by the adapters and the grid conversion.
struct IngestStats {
  std::size_t records = 0;
  std::size_t skipped_records = 0;
  std::size_t skipped_points = 0;
  std::size_t filtered_records = 0;
  std::size_t dropped_out_of_bounds_points = 0;
  std::size_t dropped_trips = 0;
  std::vector<std::string> warnings;

  void warn(std::string msg) {
    constexpr std::size_t kMaxKept = 50;
    if (warnings.size() < kMaxKept) warnings.push_back(std::move(msg));
  }
};

namespace detail {

inline std::map<std::string, std::size_t> header_index(const std::vector<std::string>& header) {
  std::map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < header.size(); ++i) {
    idx.emplace(csv::lower(csv::trim(header[i])), i);
  }
  return idx;
}

inline std::optional<std::size_t> find_column(const std::map<std::string, std::size_t>& idx,
                                              std::initializer_list<std::string_view> names) {
  for (auto name : names) {
    if (auto it = idx.find(std::string(name)); it != idx.end()) return it->second;
  }
  return std::nullopt;
}

inline std::size_t require_column(const std::map<std::string, std::size_t>& idx,
                                  std::initializer_list<std::string_view> names,
                                  std::string_view adapter) {
  if (auto c = find_column(idx, names)) return *c;
  throw DataError(std::string(adapter) + " input is missing required field '" +
                  std::string(*names.begin()) + "'");
}

// Parses "[[lon,lat],[lon,lat],...]". Returns nullopt if the bracket
// structure itself is broken; individual unparsable pairs come back as
// nullopt entries so the caller can keep their time slot.
inline std::optional<std::vector<std::optional<GeoPoint>>> parse_polyline(std::string_view s) {
  s = csv::trim(s);
  if (s.size() < 2 || s.front() != '[' || s.back() != ']') return std::nullopt;
  s = csv::trim(s.substr(1, s.size() - 2));
  std::vector<std::optional<GeoPoint>> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    while (pos < s.size() && (s[pos] == ',' || std::isspace(static_cast<unsigned char>(s[pos])))) {
      ++pos;
    }
    if (pos >= s.size()) break;
    if (s[pos] != '[') return std::nullopt;
    const std::size_t close = s.find(']', pos);
    if (close == std::string_view::npos) return std::nullopt;
    const std::string_view body = s.substr(pos + 1, close - pos - 1);
    if (body.find('[') != std::string_view::npos) return std::nullopt;
    pos = close + 1;
    const std::size_t comma = body.find(',');
    if (comma == std::string_view::npos || body.find(',', comma + 1) != std::string_view::npos) {
      out.emplace_back(std::nullopt);
      continue;
    }
    auto lon = csv::parse_double(body.substr(0, comma));
    auto lat = csv::parse_double(body.substr(comma + 1));
    if (!lon || !lat || !valid_geo(GeoPoint{*lon, *lat})) {
      out.emplace_back(std::nullopt);
    } else {
      out.emplace_back(GeoPoint{*lon, *lat});
    }
  }
  return out;
}

inline void sort_points(RawTrajectory& t) {
  std::stable_sort(t.points.begin(), t.points.end(),
                   [](const TimedPoint& a, const TimedPoint& b) { return a.timestamp < b.timestamp; });
}

}  // namespace detail

/// Porto taxi format: TRIP_ID, TIMESTAMP (epoch s), POLYLINE of [lon,lat]
/// pairs sampled every 15 s. TAXI_ID, when present, becomes the vehicle id.
inline std::vector<RawTrajectory> parse_porto(std::istream& in, IngestStats& stats) {
  std::vector<std::string> row;
  if (!csv::read_record(in, row)) throw DataError("porto input is empty (no header)");
  const auto idx = detail::header_index(row);
  const std::size_t c_trip = detail::require_column(idx, {"trip_id"}, "porto");
  const std::size_t c_time = detail::require_column(idx, {"timestamp"}, "porto");
  const std::size_t c_poly = detail::require_column(idx, {"polyline"}, "porto");
  const auto c_taxi = detail::find_column(idx, {"taxi_id"});

  std::vector<RawTrajectory> out;
  std::size_t line = 1;
  while (csv::read_record(in, row)) {
    ++line;
    if (row.size() == 1 && csv::trim(row[0]).empty()) continue;
    ++stats.records;
    const std::size_t need = std::max({c_trip, c_time, c_poly, c_taxi.value_or(0)});
    if (row.size() <= need) {
      ++stats.skipped_records;
      stats.warn("porto line " + std::to_string(line) + ": too few fields");
      continue;
    }
    auto start = csv::parse_int(row[c_time]);
    if (!start) {
      ++stats.skipped_records;
      stats.warn("porto line " + std::to_string(line) + ": bad TIMESTAMP");
      continue;
    }
    auto poly = detail::parse_polyline(row[c_poly]);
    if (!poly) {
      ++stats.skipped_records;
      stats.warn("porto line " + std::to_string(line) + ": malformed POLYLINE");
      continue;
    }
    RawTrajectory t;
    t.trip_id = std::string(csv::trim(row[c_trip]));
    t.vehicle_id = c_taxi ? std::string(csv::trim(row[*c_taxi])) : t.trip_id;
    for (std::size_t k = 0; k < poly->size(); ++k) {
      if (!(*poly)[k]) {
        ++stats.skipped_points;
        stats.warn("porto line " + std::to_string(line) + ": unparsable coordinate pair #" +
                   std::to_string(k));
        continue;
      }
      t.points.push_back({*start + kPortoSamplingSeconds * static_cast<std::int64_t>(k), *(*poly)[k]});
    }
    if (!t.points.empty()) out.push_back(std::move(t));
  }
  return out;
}

struct GrabFilter {
  std::optional<std::string> device;  // e.g. "android"; case-insensitive
  std::optional<std::string> mode;    // e.g. "car"; case-insensitive
  std::optional<double> max_accuracy_level;  // keep pings with radius <= this
};

/// Grab GPS pings with the ID/Mode/Device/Latitude/Longitude/Timestamp/
/// Accuracy Level/Bearing/Speed attributes. Headers match case-insensitively;
/// the column names of the public release (trj_id, driving_mode, osname,
/// rawlat, rawlng, pingtimestamp, accuracy) are accepted as aliases.
inline std::vector<RawTrajectory> parse_grab(std::istream& in, IngestStats& stats,
                                             const GrabFilter& filter = {}) {
  std::vector<std::string> row;
  if (!csv::read_record(in, row)) throw DataError("grab input is empty (no header)");
  const auto idx = detail::header_index(row);
  const std::size_t c_id = detail::require_column(idx, {"id", "trj_id"}, "grab");
  const std::size_t c_lat = detail::require_column(idx, {"latitude", "rawlat"}, "grab");
  const std::size_t c_lon = detail::require_column(idx, {"longitude", "rawlng"}, "grab");
  const std::size_t c_time = detail::require_column(idx, {"timestamp", "pingtimestamp"}, "grab");
  std::optional<std::size_t> c_dev, c_mode, c_acc;
  if (filter.device) c_dev = detail::require_column(idx, {"device", "osname"}, "grab");
  if (filter.mode) c_mode = detail::require_column(idx, {"mode", "driving_mode"}, "grab");
  if (filter.max_accuracy_level) {
    c_acc = detail::require_column(idx, {"accuracy level", "accuracy_level", "accuracy"}, "grab");
  }
  const std::optional<std::string> want_dev =
      filter.device ? std::optional(csv::lower(*filter.device)) : std::nullopt;
  const std::optional<std::string> want_mode =
      filter.mode ? std::optional(csv::lower(*filter.mode)) : std::nullopt;

  std::vector<RawTrajectory> out;
  std::unordered_map<std::string, std::size_t> by_id;
  std::size_t line = 1;
  while (csv::read_record(in, row)) {
    ++line;
    if (row.size() == 1 && csv::trim(row[0]).empty()) continue;
    ++stats.records;
    auto field = [&](std::optional<std::size_t> c) -> std::optional<std::string_view> {
      if (!c || *c >= row.size()) return std::nullopt;
      auto v = csv::trim(row[*c]);
      if (v.empty()) return std::nullopt;
      return v;
    };
    auto id = field(c_id);
    const auto lat = csv::parse_double(field(c_lat).value_or(""));
    const auto lon = csv::parse_double(field(c_lon).value_or(""));
    const auto ts = csv::parse_int(field(c_time).value_or(""));
    if (!id || !lat || !lon || !ts || !valid_geo(GeoPoint{lon.value(), lat.value()})) {
      ++stats.skipped_records;
      stats.warn("grab line " + std::to_string(line) + ": missing or invalid mandatory field");
      continue;
    }
    if (want_dev) {
      auto d = field(c_dev);
      if (!d || csv::lower(*d) != *want_dev) {
        ++stats.filtered_records;
        continue;
      }
    }
    if (want_mode) {
      auto m = field(c_mode);
      if (!m || csv::lower(*m) != *want_mode) {
        ++stats.filtered_records;
        continue;
      }
    }
    if (filter.max_accuracy_level) {
      const auto a = csv::parse_double(field(c_acc).value_or(""));
      if (!a || *a > *filter.max_accuracy_level) {
        ++stats.filtered_records;
        continue;
      }
    }
    std::string key(*id);
    auto [it, inserted] = by_id.emplace(key, out.size());
    if (inserted) out.push_back(RawTrajectory{key, key, {}});
    out[it->second].points.push_back({*ts, GeoPoint{*lon, *lat}});
  }
  for (auto& t : out) detail::sort_points(t);
  std::sort(out.begin(), out.end(),
            [](const RawTrajectory& a, const RawTrajectory& b) { return a.trip_id < b.trip_id; });
  return out;
}

inline constexpr std::string_view kCanonicalHeader = "vehicle_id,trip_id,timestamp,longitude,latitude";

/// Canonical one-point-per-row CSV. Trajectories come back in order of
/// first appearance; points within a trip are stably sorted by time.
inline std::vector<RawTrajectory> parse_canonical(std::istream& in, IngestStats& stats) {
  std::vector<std::string> row;
  if (!csv::read_record(in, row)) throw DataError("canonical input is empty (no header)");
  const auto idx = detail::header_index(row);
  const std::size_t c_veh = detail::require_column(idx, {"vehicle_id"}, "canonical");
  const std::size_t c_trip = detail::require_column(idx, {"trip_id"}, "canonical");
  const std::size_t c_time = detail::require_column(idx, {"timestamp"}, "canonical");
  const std::size_t c_lon = detail::require_column(idx, {"longitude"}, "canonical");
  const std::size_t c_lat = detail::require_column(idx, {"latitude"}, "canonical");
  const std::size_t need = std::max({c_veh, c_trip, c_time, c_lon, c_lat});

  std::vector<RawTrajectory> out;
  std::map<std::pair<std::string, std::string>, std::size_t> by_key;
  std::size_t line = 1;
  while (csv::read_record(in, row)) {
    ++line;
    if (row.size() == 1 && csv::trim(row[0]).empty()) continue;
    ++stats.records;
    std::optional<std::int64_t> ts;
    std::optional<double> lon, lat;
    if (row.size() > need) {
      ts = csv::parse_int(row[c_time]);
      lon = csv::parse_double(row[c_lon]);
      lat = csv::parse_double(row[c_lat]);
    }
    if (!ts || !lon || !lat || !valid_geo(GeoPoint{*lon, *lat})) {
      ++stats.skipped_records;
      stats.warn("canonical line " + std::to_string(line) + ": malformed row");
      continue;
    }
    auto key = std::make_pair(row[c_veh], row[c_trip]);
    auto [it, inserted] = by_key.emplace(key, out.size());
    if (inserted) out.push_back(RawTrajectory{key.first, key.second, {}});
    out[it->second].points.push_back({*ts, GeoPoint{*lon, *lat}});
  }
  for (auto& t : out) detail::sort_points(t);
  return out;
}

inline void write_canonical(std::ostream& os, const std::vector<RawTrajectory>& trajectories) {
  os << kCanonicalHeader << '\n';
  for (const auto& t : trajectories) {
    const std::string veh = csv::quote_if_needed(t.vehicle_id);
    const std::string trip = csv::quote_if_needed(t.trip_id);
    for (const auto& p : t.points) {
      os << veh << ',' << trip << ',' << p.timestamp << ',' << csv::format_double(p.point.longitude)
         << ',' << csv::format_double(p.point.latitude) << '\n';
    }
  }
}

/// Fixed-period resampling: emits one point every `period` seconds from the
/// first timestamp through the last, each copied from the nearest preceding
/// original ping.
inline RawTrajectory resample(const RawTrajectory& raw, std::int64_t period) {
  if (period <= 0) throw ConfigError("resample period must be positive");
  RawTrajectory out{raw.vehicle_id, raw.trip_id, {}};
  if (raw.points.empty()) return out;
  const std::int64_t t0 = raw.points.front().timestamp;
  const std::int64_t t_end = raw.points.back().timestamp;
  std::size_t j = 0;
  for (std::int64_t t = t0; t <= t_end; t += period) {
    while (j + 1 < raw.points.size() && raw.points[j + 1].timestamp <= t) ++j;
    out.points.push_back({t, raw.points[j].point});
  }
  return out;
}

inline std::optional<GridTrajectory> to_grid_trajectory(const RawTrajectory& raw, const GridSpec& spec,
                                                        OutOfBoundsPolicy policy,
                                                        IngestStats* stats = nullptr) {
  GridTrajectory g{raw.vehicle_id, raw.trip_id, {}};
  g.cells.reserve(raw.points.size());
  std::size_t dropped = 0;
  for (const auto& p : raw.points) {
    if (!spec.bbox.contains(p.point)) {
      if (policy == OutOfBoundsPolicy::drop_trip) {
        if (stats) ++stats->dropped_trips;
        return std::nullopt;
      }
      ++dropped;
      continue;
    }
    g.cells.push_back({p.timestamp, locate(spec, p.point)});
  }
  if (stats) stats->dropped_out_of_bounds_points += dropped;
  if (g.cells.empty()) {
    if (stats) ++stats->dropped_trips;
    return std::nullopt;
  }
  return g;
}

/// Stride-1 sliding windows: the frame for position k has history
/// cells[k-L .. k-1] and label cells[k]. Yields max(0, N_v - L) frames.
inline std::vector<TrajectoryFrame> segment(const GridTrajectory& traj, std::uint32_t window_length) {
  if (window_length < 1) throw ConfigError("window length L must be >= 1");
  std::vector<TrajectoryFrame> frames;
  const std::size_t n = traj.cells.size();
  if (n <= window_length) return frames;
  frames.reserve(n - window_length);
  for (std::size_t k = window_length; k < n; ++k) {
    TrajectoryFrame f;
    f.window.reserve(window_length);
    for (std::size_t t = k - window_length; t < k; ++t) f.window.push_back(traj.cells[t].cell);
    f.label = traj.cells[k].cell;
    f.frame_time = traj.cells[k].timestamp;
    f.vehicle_id = traj.vehicle_id;
    f.trip_id = traj.trip_id;
    frames.push_back(std::move(f));
  }
  return frames;
}

inline bool frame_order(const TrajectoryFrame& a, const TrajectoryFrame& b) {
  return std::tie(a.vehicle_id, a.trip_id, a.frame_time) <
         std::tie(b.vehicle_id, b.trip_id, b.frame_time);
}

/// Frames from every trajectory, windowed per trip (never across trips),
/// sorted by (vehicle_id, trip_id, frame_time).
inline FrameSet build_frame_set(const std::vector<GridTrajectory>& trajectories, const GridSpec& spec,
                                std::uint32_t window_length) {
  FrameSet fs;
  fs.grid_spec = spec;
  fs.window_length = window_length;
  for (const auto& t : trajectories) {
    auto frames = segment(t, window_length);
    fs.frames.insert(fs.frames.end(), std::make_move_iterator(frames.begin()),
                     std::make_move_iterator(frames.end()));
  }
  std::stable_sort(fs.frames.begin(), fs.frames.end(), frame_order);
  return fs;
}

namespace detail {

inline std::size_t floor_count(double fraction, std::size_t n) {
  // Small slack so that e.g. 0.7 * 10 lands on 7 rather than 6.
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

inline FrameSet subset(const FrameSet& src, std::vector<TrajectoryFrame> frames) {
  FrameSet fs;
  fs.grid_spec = src.grid_spec;
  fs.window_length = src.window_length;
  fs.frames = std::move(frames);
  return fs;
}

}  // namespace detail

/// Chronological split. by_fraction: the first floor(f*I) frames by time form
/// the train pool, the rest the test set. by_time: frame_time < train_end is
/// the train pool, frame_time >= test_start the test set. In both cases the
/// chronologically last floor(val_fraction * pool) frames become validation.
inline DatasetSplit split(const FrameSet& frames, const SplitPolicy& policy) {
  if (!(policy.val_fraction > 0.0 && policy.val_fraction < 1.0)) {
    throw ConfigError("val_fraction must lie in (0, 1)");
  }
  std::vector<TrajectoryFrame> ordered = frames.frames;
  std::stable_sort(ordered.begin(), ordered.end(), [](const TrajectoryFrame& a, const TrajectoryFrame& b) {
    return std::tie(a.frame_time, a.vehicle_id, a.trip_id) <
           std::tie(b.frame_time, b.vehicle_id, b.trip_id);
  });

  std::vector<TrajectoryFrame> pool, test;
  if (policy.kind == SplitPolicy::Kind::by_fraction) {
    if (!(policy.fraction > 0.0 && policy.fraction < 1.0)) {
      throw ConfigError("split fraction must lie in (0, 1)");
    }
    const std::size_t n_pool = detail::floor_count(policy.fraction, ordered.size());
    pool.assign(ordered.begin(), ordered.begin() + static_cast<std::ptrdiff_t>(n_pool));
    test.assign(ordered.begin() + static_cast<std::ptrdiff_t>(n_pool), ordered.end());
  } else {
    if (policy.train_end > policy.test_start) {
      throw ConfigError("by_time split requires train_end <= test_start");
    }
    for (auto& f : ordered) {
      if (f.frame_time < policy.train_end) {
        pool.push_back(std::move(f));
      } else if (f.frame_time >= policy.test_start) {
        test.push_back(std::move(f));
      }
    }
  }

  const std::size_t n_val = detail::floor_count(policy.val_fraction, pool.size());
  const std::size_t n_train = pool.size() - n_val;
  std::vector<TrajectoryFrame> train(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<TrajectoryFrame> val(pool.begin() + static_cast<std::ptrdiff_t>(n_train), pool.end());

  if (train.empty()) throw DataError("split produced an empty train partition");
  if (val.empty()) throw DataError("split produced an empty validation partition");
  if (test.empty()) throw DataError("split produced an empty test partition");

  DatasetSplit out;
  out.policy = policy;
  out.train = detail::subset(frames, std::move(train));
  out.validation = detail::subset(frames, std::move(val));
  out.test = detail::subset(frames, std::move(test));
  return out;
}

struct SynthParams {
  std::uint32_t n_vehicles = 50;
  std::uint32_t steps = 100;
  double locality_bias = 0.9;
  std::uint64_t seed = 0;
  std::int64_t start_time = 0;
};

/// Seeded random walk over grid centres. Each step, with probability
/// locality_bias the vehicle moves to a uniformly chosen 4-neighbour (a move
/// off the grid is clamped, i.e. the vehicle stays), otherwise it stays.
/// Points are spaced 15 s apart.
inline std::vector<RawTrajectory> synth_generate(const GridSpec& spec, const SynthParams& params) {
  if (!(params.locality_bias >= 0.0 && params.locality_bias <= 1.0)) {
    throw ConfigError("locality_bias must lie in [0, 1]");
  }
  Rng rng(params.seed);
  std::vector<RawTrajectory> out;
  out.reserve(params.n_vehicles);
  const int n_o = static_cast<int>(spec.n_o);
  const int n_a = static_cast<int>(spec.n_a);
  for (std::uint32_t v = 0; v < params.n_vehicles; ++v) {
    char id[32];
    std::snprintf(id, sizeof(id), "veh%05u", v);
    RawTrajectory t{id, std::string(id) + "-t0", {}};
    t.points.reserve(params.steps);
    auto cell = static_cast<std::uint32_t>(rng.below(spec.grid_count()));
    for (std::uint32_t k = 0; k < params.steps; ++k) {
      t.points.push_back({params.start_time + kPortoSamplingSeconds * static_cast<std::int64_t>(k),
                          grid_center(spec, GridIndex{cell})});
      if (rng.uniform() < params.locality_bias) {
        static constexpr int kDc[4] = {1, -1, 0, 0};
        static constexpr int kDr[4] = {0, 0, 1, -1};
        const auto dir = rng.below(4);
        const int col = static_cast<int>(cell % spec.n_o) + kDc[dir];
        const int row = static_cast<int>(cell / spec.n_o) + kDr[dir];
        if (col >= 0 && col < n_o && row >= 0 && row < n_a) {
          cell = static_cast<std::uint32_t>(row * n_o + col);
        }
      }
    }
    if (!t.points.empty()) out.push_back(std::move(t));
  }
  return out;
}

}  // namespace trajcaps
