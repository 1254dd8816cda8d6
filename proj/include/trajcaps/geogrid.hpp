#pragma once

// Grid-map discretization of a longitude/latitude bounding box.
//
// Cells are indexed 0-based, row-major, with the origin cell at
// (lo_min, la_min). Column runs along longitude, row along latitude.
// Points exactly on the max edge of the box clamp into the last cell, so the
// closed box is fully covered.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "trajcaps/errors.hpp"

namespace trajcaps {

struct GeoPoint {
  double longitude = 0.0;
  double latitude = 0.0;

  friend bool operator==(const GeoPoint&, const GeoPoint&) = default;
};

struct BoundingBox {
  double lo_min = 0.0;
  double lo_max = 0.0;
  double la_min = 0.0;
  double la_max = 0.0;

  bool contains(const GeoPoint& p) const noexcept {
    return p.longitude >= lo_min && p.longitude <= lo_max &&
           p.latitude >= la_min && p.latitude <= la_max;
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Index of a grid cell, 0-based. Reports add 1 to match the 1..G numbering
/// used for human-facing output.
struct GridIndex {
  std::uint32_t value = 0;

  constexpr GridIndex() = default;
  constexpr explicit GridIndex(std::uint32_t v) : value(v) {}

  friend constexpr auto operator<=>(const GridIndex&, const GridIndex&) = default;
};

struct GridSpec {
  BoundingBox bbox;
  std::uint32_t n_o = 1;  // longitude units
  std::uint32_t n_a = 1;  // latitude units
  double cell_width = 0.0;
  double cell_height = 0.0;

  std::uint32_t grid_count() const noexcept { return n_o * n_a; }

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

inline bool valid_geo(const GeoPoint& p) noexcept {
  return std::isfinite(p.longitude) && std::isfinite(p.latitude) &&
         p.longitude >= -180.0 && p.longitude <= 180.0 && p.latitude >= -90.0 &&
         p.latitude <= 90.0;
}

inline GridSpec build_grid_spec(const BoundingBox& bbox, std::uint32_t n_o, std::uint32_t n_a) {
  if (n_o < 1 || n_a < 1) {
    throw ConfigError("grid counts n_o and n_a must be >= 1");
  }
  if (!(bbox.lo_min < bbox.lo_max) || !(bbox.la_min < bbox.la_max)) {
    std::ostringstream os;
    os << "degenerate bounding box: longitude [" << bbox.lo_min << ", " << bbox.lo_max
       << "], latitude [" << bbox.la_min << ", " << bbox.la_max << "]";
    throw ConfigError(os.str());
  }
  GridSpec spec;
  spec.bbox = bbox;
  spec.n_o = n_o;
  spec.n_a = n_a;
  spec.cell_width = (bbox.lo_max - bbox.lo_min) / n_o;
  spec.cell_height = (bbox.la_max - bbox.la_min) / n_a;
  return spec;
}

/// Recomputes a spec from its defining values and checks it matches.
inline void validate(const GridSpec& spec) {
  GridSpec rebuilt = build_grid_spec(spec.bbox, spec.n_o, spec.n_a);
  if (!(rebuilt == spec)) {
    throw ConfigError("grid spec cell dimensions are inconsistent with its bbox and counts");
  }
}

inline GridIndex locate(const GridSpec& spec, const GeoPoint& p) {
  if (!spec.bbox.contains(p)) {
    std::ostringstream os;
    os.precision(10);
    os << "point (" << p.longitude << ", " << p.latitude << ") lies outside the grid bbox";
    throw OutOfBoundsError(os.str());
  }
  auto axis = [](double offset, double cell, std::uint32_t count) {
    auto k = static_cast<std::uint32_t>(std::floor(offset / cell));
    return k < count ? k : count - 1;
  };
  const std::uint32_t col = axis(p.longitude - spec.bbox.lo_min, spec.cell_width, spec.n_o);
  const std::uint32_t row = axis(p.latitude - spec.bbox.la_min, spec.cell_height, spec.n_a);
  return GridIndex{row * spec.n_o + col};
}

inline void check_index(const GridSpec& spec, GridIndex idx) {
  if (idx.value >= spec.grid_count()) {
    throw OutOfBoundsError("grid index " + std::to_string(idx.value) + " >= G=" +
                           std::to_string(spec.grid_count()));
  }
}

inline std::vector<std::uint8_t> one_hot(const GridSpec& spec, GridIndex idx) {
  check_index(spec, idx);
  std::vector<std::uint8_t> v(spec.grid_count(), 0);
  v[idx.value] = 1;
  return v;
}

inline GeoPoint grid_center(const GridSpec& spec, GridIndex idx) {
  check_index(spec, idx);
  const std::uint32_t col = idx.value % spec.n_o;
  const std::uint32_t row = idx.value / spec.n_o;
  return GeoPoint{spec.bbox.lo_min + (col + 0.5) * spec.cell_width,
                  spec.bbox.la_min + (row + 0.5) * spec.cell_height};
}

/// Tight bounding box over a set of points (the max/min definition of the
/// grid area). A zero extent is rejected later by build_grid_spec.
inline BoundingBox extrema_bbox(const std::vector<GeoPoint>& points) {
  if (points.empty()) throw DataError("cannot derive a bounding box from zero points");
  BoundingBox b{points[0].longitude, points[0].longitude, points[0].latitude,
                points[0].latitude};
  for (const auto& p : points) {
    b.lo_min = std::min(b.lo_min, p.longitude);
    b.lo_max = std::max(b.lo_max, p.longitude);
    b.la_min = std::min(b.la_min, p.latitude);
    b.la_max = std::max(b.la_max, p.latitude);
  }
  return b;
}

}  // namespace trajcaps
