#pragma once

// FrameSet persistence: a little-endian binary body plus a JSON sidecar
// (`<file>.json`) recording G, L and the grid spec.
//
// Body layout:
//   "TCFRAMES" | u32 version | u64 count | u32 L
//   per frame: i64 frame_time | u32 label | str vehicle_id | str trip_id | L x u32 cell
// where str is u32 length + bytes.

#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"
#include "trajcaps/binary_io.hpp"
#include "trajcaps/errors.hpp"
#include "trajcaps/geogrid.hpp"
#include "trajcaps/ingest.hpp"

namespace trajcaps {

inline nlohmann::json grid_spec_to_json(const GridSpec& spec) {
  return {{"bbox",
           {{"lo_min", spec.bbox.lo_min},
            {"lo_max", spec.bbox.lo_max},
            {"la_min", spec.bbox.la_min},
            {"la_max", spec.bbox.la_max}}},
          {"n_o", spec.n_o},
          {"n_a", spec.n_a},
          {"cell_width", spec.cell_width},
          {"cell_height", spec.cell_height},
          {"G", spec.grid_count()}};
}

inline GridSpec grid_spec_from_json(const nlohmann::json& j) {
  try {
    const auto& b = j.at("bbox");
    BoundingBox bbox{b.at("lo_min").get<double>(), b.at("lo_max").get<double>(),
                     b.at("la_min").get<double>(), b.at("la_max").get<double>()};
    GridSpec spec = build_grid_spec(bbox, j.at("n_o").get<std::uint32_t>(), j.at("n_a").get<std::uint32_t>());
    if (j.contains("cell_width") && j["cell_width"].get<double>() != spec.cell_width) {
      throw ConfigError("grid spec cell_width disagrees with bbox / n_o");
    }
    if (j.contains("cell_height") && j["cell_height"].get<double>() != spec.cell_height) {
      throw ConfigError("grid spec cell_height disagrees with bbox / n_a");
    }
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid grid spec: ") + e.what());
  }
}

inline constexpr char kFramesMagic[8] = {'T', 'C', 'F', 'R', 'A', 'M', 'E', 'S'};
inline constexpr std::uint32_t kFramesVersion = 1;

inline std::filesystem::path sidecar_path(const std::filesystem::path& body) {
  return std::filesystem::path(body.string() + ".json");
}

inline void save_frame_set(const FrameSet& fs, const std::filesystem::path& body) {
  {
    std::ofstream os(body, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + body.string());
    os.write(kFramesMagic, sizeof(kFramesMagic));
    bin::put<std::uint32_t>(os, kFramesVersion);
    bin::put<std::uint64_t>(os, fs.frames.size());
    bin::put<std::uint32_t>(os, fs.window_length);
    for (const auto& f : fs.frames) {
      if (f.window.size() != fs.window_length) throw DataError("frame length differs from FrameSet L");
      bin::put<std::int64_t>(os, f.frame_time);
      bin::put<std::uint32_t>(os, f.label.value);
      bin::put_string(os, f.vehicle_id);
      bin::put_string(os, f.trip_id);
      for (auto c : f.window) bin::put<std::uint32_t>(os, c.value);
    }
    if (!os) throw DataError("write failed: " + body.string());
  }
  nlohmann::json side = {{"format", "trajcaps-frames"},
                         {"version", kFramesVersion},
                         {"body", body.filename().string()},
                         {"G", fs.grid_spec.grid_count()},
                         {"L", fs.window_length},
                         {"count", fs.frames.size()},
                         {"orientation_of_history", "GxL"},
                         {"grid_spec", grid_spec_to_json(fs.grid_spec)}};
  std::ofstream js(sidecar_path(body), std::ios::trunc);
  if (!js) throw DataError("cannot write " + sidecar_path(body).string());
  js << side.dump(2) << '\n';
}

inline FrameSet load_frame_set(const std::filesystem::path& body) {
  std::ifstream js(sidecar_path(body));
  if (!js) throw DataError("missing frame sidecar " + sidecar_path(body).string());
  nlohmann::json side;
  try {
    js >> side;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("unreadable frame sidecar: " + std::string(e.what()));
  }
  FrameSet fs;
  fs.grid_spec = grid_spec_from_json(side.at("grid_spec"));
  fs.window_length = side.at("L").get<std::uint32_t>();
  const auto count = side.at("count").get<std::uint64_t>();
  if (side.at("G").get<std::uint32_t>() != fs.grid_spec.grid_count()) {
    throw DataError("frame sidecar G disagrees with its grid spec");
  }

  std::ifstream is(body, std::ios::binary);
  if (!is) throw DataError("cannot read " + body.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::string(magic, 8) != std::string(kFramesMagic, 8)) {
    throw DataError(body.string() + " is not a frame file");
  }
  if (bin::get<std::uint32_t>(is) != kFramesVersion) throw DataError("unsupported frame file version");
  if (bin::get<std::uint64_t>(is) != count) throw DataError("frame count disagrees with sidecar");
  if (bin::get<std::uint32_t>(is) != fs.window_length) throw DataError("frame L disagrees with sidecar");
  const std::uint32_t g = fs.grid_spec.grid_count();
  fs.frames.resize(count);
  for (auto& f : fs.frames) {
    f.frame_time = bin::get<std::int64_t>(is);
    f.label = GridIndex{bin::get<std::uint32_t>(is)};
    f.vehicle_id = bin::get_string(is);
    f.trip_id = bin::get_string(is);
    f.window.resize(fs.window_length);
    for (auto& c : f.window) c = GridIndex{bin::get<std::uint32_t>(is)};
    if (f.label.value >= g) throw DataError("frame label out of range");
    for (auto c : f.window) {
      if (c.value >= g) throw DataError("frame history cell out of range");
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) throw DataError("trailing bytes in frame file");
  return fs;
}

}  // namespace trajcaps
