#pragma once

// Run configuration: one JSON document covering the grid, framing, model,
// split, data adapter and synthetic-data settings. Keys absent from the
// document keep their defaults; unknown keys are errors.
//
// {
//   "seed": 7,
//   "output_dir": "out",
//   "grid": {"bbox": "auto" | {"lo_min":..,"lo_max":..,"la_min":..,"la_max":..}, "n_o": 4, "n_a": 4},
//   "window_length": 3,
//   "layout": "GxL" | "LxG",
//   "model": { filters, conv_kernel, conv_stride, capsule_dim, caps_kernel, caps_stride,
//              advanced_count, transform_sharing: "channel" | "capsule", fc_width, dropout,
//              routing_iterations, epochs, patience,
//              batch_size, learning_rate },
//   "split": {"policy": "by_fraction", "fraction": 0.7, "val_fraction": 0.3}
//          | {"policy": "by_time", "train_end": t, "test_start": t, "val_fraction": 0.3},
//   "data": {"adapter": "canonical" | "porto" | "grab", "paths": [..],
//            "oob_policy": "drop_point" | "drop_trip", "resample_period": 15,
//            "grab_filter": {"device": "android", "mode": "car", "max_accuracy_level": 10}},
//   "synth": {"n_vehicles": 50, "steps": 100, "locality_bias": 0.9, "start_time": 0}
// }

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajcaps/capsnet.hpp"
#include "trajcaps/errors.hpp"
#include "trajcaps/frame_io.hpp"
#include "trajcaps/geogrid.hpp"
#include "trajcaps/ingest.hpp"

namespace trajcaps {

struct GridConfig {
  std::optional<BoundingBox> bbox;  // nullopt: derive from data extrema
  std::uint32_t n_o = 4;
  std::uint32_t n_a = 4;
};

struct DataConfig {
  std::string adapter = "canonical";
  std::vector<std::string> paths;
  OutOfBoundsPolicy oob_policy = OutOfBoundsPolicy::drop_point;
  std::optional<std::int64_t> resample_period;  // default: 15 s for grab, off otherwise
  GrabFilter grab_filter;

  std::int64_t effective_resample_period() const {
    if (resample_period) return *resample_period;
    return adapter == "grab" ? kPortoSamplingSeconds : 0;
  }
};

struct SynthConfig {
  std::uint32_t n_vehicles = 50;
  std::uint32_t steps = 100;
  double locality_bias = 0.9;
  std::int64_t start_time = 0;
};

/// Model defaults for a run: small kernels that fit the default L=3.
inline ModelConfig default_run_model() {
  ModelConfig m;
  m.filters = 16;
  m.conv_kernel = {1, 2};
  m.conv_stride = {1, 1};
  m.caps_kernel = {1, 1};
  m.caps_stride = {1, 1};
  m.fc_width = 32;
  return m;
}

struct RunConfig {
  GridConfig grid;
  ModelConfig model = default_run_model();  // grid_count, window_length, layout and seed are kept in sync
  SplitPolicy split = SplitPolicy::by_fraction(0.7, 0.3);
  DataConfig data;
  SynthConfig synth;
  std::uint64_t seed = 0;
  std::string output_dir = "out";

  std::uint32_t grid_count() const { return grid.n_o * grid.n_a; }
  std::uint32_t window_length() const { return static_cast<std::uint32_t>(model.window_length); }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

}  // namespace detail

inline void sync(RunConfig& c) {
  c.model.grid_count = c.grid_count();
  c.model.seed = c.seed;
}

/// Checks every nested invariant; nothing should be written before this passes.
inline void validate(const RunConfig& c) {
  if (c.grid.n_o < 1 || c.grid.n_a < 1) throw ConfigError("grid n_o and n_a must be >= 1");
  if (c.grid.bbox) (void)build_grid_spec(*c.grid.bbox, c.grid.n_o, c.grid.n_a);
  if (c.model.grid_count != c.grid_count()) throw ConfigError("model G does not match grid n_o * n_a");
  validate(c.model);
  if (!(c.split.val_fraction > 0.0 && c.split.val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  if (c.split.kind == SplitPolicy::Kind::by_fraction && !(c.split.fraction > 0.0 && c.split.fraction < 1.0)) {
    throw ConfigError("split fraction must lie in (0, 1)");
  }
  if (c.split.kind == SplitPolicy::Kind::by_time && c.split.train_end > c.split.test_start) {
    throw ConfigError("by_time split requires train_end <= test_start");
  }
  if (c.data.adapter != "canonical" && c.data.adapter != "porto" && c.data.adapter != "grab") {
    throw ConfigError("data adapter must be canonical, porto or grab; got '" + c.data.adapter + "'");
  }
  if (c.data.effective_resample_period() < 0) throw ConfigError("resample_period must be >= 0");
  if (!(c.synth.locality_bias >= 0.0 && c.synth.locality_bias <= 1.0)) {
    throw ConfigError("synth locality_bias must lie in [0, 1]");
  }
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"seed", "output_dir", "grid", "window_length", "layout", "model", "split", "data", "synth"},
                         "run config");
  RunConfig c;
  try {
    c.seed = j.value("seed", std::uint64_t{0});
    c.output_dir = j.value("output_dir", std::string("out"));
    if (j.contains("grid")) {
      const auto& g = j["grid"];
      detail::reject_unknown(g, {"bbox", "n_o", "n_a"}, "grid");
      c.grid.n_o = g.value("n_o", 4u);
      c.grid.n_a = g.value("n_a", 4u);
      if (g.contains("bbox") && !(g["bbox"].is_string() && g["bbox"] == "auto")) {
        const auto& b = g["bbox"];
        detail::reject_unknown(b, {"lo_min", "lo_max", "la_min", "la_max"}, "grid.bbox");
        c.grid.bbox = BoundingBox{b.at("lo_min").get<double>(), b.at("lo_max").get<double>(),
                                  b.at("la_min").get<double>(), b.at("la_max").get<double>()};
      }
    }
    if (j.contains("model")) {
      for (const char* reserved : {"G", "L", "layout", "seed"}) {
        if (j["model"].contains(reserved)) {
          throw ConfigError(std::string("model.") + reserved + " is derived; set it at the top level");
        }
      }
      c.model = model_config_from_json(j["model"], c.model);
    }
    c.model.window_length = j.value("window_length", std::size_t{3});
    if (j.contains("layout")) c.model.layout = layout_from_string(j["layout"].get<std::string>());
    if (j.contains("split")) {
      detail::reject_unknown(j["split"], {"policy", "fraction", "train_end", "test_start", "val_fraction"}, "split");
      c.split = split_policy_from_json(j["split"]);
    }
    if (j.contains("data")) {
      const auto& d = j["data"];
      detail::reject_unknown(d, {"adapter", "paths", "oob_policy", "resample_period", "grab_filter"}, "data");
      c.data.adapter = d.value("adapter", std::string("canonical"));
      if (d.contains("paths")) c.data.paths = d["paths"].get<std::vector<std::string>>();
      const std::string oob = d.value("oob_policy", std::string("drop_point"));
      if (oob == "drop_point") {
        c.data.oob_policy = OutOfBoundsPolicy::drop_point;
      } else if (oob == "drop_trip") {
        c.data.oob_policy = OutOfBoundsPolicy::drop_trip;
      } else {
        throw ConfigError("oob_policy must be drop_point or drop_trip");
      }
      if (d.contains("resample_period")) c.data.resample_period = d["resample_period"].get<std::int64_t>();
      if (d.contains("grab_filter")) {
        const auto& f = d["grab_filter"];
        detail::reject_unknown(f, {"device", "mode", "max_accuracy_level"}, "data.grab_filter");
        if (f.contains("device")) c.data.grab_filter.device = f["device"].get<std::string>();
        if (f.contains("mode")) c.data.grab_filter.mode = f["mode"].get<std::string>();
        if (f.contains("max_accuracy_level")) c.data.grab_filter.max_accuracy_level = f["max_accuracy_level"].get<double>();
      }
    }
    if (j.contains("synth")) {
      const auto& s = j["synth"];
      detail::reject_unknown(s, {"n_vehicles", "steps", "locality_bias", "start_time"}, "synth");
      c.synth.n_vehicles = s.value("n_vehicles", 50u);
      c.synth.steps = s.value("steps", 100u);
      c.synth.locality_bias = s.value("locality_bias", 0.9);
      c.synth.start_time = s.value("start_time", std::int64_t{0});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid run config: ") + e.what());
  }
  sync(c);
  validate(c);
  return c;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json model = model_config_to_json(c.model);
  for (const char* k : {"G", "L", "layout", "seed"}) model.erase(k);
  nlohmann::json grid = {{"n_o", c.grid.n_o}, {"n_a", c.grid.n_a}};
  if (c.grid.bbox) {
    grid["bbox"] = {{"lo_min", c.grid.bbox->lo_min},
                    {"lo_max", c.grid.bbox->lo_max},
                    {"la_min", c.grid.bbox->la_min},
                    {"la_max", c.grid.bbox->la_max}};
  } else {
    grid["bbox"] = "auto";
  }
  nlohmann::json data = {{"adapter", c.data.adapter},
                         {"paths", c.data.paths},
                         {"oob_policy", c.data.oob_policy == OutOfBoundsPolicy::drop_point ? "drop_point" : "drop_trip"}};
  if (c.data.resample_period) data["resample_period"] = *c.data.resample_period;
  nlohmann::json filter = nlohmann::json::object();
  if (c.data.grab_filter.device) filter["device"] = *c.data.grab_filter.device;
  if (c.data.grab_filter.mode) filter["mode"] = *c.data.grab_filter.mode;
  if (c.data.grab_filter.max_accuracy_level) filter["max_accuracy_level"] = *c.data.grab_filter.max_accuracy_level;
  if (!filter.empty()) data["grab_filter"] = filter;
  return {{"seed", c.seed},
          {"output_dir", c.output_dir},
          {"grid", grid},
          {"window_length", c.model.window_length},
          {"layout", to_string(c.model.layout)},
          {"model", model},
          {"split", split_policy_to_json(c.split)},
          {"data", data},
          {"synth",
           {{"n_vehicles", c.synth.n_vehicles},
            {"steps", c.synth.steps},
            {"locality_bias", c.synth.locality_bias},
            {"start_time", c.synth.start_time}}}};
}

/// Applies "a.b.c=value" overrides to a config document. The value is read
/// as JSON when it parses, otherwise as a string.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("empty key in override path: " + path);
    if (!node->is_object()) *node = nlohmann::json::object();
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

}  // namespace trajcaps
