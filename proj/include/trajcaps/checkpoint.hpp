#pragma once

// Parameter checkpoint: one file holding a JSON manifest followed by raw
// little-endian float64 blocks.
//
//   "TCCKPT01" | u64 manifest byte length | manifest (UTF-8 JSON) | blocks
//
// The manifest lists every tensor's name, shape and element offset, the
// dtype, the seed the parameters were initialised from, and an optional
// caller-supplied header object.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "trajcaps/binary_io.hpp"
#include "trajcaps/errors.hpp"
#include "trajcaps/tensor.hpp"

namespace trajcaps {

struct NamedTensor {
  std::string name;
  Tensor tensor;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  std::uint64_t seed = 0;
  nlohmann::json header = nlohmann::json::object();

  const Tensor& at(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return t.tensor;
    }
    throw DataError("checkpoint has no tensor named '" + name + "'");
  }
};

inline constexpr char kCheckpointMagic[8] = {'T', 'C', 'C', 'K', 'P', 'T', '0', '1'};

inline void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["format"] = "trajcaps-params";
  manifest["dtype"] = "float64-le";
  manifest["seed"] = ckpt.seed;
  manifest["header"] = ckpt.header;
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    entries.push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", offset}, {"count", t.tensor.size()}});
    offset += t.tensor.size();
  }
  manifest["tensors"] = entries;
  const std::string text = manifest.dump();
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  bin::put<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : ckpt.tensors) {
    for (double v : t.tensor.values()) bin::put<double>(os, v);
  }
}

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::string(magic, 8) != std::string(kCheckpointMagic, 8)) {
    throw DataError("not a trajcaps checkpoint");
  }
  const auto len = bin::get<std::uint64_t>(is);
  if (len > (1u << 28)) throw DataError("checkpoint manifest length is implausible");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw DataError("truncated checkpoint manifest");
  Checkpoint ckpt;
  try {
    const auto manifest = nlohmann::json::parse(text);
    if (manifest.at("dtype") != "float64-le") throw DataError("unsupported checkpoint dtype");
    ckpt.seed = manifest.at("seed").get<std::uint64_t>();
    ckpt.header = manifest.at("header");
    std::uint64_t expected_offset = 0;
    for (const auto& e : manifest.at("tensors")) {
      Shape shape = e.at("shape").get<Shape>();
      const auto count = e.at("count").get<std::uint64_t>();
      if (count != shape_size(shape) || e.at("offset").get<std::uint64_t>() != expected_offset) {
        throw DataError("inconsistent checkpoint manifest entry");
      }
      std::vector<double> values(count);
      for (double& v : values) v = bin::get<double>(is);
      ckpt.tensors.push_back({e.at("name").get<std::string>(), Tensor(std::move(shape), std::move(values))});
      expected_offset += count;
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  if (is.peek() != std::char_traits<char>::eof()) throw DataError("trailing bytes after checkpoint blocks");
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  write_checkpoint(os, ckpt);
  if (!os) throw DataError("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read checkpoint " + path.string());
  return read_checkpoint(is);
}

}  // namespace trajcaps
