#pragma once

// Checkpoint files: a JSON manifest next to a raw little-endian f32 blob.
//
//   name.json  {"format": 1, "blob": "name.bin", "blob_fnv64": "...",
//               "config_hash": "...", "tensors": [{name, shape, offset}], ...}
//   name.bin   all tensors concatenated in manifest order
//
// Loading recomputes both hashes and throws CheckpointError on mismatch.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "twinlab/autodiff.hpp"
#include "twinlab/error.hpp"
#include "twinlab/io.hpp"

namespace twinlab::checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct NamedTensor {
  std::string name;
  ad::Shape shape;
  std::vector<float> values;
};

inline std::string config_hash(const json& config) { return io::hex64(io::fnv1a64(config.dump())); }

// `meta` must contain "config"; its hash is recorded alongside the blob's.
inline void save(const fs::path& manifest_path, json meta, const std::vector<NamedTensor>& tensors) {
  if (!meta.contains("config")) throw Error("checkpoint metadata lacks a config");
  std::string blob;
  json list = json::array();
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    if (ad::numel(t.shape) != t.values.size()) throw ShapeError("checkpoint tensor '" + t.name + "' shape mismatch");
    const std::size_t bytes = t.values.size() * sizeof(float);
    blob.append(reinterpret_cast<const char*>(t.values.data()), bytes);
    list.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.values.size();
  }
  fs::path blob_path = manifest_path;
  blob_path.replace_extension(".bin");
  json manifest;
  manifest["format"] = 1;
  manifest["blob"] = blob_path.filename().string();
  manifest["blob_fnv64"] = io::hex64(io::fnv1a64(blob));
  manifest["config_hash"] = config_hash(meta.at("config"));
  manifest["tensors"] = std::move(list);
  for (auto& [k, v] : meta.items()) manifest[k] = v;
  io::write_file_atomic(blob_path, blob);
  io::write_file_atomic(manifest_path, manifest.dump(1) + "\n");
}

struct Loaded {
  json manifest;
  std::vector<NamedTensor> tensors;

  const NamedTensor& tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw CheckpointError("checkpoint has no tensor '" + name + "'");
  }
  bool has(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return true;
    return false;
  }
};

inline Loaded load(const fs::path& manifest_path) {
  Loaded out;
  try {
    out.manifest = json::parse(io::read_file(manifest_path));
  } catch (const json::exception& e) {
    throw CheckpointError("unreadable checkpoint manifest '" + manifest_path.string() + "': " + e.what());
  }
  const json& m = out.manifest;
  if (!m.contains("blob") || !m.contains("tensors") || !m.contains("config"))
    throw CheckpointError("checkpoint manifest '" + manifest_path.string() + "' is incomplete");
  if (config_hash(m.at("config")) != m.value("config_hash", ""))
    throw CheckpointError("config hash mismatch in '" + manifest_path.string() + "'");
  const fs::path blob_path = manifest_path.parent_path() / m.at("blob").get<std::string>();
  const std::string blob = io::read_file(blob_path);
  if (io::hex64(io::fnv1a64(blob)) != m.value("blob_fnv64", ""))
    throw CheckpointError("blob hash mismatch for '" + blob_path.string() + "'");
  const std::size_t total = blob.size() / sizeof(float);
  for (const auto& entry : m.at("tensors")) {
    NamedTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<ad::Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const std::size_t n = ad::numel(t.shape);
    if (offset + n > total) throw CheckpointError("tensor '" + t.name + "' runs past the end of the blob");
    t.values.resize(n);
    std::memcpy(t.values.data(), blob.data() + offset * sizeof(float), n * sizeof(float));
    out.tensors.push_back(std::move(t));
  }
  return out;
}

inline NamedTensor snapshot(const std::string& name, const ad::Tensor<float>& t) {
  return {name, t.shape(), std::vector<float>(t.data().begin(), t.data().end())};
}

// Copies values into an existing parameter, keeping its storage.
inline void restore_into(ad::Tensor<float>& dst, const NamedTensor& src) {
  if (dst.shape() != src.shape)
    throw CheckpointError("tensor '" + src.name + "' has shape " + ad::shape_str(src.shape) + ", expected " +
                          ad::shape_str(dst.shape()));
  std::copy(src.values.begin(), src.values.end(), dst.mutable_data().begin());
}

}  // namespace twinlab::checkpoint
