#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "texnet/model.hpp"
#include "texnet/tensor.hpp"

namespace texnet {

// Parameter checkpoint layout (little-endian throughout, stable across
// versions):
//
//   bytes 0..7    magic "TEXNETCK"
//   bytes 8..11   format version, uint32 (currently 1)
//   bytes 12..19  manifest length in bytes, uint64
//   manifest      UTF-8 JSON array; one entry per tensor:
//                   {"layer": <layer index>, "name": <tensor name>,
//                    "shape": [..], "precision": "f32"|"f64",
//                    "trainable": bool, "offset": <byte offset into data>}
//   data          raw values in manifest order, f32 or f64 little-endian
inline constexpr char kCheckpointMagic[8] = {'T', 'E', 'X', 'N', 'E', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
template <typename Scalar>
const char* precision_name();
template <>
inline const char* precision_name<float>() {
  return "f32";
}
template <>
inline const char* precision_name<double>() {
  return "f64";
}
}  // namespace detail

template <typename Scalar>
void save_checkpoint(const ParameterStore<Scalar>& store, const std::string& path) {
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  store.for_each([&](std::size_t layer, const NamedParam<Scalar>& p) {
    nlohmann::json entry;
    entry["layer"] = layer;
    entry["name"] = p.name;
    entry["shape"] = p.value.shape();
    entry["precision"] = detail::precision_name<Scalar>();
    entry["trainable"] = p.trainable;
    entry["offset"] = offset;
    manifest.push_back(entry);
    offset += static_cast<std::uint64_t>(p.value.size()) * sizeof(Scalar);
  });
  const std::string header = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t manifest_len = header.size();
  out.write(reinterpret_cast<const char*>(&manifest_len), sizeof(manifest_len));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  store.for_each([&](std::size_t, const NamedParam<Scalar>& p) {
    out.write(reinterpret_cast<const char*>(p.value.data()),
              static_cast<std::streamsize>(p.value.size() * sizeof(Scalar)));
  });
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

// Loads values into an existing store (usually fresh from init_parameters);
// every tensor in the store must be present with a matching shape. Values are
// converted if the file precision differs from Scalar.
template <typename Scalar>
void load_checkpoint(ParameterStore<Scalar>& store, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  std::uint64_t manifest_len = 0;
  in.read(reinterpret_cast<char*>(&manifest_len), sizeof(manifest_len));
  std::string header(manifest_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(manifest_len));
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
  const nlohmann::json manifest = nlohmann::json::parse(header);

  const std::streampos data_start = in.tellg();
  for (const auto& entry : manifest) {
    const std::size_t layer = entry.at("layer").get<std::size_t>();
    const std::string name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    const std::string precision = entry.at("precision").get<std::string>();
    const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
    if (layer >= store.layer_count())
      throw std::runtime_error("checkpoint layer " + std::to_string(layer) +
                               " out of range for this network");
    NamedParam<Scalar>& p = store.find(layer, name);
    if (p.value.shape() != shape)
      throw std::runtime_error("checkpoint tensor " + name + " at layer " +
                               std::to_string(layer) + " has shape " + shape_str(shape) +
                               ", store expects " + shape_str(p.value.shape()));
    in.seekg(data_start + static_cast<std::streamoff>(offset));
    const Index count = p.value.size();
    if (precision == "f32") {
      std::vector<float> buf(static_cast<std::size_t>(count));
      in.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
      for (Index i = 0; i < count; ++i)
        p.value[i] = static_cast<Scalar>(buf[static_cast<std::size_t>(i)]);
    } else if (precision == "f64") {
      std::vector<double> buf(static_cast<std::size_t>(count));
      in.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(double)));
      for (Index i = 0; i < count; ++i)
        p.value[i] = static_cast<Scalar>(buf[static_cast<std::size_t>(i)]);
    } else {
      throw std::runtime_error("unknown checkpoint precision: " + precision);
    }
    if (!in) throw std::runtime_error("truncated checkpoint data: " + path);
  }
}

}  // namespace texnet
