#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gmvit/tensor.hpp"

namespace gmvit {

/// One named model parameter (or persistent buffer such as batch-norm
/// running statistics; buffers are checkpointed but never optimized).
template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool is_buffer = false;
};

template <typename T>
using ParamMap = std::vector<NamedParam<T>>;

// ---------------------------------------------------------------------------
// Tensor binary format
//
//   magic "GMVT" | version u32 | rank u32 | dims u32 x rank | dtype u8 | data
//
// little-endian throughout; dtype 0 = f32, 1 = f64, 2 = u8 (raw image
// records in dataset blobs).
// ---------------------------------------------------------------------------

namespace io {

constexpr std::uint32_t kFormatVersion = 1;
enum Dtype : std::uint8_t { kF32 = 0, kF64 = 1, kU8 = 2 };

template <typename V>
void write_pod(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  detail::require_numeric(static_cast<bool>(is), "tensor read: truncated stream");
  return v;
}

inline void write_header(std::ostream& os, const Shape& shape, Dtype dtype) {
  os.write("GMVT", 4);
  write_pod<std::uint32_t>(os, kFormatVersion);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
}

inline std::pair<Shape, Dtype> read_header(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  detail::require_numeric(is && std::memcmp(magic, "GMVT", 4) == 0, "tensor read: bad magic");
  const auto version = read_pod<std::uint32_t>(is);
  detail::require_numeric(version == kFormatVersion,
                          "tensor read: unsupported version " + detail::str(version));
  const auto rank = read_pod<std::uint32_t>(is);
  detail::require_numeric(rank <= 8, "tensor read: implausible rank");
  Shape shape(rank);
  for (auto& d : shape) d = read_pod<std::uint32_t>(is);
  const auto dtype = static_cast<Dtype>(read_pod<std::uint8_t>(is));
  detail::require_numeric(dtype == kF32 || dtype == kF64 || dtype == kU8,
                          "tensor read: unknown dtype code");
  return {shape, dtype};
}

inline std::size_t record_size(const Shape& shape, Dtype dtype) {
  const std::size_t elem = dtype == kF64 ? 8 : dtype == kF32 ? 4 : 1;
  return 4 + 4 + 4 + 4 * shape.size() + 1 + elem * static_cast<std::size_t>(numel_of(shape));
}

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  write_header(os, t.shape(), std::is_same_v<T, double> ? kF64 : kF32);
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.data().size() * sizeof(T)));
}

/// Reads a float tensor record, converting f32 <-> f64 as needed.
template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  auto [shape, dtype] = read_header(is);
  detail::require_numeric(dtype == kF32 || dtype == kF64, "tensor read: expected float record");
  const std::size_t n = static_cast<std::size_t>(numel_of(shape));
  std::vector<T> out(n);
  if ((dtype == kF64) == std::is_same_v<T, double>) {
    is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n * sizeof(T)));
  } else if (dtype == kF32) {
    std::vector<float> tmp(n);
    is.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(n * 4));
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>(tmp[i]);
  } else {
    std::vector<double> tmp(n);
    is.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(n * 8));
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>(tmp[i]);
  }
  detail::require_numeric(static_cast<bool>(is), "tensor read: truncated data");
  return Tensor<T>::from(shape, std::move(out));
}

inline void write_u8_tensor(std::ostream& os, const Shape& shape,
                            const std::vector<std::uint8_t>& bytes) {
  detail::require(numel_of(shape) == static_cast<std::int64_t>(bytes.size()),
                  "u8 tensor write: shape/data mismatch");
  write_header(os, shape, kU8);
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
}

inline std::pair<Shape, std::vector<std::uint8_t>> read_u8_tensor(std::istream& is) {
  auto [shape, dtype] = read_header(is);
  detail::require_numeric(dtype == kU8, "tensor read: expected u8 record");
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(numel_of(shape)));
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  detail::require_numeric(static_cast<bool>(is), "tensor read: truncated data");
  return {shape, std::move(bytes)};
}

template <typename T>
void save_tensor_file(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  detail::require_numeric(os.is_open(), "cannot write " + path.string());
  write_tensor(os, t);
}

template <typename T>
Tensor<T> load_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  detail::require_numeric(is.is_open(), "cannot read " + path.string());
  return read_tensor<T>(is);
}

}  // namespace io

// ---------------------------------------------------------------------------
// Checkpoints: a directory of one tensor file per parameter plus model.json
// listing names, shapes, and the model configuration echo.
// ---------------------------------------------------------------------------

namespace io {

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const nlohmann::ordered_json& config,
                     const ParamMap<T>& params) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["precision"] = std::is_same_v<T, double> ? "f64" : "f32";
  manifest["config"] = config;
  auto tensors = nlohmann::ordered_json::array();
  for (const auto& p : params) {
    save_tensor_file(dir / (p.name + ".bin"), p.tensor);
    nlohmann::ordered_json e;
    e["name"] = p.name;
    e["shape"] = p.tensor.shape();
    e["buffer"] = p.is_buffer;
    tensors.push_back(e);
  }
  manifest["tensors"] = tensors;
  std::ofstream os(dir / "model.json");
  detail::require_numeric(os.is_open(), "cannot write " + (dir / "model.json").string());
  os << manifest.dump(2) << "\n";
}

inline nlohmann::json load_checkpoint_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / "model.json");
  detail::require_numeric(is.is_open(), "cannot read " + (dir / "model.json").string());
  return nlohmann::json::parse(is);
}

/// Copies checkpointed values into an existing model parameter map; every
/// parameter must be present in the checkpoint with a matching shape.
template <typename T>
void load_checkpoint_into(const std::filesystem::path& dir, ParamMap<T>& params) {
  const auto manifest = load_checkpoint_manifest(dir);
  std::map<std::string, Shape> listed;
  for (const auto& e : manifest.at("tensors"))
    listed[e.at("name").get<std::string>()] = e.at("shape").get<Shape>();
  for (auto& p : params) {
    auto it = listed.find(p.name);
    detail::require_numeric(it != listed.end(), "checkpoint missing tensor " + p.name);
    Tensor<T> t = load_tensor_file<T>(dir / (p.name + ".bin"));
    detail::require(t.shape() == p.tensor.shape(),
                    "checkpoint tensor " + p.name + " has shape " + shape_str(t.shape()) +
                        ", model expects " + shape_str(p.tensor.shape()));
    p.tensor.data() = t.data();
  }
}

}  // namespace io
}  // namespace gmvit
