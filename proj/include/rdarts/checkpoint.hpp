#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "rdarts/errors.hpp"
#include "rdarts/modules.hpp"
#include "rdarts/optim.hpp"

#ifndef RDARTS_VERSION
#define RDARTS_VERSION "0.0.0"
#endif

namespace rdarts {

inline constexpr int kCheckpointFormat = 1;

inline const char* engine_version() { return RDARTS_VERSION; }

template <typename S>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
  return std::is_same_v<S, float> ? "f32" : "f64";
}

// Raw little-endian payloads; the dtype tag guards against mixing precisions.
template <typename S>
nlohmann::json pack_values(const std::vector<S>& v) {
  std::vector<std::uint8_t> bytes(v.size() * sizeof(S));
  if (!v.empty()) std::memcpy(bytes.data(), v.data(), bytes.size());
  return {{"dtype", dtype_name<S>()}, {"n", v.size()}, {"bytes", nlohmann::json::binary(std::move(bytes))}};
}

template <typename S>
std::vector<S> unpack_values(const nlohmann::json& j, std::size_t expected, const std::string& what) {
  if (!j.is_object() || !j.contains("bytes") || !j["bytes"].is_binary())
    throw FormatError("checkpoint: " + what + " is not a packed array");
  if (j.value("dtype", "") != dtype_name<S>())
    throw FormatError("checkpoint: " + what + " has dtype " + j.value("dtype", "?") + ", expected " + dtype_name<S>());
  const auto& bytes = j["bytes"].get_binary();
  if (bytes.size() != expected * sizeof(S) || j.value("n", std::size_t{0}) != expected)
    throw FormatError("checkpoint: " + what + " holds " + std::to_string(bytes.size() / sizeof(S)) + " values, expected " +
                      std::to_string(expected));
  std::vector<S> v(expected);
  if (expected) std::memcpy(v.data(), bytes.data(), bytes.size());
  return v;
}

template <typename S>
nlohmann::json pack_params(const ParamList<S>& ps) {
  auto arr = nlohmann::json::array();
  for (const auto& p : ps) arr.push_back({{"shape", p.shape()}, {"data", pack_values(p.values())}});
  return arr;
}

// Decodes every entry against the live parameter shapes without touching
// them; apply with restore_values once the whole file has been validated.
template <typename S>
std::vector<std::vector<S>> decode_params(const nlohmann::json& j, const ParamList<S>& ps, const std::string& what) {
  if (!j.is_array() || j.size() != ps.size())
    throw FormatError("checkpoint: " + what + " has " + std::to_string(j.is_array() ? j.size() : 0) +
                      " tensors, expected " + std::to_string(ps.size()));
  std::vector<std::vector<S>> out;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto shape = j[i].value("shape", Shape{});
    if (shape != ps[i].shape())
      throw FormatError("checkpoint: " + what + " #" + std::to_string(i) + " has shape " + dims_to_string(shape) +
                        ", expected " + shape_str(ps[i]));
    out.push_back(unpack_values<S>(j[i]["data"], ps[i].numel(), what + " #" + std::to_string(i)));
  }
  return out;
}

template <typename S>
nlohmann::json pack_buffers(const std::vector<std::vector<S>*>& bufs) {
  auto arr = nlohmann::json::array();
  for (const auto* b : bufs) arr.push_back(pack_values(*b));
  return arr;
}

template <typename S>
std::vector<std::vector<S>> decode_buffers(const nlohmann::json& j, const std::vector<std::vector<S>*>& bufs) {
  if (!j.is_array() || j.size() != bufs.size()) throw FormatError("checkpoint: buffer count mismatch");
  std::vector<std::vector<S>> out;
  for (std::size_t i = 0; i < bufs.size(); ++i)
    out.push_back(unpack_values<S>(j[i], bufs[i]->size(), "buffer #" + std::to_string(i)));
  return out;
}

template <typename S>
nlohmann::json pack_nested(const std::vector<std::vector<S>>& vv) {
  auto arr = nlohmann::json::array();
  for (const auto& v : vv) arr.push_back(pack_values(v));
  return arr;
}

// Optimizer slots may be empty (before the first step) or sized like ps.
template <typename S>
std::vector<std::vector<S>> decode_nested(const nlohmann::json& j, const ParamList<S>& ps, const std::string& what) {
  if (!j.is_array()) throw FormatError("checkpoint: " + what + " is not an array");
  if (j.empty()) return {};
  if (j.size() != ps.size()) throw FormatError("checkpoint: " + what + " count mismatch");
  std::vector<std::vector<S>> out;
  for (std::size_t i = 0; i < ps.size(); ++i)
    out.push_back(unpack_values<S>(j[i], ps[i].numel(), what + " #" + std::to_string(i)));
  return out;
}

template <typename S>
nlohmann::json pack_adam(const AdamState<S>& a) {
  return {{"m", pack_nested(a.m)}, {"v", pack_nested(a.v)}, {"steps", a.steps}};
}

template <typename S>
AdamState<S> decode_adam(const nlohmann::json& j, const ParamList<S>& ps, const std::string& what) {
  AdamState<S> a;
  a.m = decode_nested(j.at("m"), ps, what + ".m");
  a.v = decode_nested(j.at("v"), ps, what + ".v");
  a.steps = j.at("steps").get<std::vector<std::size_t>>();
  if (a.m.size() != a.v.size() || a.steps.size() != a.m.size()) throw FormatError("checkpoint: " + what + " is inconsistent");
  return a;
}

inline nlohmann::json checkpoint_header(const std::string& kind) {
  return {{"format", kCheckpointFormat}, {"engine", engine_version()}, {"kind", kind}};
}

// Writes through a temporary file so a crash never leaves a torn checkpoint.
inline void write_cbor(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + tmp);
    const auto bytes = nlohmann::json::to_cbor(j);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline nlohmann::json read_checkpoint(const std::filesystem::path& path, const std::string& kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  nlohmann::json j;
  try {
    j = nlohmann::json::from_cbor(bytes);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + path.string() + " is corrupt: " + e.what());
  }
  if (!j.is_object() || j.value("format", -1) != kCheckpointFormat)
    throw FormatError("checkpoint " + path.string() + " has an unsupported format version");
  if (j.value("engine", "") != engine_version())
    throw FormatError("checkpoint " + path.string() + " was written by engine " + j.value("engine", "?") +
                      ", this is " + engine_version());
  if (j.value("kind", "") != kind)
    throw FormatError("checkpoint " + path.string() + " is a '" + j.value("kind", "?") + "' file, expected '" + kind + "'");
  return j;
}

}  // namespace rdarts
