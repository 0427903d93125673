#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "eqlm/detector.hpp"
#include "eqlm/errors.hpp"
#include "eqlm/layers.hpp"

namespace eqlm {

namespace fs = std::filesystem;
using json = nlohmann::json;

// File layout:
//   "EQLM-CKPT\n"
//   u64 manifest length, manifest (JSON, UTF-8)
//   payload: float32 arrays in manifest order
//   u64 payload length, u64 FNV-1a digest of manifest + payload, "EQLM-END\n"
// Integers and floats are little-endian.
inline constexpr std::string_view kCheckpointMagic = "EQLM-CKPT\n";
inline constexpr std::string_view kCheckpointEnd = "EQLM-END\n";
inline constexpr int kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;
};

struct Checkpoint {
  json manifest = json::object();
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
  NamedArray& put(NamedArray a) {
    for (auto& b : arrays)
      if (b.name == a.name) return b = std::move(a);
    return arrays.emplace_back(std::move(a));
  }
};

class Fnv1a64 {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) h_ = (h_ ^ p[i]) * 0x100000001b3ull;
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ull;
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

inline float get_f32(const char* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= std::uint32_t(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(u);
}

inline std::size_t shape_count(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

}  // namespace detail

// Serialized bytes; the manifest gains "format", "version" and "arrays".
inline std::string encode_checkpoint(const Checkpoint& ck) {
  json m = ck.manifest;
  m["format"] = "eqlm-checkpoint";
  m["version"] = kCheckpointVersion;
  m["arrays"] = json::array();
  std::string payload;
  for (const auto& a : ck.arrays) {
    if (detail::shape_count(a.shape) != a.values.size())
      throw UsageError("checkpoint array '" + a.name + "' size does not match its shape");
    m["arrays"].push_back({{"name", a.name}, {"shape", a.shape}});
    for (float v : a.values) detail::put_f32(payload, v);
  }
  const std::string manifest = m.dump(1);
  Fnv1a64 digest;
  digest.update(manifest.data(), manifest.size());
  digest.update(payload.data(), payload.size());
  std::string out(kCheckpointMagic);
  detail::put_u64(out, manifest.size());
  out += manifest;
  out += payload;
  detail::put_u64(out, payload.size());
  detail::put_u64(out, digest.value());
  out += kCheckpointEnd;
  return out;
}

inline json parse_manifest(const std::string& bytes, std::size_t& offset, const std::string& where) {
  if (bytes.compare(0, kCheckpointMagic.size(), kCheckpointMagic) != 0)
    throw FormatError(where + ": not a checkpoint file");
  std::size_t pos = kCheckpointMagic.size();
  if (bytes.size() < pos + 8) throw FormatError(where + ": truncated checkpoint header");
  const std::uint64_t len = detail::get_u64(bytes.data() + pos);
  pos += 8;
  if (bytes.size() - pos < len) throw FormatError(where + ": truncated checkpoint manifest");
  json m;
  try {
    m = json::parse(bytes.begin() + pos, bytes.begin() + pos + len);
  } catch (const json::exception& e) {
    throw FormatError(where + ": bad manifest: " + e.what());
  }
  if (m.value("format", "") != "eqlm-checkpoint") throw FormatError(where + ": not a checkpoint manifest");
  if (m.value("version", -1) != kCheckpointVersion)
    throw FormatError(where + ": checkpoint version " + m.value("version", json(-1)).dump() + ", expected " +
                      std::to_string(kCheckpointVersion));
  offset = pos + len;
  return m;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& where = "checkpoint") {
  std::size_t pos = 0;
  Checkpoint ck;
  ck.manifest = parse_manifest(bytes, pos, where);
  const std::size_t manifest_end = pos;
  const std::size_t footer = 16 + kCheckpointEnd.size();
  if (bytes.size() < pos + footer ||
      bytes.compare(bytes.size() - kCheckpointEnd.size(), kCheckpointEnd.size(), kCheckpointEnd) != 0)
    throw FormatError(where + ": truncated checkpoint (missing end marker)");
  const char* f = bytes.data() + bytes.size() - footer;
  const std::uint64_t payload_len = detail::get_u64(f), stored = detail::get_u64(f + 8);
  if (payload_len != bytes.size() - footer - manifest_end)
    throw FormatError(where + ": checkpoint payload length mismatch");
  Fnv1a64 digest;
  digest.update(bytes.data() + kCheckpointMagic.size() + 8, manifest_end - kCheckpointMagic.size() - 8);
  digest.update(bytes.data() + manifest_end, payload_len);
  if (digest.value() != stored) throw FormatError(where + ": checkpoint digest mismatch");
  for (const auto& e : ck.manifest.at("arrays")) {
    NamedArray a{e.at("name").get<std::string>(), e.at("shape").get<std::vector<int>>(), {}};
    const std::size_t n = detail::shape_count(a.shape);
    if ((pos - manifest_end) + 4 * n > payload_len) throw FormatError(where + ": array '" + a.name + "' overruns payload");
    a.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) a.values[i] = detail::get_f32(bytes.data() + pos + 4 * i);
    pos += 4 * n;
    ck.arrays.push_back(std::move(a));
  }
  if (pos != manifest_end + payload_len) throw FormatError(where + ": unread bytes in checkpoint payload");
  ck.manifest.erase("arrays");
  return ck;
}

inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw FormatError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline void save_checkpoint(const Checkpoint& ck, const fs::path& path) {
  write_file_atomic(path, encode_checkpoint(ck));
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  return decode_checkpoint(read_text_file(path), path.string());
}

// Reads only the header and manifest; array payloads are not touched.
inline json read_checkpoint_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string head(kCheckpointMagic.size() + 8, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head.size()));
  if (in.gcount() != static_cast<std::streamsize>(head.size()))
    throw FormatError(path.string() + ": truncated checkpoint header");
  const std::uint64_t len = detail::get_u64(head.data() + kCheckpointMagic.size());
  if (len > (1ull << 30)) throw FormatError(path.string() + ": implausible manifest length");
  std::string manifest(len, '\0');
  in.read(manifest.data(), static_cast<std::streamsize>(len));
  std::size_t pos = 0;
  json m = parse_manifest(head + manifest.substr(0, static_cast<std::size_t>(in.gcount())), pos, path.string());
  m.erase("arrays");
  return m;
}

// ---- detector <-> checkpoint ---------------------------------------------

inline json layers_to_json(const std::vector<LayerSpec>& layers) {
  json out = json::array();
  for (const auto& l : layers) {
    json j{{"kind", to_string(l.kind)}};
    switch (l.kind) {
      case LayerKind::conv:
        j.update({{"kernel", l.kernel}, {"in", l.in_channels}, {"out", l.out_channels}, {"pad", l.padding},
                  {"bias", l.bias}});
        break;
      case LayerKind::batchnorm:
        j.update({{"channels", l.out_channels}, {"momentum", l.momentum}, {"eps", l.eps}});
        break;
      case LayerKind::maxpool: j.update({{"window", l.window}, {"stride", l.stride}}); break;
      default: break;
    }
    out.push_back(j);
  }
  return out;
}

inline void put_detector(Checkpoint& ck, const Detector<float>& det) {
  ck.manifest["landmarks"] = det.landmarks();
  ck.manifest["input_channels"] = det.in_channels();
  ck.manifest["architecture"] = layers_to_json(det.network().layers());
  for (const auto& p : det.network().params()) {
    ck.put({p.name, p.shape, p.value});
  }
}

inline Detector<float> get_detector(const Checkpoint& ck) {
  const int k = ck.manifest.at("landmarks").get<int>();
  const int c = ck.manifest.at("input_channels").get<int>();
  Detector<float> det(k, c);
  if (ck.manifest.at("architecture") != layers_to_json(det.network().layers()))
    throw FormatError("checkpoint architecture does not match the detector layout");
  for (auto& p : det.network().params()) {
    const NamedArray* a = ck.find(p.name);
    if (!a) throw FormatError("checkpoint lacks array '" + p.name + "'");
    if (a->values.size() != p.value.size())
      throw FormatError("checkpoint array '" + p.name + "' has the wrong size");
    p.value = a->values;
  }
  return det;
}

// Digest of all detector parameters (values only, in layer order).
inline std::uint64_t parameter_digest(const Detector<float>& det) {
  Fnv1a64 d;
  for (const auto& p : det.network().params()) d.update(p.value.data(), p.value.size() * sizeof(float));
  return d.value();
}

}  // namespace eqlm
