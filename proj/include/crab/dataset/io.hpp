// Dataset wire format and manifest sidecar.
//
// Layout (little-endian):
//   magic "CRAB" | u16 version=1 | u16 image_side | u32 num_samples |
//   u8 num_candidates | str config_name
//   per sample:
//     9 panels (side*side bytes each) | num_candidates candidate images |
//     u8 answer_index | u8 num_attributes
//     per attribute: str name | u8 rule_kind (255 = unmapped) | i8 parameter |
//                    9 value bytes
// Strings are u16 length-prefixed UTF-8.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "crab/dataset/sample.hpp"

namespace crab::dataset {

namespace wire {

constexpr char kMagic[4] = {'C', 'R', 'A', 'B'};
constexpr std::uint16_t kVersion = 1;
constexpr std::uint8_t kUnmappedRule = 255;

inline void put_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(v & 0xff);
  b.push_back(v >> 8 & 0xff);
}
inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(v >> (8 * i) & 0xff);
}
inline void put_str(std::vector<std::uint8_t>& b, const std::string& s) {
  require<FormatError>(s.size() <= 0xffff, "string too long for wire format");
  put_u16(b, static_cast<std::uint16_t>(s.size()));
  b.insert(b.end(), s.begin(), s.end());
}

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint16_t u16() {
    const std::uint8_t* p = take(2);
    return static_cast<std::uint16_t>(p[0] | p[1] << 8);
  }
  std::uint32_t u32() {
    const std::uint8_t* p = take(4);
    return static_cast<std::uint32_t>(p[0]) | p[1] << 8 | p[2] << 16 |
           static_cast<std::uint32_t>(p[3]) << 24;
  }
  std::string str() {
    const std::uint16_t n = u16();
    const std::uint8_t* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  void bytes(std::uint8_t* dst, std::size_t n) { std::memcpy(dst, take(n), n); }
  std::size_t offset() const { return off_; }
  bool at_end() const { return off_ == size_; }

 private:
  const std::uint8_t* take(std::size_t n) {
    require<FormatError>(off_ + n <= size_,
                         "truncated dataset at byte " + std::to_string(off_));
    const std::uint8_t* p = data_ + off_;
    off_ += n;
    return p;
  }
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t off_ = 0;
};

}  // namespace wire

inline std::vector<std::uint8_t> serialize_dataset(const Dataset& ds) {
  std::vector<std::uint8_t> b;
  b.insert(b.end(), wire::kMagic, wire::kMagic + 4);
  wire::put_u16(b, wire::kVersion);
  wire::put_u16(b, static_cast<std::uint16_t>(ds.meta.image_side));
  wire::put_u32(b, static_cast<std::uint32_t>(ds.samples.size()));
  b.push_back(static_cast<std::uint8_t>(ds.meta.num_candidates));
  wire::put_str(b, ds.meta.config_name);

  for (const auto& s : ds.samples) {
    require<FormatError>(
        static_cast<int>(s.candidates.size()) == ds.meta.num_candidates,
        "sample candidate count differs from header");
    for (const auto& p : s.panels) b.insert(b.end(), p.begin(), p.end());
    for (const auto& c : s.candidates) b.insert(b.end(), c.begin(), c.end());
    b.push_back(s.answer_index);
    require<FormatError>(s.annotations.size() <= 255, "too many annotations");
    b.push_back(static_cast<std::uint8_t>(s.annotations.size()));
    for (const auto& ann : s.annotations) {
      wire::put_str(b, ann.attribute);
      b.push_back(ann.mapped ? static_cast<std::uint8_t>(ann.rule.kind)
                             : wire::kUnmappedRule);
      b.push_back(static_cast<std::uint8_t>(static_cast<std::int8_t>(ann.rule.parameter)));
      for (int i = 0; i < 9; ++i) b.push_back(ann.values[i]);
    }
  }
  return b;
}

inline Dataset parse_dataset(const std::uint8_t* data, std::size_t size) {
  wire::Reader r(data, size);
  char magic[4];
  r.bytes(reinterpret_cast<std::uint8_t*>(magic), 4);
  require<FormatError>(std::memcmp(magic, wire::kMagic, 4) == 0,
                       "bad magic, not a crab dataset");
  const std::uint16_t version = r.u16();
  require<FormatError>(version == wire::kVersion,
                       "unsupported dataset version " + std::to_string(version));
  Dataset ds;
  ds.meta.image_side = r.u16();
  require<FormatError>(ds.meta.image_side == kImageSide,
                       "unsupported image side " + std::to_string(ds.meta.image_side));
  const std::uint32_t n = r.u32();
  ds.meta.num_candidates = r.u8();
  ds.meta.config_name = r.str();

  ds.samples.resize(n);
  for (auto& s : ds.samples) {
    for (auto& p : s.panels) r.bytes(p.data(), kImagePixels);
    s.candidates.resize(ds.meta.num_candidates);
    for (auto& c : s.candidates) r.bytes(c.data(), kImagePixels);
    s.answer_index = r.u8();
    require<FormatError>(s.answer_index < ds.meta.num_candidates,
                         "answer index out of range at byte " +
                             std::to_string(r.offset()));
    const int num_attrs = r.u8();
    s.annotations.resize(num_attrs);
    for (auto& ann : s.annotations) {
      ann.attribute = r.str();
      const std::uint8_t kind = r.u8();
      if (kind == wire::kUnmappedRule) {
        ann.mapped = false;
        ann.rule = {};
      } else {
        require<FormatError>(kind <= 3, "bad rule kind at byte " +
                                            std::to_string(r.offset()));
        ann.mapped = true;
        ann.rule.kind = static_cast<RuleKind>(kind);
      }
      ann.rule.parameter = static_cast<std::int8_t>(r.u8());
      for (int i = 0; i < 9; ++i) ann.values[i] = r.u8();
    }
  }
  require<FormatError>(r.at_end(), "trailing bytes after sample " + std::to_string(n));
  return ds;
}

inline void write_file_bytes(const std::string& path,
                             const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  require<FormatError>(f.good(), "cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  require<FormatError>(f.good(), "short write to " + path);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  require<FormatError>(f.good(), "cannot open " + path);
  const auto size = static_cast<std::size_t>(f.tellg());
  f.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  require<FormatError>(f.good(), "short read from " + path);
  return bytes;
}

inline void write_dataset(const Dataset& ds, const std::string& path) {
  write_file_bytes(path, serialize_dataset(ds));
}

inline Dataset read_dataset(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return parse_dataset(bytes.data(), bytes.size());
}

// Manifest sidecar: "key=value" lines describing provenance and integrity.
using Manifest = std::vector<std::pair<std::string, std::string>>;

inline void write_manifest(const std::string& dataset_path, const Manifest& m) {
  std::ofstream f(dataset_path + ".manifest");
  require<FormatError>(f.good(), "cannot open manifest for writing");
  for (const auto& [k, v] : m) f << k << "=" << v << "\n";
}

inline Manifest read_manifest(const std::string& dataset_path) {
  std::ifstream f(dataset_path + ".manifest");
  require<FormatError>(f.good(), "cannot open manifest " + dataset_path + ".manifest");
  Manifest m;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require<FormatError>(eq != std::string::npos, "manifest line without '='");
    m.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  return m;
}

inline std::string manifest_value(const Manifest& m, const std::string& key) {
  for (const auto& [k, v] : m)
    if (k == key) return v;
  throw FormatError("manifest key missing: " + key);
}

}  // namespace crab::dataset
