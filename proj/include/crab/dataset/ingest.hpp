// Adapter for the official per-sample RPM archives: each record is an .npz
// holding 16 panel images of 160x160 (8 context + 8 candidates) plus an
// answer index, with a sibling .xml carrying the rule annotations. Images
// are area-downsampled to the native 64x64; annotated rules are translated
// where the local taxonomy can express them and tagged unmapped otherwise.
#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "crab/dataset/io.hpp"
#include "crab/dataset/sample.hpp"
#include "crab/dataset/verify.hpp"

namespace crab::dataset {

struct IngestStats {
  int found = 0;
  int ingested = 0;
  int skipped = 0;
};

namespace npz {

struct ZipEntry {
  std::string name;
  std::uint16_t method = 0;
  std::uint32_t csize = 0, usize = 0, local_off = 0;
};

inline std::uint16_t rd16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}
inline std::uint32_t rd32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | p[1] << 8 | p[2] << 16 |
         static_cast<std::uint32_t>(p[3]) << 24;
}

// Walks the central directory, which always carries correct sizes even when
// the writer streamed the member data.
inline std::vector<ZipEntry> zip_entries(const std::vector<std::uint8_t>& buf) {
  require<FormatError>(buf.size() >= 22, "zip: file too small");
  const std::uint8_t eocd_sig[4] = {0x50, 0x4b, 0x05, 0x06};
  std::size_t eocd = std::string::npos;
  const std::size_t lo = buf.size() > 22 + 65535 ? buf.size() - 22 - 65535 : 0;
  for (std::size_t i = buf.size() - 22 + 1; i-- > lo;) {
    if (std::equal(eocd_sig, eocd_sig + 4, buf.begin() + static_cast<long>(i))) {
      eocd = i;
      break;
    }
  }
  require<FormatError>(eocd != std::string::npos, "zip: no end-of-directory record");
  const std::uint16_t count = rd16(&buf[eocd + 10]);
  std::size_t at = rd32(&buf[eocd + 16]);

  std::vector<ZipEntry> out;
  for (std::uint16_t i = 0; i < count; ++i) {
    require<FormatError>(at + 46 <= buf.size(), "zip: truncated directory");
    const std::uint8_t cen_sig[4] = {0x50, 0x4b, 0x01, 0x02};
    require<FormatError>(std::equal(cen_sig, cen_sig + 4, buf.begin() + static_cast<long>(at)),
                         "zip: bad directory entry");
    ZipEntry e;
    e.method = rd16(&buf[at + 10]);
    e.csize = rd32(&buf[at + 20]);
    e.usize = rd32(&buf[at + 24]);
    const std::uint16_t name_len = rd16(&buf[at + 28]);
    const std::uint16_t extra_len = rd16(&buf[at + 30]);
    const std::uint16_t comment_len = rd16(&buf[at + 32]);
    e.local_off = rd32(&buf[at + 42]);
    require<FormatError>(at + 46 + name_len <= buf.size(), "zip: truncated name");
    e.name.assign(reinterpret_cast<const char*>(&buf[at + 46]), name_len);
    out.push_back(std::move(e));
    at += 46u + name_len + extra_len + comment_len;
  }
  return out;
}

inline std::vector<std::uint8_t> zip_extract(const std::vector<std::uint8_t>& buf,
                                             const ZipEntry& e) {
  require<FormatError>(e.local_off + 30 <= buf.size(), "zip: bad member offset");
  const std::uint8_t loc_sig[4] = {0x50, 0x4b, 0x03, 0x04};
  require<FormatError>(
      std::equal(loc_sig, loc_sig + 4, buf.begin() + e.local_off),
      "zip: bad member header");
  const std::uint16_t name_len = rd16(&buf[e.local_off + 26]);
  const std::uint16_t extra_len = rd16(&buf[e.local_off + 28]);
  const std::size_t data = e.local_off + 30u + name_len + extra_len;
  require<FormatError>(data + e.csize <= buf.size(), "zip: truncated member data");

  if (e.method == 0) {
    require<FormatError>(e.csize == e.usize, "zip: stored member size mismatch");
    return {buf.begin() + static_cast<long>(data),
            buf.begin() + static_cast<long>(data + e.csize)};
  }
  require<FormatError>(e.method == 8, "zip: unsupported compression method " +
                                          std::to_string(e.method));
  std::vector<std::uint8_t> out(e.usize);
  z_stream zs{};
  require<FormatError>(inflateInit2(&zs, -MAX_WBITS) == Z_OK, "zlib init failed");
  zs.next_in = const_cast<Bytef*>(buf.data() + data);
  zs.avail_in = e.csize;
  zs.next_out = out.data();
  zs.avail_out = e.usize;
  const int rc = inflate(&zs, Z_FINISH);
  inflateEnd(&zs);
  require<FormatError>(rc == Z_STREAM_END && zs.avail_out == 0,
                       "zip: member failed to decompress");
  return out;
}

struct Npy {
  std::string descr;
  bool fortran = false;
  std::vector<long> shape;
  std::vector<std::uint8_t> data;
};

inline Npy parse_npy(const std::vector<std::uint8_t>& b) {
  const std::uint8_t magic[6] = {0x93, 'N', 'U', 'M', 'P', 'Y'};
  require<FormatError>(b.size() >= 10 && std::equal(magic, magic + 6, b.begin()),
                       "npy: bad magic");
  const int major = b[6];
  std::size_t header_len, header_at;
  if (major == 1) {
    header_len = rd16(&b[8]);
    header_at = 10;
  } else {
    require<FormatError>(b.size() >= 12, "npy: truncated header length");
    header_len = rd32(&b[8]);
    header_at = 12;
  }
  require<FormatError>(header_at + header_len <= b.size(), "npy: truncated header");
  const std::string header(reinterpret_cast<const char*>(&b[header_at]), header_len);

  Npy n;
  std::smatch m;
  require<FormatError>(
      std::regex_search(header, m, std::regex("'descr':\\s*'([^']*)'")),
      "npy: missing descr");
  n.descr = m[1];
  require<FormatError>(
      std::regex_search(header, m, std::regex("'fortran_order':\\s*(True|False)")),
      "npy: missing fortran_order");
  n.fortran = m[1] == "True";
  require<FormatError>(
      std::regex_search(header, m, std::regex("'shape':\\s*\\(([^)]*)\\)")),
      "npy: missing shape");
  const std::string dims = m[1];
  const std::regex num("[0-9]+");
  for (auto it = std::sregex_iterator(dims.begin(), dims.end(), num);
       it != std::sregex_iterator(); ++it)
    n.shape.push_back(std::stol(it->str()));

  n.data.assign(b.begin() + static_cast<long>(header_at + header_len), b.end());
  return n;
}

inline std::size_t npy_itemsize(const std::string& descr) {
  if (descr == "|u1" || descr == "|i1" || descr == "|b1") return 1;
  if (descr == "<i2" || descr == "<u2") return 2;
  if (descr == "<i4" || descr == "<u4" || descr == "<f4") return 4;
  if (descr == "<i8" || descr == "<u8" || descr == "<f8") return 8;
  throw FormatError("npy: unsupported dtype " + descr);
}

inline long npy_scalar(const Npy& n) {
  const std::size_t isz = npy_itemsize(n.descr);
  require<FormatError>(n.shape.empty() || (n.shape.size() == 1 && n.shape[0] == 1),
                       "npy: expected a scalar");
  require<FormatError>(n.data.size() >= isz, "npy: scalar data missing");
  long v = 0;
  for (std::size_t i = isz; i-- > 0;) v = v << 8 | n.data[i];
  return v;
}

}  // namespace npz

namespace ingest_detail {

// Exact fractional-area reduction to the native side; a constant input stays
// exactly constant because the per-pixel weights sum to the cell area.
inline Image8 downsample_area(const std::uint8_t* src, int src_side) {
  const double scale = static_cast<double>(src_side) / kImageSide;
  struct Tap {
    int lo;
    std::vector<double> w;
  };
  static thread_local int cached_side = -1;
  static thread_local std::vector<Tap> taps;
  if (cached_side != src_side) {
    taps.assign(kImageSide, {});
    for (int o = 0; o < kImageSide; ++o) {
      const double start = o * scale, end = start + scale;
      Tap t;
      t.lo = static_cast<int>(start);
      for (int i = t.lo; i < src_side && i < end; ++i) {
        const double w = std::min(end, static_cast<double>(i + 1)) -
                         std::max(start, static_cast<double>(i));
        if (w > 1e-12) t.w.push_back(w);
      }
      taps[o] = std::move(t);
    }
    cached_side = src_side;
  }

  // rows reduced first, then columns, rounding once at the end
  std::vector<double> mid(static_cast<std::size_t>(kImageSide) * src_side);
  for (int r = 0; r < kImageSide; ++r) {
    const Tap& t = taps[r];
    for (int c = 0; c < src_side; ++c) {
      double acc = 0;
      for (std::size_t k = 0; k < t.w.size(); ++k)
        acc += t.w[k] * src[(t.lo + static_cast<int>(k)) * src_side + c];
      mid[static_cast<std::size_t>(r) * src_side + c] = acc;
    }
  }
  Image8 out{};
  const double area = scale * scale;
  for (int r = 0; r < kImageSide; ++r)
    for (int c = 0; c < kImageSide; ++c) {
      const Tap& t = taps[c];
      double acc = 0;
      for (std::size_t k = 0; k < t.w.size(); ++k)
        acc += t.w[k] * mid[static_cast<std::size_t>(r) * src_side + t.lo +
                            static_cast<int>(k)];
      const long v = std::lround(acc / area);
      out[static_cast<std::size_t>(r) * kImageSide + c] =
          static_cast<std::uint8_t>(std::clamp(v, 0l, 255l));
    }
  return out;
}

struct XmlRule {
  std::string name;
  std::string attr;
};

// Per-panel entity attribute values; empty when the panel does not carry
// exactly one consistent value (multiple disagreeing entities, none at all).
struct XmlPanel {
  std::optional<int> type, size, color;
};

inline std::optional<int> tag_int(const std::string& tag, const std::string& key) {
  std::smatch m;
  if (std::regex_search(tag, m, std::regex(key + "=\"([0-9]+)\"")))
    return std::stoi(m[1]);
  return std::nullopt;
}

inline std::vector<XmlPanel> parse_panels(const std::string& xml) {
  std::vector<XmlPanel> panels;
  const std::regex panel_re("<Panel[\\s>][\\s\\S]*?</Panel>");
  const std::regex entity_re("<Entity\\b[^>]*>");
  for (auto it = std::sregex_iterator(xml.begin(), xml.end(), panel_re);
       it != std::sregex_iterator(); ++it) {
    const std::string block = it->str();
    XmlPanel p;
    bool first = true, consistent = true;
    for (auto et = std::sregex_iterator(block.begin(), block.end(), entity_re);
         et != std::sregex_iterator(); ++et) {
      const std::string tag = et->str();
      const auto ty = tag_int(tag, "Type"), sz = tag_int(tag, "Size"),
                 co = tag_int(tag, "Color");
      if (first) {
        p.type = ty;
        p.size = sz;
        p.color = co;
        first = false;
      } else if (ty != p.type || sz != p.size || co != p.color) {
        consistent = false;
      }
    }
    if (first || !consistent) p = {};
    panels.push_back(p);
  }
  return panels;
}

inline std::vector<XmlRule> parse_rules(const std::string& xml) {
  std::vector<XmlRule> rules;
  const std::regex rule_re("<Rule\\b[^>]*>");
  for (auto it = std::sregex_iterator(xml.begin(), xml.end(), rule_re);
       it != std::sregex_iterator(); ++it) {
    const std::string tag = it->str();
    std::smatch m;
    XmlRule r;
    if (std::regex_search(tag, m, std::regex("name=\"([^\"]*)\""))) r.name = m[1];
    if (std::regex_search(tag, m, std::regex("attr=\"([^\"]*)\""))) r.attr = m[1];
    if (!r.name.empty() && !r.attr.empty()) rules.push_back(std::move(r));
  }
  return rules;
}

inline std::optional<RuleKind> rule_kind_from_name(const std::string& name) {
  if (name == "Constant") return RuleKind::Constant;
  if (name == "Progression") return RuleKind::Progression;
  if (name == "Arithmetic") return RuleKind::Arithmetic;
  if (name == "Distribute_Three") return RuleKind::DistributeThree;
  return std::nullopt;
}

// Archive panel values are indices into the official constant tables; Type
// reserves index 0 for "none", so shapes start at 1 there and at 0 here.
inline int attr_offset(AttributeRole role) {
  return role == AttributeRole::Type ? 1 : 0;
}

inline std::optional<int> panel_value(const XmlPanel& p, AttributeRole role) {
  switch (role) {
    case AttributeRole::Type: return p.type;
    case AttributeRole::Size: return p.size;
    case AttributeRole::Color: return p.color;
    default: return std::nullopt;
  }
}

// Translates one archive rule onto the local taxonomy. The annotation is
// mapped only if the independent rule checker accepts the translated values,
// so an imported "mapped" tag certifies the same property as a generated one.
inline RuleAnnotation translate_rule(const GeneratorConfig& cfg, const XmlRule& xr,
                                     const std::vector<XmlPanel>& panels,
                                     int answer) {
  RuleAnnotation ann;
  ann.attribute = xr.attr;
  ann.mapped = false;

  const auto spec_it =
      std::find_if(cfg.attributes.begin(), cfg.attributes.end(),
                   [&](const AttributeSpec& a) { return a.name == xr.attr; });
  const auto kind = rule_kind_from_name(xr.name);
  if (spec_it == cfg.attributes.end() || !kind || spec_it->occupancy())
    return ann;

  std::array<int, 9> stored{};
  for (int n = 0; n < 9; ++n) {
    const int xml_index = n < 8 ? n : 8 + answer;
    if (xml_index >= static_cast<int>(panels.size())) return ann;
    const auto v = panel_value(panels[xml_index], spec_it->role);
    if (!v) return ann;
    stored[n] = *v - attr_offset(spec_it->role);
    if (stored[n] < 0 || stored[n] > 255) return ann;
  }

  RuleSpec rule{*kind, 0};
  if (*kind == RuleKind::Progression) rule.parameter = stored[1] - stored[0];
  if (*kind == RuleKind::Arithmetic)
    rule.parameter = stored[2] == stored[0] + stored[1] ? 1 : -1;

  for (int n = 0; n < 9; ++n)
    ann.values[n] = static_cast<std::uint8_t>(stored[n]);
  ann.rule = rule;
  ann.mapped = check_rule(*spec_it, rule, stored).empty();
  if (!ann.mapped) ann.rule = {};
  return ann;
}

}  // namespace ingest_detail

// One record: the .npz image stack plus its annotation document.
inline RpmSample ingest_record(const std::vector<std::uint8_t>& npz_bytes,
                               const std::string& xml_text,
                               const GeneratorConfig& cfg) {
  const auto entries = npz::zip_entries(npz_bytes);
  const npz::ZipEntry* image_entry = nullptr;
  const npz::ZipEntry* target_entry = nullptr;
  for (const auto& e : entries) {
    if (e.name == "image.npy") image_entry = &e;
    if (e.name == "target.npy") target_entry = &e;
  }
  require<FormatError>(image_entry && target_entry,
                       "record lacks image/target arrays");

  const npz::Npy image = npz::parse_npy(npz::zip_extract(npz_bytes, *image_entry));
  require<FormatError>(image.descr == "|u1", "image array is not uint8");
  require<FormatError>(!image.fortran, "image array is not C-ordered");
  require<FormatError>(image.shape.size() == 3 && image.shape[0] == 16 &&
                           image.shape[1] == image.shape[2],
                       "image array is not 16 square panels");
  const int side = static_cast<int>(image.shape[1]);
  require<FormatError>(side >= kImageSide, "panel side below native resolution");
  require<FormatError>(image.data.size() ==
                           16u * static_cast<std::size_t>(side) * side,
                       "image payload size mismatch");

  const npz::Npy target = npz::parse_npy(npz::zip_extract(npz_bytes, *target_entry));
  const long answer = npz::npy_scalar(target);
  require<FormatError>(answer >= 0 && answer < 8, "answer index out of range");

  RpmSample s;
  const std::size_t panel_bytes = static_cast<std::size_t>(side) * side;
  for (int i = 0; i < 8; ++i)
    s.panels[i] = ingest_detail::downsample_area(
        image.data.data() + static_cast<std::size_t>(i) * panel_bytes, side);
  s.candidates.resize(8);
  for (int i = 0; i < 8; ++i)
    s.candidates[static_cast<std::size_t>(i)] = ingest_detail::downsample_area(
        image.data.data() + static_cast<std::size_t>(8 + i) * panel_bytes, side);
  s.answer_index = static_cast<std::uint8_t>(answer);
  s.panels[8] = s.candidates[s.answer_index];

  const auto panels = ingest_detail::parse_panels(xml_text);
  for (const auto& xr : ingest_detail::parse_rules(xml_text))
    s.annotations.push_back(ingest_detail::translate_rule(
        cfg, xr, panels, static_cast<int>(answer)));
  return s;
}

// Scans `archive_root` recursively for .npz records with sibling .xml
// annotations. Damaged or incomplete records are skipped with a warning;
// an archive yielding nothing at all is an error.
inline Dataset ingest_official(const std::string& archive_root,
                               const std::string& config_name,
                               IngestStats* stats = nullptr) {
  namespace fs = std::filesystem;
  const GeneratorConfig cfg = generator_config(config_name);
  require<IngestError>(fs::is_directory(archive_root),
                       "archive root is not a directory: " + archive_root);

  std::vector<fs::path> records;
  for (const auto& entry : fs::recursive_directory_iterator(archive_root))
    if (entry.is_regular_file() && entry.path().extension() == ".npz")
      records.push_back(entry.path());
  std::sort(records.begin(), records.end());

  IngestStats st;
  st.found = static_cast<int>(records.size());
  Dataset ds;
  ds.meta.config_name = config_name;
  ds.meta.num_candidates = 8;
  for (const auto& rec : records) {
    fs::path xml_path = rec;
    xml_path.replace_extension(".xml");
    try {
      require<FormatError>(fs::is_regular_file(xml_path),
                           "missing annotation " + xml_path.string());
      const auto bytes = read_file_bytes(rec.string());
      const auto xml_bytes = read_file_bytes(xml_path.string());
      const std::string xml(xml_bytes.begin(), xml_bytes.end());
      ds.samples.push_back(ingest_record(bytes, xml, cfg));
      ++st.ingested;
    } catch (const std::exception& e) {
      std::cerr << "ingest: skipping " << rec.string() << ": " << e.what() << "\n";
      ++st.skipped;
    }
  }
  require<IngestError>(!ds.samples.empty(),
                       "no usable records under " + archive_root);
  if (stats) *stats = st;
  return ds;
}

}  // namespace crab::dataset
