// Checkpoint file layout (little-endian):
//   magic "CRCK" | u16 version=1 | str config_text | u32 epochs_done |
//   4 x u64 rng state |
//   u32 param_count, each: str name | u32 rows | u32 cols | u8 trainable |
//     rows*cols f64 (column-major)
//   u8 has_opt_state, if 1: u32 count, each: u32 rows | u32 cols | f64 data
//   u8 priors_active | u32 prior_count, each:
//     u32 K | u32 d | K f64 weights | K*d f64 means (row-major) |
//     K * d*d f64 cholesky factors (row-major) |
//     u32 iterations | u32 trace_len | f64 trace
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <string>
#include <vector>

#include "crab/dataset/io.hpp"
#include "crab/train.hpp"

namespace crab::ckpt {

constexpr char kMagic[4] = {'C', 'R', 'C', 'K'};
constexpr std::uint16_t kVersion = 1;

namespace detail {

using dataset::wire::put_u16;
using dataset::wire::put_u32;
using dataset::wire::put_str;

inline void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(v >> (8 * i) & 0xff);
}

inline void put_f64(std::vector<std::uint8_t>& b, double v) {
  put_u64(b, std::bit_cast<std::uint64_t>(v));
}

inline std::uint64_t get_u64(dataset::wire::Reader& r) {
  const std::uint64_t lo = r.u32();
  const std::uint64_t hi = r.u32();
  return lo | hi << 32;
}

inline double get_f64(dataset::wire::Reader& r) {
  return std::bit_cast<double>(get_u64(r));
}

inline void put_matrix(std::vector<std::uint8_t>& b, const MatrixD& m) {
  put_u32(b, static_cast<std::uint32_t>(m.rows()));
  put_u32(b, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) put_f64(b, m.data()[i]);
}

inline MatrixD get_matrix(dataset::wire::Reader& r) {
  const auto rows = static_cast<Eigen::Index>(r.u32());
  const auto cols = static_cast<Eigen::Index>(r.u32());
  MatrixD m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = get_f64(r);
  return m;
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> serialize_session(const train::Session<T>& s) {
  using namespace detail;
  std::vector<std::uint8_t> b;
  b.insert(b.end(), kMagic, kMagic + 4);
  put_u16(b, kVersion);
  put_str(b, config_to_text(s.cfg));
  put_u32(b, static_cast<std::uint32_t>(s.epochs_done));
  for (std::uint64_t w : s.rng_state) put_u64(b, w);

  put_u32(b, static_cast<std::uint32_t>(s.model.store.size()));
  for (std::size_t i = 0; i < s.model.store.size(); ++i) {
    const auto& p = s.model.store[i];
    put_str(b, p.name);
    put_u32(b, static_cast<std::uint32_t>(p.value.rows()));
    put_u32(b, static_cast<std::uint32_t>(p.value.cols()));
    b.push_back(p.trainable ? 1 : 0);
    for (Eigen::Index k = 0; k < p.value.size(); ++k)
      put_f64(b, static_cast<double>(p.value.data()[k]));
  }

  const auto& sq = s.opt.state();
  b.push_back(sq.empty() ? 0 : 1);
  if (!sq.empty()) {
    put_u32(b, static_cast<std::uint32_t>(sq.size()));
    for (const auto& m : sq) {
      put_u32(b, static_cast<std::uint32_t>(m.rows()));
      put_u32(b, static_cast<std::uint32_t>(m.cols()));
      for (Eigen::Index k = 0; k < m.size(); ++k)
        put_f64(b, static_cast<double>(m.data()[k]));
    }
  }

  b.push_back(s.model.priors.active ? 1 : 0);
  put_u32(b, static_cast<std::uint32_t>(s.model.priors.per_concept.size()));
  for (std::size_t i = 0; i < s.model.priors.per_concept.size(); ++i) {
    const Gmm& g = s.model.priors.per_concept[i];
    put_u32(b, static_cast<std::uint32_t>(g.components()));
    put_u32(b, static_cast<std::uint32_t>(g.dim()));
    for (int k = 0; k < g.components(); ++k) put_f64(b, g.weights[k]);
    for (int k = 0; k < g.components(); ++k)
      for (int d = 0; d < g.dim(); ++d) put_f64(b, g.means(k, d));
    for (int k = 0; k < g.components(); ++k)
      for (int r = 0; r < g.dim(); ++r)
        for (int c = 0; c < g.dim(); ++c) put_f64(b, g.chol[static_cast<std::size_t>(k)](r, c));
    const GmmFitInfo info = i < s.model.priors.diagnostics.size()
                                ? s.model.priors.diagnostics[i]
                                : GmmFitInfo{};
    put_u32(b, static_cast<std::uint32_t>(info.iterations));
    put_u32(b, static_cast<std::uint32_t>(info.loglik_trace.size()));
    for (double v : info.loglik_trace) put_f64(b, v);
  }
  return b;
}

template <typename T>
train::Session<T> parse_session(const std::vector<std::uint8_t>& bytes) {
  using namespace detail;
  dataset::wire::Reader r(bytes.data(), bytes.size());
  char magic[4];
  r.bytes(reinterpret_cast<std::uint8_t*>(magic), 4);
  require<FormatError>(std::equal(magic, magic + 4, kMagic), "not a checkpoint file");
  require<FormatError>(r.u16() == kVersion, "unsupported checkpoint version");

  const RunConfig cfg = config_from_text(r.str());
  validate(cfg);
  train::Session<T> s(cfg);
  s.epochs_done = static_cast<int>(r.u32());
  for (auto& w : s.rng_state) w = get_u64(r);

  const std::uint32_t n_params = r.u32();
  require<FormatError>(n_params == s.model.store.size(),
                       "checkpoint parameter count does not match architecture");
  for (std::size_t i = 0; i < s.model.store.size(); ++i) {
    auto& p = s.model.store[i];
    const std::string name = r.str();
    const auto rows = static_cast<Eigen::Index>(r.u32());
    const auto cols = static_cast<Eigen::Index>(r.u32());
    const bool trainable = r.u8() != 0;
    require<FormatError>(name == p.name && rows == p.value.rows() &&
                             cols == p.value.cols() && trainable == p.trainable,
                         "checkpoint parameter mismatch at " + p.name);
    for (Eigen::Index k = 0; k < p.value.size(); ++k)
      p.value.data()[k] = static_cast<T>(get_f64(r));
  }

  if (r.u8()) {
    const std::uint32_t n = r.u32();
    require<FormatError>(n == s.model.store.size(),
                         "checkpoint optimizer state count mismatch");
    auto& sq = s.opt.state();
    sq.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
      const auto rows = static_cast<Eigen::Index>(r.u32());
      const auto cols = static_cast<Eigen::Index>(r.u32());
      require<FormatError>(rows == s.model.store[i].value.rows() &&
                               cols == s.model.store[i].value.cols(),
                           "checkpoint optimizer state shape mismatch");
      sq[i].resize(rows, cols);
      for (Eigen::Index k = 0; k < sq[i].size(); ++k)
        sq[i].data()[k] = static_cast<T>(get_f64(r));
    }
  }

  s.model.priors.active = r.u8() != 0;
  const std::uint32_t n_priors = r.u32();
  s.model.priors.per_concept.assign(n_priors, Gmm{});
  s.model.priors.diagnostics.assign(n_priors, GmmFitInfo{});
  for (std::uint32_t i = 0; i < n_priors; ++i) {
    const int K = static_cast<int>(r.u32());
    const int d = static_cast<int>(r.u32());
    Gmm g;
    g.weights.resize(K);
    for (int k = 0; k < K; ++k) g.weights[k] = get_f64(r);
    g.means.resize(K, d);
    for (int k = 0; k < K; ++k)
      for (int c = 0; c < d; ++c) g.means(k, c) = get_f64(r);
    for (int k = 0; k < K; ++k) {
      MatrixD L(d, d);
      for (int rr = 0; rr < d; ++rr)
        for (int cc = 0; cc < d; ++cc) L(rr, cc) = get_f64(r);
      g.chol.push_back(L);
    }
    s.model.priors.per_concept[i] = std::move(g);
    auto& info = s.model.priors.diagnostics[i];
    info.iterations = static_cast<int>(r.u32());
    const std::uint32_t tlen = r.u32();
    for (std::uint32_t t = 0; t < tlen; ++t)
      info.loglik_trace.push_back(get_f64(r));
  }
  require<FormatError>(r.at_end(), "trailing bytes in checkpoint");
  return s;
}

template <typename T>
void save_session(const std::string& path, const train::Session<T>& s) {
  dataset::write_file_bytes(path, serialize_session(s));
}

template <typename T>
train::Session<T> load_session(const std::string& path) {
  return parse_session<T>(dataset::read_file_bytes(path));
}

}  // namespace crab::ckpt
