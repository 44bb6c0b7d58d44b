// Concept-specific rule parser and target predictor.
//
// A puzzle batch keeps its nine panels as consecutive columns: column
// b*9 + n holds panel n of sample b. Target positions are bitmasks over
// panels 0..8 (bit n set = panel n is generated, not observed).
//
// The parser embeds all 81 ordered panel pairs (including self-pairs) with
// f_pair, zeroes the embeddings of pairs that touch a target position via a
// 0/1 gate, concatenates the 81 embeddings scaled by 1/81 and maps them with
// f_relation to the mean and std of the rule latent. The inference branch
// (no targets) and the generative branch (targets gated out) share every
// weight, which is what makes the context terms of the two branches cancel.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "crab/config.hpp"
#include "crab/nn/layers.hpp"

namespace crab::model {

using nn::Conv2d;
using nn::ConvSpec;
using nn::Linear;
using nn::ParamStore;

using TargetMask = std::uint16_t;  // bits 0..8

constexpr int kPairCount = kPanels * kPanels;  // 81

inline void validate_masks(const std::vector<TargetMask>& masks, bool need_targets) {
  for (TargetMask m : masks) {
    require<MaskError>((m & ~0x1ffu) == 0, "target mask uses bits beyond panel 8");
    if (need_targets) {
      require<MaskError>(m != 0, "target mask is empty");
      require<MaskError>(m != 0x1ff, "target mask leaves no context panels");
    }
  }
}

// z_m: d_z x (9B) -> pair inputs 2d_z x (81B); column b*81 + i*9 + j is
// (z_i, z_j) of sample b.
template <typename T>
Matrix<T> make_pair_input(const Matrix<T>& zm, int B) {
  const int dz = static_cast<int>(zm.rows());
  Matrix<T> pin(2 * dz, static_cast<Eigen::Index>(kPairCount) * B);
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < kPanels; ++i)
      for (int j = 0; j < kPanels; ++j) {
        const Eigen::Index col = static_cast<Eigen::Index>(b) * kPairCount + i * kPanels + j;
        pin.col(col).head(dz) = zm.col(static_cast<Eigen::Index>(b) * kPanels + i);
        pin.col(col).tail(dz) = zm.col(static_cast<Eigen::Index>(b) * kPanels + j);
      }
  return pin;
}

// Adjoint of make_pair_input: accumulates pair-input gradients back onto the
// per-panel concept gradients.
template <typename T>
void scatter_pair_grad(const Matrix<T>& dpin, int B, Matrix<T>& dzm) {
  const int dz = static_cast<int>(dzm.rows());
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < kPanels; ++i)
      for (int j = 0; j < kPanels; ++j) {
        const Eigen::Index col = static_cast<Eigen::Index>(b) * kPairCount + i * kPanels + j;
        dzm.col(static_cast<Eigen::Index>(b) * kPanels + i) += dpin.col(col).head(dz);
        dzm.col(static_cast<Eigen::Index>(b) * kPanels + j) += dpin.col(col).tail(dz);
      }
}

// Gate vector over pair columns: 0 when the pair touches a target panel.
inline std::vector<std::uint8_t> pair_gates(const std::vector<TargetMask>& masks) {
  std::vector<std::uint8_t> g(masks.size() * kPairCount, 1);
  for (std::size_t b = 0; b < masks.size(); ++b)
    for (int i = 0; i < kPanels; ++i)
      for (int j = 0; j < kPanels; ++j)
        if (masks[b] >> i & 1 || masks[b] >> j & 1)
          g[b * kPairCount + i * kPanels + j] = 0;
  return g;
}

template <typename T>
struct RuleParser {
  std::array<Linear<T>, 3> pair;  // 2d_z -> 512 -> 512 -> 64
  std::array<Linear<T>, 4> rel;   // 81*64 -> 2048 -> 1024 -> 512 -> 2d_r
  int dz = 0, dr = 0, pair_dim = 0;

  struct PairCache {
    std::array<typename Linear<T>::Cache, 3> lin;
    std::array<Matrix<T>, 2> act;
  };
  struct RelCache {
    std::array<typename Linear<T>::Cache, 4> lin;
    std::array<Matrix<T>, 3> act;
    std::vector<std::uint8_t> gate;
  };

  void build(ParamStore<T>& store, const std::string& prefix, const RunConfig& cfg,
             SeededRng& rng) {
    dz = cfg.concept_dim;
    dr = cfg.rule_dim;
    pair_dim = cfg.scaled(64);
    const int p512 = cfg.scaled(512);
    pair[0].build(store, prefix + ".pair1", 2 * dz, p512, rng);
    pair[1].build(store, prefix + ".pair2", p512, p512, rng);
    pair[2].build(store, prefix + ".pair3", p512, pair_dim, rng);
    rel[0].build(store, prefix + ".rel1", kPairCount * pair_dim, cfg.scaled(2048), rng);
    rel[1].build(store, prefix + ".rel2", cfg.scaled(2048), cfg.scaled(1024), rng);
    rel[2].build(store, prefix + ".rel3", cfg.scaled(1024), cfg.scaled(512), rng);
    rel[3].build(store, prefix + ".rel4", cfg.scaled(512), 2 * dr, rng);
  }

  // pin: 2d_z x (81B) -> embeddings pair_dim x (81B)
  Matrix<T> pair_forward(const Matrix<T>& pin, PairCache* c) const {
    Matrix<T> h = pair[0].forward(pin, c ? &c->lin[0] : nullptr);
    h = nn::relu_forward(h);
    if (c) c->act[0] = h;
    h = pair[1].forward(h, c ? &c->lin[1] : nullptr);
    h = nn::relu_forward(h);
    if (c) c->act[1] = h;
    return pair[2].forward(h, c ? &c->lin[2] : nullptr);
  }

  Matrix<T> pair_backward(const Matrix<T>& dE, PairCache& c) {
    Matrix<T> d = pair[2].backward(dE, c.lin[2]);
    d = nn::relu_backward(d, c.act[1]);
    d = pair[1].backward(d, c.lin[1]);
    d = nn::relu_backward(d, c.act[0]);
    return pair[0].backward(d, c.lin[0]);
  }

  // E: pair_dim x (81B), gate: 81B entries -> raw head output 2d_r x B
  // (first d_r rows the mean, last d_r rows the pre-softplus std).
  Matrix<T> relation_forward(const Matrix<T>& E, const std::vector<std::uint8_t>& gate,
                             int B, RelCache* c) const {
    require<ShapeError>(static_cast<Eigen::Index>(gate.size()) == E.cols() &&
                            E.cols() == static_cast<Eigen::Index>(kPairCount) * B,
                        "relation_forward: gate/embedding size mismatch");
    const T scale = T(1) / T(kPairCount);
    Matrix<T> f = Matrix<T>::Zero(static_cast<Eigen::Index>(kPairCount) * pair_dim, B);
    for (int b = 0; b < B; ++b)
      for (int p = 0; p < kPairCount; ++p) {
        if (!gate[b * kPairCount + p]) continue;
        f.col(b).segment(static_cast<Eigen::Index>(p) * pair_dim, pair_dim) =
            E.col(static_cast<Eigen::Index>(b) * kPairCount + p) * scale;
      }
    if (c) c->gate = gate;
    Matrix<T> h = rel[0].forward(f, c ? &c->lin[0] : nullptr);
    h = nn::relu_forward(h);
    if (c) c->act[0] = h;
    h = rel[1].forward(h, c ? &c->lin[1] : nullptr);
    h = nn::relu_forward(h);
    if (c) c->act[1] = h;
    h = rel[2].forward(h, c ? &c->lin[2] : nullptr);
    h = nn::relu_forward(h);
    if (c) c->act[2] = h;
    return rel[3].forward(h, c ? &c->lin[3] : nullptr);
  }

  // Returns the gradient w.r.t. the (ungated) pair embeddings E.
  Matrix<T> relation_backward(const Matrix<T>& dout, const RelCache& c, int B) {
    Matrix<T> d = rel[3].backward(dout, const_cast<typename Linear<T>::Cache&>(c.lin[3]));
    d = nn::relu_backward(d, c.act[2]);
    d = rel[2].backward(d, const_cast<typename Linear<T>::Cache&>(c.lin[2]));
    d = nn::relu_backward(d, c.act[1]);
    d = rel[1].backward(d, const_cast<typename Linear<T>::Cache&>(c.lin[1]));
    d = nn::relu_backward(d, c.act[0]);
    Matrix<T> df = rel[0].backward(d, const_cast<typename Linear<T>::Cache&>(c.lin[0]));
    const T scale = T(1) / T(kPairCount);
    Matrix<T> dE = Matrix<T>::Zero(pair_dim, static_cast<Eigen::Index>(kPairCount) * B);
    for (int b = 0; b < B; ++b)
      for (int p = 0; p < kPairCount; ++p) {
        if (!c.gate[b * kPairCount + p]) continue;
        dE.col(static_cast<Eigen::Index>(b) * kPairCount + p) =
            df.col(b).segment(static_cast<Eigen::Index>(p) * pair_dim, pair_dim) * scale;
      }
    return dE;
  }
};

// Builds the predictor input grid: for each sample the 3x3 panel grid with
// d_z concept channels (zeroed at target cells) plus d_r rule channels
// (broadcast to every cell). Feature index (channel, cell) -> channel*9+cell.
template <typename T>
Matrix<T> build_target_input(const Matrix<T>& zm, const Matrix<T>& r,
                             const std::vector<TargetMask>& masks) {
  const int dz = static_cast<int>(zm.rows());
  const int dr = static_cast<int>(r.rows());
  const int B = static_cast<int>(r.cols());
  require<ShapeError>(zm.cols() == static_cast<Eigen::Index>(B) * kPanels &&
                          static_cast<int>(masks.size()) == B,
                      "build_target_input: shape mismatch");
  Matrix<T> g = Matrix<T>::Zero(static_cast<Eigen::Index>(dz + dr) * kPanels, B);
  for (int b = 0; b < B; ++b) {
    for (int n = 0; n < kPanels; ++n) {
      if (!(masks[b] >> n & 1))
        for (int d = 0; d < dz; ++d)
          g(static_cast<Eigen::Index>(d) * kPanels + n, b) =
              zm(d, static_cast<Eigen::Index>(b) * kPanels + n);
      for (int e = 0; e < dr; ++e)
        g(static_cast<Eigen::Index>(dz + e) * kPanels + n, b) = r(e, b);
    }
  }
  return g;
}

template <typename T>
struct TargetPredictor {
  std::array<Conv2d<T>, 4> conv;
  int dz = 0, dr = 0;

  struct Cache {
    std::array<typename Conv2d<T>::Cache, 4> conv;
    std::array<Matrix<T>, 4> act;
  };

  void build(ParamStore<T>& store, const std::string& prefix, const RunConfig& cfg,
             SeededRng& rng) {
    dz = cfg.concept_dim;
    dr = cfg.rule_dim;
    const int t = cfg.scaled(128);
    const ConvSpec specs[4] = {
        {dz + dr, t, 3, 1, 1, 3, 3},
        {t, t, 3, 1, 1, 3, 3},
        {t, t, 3, 1, 1, 3, 3},
        {t, dz, 3, 1, 1, 3, 3},
    };
    for (int i = 0; i < 4; ++i)
      conv[i].build(store, prefix + ".conv" + std::to_string(i + 1), specs[i], rng);
  }

  // g: (d_z+d_r)*9 x B -> predicted concept grid d_z*9 x B (ReLU output).
  Matrix<T> forward(const Matrix<T>& g, Cache* c) const {
    Matrix<T> h = g;
    for (int i = 0; i < 4; ++i) {
      h = conv[i].forward(h, c ? &c->conv[i] : nullptr);
      h = nn::relu_forward(h);
      if (c) c->act[i] = h;
    }
    return h;
  }

  Matrix<T> backward(const Matrix<T>& dout, Cache& c) {
    Matrix<T> d = dout;
    for (int i = 3; i >= 0; --i) {
      d = nn::relu_backward(d, c.act[i]);
      d = conv[i].backward(d, c.conv[i]);
    }
    return d;
  }
};

}  // namespace crab::model
