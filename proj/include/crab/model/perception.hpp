// Image encoder (pixels -> concept means) and decoder (concepts -> pixel
// means). Concept layout in the latent vector is concept-major: concept m
// occupies rows [m*d_z, (m+1)*d_z).
//
// The 64x64 stacks follow the reference architecture; image_side == 8 swaps
// in a two-stage variant with the same layer pattern for cheap numerical
// tests.
#pragma once

#include <string>
#include <vector>

#include "crab/config.hpp"
#include "crab/nn/layers.hpp"

namespace crab::model {

using nn::BatchNorm;
using nn::Conv2d;
using nn::ConvSpec;
using nn::ConvTranspose2d;
using nn::Linear;
using nn::ParamStore;

template <typename T>
struct Encoder {
  std::vector<Conv2d<T>> conv;
  std::vector<BatchNorm<T>> bn;
  Linear<T> fc;
  int out_dim = 0;

  struct Cache {
    std::vector<typename Conv2d<T>::Cache> conv;
    std::vector<typename BatchNorm<T>::Cache> bn;
    std::vector<Matrix<T>> act;  // post-ReLU activations
    typename Linear<T>::Cache fc;
  };

  void build(ParamStore<T>& store, const std::string& prefix, const RunConfig& cfg,
             SeededRng& rng) {
    std::vector<ConvSpec> specs;
    int fc_in;
    if (cfg.image_side == 64) {
      const int c1 = cfg.scaled(32), c2 = cfg.scaled(64), c3 = cfg.scaled(128),
                c4 = cfg.scaled(256), c5 = cfg.scaled(512);
      specs = {{1, c1, 4, 2, 1, 64, 64},   // 64 -> 32
               {c1, c2, 4, 2, 1, 32, 32},  // 32 -> 16
               {c2, c3, 4, 2, 1, 16, 16},  // 16 -> 8
               {c3, c4, 4, 2, 1, 8, 8},    // 8 -> 4
               {c4, c5, 4, 1, 0, 4, 4}};   // 4 -> 1
      fc_in = c5;
    } else {
      const int c1 = cfg.scaled(32), c5 = cfg.scaled(512);
      specs = {{1, c1, 4, 2, 1, 8, 8},    // 8 -> 4
               {c1, c5, 4, 1, 0, 4, 4}};  // 4 -> 1
      fc_in = c5;
    }
    conv.resize(specs.size());
    bn.resize(specs.size());
    for (std::size_t i = 0; i < specs.size(); ++i) {
      conv[i].build(store, prefix + ".conv" + std::to_string(i + 1), specs[i], rng);
      bn[i].build(store, prefix + ".bn" + std::to_string(i + 1), specs[i].out_ch,
                  specs[i].positions());
    }
    out_dim = cfg.concepts * cfg.concept_dim;
    fc.build(store, prefix + ".fc", fc_in, out_dim, rng);
  }

  // x: pixels in [0,1], (side*side) x B. Returns concept means (M*d_z) x B.
  Matrix<T> forward(const Matrix<T>& x, bool training, Cache* cache,
                    bool update_running = true) {
    if (cache) {
      cache->conv.resize(conv.size());
      cache->bn.resize(conv.size());
      cache->act.resize(conv.size());
    }
    Matrix<T> h = x;
    for (std::size_t i = 0; i < conv.size(); ++i) {
      h = conv[i].forward(h, cache ? &cache->conv[i] : nullptr);
      h = bn[i].forward(h, training, cache ? &cache->bn[i] : nullptr, update_running);
      h = nn::relu_forward(h);
      if (cache) cache->act[i] = h;
    }
    return fc.forward(h, cache ? &cache->fc : nullptr);
  }

  Matrix<T> backward(const Matrix<T>& dmu, Cache& cache) {
    Matrix<T> d = fc.backward(dmu, cache.fc);
    for (int i = static_cast<int>(conv.size()) - 1; i >= 0; --i) {
      d = nn::relu_backward(d, cache.act[i]);
      d = bn[i].backward(d, cache.bn[i]);
      d = conv[i].backward(d, cache.conv[i]);
    }
    return d;
  }
};

template <typename T>
struct Decoder {
  std::vector<ConvTranspose2d<T>> deconv;
  std::vector<BatchNorm<T>> bn;  // one per stage except the sigmoid output
  T slope = T(0.02);

  struct Cache {
    std::vector<typename ConvTranspose2d<T>::Cache> deconv;
    std::vector<typename BatchNorm<T>::Cache> bn;
    std::vector<Matrix<T>> act;  // post-LeakyReLU activations
    Matrix<T> out;               // post-sigmoid
  };

  void build(ParamStore<T>& store, const std::string& prefix, const RunConfig& cfg,
             SeededRng& rng) {
    const int zc = cfg.concepts * cfg.concept_dim;
    struct D { int in, out, k, s, p, h, w; };
    std::vector<D> specs;
    if (cfg.image_side == 64) {
      const int c128 = cfg.scaled(128), c64 = cfg.scaled(64), c32 = cfg.scaled(32);
      specs = {{zc, c128, 1, 1, 0, 1, 1},    // 1 -> 1
               {c128, c64, 4, 1, 0, 1, 1},   // 1 -> 4
               {c64, c64, 4, 2, 1, 4, 4},    // 4 -> 8
               {c64, c32, 4, 2, 1, 8, 8},    // 8 -> 16
               {c32, c32, 4, 2, 1, 16, 16},  // 16 -> 32
               {c32, 1, 4, 2, 1, 32, 32}};   // 32 -> 64
    } else {
      const int c128 = cfg.scaled(128), c64 = cfg.scaled(64);
      specs = {{zc, c128, 1, 1, 0, 1, 1},   // 1 -> 1
               {c128, c64, 4, 1, 0, 1, 1},  // 1 -> 4
               {c64, 1, 4, 2, 1, 4, 4}};    // 4 -> 8
    }
    deconv.resize(specs.size());
    bn.resize(specs.size() - 1);
    for (std::size_t i = 0; i < specs.size(); ++i) {
      const auto& d = specs[i];
      deconv[i].build(store, prefix + ".deconv" + std::to_string(i + 1), d.in, d.out,
                      d.k, d.s, d.p, d.h, d.w, rng);
      if (i + 1 < specs.size())
        bn[i].build(store, prefix + ".bn" + std::to_string(i + 1), d.out,
                    deconv[i].out_h() * deconv[i].out_w());
    }
  }

  // z: (M*d_z) x B. Returns pixel means in (0,1), (side*side) x B.
  Matrix<T> forward(const Matrix<T>& z, bool training, Cache* cache,
                    bool update_running = true) {
    const std::size_t S = deconv.size();
    if (cache) {
      cache->deconv.resize(S);
      cache->bn.resize(S - 1);
      cache->act.resize(S - 1);
    }
    Matrix<T> h = z;
    for (std::size_t i = 0; i + 1 < S; ++i) {
      h = deconv[i].forward(h, cache ? &cache->deconv[i] : nullptr);
      h = bn[i].forward(h, training, cache ? &cache->bn[i] : nullptr, update_running);
      h = nn::lrelu_forward(h, slope);
      if (cache) cache->act[i] = h;
    }
    h = deconv[S - 1].forward(h, cache ? &cache->deconv[S - 1] : nullptr);
    h = nn::sigmoid_forward(h);
    if (cache) cache->out = h;
    return h;
  }

  Matrix<T> backward(const Matrix<T>& dout, Cache& cache) {
    const std::size_t S = deconv.size();
    Matrix<T> d = nn::sigmoid_backward(dout, cache.out);
    d = deconv[S - 1].backward(d, cache.deconv[S - 1]);
    for (int i = static_cast<int>(S) - 2; i >= 0; --i) {
      d = nn::lrelu_backward(d, cache.act[i], slope);
      d = bn[i].backward(d, cache.bn[i]);
      d = deconv[i].backward(d, cache.deconv[i]);
    }
    return d;
  }
};

}  // namespace crab::model
