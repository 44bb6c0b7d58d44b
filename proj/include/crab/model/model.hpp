// Full model: perception + per-concept reasoners + the per-concept mixture
// prior over rule latents learned by the abstraction stage.
#pragma once

#include <string>
#include <vector>

#include "crab/dataset/sample.hpp"
#include "crab/distributions.hpp"
#include "crab/model/perception.hpp"
#include "crab/model/reasoner.hpp"

namespace crab::model {

// RNG stream ids; dataset generation uses [0, 2^32) and (2^32)+1.
namespace streams {
constexpr std::uint64_t kInit = 1ull << 40;
constexpr std::uint64_t kEval = (1ull << 40) + 1;
inline std::uint64_t epoch(int e) { return (1ull << 41) + static_cast<std::uint64_t>(e); }
}  // namespace streams

// Per-concept Gaussian-mixture priors over rule latents. Inactive until the
// first knowledge update fills it in.
struct GmmPriorBank {
  std::vector<Gmm> per_concept;
  std::vector<GmmFitInfo> diagnostics;  // parallel to per_concept, last refit
  bool active = false;
};

// sigma head: softplus(raw) + floor keeps stds strictly positive.
template <typename T>
Matrix<T> softplus_floor(const Matrix<T>& raw) {
  return nn::softplus_forward(raw).array() + T(1e-4);
}

// Pixels of `images[i]` land in column i, scaled to [0,1].
template <typename T>
Matrix<T> images_to_columns(const std::vector<const dataset::Image8*>& images) {
  Matrix<T> x(kImagePixels, static_cast<Eigen::Index>(images.size()));
  for (std::size_t i = 0; i < images.size(); ++i)
    for (int p = 0; p < kImagePixels; ++p)
      x(p, static_cast<Eigen::Index>(i)) = static_cast<T>((*images[i])[p]) / T(255);
  return x;
}

template <typename T>
struct RuleStats {
  std::vector<Matrix<T>> mu;     // per concept, d_r x B
  std::vector<Matrix<T>> sigma;  // per concept, d_r x B
};

template <typename T>
class CrabModel {
 public:
  RunConfig cfg;
  nn::ParamStore<T> store;
  Encoder<T> encoder;
  Decoder<T> decoder;
  std::vector<RuleParser<T>> parsers;
  std::vector<TargetPredictor<T>> predictors;
  GmmPriorBank priors;

  explicit CrabModel(const RunConfig& c) : cfg(c) {
    validate(cfg);
    SeededRng rng(cfg.seed, streams::kInit);
    encoder.build(store, "enc", cfg, rng);
    decoder.build(store, "dec", cfg, rng);
    parsers.resize(cfg.concepts);
    predictors.resize(cfg.concepts);
    for (int m = 0; m < cfg.concepts; ++m)
      parsers[m].build(store, "parser" + std::to_string(m), cfg, rng);
    for (int m = 0; m < cfg.concepts; ++m)
      predictors[m].build(store, "target" + std::to_string(m), cfg, rng);
  }

  int latent_dim() const { return cfg.concepts * cfg.concept_dim; }

  Matrix<T> concept_slice(const Matrix<T>& z, int m) const {
    return z.middleRows(static_cast<Eigen::Index>(m) * cfg.concept_dim, cfg.concept_dim);
  }

  // ----- evaluation-mode passes (running BN stats, no caches) -----

  Matrix<T> encode_means(const Matrix<T>& x) {
    return encoder.forward(x, /*training=*/false, nullptr);
  }

  Matrix<T> decode_means(const Matrix<T>& z) {
    return decoder.forward(z, /*training=*/false, nullptr);
  }

  // Z: (M d_z) x (9B). Inference branch: every pair contributes.
  RuleStats<T> rule_posterior(const Matrix<T>& Z, int B) {
    const std::vector<std::uint8_t> gate(static_cast<std::size_t>(kPairCount) * B, 1);
    return run_parser(Z, gate, B);
  }

  // Generative branch: pairs touching target panels are gated out, so the
  // content of target columns of Z never matters.
  RuleStats<T> rule_prior_branch(const Matrix<T>& Z, const std::vector<TargetMask>& masks) {
    validate_masks(masks, /*need_targets=*/true);
    return run_parser(Z, pair_gates(masks), static_cast<int>(masks.size()));
  }

  // Predicted target-concept grid for concept m: d_z*9 x B; rows (d, cell).
  Matrix<T> predict_target_grid(int m, const Matrix<T>& Z, const Matrix<T>& r,
                                const std::vector<TargetMask>& masks) {
    validate_masks(masks, /*need_targets=*/true);
    Matrix<T> g = build_target_input(concept_slice(Z, m), r, masks);
    return predictors[m].forward(g, nullptr);
  }

 private:
  RuleStats<T> run_parser(const Matrix<T>& Z, const std::vector<std::uint8_t>& gate,
                          int B) {
    require<ShapeError>(Z.rows() == latent_dim() &&
                            Z.cols() == static_cast<Eigen::Index>(kPanels) * B,
                        "run_parser: latent shape mismatch");
    RuleStats<T> out;
    for (int m = 0; m < cfg.concepts; ++m) {
      Matrix<T> pin = make_pair_input(concept_slice(Z, m), B);
      Matrix<T> E = parsers[m].pair_forward(pin, nullptr);
      Matrix<T> head = parsers[m].relation_forward(E, gate, B, nullptr);
      out.mu.push_back(head.topRows(cfg.rule_dim));
      out.sigma.push_back(softplus_floor<T>(head.bottomRows(cfg.rule_dim)));
    }
    return out;
  }
};

}  // namespace crab::model
