#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "crab/abstraction.hpp"
#include "crab/dataset/render.hpp"
#include "crab/dataset/sample.hpp"
#include "crab/evaluate/metrics.hpp"
#include "crab/model/model.hpp"

namespace crab::evaluate {

using model::TargetMask;

// Predicted latent at every masked cell, batched. cells[b] holds
// (cell index, full M*d_z concept vector) in ascending cell order.
template <typename T>
struct TargetPrediction {
  std::vector<std::vector<std::pair<int, Vector<T>>>> cells;
};

// Deterministic generative pass: posterior means for the context concepts,
// prior-branch rule means, one predictor pass per concept. Target columns of
// X are blanked first so the answer content cannot reach the prediction.
template <typename T>
TargetPrediction<T> predict_targets(model::CrabModel<T>& m, Matrix<T> X,
                                    const std::vector<TargetMask>& masks) {
  const int B = static_cast<int>(masks.size());
  require<ShapeError>(X.rows() == m.cfg.pixels() &&
                          X.cols() == static_cast<Eigen::Index>(kPanels) * B,
                      "predict_targets: pixel batch shape mismatch");
  model::validate_masks(masks, /*need_targets=*/true);
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < kPanels; ++n)
      if (masks[static_cast<std::size_t>(b)] >> n & 1)
        X.col(static_cast<Eigen::Index>(b) * kPanels + n).setZero();

  Matrix<T> Z = m.encode_means(X);
  model::RuleStats<T> rs = m.rule_prior_branch(Z, masks);

  const int dz = m.cfg.concept_dim;
  TargetPrediction<T> out;
  out.cells.resize(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < kPanels; ++n)
      if (masks[static_cast<std::size_t>(b)] >> n & 1)
        out.cells[static_cast<std::size_t>(b)].emplace_back(
            n, Vector<T>::Zero(m.latent_dim()));

  for (int cm = 0; cm < m.cfg.concepts; ++cm) {
    Matrix<T> G = m.predict_target_grid(cm, Z, rs.mu[static_cast<std::size_t>(cm)], masks);
    for (int b = 0; b < B; ++b)
      for (auto& [n, latent] : out.cells[static_cast<std::size_t>(b)])
        for (int d = 0; d < dz; ++d)
          latent[static_cast<Eigen::Index>(cm) * dz + d] =
              G(static_cast<Eigen::Index>(d) * kPanels + n, b);
  }
  return out;
}

struct SelectionResult {
  int chosen_index = 0;
  MatrixD per_candidate_concept_distances;  // N_C x M
};

// Distance of each candidate latent to the prediction, per concept, plus the
// argmin of the summed distance (lowest index on ties).
template <typename T>
SelectionResult score_candidates(const model::CrabModel<T>& m, const Vector<T>& pred,
                                 const Matrix<T>& cand_latents) {
  const int nc = static_cast<int>(cand_latents.cols());
  require<ArgError>(nc > 0, "score_candidates: empty candidate set");
  SelectionResult res;
  res.per_candidate_concept_distances.resize(nc, m.cfg.concepts);
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < nc; ++i) {
    double total = 0;
    for (int cm = 0; cm < m.cfg.concepts; ++cm) {
      const auto seg = static_cast<Eigen::Index>(cm) * m.cfg.concept_dim;
      const double d = (pred.segment(seg, m.cfg.concept_dim) -
                        cand_latents.col(i).segment(seg, m.cfg.concept_dim))
                           .norm();
      res.per_candidate_concept_distances(i, cm) = d;
      total += d;
    }
    if (total < best) {
      best = total;
      res.chosen_index = i;
    }
  }
  return res;
}

// Single-sample answer selection at one blank position.
template <typename T>
SelectionResult select_answer(model::CrabModel<T>& m,
                              const std::array<dataset::Image8, kPanels>& panels,
                              TargetMask target,
                              const std::vector<dataset::Image8>& candidates) {
  require<ArgError>(!candidates.empty(), "select_answer: empty candidate set");
  require<MaskError>(std::popcount(static_cast<unsigned>(target)) == 1,
                     "select_answer: exactly one blank position");
  require<ArgError>(m.cfg.image_side == kImageSide,
                    "select_answer: model image side must match panel size");

  std::vector<const dataset::Image8*> ptrs;
  for (const auto& p : panels) ptrs.push_back(&p);
  Matrix<T> X = model::images_to_columns<T>(ptrs);
  TargetPrediction<T> pred = predict_targets(m, std::move(X), {target});

  std::vector<const dataset::Image8*> cptrs;
  for (const auto& c : candidates) cptrs.push_back(&c);
  Matrix<T> Zc = m.encode_means(model::images_to_columns<T>(cptrs));
  return score_candidates(m, pred.cells[0][0].second, Zc);
}

namespace detail {

// Batched candidate scoring shared by the accuracy loops: encodes all
// panels and candidate images of `count` samples starting at `start`.
template <typename T>
int correct_in_window(model::CrabModel<T>& m, const dataset::Dataset& ds,
                      std::size_t start, std::size_t count) {
  std::vector<const dataset::Image8*> panels, cands;
  std::vector<TargetMask> masks;
  std::vector<std::size_t> offsets;  // candidate offset per sample
  for (std::size_t i = start; i < start + count; ++i) {
    const auto& s = ds.samples[i];
    for (const auto& p : s.panels) panels.push_back(&p);
    offsets.push_back(cands.size());
    for (const auto& c : s.candidates) cands.push_back(&c);
    masks.push_back(TargetMask{1 << 8});
  }
  offsets.push_back(cands.size());

  TargetPrediction<T> pred =
      predict_targets(m, model::images_to_columns<T>(panels), masks);
  Matrix<T> Zc = m.encode_means(model::images_to_columns<T>(cands));

  int correct = 0;
  for (std::size_t b = 0; b < count; ++b) {
    const auto nc = static_cast<Eigen::Index>(offsets[b + 1] - offsets[b]);
    Matrix<T> cl = Zc.middleCols(static_cast<Eigen::Index>(offsets[b]), nc);
    SelectionResult r = score_candidates(m, pred.cells[b][0].second, cl);
    if (r.chosen_index == ds.samples[start + b].answer_index) ++correct;
  }
  return correct;
}

}  // namespace detail

// Fraction of samples whose stored candidate set is answered correctly at
// the bottom-right position. Deterministic for a frozen model.
template <typename T>
double selection_accuracy(model::CrabModel<T>& m, const dataset::Dataset& ds,
                          std::size_t eval_batch = 100) {
  require<ArgError>(!ds.samples.empty(), "selection_accuracy: empty dataset");
  require<ArgError>(m.cfg.image_side == kImageSide,
                    "selection_accuracy: model image side must match panel size");
  for (const auto& s : ds.samples)
    require<ArgError>(!s.candidates.empty(),
                      "selection_accuracy: sample without candidates");
  int correct = 0;
  for (std::size_t start = 0; start < ds.samples.size(); start += eval_batch) {
    const std::size_t count = std::min(eval_batch, ds.samples.size() - start);
    correct += detail::correct_in_window(m, ds, start, count);
  }
  return static_cast<double>(correct) / static_cast<double>(ds.samples.size());
}

// Arbitrary-position accuracy with in-batch candidate synthesis: each masked
// cell gets a set holding the true panel plus same-position panels of
// n_candidates-1 distinct other in-batch samples. A sample scores only if
// every masked cell is answered correctly.
template <typename T>
double global_selection_accuracy(model::CrabModel<T>& m, const dataset::Dataset& ds,
                                 int n_targets, int n_candidates, SeededRng& rng,
                                 std::size_t eval_batch = 100) {
  require<ArgError>(n_targets >= 1 && n_targets <= 3,
                    "global_selection_accuracy: 1..3 blanks");
  require<ArgError>(n_candidates >= 2, "global_selection_accuracy: need >= 2 candidates");
  require<ArgError>(ds.samples.size() >= static_cast<std::size_t>(n_candidates) &&
                        eval_batch >= static_cast<std::size_t>(n_candidates),
                    "global_selection_accuracy: batch smaller than candidate set");
  require<ArgError>(m.cfg.image_side == kImageSide,
                    "global_selection_accuracy: model image side must match panel size");

  int correct = 0;
  std::size_t next_unscored = 0;
  for (std::size_t start = 0; start < ds.samples.size(); start += eval_batch) {
    std::size_t count = std::min(eval_batch, ds.samples.size() - start);
    if (count < static_cast<std::size_t>(n_candidates)) {
      // Too few samples left to synthesize candidate sets: widen the window
      // backwards and score only the not-yet-counted tail.
      const std::size_t extra = static_cast<std::size_t>(n_candidates) - count;
      start -= extra;
      count += extra;
    }

    std::vector<const dataset::Image8*> panels;
    std::vector<TargetMask> masks;
    for (std::size_t i = start; i < start + count; ++i) {
      for (const auto& p : ds.samples[i].panels) panels.push_back(&p);
      TargetMask t = 0;
      while (std::popcount(static_cast<unsigned>(t)) < n_targets)
        t |= TargetMask(1) << rng.uniform_below(kPanels);
      masks.push_back(t);
    }
    TargetPrediction<T> pred =
        predict_targets(m, model::images_to_columns<T>(panels), masks);

    // Assemble every candidate set of the window, then encode in one pass.
    std::vector<const dataset::Image8*> cands;
    std::vector<int> truth;  // index of the true panel within each set
    for (std::size_t b = 0; b < count; ++b) {
      for (const auto& [n, latent] : pred.cells[b]) {
        std::vector<int> others;
        for (std::size_t j = 0; j < count; ++j)
          if (j != b) others.push_back(static_cast<int>(j));
        rng.shuffle(others.begin(), others.end());
        others.resize(static_cast<std::size_t>(n_candidates - 1));
        others.push_back(static_cast<int>(b));
        rng.shuffle(others.begin(), others.end());
        for (std::size_t j = 0; j < others.size(); ++j) {
          cands.push_back(&ds.samples[start + static_cast<std::size_t>(others[j])]
                               .panels[static_cast<std::size_t>(n)]);
          if (others[j] == static_cast<int>(b)) truth.push_back(static_cast<int>(j));
        }
      }
    }
    Matrix<T> Zc = m.encode_means(model::images_to_columns<T>(cands));

    std::size_t set = 0;
    for (std::size_t b = 0; b < count; ++b) {
      bool all = true;
      for (const auto& [n, latent] : pred.cells[b]) {
        Matrix<T> cl = Zc.middleCols(static_cast<Eigen::Index>(set) * n_candidates,
                                     n_candidates);
        SelectionResult r = score_candidates(m, latent, cl);
        if (r.chosen_index != truth[set]) all = false;
        ++set;
      }
      if (all && (start + b) >= next_unscored) ++correct;
    }
    next_unscored = start + count;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.samples.size());
}

struct VdMatrix {
  MatrixD values;  // concepts x attributes
};

namespace detail {

// Random stored value for attribute `a`: an occupancy bitmask for grid
// attributes, otherwise a uniform pick from the level domain.
inline int random_attr_value(const dataset::GeneratorConfig& gc, int a, SeededRng& rng) {
  const auto& spec = gc.attributes[static_cast<std::size_t>(a)];
  if (spec.occupancy()) {
    const int cells = gc.grid * gc.grid;
    return 1 + static_cast<int>(rng.uniform_below(
                   static_cast<std::uint64_t>((1 << cells) - 1)));
  }
  return spec.levels[rng.uniform_below(spec.levels.size())];
}

inline dataset::AttrTuple random_tuple(const dataset::GeneratorConfig& gc,
                                       int fixed_attr, int fixed_value,
                                       SeededRng& rng) {
  dataset::AttrTuple t;
  for (std::size_t a = 0; a < gc.attributes.size(); ++a) {
    if (static_cast<int>(a) == fixed_attr)
      t.push_back(fixed_value);
    else
      t.push_back(random_attr_value(gc, static_cast<int>(a), rng));
  }
  return t;
}

// log |det(C^T C)| of the mean-centered concept batch, via Cholesky with a
// jitter retry when the Gram matrix is numerically singular.
inline double log_gram_det(const MatrixD& centered) {
  MatrixD gram = centered.transpose() * centered;
  for (int attempt = 0; attempt < 2; ++attempt) {
    Eigen::LLT<MatrixD> llt(gram);
    if (llt.info() == Eigen::Success) {
      double logdet = 0;
      MatrixD L = llt.matrixL();
      for (Eigen::Index i = 0; i < L.rows(); ++i) logdet += std::log(L(i, i));
      if (std::isfinite(logdet)) return 2 * logdet;
    }
    gram += 1e-8 * MatrixD::Identity(gram.rows(), gram.cols());
  }
  throw NumericsError("variance_decline: singular concept Gram matrix");
}

}  // namespace detail

// Variance-decline matrix: how much the in-batch concept
// variance shrinks when one generative attribute is pinned. Entry (m, v)
// compares a batch with attribute v fixed against a fully free batch.
template <typename T>
VdMatrix variance_decline(model::CrabModel<T>& m, const dataset::GeneratorConfig& gc,
                          int batch_size, SeededRng& rng) {
  require<ArgError>(batch_size > m.cfg.concept_dim + 1,
                    "variance_decline: batch too small for a full-rank Gram matrix");
  require<ArgError>(m.cfg.image_side == kImageSide,
                    "variance_decline: model image side must match panel size");
  const int V = static_cast<int>(gc.attributes.size());
  const int dz = m.cfg.concept_dim;

  auto concept_vars = [&](int fixed_attr, int fixed_value) {
    std::vector<dataset::Image8> imgs;
    for (int b = 0; b < batch_size; ++b)
      imgs.push_back(dataset::render_panel(
          gc, detail::random_tuple(gc, fixed_attr, fixed_value, rng)));
    std::vector<const dataset::Image8*> ptrs;
    for (const auto& im : imgs) ptrs.push_back(&im);
    Matrix<T> Z = m.encode_means(model::images_to_columns<T>(ptrs));
    VectorD vars(m.cfg.concepts);
    for (int cm = 0; cm < m.cfg.concepts; ++cm) {
      MatrixD c = Z.middleRows(static_cast<Eigen::Index>(cm) * dz, dz)
                      .template cast<double>()
                      .transpose();
      c.rowwise() -= c.colwise().mean().eval();
      vars[cm] = detail::log_gram_det(c);
    }
    return vars;
  };

  const VectorD free_vars = concept_vars(-1, 0);
  VdMatrix vd;
  vd.values.resize(m.cfg.concepts, V);
  for (int v = 0; v < V; ++v) {
    const int level = detail::random_attr_value(gc, v, rng);
    const VectorD fixed_vars = concept_vars(v, level);
    for (int cm = 0; cm < m.cfg.concepts; ++cm)
      vd.values(cm, v) = fixed_vars[cm] / free_vars[cm];
  }
  require<NumericsError>(vd.values.allFinite(),
                         "variance_decline: non-finite variance ratio");
  return vd;
}

struct AriReport {
  MatrixD ari;                    // concepts x attributes
  std::vector<int> best_concept;  // argmax concept per attribute
  std::vector<double> best_ari;   // its score
  double average = 0;             // mean of best_ari
  std::vector<std::string> attributes;
};

// Clustering agreement between prior-component assignments of the inferred
// rule latents and the annotated per-attribute rule kinds.
template <typename T>
AriReport ari_evaluation(model::CrabModel<T>& m, const dataset::Dataset& ds,
                         std::size_t eval_batch = 100) {
  require<ArgError>(!ds.samples.empty(), "ari_evaluation: empty dataset");
  require<ArgError>(m.priors.active, "ari_evaluation: priors not fitted yet");
  require<ArgError>(m.cfg.image_side == kImageSide,
                    "ari_evaluation: model image side must match panel size");
  const std::size_t N = ds.samples.size();
  const std::size_t V = ds.samples.front().annotations.size();
  require<ArgError>(V > 0, "ari_evaluation: samples carry no annotations");
  for (const auto& s : ds.samples)
    require<ArgError>(s.annotations.size() == V,
                      "ari_evaluation: inconsistent annotation count");

  std::vector<std::vector<int>> cats(static_cast<std::size_t>(m.cfg.concepts));
  for (std::size_t start = 0; start < N; start += eval_batch) {
    const std::size_t count = std::min(eval_batch, N - start);
    std::vector<const dataset::Image8*> panels;
    for (std::size_t i = start; i < start + count; ++i)
      for (const auto& p : ds.samples[i].panels) panels.push_back(&p);
    Matrix<T> Z = m.encode_means(model::images_to_columns<T>(panels));
    model::RuleStats<T> rs = m.rule_posterior(Z, static_cast<int>(count));
    for (int cm = 0; cm < m.cfg.concepts; ++cm)
      for (std::size_t b = 0; b < count; ++b)
        cats[static_cast<std::size_t>(cm)].push_back(abstraction::assign_rule_category(
            m.priors.per_concept[static_cast<std::size_t>(cm)],
            rs.mu[static_cast<std::size_t>(cm)].col(static_cast<Eigen::Index>(b))
                .template cast<double>()));
  }

  AriReport rep;
  rep.ari = MatrixD::Zero(m.cfg.concepts, static_cast<Eigen::Index>(V));
  for (std::size_t v = 0; v < V; ++v) {
    rep.attributes.push_back(ds.samples.front().annotations[v].attribute);
    std::vector<int> labels;
    bool usable = true;
    for (const auto& s : ds.samples) {
      if (!s.annotations[v].mapped) {
        usable = false;
        break;
      }
      labels.push_back(static_cast<int>(s.annotations[v].rule.kind));
    }
    if (usable && !labels.empty() &&
        std::all_of(labels.begin(), labels.end(),
                    [&](int l) { return l == labels.front(); }))
      usable = false;
    if (!usable) {
      std::fprintf(stderr,
                   "ari_evaluation: attribute %s has degenerate labels, scoring 0\n",
                   rep.attributes.back().c_str());
    } else {
      for (int cm = 0; cm < m.cfg.concepts; ++cm)
        rep.ari(cm, static_cast<Eigen::Index>(v)) =
            adjusted_rand_index(cats[static_cast<std::size_t>(cm)], labels);
    }
    Eigen::Index best = 0;
    rep.ari.col(static_cast<Eigen::Index>(v)).maxCoeff(&best);
    rep.best_concept.push_back(static_cast<int>(best));
    rep.best_ari.push_back(rep.ari(best, static_cast<Eigen::Index>(v)));
  }
  rep.average = 0;
  for (double a : rep.best_ari) rep.average += a;
  rep.average /= static_cast<double>(V);
  return rep;
}

// Decoded traversal of one concept: the concept mean moves along `direction`
// (first coordinate axis by default) across [-span, span] * sigma_z while
// everything else stays at the encoding of `x`. Returns pixels x steps.
template <typename T>
Matrix<T> interpolate_concept(model::CrabModel<T>& m, const Matrix<T>& x, int which,
                              int steps, double span,
                              const Vector<T>* direction = nullptr) {
  require<ArgError>(steps >= 2, "interpolate_concept: need at least two steps");
  require<ArgError>(which >= 0 && which < m.cfg.concepts,
                    "interpolate_concept: concept index out of range");
  require<ShapeError>(x.rows() == m.cfg.pixels() && x.cols() == 1,
                      "interpolate_concept: expected one image column");

  Vector<T> dir = Vector<T>::Zero(m.cfg.concept_dim);
  if (direction) {
    require<ShapeError>(direction->size() == m.cfg.concept_dim,
                        "interpolate_concept: direction dimension mismatch");
    const T n = direction->norm();
    require<NumericsError>(n > 0, "interpolate_concept: zero direction");
    dir = *direction / n;
  } else {
    dir[0] = 1;
  }

  Matrix<T> z0 = m.encode_means(x);
  Matrix<T> out(m.cfg.pixels(), steps);
  for (int s = 0; s < steps; ++s) {
    const double t = -span + 2.0 * span * s / (steps - 1);
    Matrix<T> z = z0;
    z.middleRows(static_cast<Eigen::Index>(which) * m.cfg.concept_dim,
                 m.cfg.concept_dim) += (t * m.cfg.sigma_z) * dir;
    out.col(s) = m.decode_means(z);
  }
  return out;
}

}  // namespace crab::evaluate
