// Training objective and its hand-derived backward pass.
//
// For a batch of B puzzles with per-sample target positions T_b the loss is
//
//   loss = -L_r + beta_r * R_r + beta_t * R_t + beta_cls * R_cls
//
// with all terms averaged over the batch:
//   L_r   : log-likelihood of the target pixels under the decoder run on the
//           sampled target concepts (fixed pixel std sigma_x),
//   R_r   : KL between the rule posterior (all panels) and the rule prior
//           branch (targets gated out), summed over concepts,
//   R_t   : KL between the encoder's target concept distribution and the
//           predictor's, which for equal fixed stds collapses to
//           ||mu_enc - mu_pred||^2 / (2 sigma_z^2),
//   R_cls : minibatch-weighted estimate of E[log q(r)] minus the mixture
//           prior's mean log-density (active once priors exist).
// The context term of the ELBO cancels exactly because the inference and
// generative branches share the encoder, so it never appears here.
#pragma once

#include <cmath>
#include <vector>

#include "crab/model/model.hpp"

namespace crab::model {

struct LossReport {
  double l_r = 0, r_r = 0, r_t = 0, r_cls = 0, r_c = 0;
  double elbo = 0;  // l_r - r_r - r_t
  double loss = 0;
};

namespace detail {

// log N(r_i | mu_j, diag sigma_j^2) for all (i, j) in one concept; r: d x B.
template <typename T>
Matrix<T> pairwise_loglik(const Matrix<T>& r, const Matrix<T>& mu,
                          const Matrix<T>& sigma) {
  const int B = static_cast<int>(r.cols());
  const int d = static_cast<int>(r.rows());
  const T half_log2pi = T(0.9189385332046727);
  Matrix<T> ll(B, B);
  for (int j = 0; j < B; ++j) {
    T base = -d * half_log2pi;
    for (int e = 0; e < d; ++e) base -= std::log(sigma(e, j));
    for (int i = 0; i < B; ++i) {
      T quad = T(0);
      for (int e = 0; e < d; ++e) {
        const T z = (r(e, i) - mu(e, j)) / sigma(e, j);
        quad += z * z;
      }
      ll(i, j) = base - T(0.5) * quad;
    }
  }
  return ll;
}

}  // namespace detail

// Minibatch-weighted estimate of E_q[log q(r)] from the (i, j) log-density
// table: mean_i [ logsumexp_j ll(i,j) - log(dataset_size * B) ].
template <typename T>
double mws_entropy_from_loglik(const Matrix<T>& ll, std::size_t dataset_size) {
  const int B = static_cast<int>(ll.rows());
  require<EstimatorError>(ll.cols() == B && B > 0, "loglik table must be square");
  require<EstimatorError>(dataset_size >= static_cast<std::size_t>(B),
                          "dataset smaller than the batch");
  double acc = 0;
  for (int i = 0; i < B; ++i) {
    VectorD row(B);
    for (int j = 0; j < B; ++j) row[j] = static_cast<double>(ll(i, j));
    acc += logsumexp(row) -
           std::log(static_cast<double>(dataset_size) * static_cast<double>(B));
  }
  return acc / B;
}

// r, mu, sigma: d_r x B; sample i against every posterior j in the batch.
template <typename T>
double mws_entropy(const Matrix<T>& r, const Matrix<T>& mu, const Matrix<T>& sigma,
                   std::size_t dataset_size) {
  return mws_entropy_from_loglik(detail::pairwise_loglik(r, mu, sigma), dataset_size);
}

// One objective evaluation over a batch. X holds all nine panels of each
// sample ((64*64) x 9B, column b*9+n). `rng` supplies the reparameterization
// noise; pass a freshly seeded generator for reproducible steps. With
// `backprop` the parameter gradients are accumulated into model.store
// (zeroed first). `dataset_size` is the N in the minibatch-weighted
// estimator; required when use_prior.
template <typename T>
LossReport objective_step(CrabModel<T>& model, const Matrix<T>& X,
                          const std::vector<TargetMask>& masks, SeededRng& rng,
                          bool use_prior, std::size_t dataset_size, bool backprop,
                          bool update_running = true) {
  const RunConfig& cfg = model.cfg;
  const int B = static_cast<int>(masks.size());
  const int pixels = cfg.pixels();
  require<ArgError>(B > 0, "objective_step: empty batch");
  require<ShapeError>(X.rows() == pixels &&
                          X.cols() == static_cast<Eigen::Index>(kPanels) * B,
                      "objective_step: image batch shape mismatch");
  validate_masks(masks, /*need_targets=*/true);
  if (use_prior) {
    require<EstimatorError>(model.priors.active,
                            "rule classification term requires fitted priors");
    require<EstimatorError>(dataset_size > 0, "dataset_size must be positive");
    require<EstimatorError>(B >= 2, "minibatch-weighted estimator needs B >= 2");
  }

  const int M = cfg.concepts, dz = cfg.concept_dim, dr = cfg.rule_dim;
  const T sigma_z = static_cast<T>(cfg.sigma_z);
  const T sigma_x = static_cast<T>(cfg.sigma_x);
  const T invB = T(1) / T(B);

  if (backprop) model.store.zero_grad();

  // ---- forward: perception ----
  typename Encoder<T>::Cache enc_cache;
  Matrix<T> mu_enc = model.encoder.forward(X, /*training=*/true,
                                           backprop ? &enc_cache : nullptr,
                                           update_running);

  Matrix<T> eps_z(mu_enc.rows(), mu_enc.cols());
  for (Eigen::Index c = 0; c < eps_z.cols(); ++c)
    for (Eigen::Index rI = 0; rI < eps_z.rows(); ++rI)
      eps_z(rI, c) = static_cast<T>(rng.normal());
  Matrix<T> z = mu_enc + sigma_z * eps_z;

  // ---- forward: per-concept reasoning ----
  const std::vector<std::uint8_t> gate_all(static_cast<std::size_t>(kPairCount) * B, 1);
  const std::vector<std::uint8_t> gate_ctx = pair_gates(masks);

  std::vector<typename RuleParser<T>::PairCache> pair_cache(M);
  std::vector<typename RuleParser<T>::RelCache> relq_cache(M), relp_cache(M);
  std::vector<typename TargetPredictor<T>::Cache> pred_cache(M);
  std::vector<Matrix<T>> E(M), muq(M), rawq(M), sq(M), mup(M), rawp(M), sp(M);
  std::vector<Matrix<T>> eps_r(M), rr(M), O(M), ll(M);

  LossReport rep;
  for (int m = 0; m < M; ++m) {
    Matrix<T> zm = model.concept_slice(z, m);
    Matrix<T> pin = make_pair_input(zm, B);
    E[m] = model.parsers[m].pair_forward(pin, backprop ? &pair_cache[m] : nullptr);
    Matrix<T> headq = model.parsers[m].relation_forward(
        E[m], gate_all, B, backprop ? &relq_cache[m] : nullptr);
    Matrix<T> headp = model.parsers[m].relation_forward(
        E[m], gate_ctx, B, backprop ? &relp_cache[m] : nullptr);
    muq[m] = headq.topRows(dr);
    rawq[m] = headq.bottomRows(dr);
    sq[m] = softplus_floor<T>(rawq[m]);
    mup[m] = headp.topRows(dr);
    rawp[m] = headp.bottomRows(dr);
    sp[m] = softplus_floor<T>(rawp[m]);

    // R_r^m = sum_b KL(N(muq, sq) || N(mup, sp)) / B
    for (int b = 0; b < B; ++b)
      for (int e = 0; e < dr; ++e) {
        const T q_s = sq[m](e, b), p_s = sp[m](e, b);
        const T dmu = muq[m](e, b) - mup[m](e, b);
        rep.r_r += static_cast<double>(
            (std::log(p_s / q_s) + (q_s * q_s + dmu * dmu) / (T(2) * p_s * p_s) -
             T(0.5)) *
            invB);
      }

    eps_r[m].resize(dr, B);
    for (int b = 0; b < B; ++b)
      for (int e = 0; e < dr; ++e) eps_r[m](e, b) = static_cast<T>(rng.normal());
    rr[m] = muq[m] + sq[m].cwiseProduct(eps_r[m]);

    Matrix<T> g = build_target_input(zm, rr[m], masks);
    O[m] = model.predictors[m].forward(g, backprop ? &pred_cache[m] : nullptr);

    // R_t^m: encoder mean vs predicted mean at each target cell.
    for (int b = 0; b < B; ++b)
      for (int n = 0; n < kPanels; ++n) {
        if (!(masks[b] >> n & 1)) continue;
        for (int d = 0; d < dz; ++d) {
          const T diff = mu_enc(static_cast<Eigen::Index>(m) * dz + d,
                                static_cast<Eigen::Index>(b) * kPanels + n) -
                         O[m](static_cast<Eigen::Index>(d) * kPanels + n, b);
          rep.r_t += static_cast<double>(diff * diff / (T(2) * sigma_z * sigma_z) * invB);
        }
      }
  }

  // ---- forward: reconstruction of target panels ----
  std::vector<std::pair<int, int>> targets;  // (b, n), deterministic order
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < kPanels; ++n)
      if (masks[b] >> n & 1) targets.emplace_back(b, n);

  Matrix<T> zT(model.latent_dim(), static_cast<Eigen::Index>(targets.size()));
  Matrix<T> xT(pixels, static_cast<Eigen::Index>(targets.size()));
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const Eigen::Index col = static_cast<Eigen::Index>(targets[t].first) * kPanels +
                             targets[t].second;
    zT.col(static_cast<Eigen::Index>(t)) = z.col(col);
    xT.col(static_cast<Eigen::Index>(t)) = X.col(col);
  }
  typename Decoder<T>::Cache dec_cache;
  Matrix<T> xhat = model.decoder.forward(zT, /*training=*/true,
                                         backprop ? &dec_cache : nullptr,
                                         update_running);
  {
    const T c0 = std::log(sigma_x) + T(0.9189385332046727);  // log sigma + log sqrt(2pi)
    const Matrix<T> diff = xhat - xT;
    rep.l_r = static_cast<double>(
        (-diff.array().square().sum() / (T(2) * sigma_x * sigma_x) -
         T(pixels) * T(targets.size()) * c0) *
        invB);
  }

  // ---- forward: rule classification term ----
  if (use_prior) {
    for (int m = 0; m < M; ++m) {
      ll[m] = detail::pairwise_loglik(rr[m], muq[m], sq[m]);
      const double ent = mws_entropy_from_loglik(ll[m], dataset_size);
      double cross = 0;
      for (int b = 0; b < B; ++b) {
        VectorD rb(dr);
        for (int e = 0; e < dr; ++e) rb[e] = static_cast<double>(rr[m](e, b));
        cross += gmm_logpdf(model.priors.per_concept[m], rb);
      }
      rep.r_cls += ent - cross / B;
    }
  }

  // Context regularizer: KL between the inference and generative context
  // distributions. Both branches read the same encoder outputs, so the two
  // distributions coincide and every term is exactly zero.
  rep.r_c = 0.0;

  rep.elbo = rep.l_r - rep.r_r - rep.r_t;
  rep.loss = -rep.l_r + cfg.beta_r * rep.r_r + cfg.beta_t * rep.r_t +
             cfg.beta_cls * rep.r_cls;

  if (!backprop) return rep;

  // ================= backward =================
  const T beta_r = static_cast<T>(cfg.beta_r);
  const T beta_t = static_cast<T>(cfg.beta_t);
  const T beta_cls = static_cast<T>(cfg.beta_cls);

  Matrix<T> dz_acc = Matrix<T>::Zero(z.rows(), z.cols());
  Matrix<T> dmu_enc = Matrix<T>::Zero(mu_enc.rows(), mu_enc.cols());

  // -L_r: d/dxhat = (xhat - x)/sigma_x^2 / B
  {
    Matrix<T> dxhat = (xhat - xT) / (sigma_x * sigma_x) * invB;
    Matrix<T> dzT = model.decoder.backward(dxhat, dec_cache);
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const Eigen::Index col = static_cast<Eigen::Index>(targets[t].first) * kPanels +
                               targets[t].second;
      dz_acc.col(col) += dzT.col(static_cast<Eigen::Index>(t));
    }
  }

  for (int m = 0; m < M; ++m) {
    // beta_t * R_t: gradient to the predictor grid and the encoder means.
    Matrix<T> dO = Matrix<T>::Zero(O[m].rows(), B);
    const T scale_t = beta_t * invB / (sigma_z * sigma_z);
    for (int b = 0; b < B; ++b)
      for (int n = 0; n < kPanels; ++n) {
        if (!(masks[b] >> n & 1)) continue;
        for (int d = 0; d < dz; ++d) {
          const Eigen::Index zrow = static_cast<Eigen::Index>(m) * dz + d;
          const Eigen::Index zcol = static_cast<Eigen::Index>(b) * kPanels + n;
          const T diff = mu_enc(zrow, zcol) -
                         O[m](static_cast<Eigen::Index>(d) * kPanels + n, b);
          dO(static_cast<Eigen::Index>(d) * kPanels + n, b) -= scale_t * diff;
          dmu_enc(zrow, zcol) += scale_t * diff;
        }
      }

    Matrix<T> dG = model.predictors[m].backward(dO, pred_cache[m]);
    Matrix<T> dr_acc = Matrix<T>::Zero(dr, B);
    for (int b = 0; b < B; ++b) {
      for (int n = 0; n < kPanels; ++n) {
        if (!(masks[b] >> n & 1))
          for (int d = 0; d < dz; ++d)
            dz_acc(static_cast<Eigen::Index>(m) * dz + d,
                   static_cast<Eigen::Index>(b) * kPanels + n) +=
                dG(static_cast<Eigen::Index>(d) * kPanels + n, b);
        for (int e = 0; e < dr; ++e)
          dr_acc(e, b) += dG(static_cast<Eigen::Index>(dz + e) * kPanels + n, b);
      }
    }

    Matrix<T> dmuq = Matrix<T>::Zero(dr, B), dsq = Matrix<T>::Zero(dr, B);
    Matrix<T> dmup = Matrix<T>::Zero(dr, B), dsp = Matrix<T>::Zero(dr, B);

    if (use_prior) {
      // Entropy part: softmax weights over posteriors for each r sample.
      Matrix<T> W(B, B);
      for (int i = 0; i < B; ++i) {
        T mx = ll[m].row(i).maxCoeff();
        T s = T(0);
        for (int j = 0; j < B; ++j) s += std::exp(ll[m](i, j) - mx);
        for (int j = 0; j < B; ++j) W(i, j) = std::exp(ll[m](i, j) - mx) / s;
      }
      const T scale_cls = beta_cls * invB;
      for (int i = 0; i < B; ++i)
        for (int j = 0; j < B; ++j) {
          const T w = W(i, j);
          if (w == T(0)) continue;
          for (int e = 0; e < dr; ++e) {
            const T s = sq[m](e, j);
            const T d1 = (rr[m](e, i) - muq[m](e, j)) / (s * s);
            dr_acc(e, i) += scale_cls * w * (-d1);
            dmuq(e, j) += scale_cls * w * d1;
            dsq(e, j) += scale_cls * w * (d1 * d1 * s - T(1) / s);
          }
        }
      // Cross part: -(beta_cls/B) * sum_b log p_prior(r_b).
      for (int b = 0; b < B; ++b) {
        VectorD rb(dr);
        for (int e = 0; e < dr; ++e) rb[e] = static_cast<double>(rr[m](e, b));
        VectorD gthe = gmm_logpdf_grad(model.priors.per_concept[m], rb);
        for (int e = 0; e < dr; ++e)
          dr_acc(e, b) -= scale_cls * static_cast<T>(gthe[e]);
      }
    }

    // r = muq + sq .* eps
    dmuq += dr_acc;
    dsq += dr_acc.cwiseProduct(eps_r[m]);

    // beta_r * KL(q || p)
    const T scale_r = beta_r * invB;
    for (int b = 0; b < B; ++b)
      for (int e = 0; e < dr; ++e) {
        const T q_s = sq[m](e, b), p_s = sp[m](e, b);
        const T dmu = muq[m](e, b) - mup[m](e, b);
        dmuq(e, b) += scale_r * dmu / (p_s * p_s);
        dmup(e, b) -= scale_r * dmu / (p_s * p_s);
        dsq(e, b) += scale_r * (q_s / (p_s * p_s) - T(1) / q_s);
        dsp(e, b) += scale_r * (T(1) / p_s - (q_s * q_s + dmu * dmu) / (p_s * p_s * p_s));
      }

    // softplus head chain, then both relation branches and the shared pairs.
    Matrix<T> dheadq(2 * dr, B), dheadp(2 * dr, B);
    dheadq.topRows(dr) = dmuq;
    dheadq.bottomRows(dr) = nn::softplus_backward(dsq, rawq[m]);
    dheadp.topRows(dr) = dmup;
    dheadp.bottomRows(dr) = nn::softplus_backward(dsp, rawp[m]);

    Matrix<T> dE = model.parsers[m].relation_backward(dheadq, relq_cache[m], B);
    dE += model.parsers[m].relation_backward(dheadp, relp_cache[m], B);
    Matrix<T> dpin = model.parsers[m].pair_backward(dE, pair_cache[m]);
    Matrix<T> dzm = Matrix<T>::Zero(dz, static_cast<Eigen::Index>(kPanels) * B);
    scatter_pair_grad(dpin, B, dzm);
    dz_acc.middleRows(static_cast<Eigen::Index>(m) * dz, dz) += dzm;
  }

  // z = mu_enc + sigma_z * eps (fixed sigma_z): all z-gradient reaches mu.
  dmu_enc += dz_acc;
  model.encoder.backward(dmu_enc, enc_cache);

  return rep;
}

}  // namespace crab::model
