#pragma once

#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "crab/common.hpp"
#include "crab/distributions.hpp"
#include "crab/model/model.hpp"
#include "crab/model/objective.hpp"
#include "crab/nn/optimizer.hpp"
#include "crab/rng.hpp"

namespace crab::abstraction {

namespace detail {

// Squared distances from every row of X to row `seed`.
inline VectorD row_dist2(const MatrixD& X, const Eigen::RowVectorXd& seed) {
  return (X.rowwise() - seed).rowwise().squaredNorm();
}

// k-means++ seeding: first seed uniform, later seeds drawn with probability
// proportional to squared distance from the nearest chosen seed.
inline std::vector<int> kmeanspp_seeds(const MatrixD& X, int K, SeededRng& rng) {
  const auto N = static_cast<std::uint64_t>(X.rows());
  std::vector<int> seeds;
  seeds.reserve(static_cast<std::size_t>(K));
  seeds.push_back(static_cast<int>(rng.uniform_below(N)));
  VectorD d2 = row_dist2(X, X.row(seeds.back()));
  for (int k = 1; k < K; ++k) {
    const double total = d2.sum();
    int pick;
    if (total > 0) {
      double u = rng.uniform() * total;
      pick = static_cast<int>(X.rows()) - 1;
      for (Eigen::Index i = 0; i < d2.size(); ++i) {
        u -= d2[i];
        if (u <= 0) {
          pick = static_cast<int>(i);
          break;
        }
      }
    } else {
      // Remaining points coincide with a chosen seed; any choice is as good.
      pick = static_cast<int>(rng.uniform_below(N));
    }
    seeds.push_back(pick);
    d2 = d2.cwiseMin(row_dist2(X, X.row(pick)));
  }
  return seeds;
}

}  // namespace detail

namespace detail {

// One EM run from a fresh k-means++ initialization; the building block for
// the restarted fit below. Stops when the mean per-point log-likelihood
// improves by less than 1e-4, or after 100 iterations. Every M-step adds a
// 1e-6 I covariance floor, so degenerate clusters stay positive definite.
// Components that lose all responsibility keep their parameters and drop to
// zero weight (a partial M-step, which preserves the monotone log-likelihood
// property).
inline Gmm fit_gmm_em_once(const MatrixD& X, int K, SeededRng& rng,
                           GmmFitInfo& diag) {
  const auto N = X.rows();
  const auto d = X.cols();

  const MatrixD floor = 1e-6 * MatrixD::Identity(d, d);
  const std::vector<int> seeds = detail::kmeanspp_seeds(X, K, rng);

  MatrixD means(K, d);
  for (int k = 0; k < K; ++k) means.row(k) = X.row(seeds[static_cast<std::size_t>(k)]);

  // Hard assignment to the nearest seed (lowest index on ties).
  std::vector<int> assign(static_cast<std::size_t>(N), 0);
  for (Eigen::Index i = 0; i < N; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) {
      const double dist = (X.row(i) - means.row(k)).squaredNorm();
      if (dist < best) {
        best = dist;
        assign[static_cast<std::size_t>(i)] = k;
      }
    }
  }

  const Eigen::RowVectorXd global_mean = X.colwise().mean();
  MatrixD global_cov = MatrixD::Zero(d, d);
  {
    MatrixD c = X.rowwise() - global_mean;
    global_cov = c.transpose() * c / static_cast<double>(N);
  }

  VectorD weights(K);
  std::vector<MatrixD> covs(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    std::vector<Eigen::Index> members;
    for (Eigen::Index i = 0; i < N; ++i)
      if (assign[static_cast<std::size_t>(i)] == k) members.push_back(i);
    weights[k] = static_cast<double>(members.size()) / static_cast<double>(N);
    if (members.size() >= 2) {
      MatrixD c(static_cast<Eigen::Index>(members.size()), d);
      for (std::size_t j = 0; j < members.size(); ++j) c.row(static_cast<Eigen::Index>(j)) = X.row(members[j]);
      Eigen::RowVectorXd mk = c.colwise().mean();
      means.row(k) = mk;
      MatrixD cc = c.rowwise() - mk;
      covs[static_cast<std::size_t>(k)] =
          cc.transpose() * cc / static_cast<double>(members.size()) + floor;
    } else {
      covs[static_cast<std::size_t>(k)] = global_cov + floor;
    }
  }
  // Guarantee a usable starting simplex even when some seed won nothing.
  if (weights.sum() <= 0) weights.setConstant(1.0 / K);
  weights /= weights.sum();

  diag.loglik_trace.clear();
  diag.iterations = 0;

  Gmm g = Gmm::from_covariances(weights, means, covs);

  MatrixD logresp(N, K);
  double prev_ll = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < 100; ++it) {
    // E-step in log space.
    double ll = 0;
    for (Eigen::Index i = 0; i < N; ++i) {
      const VectorD lk = gmm_component_logliks(g, X.row(i).transpose());
      const double lse = logsumexp(lk);
      ll += lse;
      for (int k = 0; k < K; ++k) logresp(i, k) = lk[k] - lse;
    }
    ll /= static_cast<double>(N);
    diag.loglik_trace.push_back(ll);
    diag.iterations = it + 1;
    if (it > 0 && ll - prev_ll < 1e-4) break;
    prev_ll = ll;

    // M-step.
    MatrixD resp = logresp.array().exp();
    VectorD nk = resp.colwise().sum();
    VectorD w = nk / static_cast<double>(N);
    MatrixD mu = g.means;
    std::vector<MatrixD> cov(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
      if (nk[k] < 1e-12) {
        cov[static_cast<std::size_t>(k)] = g.covariance(k);  // keep, weight ~ 0
        continue;
      }
      mu.row(k) = (resp.col(k).transpose() * X) / nk[k];
      MatrixD c = X.rowwise() - mu.row(k);
      MatrixD wc = c.array().colwise() * resp.col(k).array();
      cov[static_cast<std::size_t>(k)] = c.transpose() * wc / nk[k] + floor;
    }
    w /= w.sum();
    g = Gmm::from_covariances(w, mu, cov);
  }
  return g;
}

}  // namespace detail

// Fits a K-component full-covariance mixture to the rows of X (N x d) by EM
// with k-means++ initialization. EM only finds a local optimum, so the fit
// restarts from several independent seedings and keeps the run whose final
// mean log-likelihood is best; `info` reports that run's trace.
inline Gmm fit_gmm_em(const MatrixD& X, int K, SeededRng& rng,
                      GmmFitInfo* info = nullptr, int restarts = 5) {
  require<FitError>(K >= 1, "fit_gmm_em: need at least one component");
  require<FitError>(X.rows() >= K, "fit_gmm_em: fewer points than components");
  require<FitError>(restarts >= 1, "fit_gmm_em: need at least one restart");

  Gmm best;
  GmmFitInfo best_diag;
  double best_ll = -std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    GmmFitInfo diag;
    Gmm g = detail::fit_gmm_em_once(X, K, rng, diag);
    const double ll = diag.loglik_trace.back();
    if (ll > best_ll) {
      best_ll = ll;
      best = std::move(g);
      best_diag = std::move(diag);
    }
  }
  if (info) *info = std::move(best_diag);
  return best;
}

// Index of the mixture component with the highest joint log-likelihood
// log w_k + log N(r | mu_k, Sigma_k); lowest index wins ties.
inline int assign_rule_category(const Gmm& prior, const VectorD& r) {
  const VectorD lk = gmm_component_logliks(prior, r);
  int best = 0;
  for (int k = 1; k < prior.components(); ++k)
    if (lk[k] > lk[best]) best = k;
  return best;
}

// Draws rule samples through the inference path (z sampled from the encoder
// posterior, rules sampled from the parser posterior over the full matrix)
// and refits every per-concept prior from scratch. All fits run before any
// replacement so the bank never mixes old and new entries; a fit failure
// keeps the previous prior for that concept.
template <typename T>
void knowledge_update(model::CrabModel<T>& m, const Matrix<T>& X, SeededRng& rng) {
  const int B = static_cast<int>(X.cols()) / kPanels;
  require<ArgError>(B > 0 && X.cols() == static_cast<Eigen::Index>(kPanels) * B,
                    "knowledge_update: batch must hold whole samples");

  Matrix<T> mu_z = m.encode_means(X);
  Matrix<T> z(mu_z.rows(), mu_z.cols());
  for (Eigen::Index c = 0; c < z.cols(); ++c)
    for (Eigen::Index r = 0; r < z.rows(); ++r)
      z(r, c) = mu_z(r, c) + static_cast<T>(m.cfg.sigma_z) * static_cast<T>(rng.normal());

  model::RuleStats<T> stats = m.rule_posterior(z, B);

  std::vector<Gmm> fitted(static_cast<std::size_t>(m.cfg.concepts));
  std::vector<GmmFitInfo> diags(static_cast<std::size_t>(m.cfg.concepts));
  std::vector<bool> ok(static_cast<std::size_t>(m.cfg.concepts), false);
  for (int cm = 0; cm < m.cfg.concepts; ++cm) {
    const auto mi = static_cast<std::size_t>(cm);
    MatrixD pts(B, m.cfg.rule_dim);
    for (int b = 0; b < B; ++b)
      for (int e = 0; e < m.cfg.rule_dim; ++e)
        pts(b, e) = static_cast<double>(stats.mu[mi](e, b)) +
                    static_cast<double>(stats.sigma[mi](e, b)) * rng.normal();
    try {
      fitted[mi] = fit_gmm_em(pts, m.cfg.mixture_components, rng, &diags[mi]);
      ok[mi] = true;
    } catch (const FitError& err) {
      std::fprintf(stderr, "knowledge_update: concept %d refit failed (%s), keeping previous prior\n",
                   cm, err.what());
    }
  }

  auto& bank = m.priors;
  bank.per_concept.resize(static_cast<std::size_t>(m.cfg.concepts));
  bank.diagnostics.resize(static_cast<std::size_t>(m.cfg.concepts));
  bool all_present = true;
  for (int cm = 0; cm < m.cfg.concepts; ++cm) {
    const auto mi = static_cast<std::size_t>(cm);
    if (ok[mi]) {
      bank.per_concept[mi] = std::move(fitted[mi]);
      bank.diagnostics[mi] = std::move(diags[mi]);
    }
    if (bank.per_concept[mi].components() == 0) all_present = false;
  }
  bank.active = all_present;
}

// Lazily materialized batches for one pass over the data: `images(u)` yields
// the pixel matrix of batch u (pixels x 9B_u), `masks(u)` its target masks.
template <typename T>
struct BatchStream {
  int count = 0;
  std::function<Matrix<T>(int)> images;
  std::function<std::vector<model::TargetMask>(int)> masks;
};

struct IterationReport {
  model::LossReport mean;                // averaged over the gradient steps
  std::vector<model::LossReport> steps;  // one record per gradient step
  int gradient_steps = 0;
  bool prior_refit = false;
};

// One alternation: batch 0 refreshes the priors, the remaining batches take
// gradient steps against the freshly fitted (and now fixed) priors.
template <typename T>
IterationReport crab_iteration(model::CrabModel<T>& m, const BatchStream<T>& stream,
                               nn::RmsProp<T>& opt, SeededRng& rng,
                               std::size_t dataset_size) {
  require<ArgError>(stream.count >= 2,
                    "crab_iteration: need one update batch and at least one gradient batch");
  knowledge_update(m, stream.images(0), rng);

  IterationReport rep;
  rep.prior_refit = true;
  for (int u = 1; u < stream.count; ++u) {
    model::LossReport r =
        model::objective_step(m, stream.images(u), stream.masks(u), rng,
                              /*use_prior=*/m.priors.active, dataset_size,
                              /*backprop=*/true);
    opt.step(m.store);
    rep.steps.push_back(r);
    rep.mean.loss += r.loss;
    rep.mean.elbo += r.elbo;
    rep.mean.l_r += r.l_r;
    rep.mean.r_r += r.r_r;
    rep.mean.r_t += r.r_t;
    rep.mean.r_cls += r.r_cls;
    ++rep.gradient_steps;
  }
  const double inv = 1.0 / rep.gradient_steps;
  rep.mean.loss *= inv;
  rep.mean.elbo *= inv;
  rep.mean.l_r *= inv;
  rep.mean.r_r *= inv;
  rep.mean.r_t *= inv;
  rep.mean.r_cls *= inv;
  return rep;
}

}  // namespace crab::abstraction
