// Probability primitives: diagonal Gaussians, closed-form KL, and
// Gaussian-mixture log-densities with Cholesky-backed covariances.
#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "crab/common.hpp"
#include "crab/rng.hpp"

namespace crab {

template <typename T>
struct DiagGaussian {
  Vector<T> mean;
  Vector<T> std;  // elementwise, > 0 (0 tolerated only in tests)

  DiagGaussian() = default;
  DiagGaussian(Vector<T> m, Vector<T> s) : mean(std::move(m)), std(std::move(s)) {
    require<ShapeError>(mean.size() == this->std.size(),
                        "DiagGaussian: mean/std dimension mismatch");
  }
  static DiagGaussian isotropic(Vector<T> m, T sigma) {
    Vector<T> s = Vector<T>::Constant(m.size(), sigma);
    return DiagGaussian(std::move(m), std::move(s));
  }
  Eigen::Index dim() const { return mean.size(); }
};

template <typename T>
Vector<T> sample_reparam(const DiagGaussian<T>& g, SeededRng& rng) {
  Vector<T> eps(g.dim());
  for (Eigen::Index i = 0; i < eps.size(); ++i)
    eps[i] = static_cast<T>(rng.normal());
  return g.mean + g.std.cwiseProduct(eps);
}

// KL(q || p) for diagonal Gaussians of equal dimension.
template <typename T>
T kl_diag(const DiagGaussian<T>& q, const DiagGaussian<T>& p) {
  require<ShapeError>(q.dim() == p.dim(), "kl_diag: dimension mismatch");
  T acc = 0;
  for (Eigen::Index i = 0; i < q.dim(); ++i) {
    const T sq = q.std[i], sp = p.std[i];
    const T d = q.mean[i] - p.mean[i];
    acc += std::log(sp / sq) + (sq * sq + d * d) / (2 * sp * sp) - T(0.5);
  }
  return acc;
}

// log N(x | mu, diag(std^2)), elementwise-diagonal case.
template <typename T>
T diag_gaussian_logpdf(const Vector<T>& x, const Vector<T>& mean,
                       const Vector<T>& std) {
  require<ShapeError>(x.size() == mean.size() && x.size() == std.size(),
                      "diag_gaussian_logpdf: dimension mismatch");
  constexpr T half_log_2pi = T(0.5 * 1.8378770664093454836L);
  T acc = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const T z = (x[i] - mean[i]) / std[i];
    acc += -half_log_2pi - std::log(std[i]) - T(0.5) * z * z;
  }
  return acc;
}

// K-component full-covariance mixture. Covariances live as lower Cholesky
// factors so positive-definiteness holds by construction.
struct Gmm {
  VectorD weights;                 // simplex
  MatrixD means;                   // K x d
  std::vector<MatrixD> chol;       // K lower factors, d x d

  int components() const { return static_cast<int>(weights.size()); }
  int dim() const { return static_cast<int>(means.cols()); }

  MatrixD covariance(int k) const { return chol[k] * chol[k].transpose(); }

  static Gmm from_covariances(VectorD w, MatrixD mu,
                              const std::vector<MatrixD>& covs) {
    Gmm g;
    g.weights = std::move(w);
    g.means = std::move(mu);
    require<ShapeError>(static_cast<int>(covs.size()) == g.components(),
                        "Gmm: covariance count mismatch");
    require<NumericsError>(std::abs(g.weights.sum() - 1.0) < 1e-9,
                           "Gmm: weights must sum to 1");
    g.chol.reserve(covs.size());
    for (const auto& c : covs) {
      Eigen::LLT<MatrixD> llt(c);
      require<NumericsError>(llt.info() == Eigen::Success,
                             "Gmm: covariance not positive definite");
      g.chol.push_back(llt.matrixL());
    }
    return g;
  }
};

// Convergence record of one mixture fit: mean per-point log-likelihood at
// each iteration plus the number of iterations actually run.
struct GmmFitInfo {
  std::vector<double> loglik_trace;
  int iterations = 0;
};

// Per-component log w_k + log N(r | mu_k, Sigma_k).
inline VectorD gmm_component_logliks(const Gmm& g, const VectorD& r) {
  require<ShapeError>(r.size() == g.dim(), "gmm: point dimension mismatch");
  const double d = static_cast<double>(g.dim());
  const double log2pi = 1.8378770664093454836;
  VectorD out(g.components());
  for (int k = 0; k < g.components(); ++k) {
    const MatrixD& L = g.chol[k];
    VectorD y = L.template triangularView<Eigen::Lower>().solve(r - g.means.row(k).transpose());
    double logdet_half = 0;
    for (int i = 0; i < g.dim(); ++i) logdet_half += std::log(L(i, i));
    out[k] = std::log(g.weights[k]) - 0.5 * d * log2pi - logdet_half -
             0.5 * y.squaredNorm();
  }
  return out;
}

inline double logsumexp(const VectorD& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;  // all -inf
  double s = 0;
  for (Eigen::Index i = 0; i < v.size(); ++i) s += std::exp(v[i] - m);
  return m + std::log(s);
}

inline double gmm_logpdf(const Gmm& g, const VectorD& r) {
  return logsumexp(gmm_component_logliks(g, r));
}

// d(log p)/dr = sum_k resp_k * Sigma_k^{-1} (mu_k - r).
inline VectorD gmm_logpdf_grad(const Gmm& g, const VectorD& r) {
  const VectorD lk = gmm_component_logliks(g, r);
  const double lp = logsumexp(lk);
  VectorD grad = VectorD::Zero(g.dim());
  for (int k = 0; k < g.components(); ++k) {
    const double resp = std::exp(lk[k] - lp);
    const MatrixD& L = g.chol[k];
    VectorD diff = g.means.row(k).transpose() - r;
    VectorD y = L.triangularView<Eigen::Lower>().solve(diff);
    VectorD x = L.transpose().triangularView<Eigen::Upper>().solve(y);
    grad += resp * x;
  }
  return grad;
}

inline VectorD gmm_sample(const Gmm& g, SeededRng& rng) {
  const double u = rng.uniform();
  int k = 0;
  double acc = 0;
  for (; k < g.components() - 1; ++k) {
    acc += g.weights[k];
    if (u < acc) break;
  }
  VectorD eps(g.dim());
  for (int i = 0; i < g.dim(); ++i) eps[i] = rng.normal();
  return g.means.row(k).transpose() + g.chol[k] * eps;
}

}  // namespace crab
