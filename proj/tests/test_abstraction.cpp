#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "crab/abstraction.hpp"
#include "crab/evaluate/metrics.hpp"

using namespace crab;
using namespace crab::abstraction;

namespace {

// Well-separated planted mixture: four unit-covariance blobs at (+-3, +-3).
struct Planted {
  MatrixD points;
  std::vector<int> labels;
};

Planted planted_mixture(int per_component, SeededRng& rng) {
  const double cx[4] = {3, 3, -3, -3};
  const double cy[4] = {3, -3, 3, -3};
  Planted p;
  p.points.resize(4 * per_component, 2);
  for (int k = 0; k < 4; ++k)
    for (int i = 0; i < per_component; ++i) {
      const int row = k * per_component + i;
      p.points(row, 0) = cx[k] + rng.normal();
      p.points(row, 1) = cy[k] + rng.normal();
      p.labels.push_back(k);
    }
  return p;
}

}  // namespace

TEST_CASE("adjusted rand index reference values", "[abstraction]") {
  CHECK(evaluate::adjusted_rand_index({0, 0, 1, 1}, {1, 1, 0, 0}) == Catch::Approx(1.0));
  CHECK(evaluate::adjusted_rand_index({0, 0, 1, 1}, {5, 5, 5, 5}) == Catch::Approx(0.0).margin(1e-12));
  // Worked example: partitions {0,0,1,1,2,2} vs {0,0,0,1,1,1}. The
  // contingency table has pair counts index=2, row sum 3, column sum 6 over
  // C(6,2)=15 pairs, so ARI = (2 - 18/15) / (4.5 - 18/15) = 8/33.
  CHECK(evaluate::adjusted_rand_index({0, 0, 1, 1, 2, 2}, {0, 0, 0, 1, 1, 1}) ==
        Catch::Approx(8.0 / 33.0));
  CHECK(evaluate::adjusted_rand_index({0, 1, 2, 3}, {7, 6, 5, 4}) == Catch::Approx(1.0));
}

TEST_CASE("em recovers a planted well-separated mixture", "[abstraction]") {
  SeededRng rng(404, 0);
  Planted p = planted_mixture(500, rng);

  GmmFitInfo info;
  Gmm g = fit_gmm_em(p.points, 4, rng, &info);

  REQUIRE(g.components() == 4);
  REQUIRE(g.dim() == 2);
  REQUIRE(info.iterations >= 1);
  REQUIRE(static_cast<int>(info.loglik_trace.size()) == info.iterations);

  // EM never decreases the objective (tiny slack for the covariance floor).
  for (std::size_t i = 1; i < info.loglik_trace.size(); ++i)
    CHECK(info.loglik_trace[i] >= info.loglik_trace[i - 1] - 1e-9);

  std::vector<int> found;
  for (Eigen::Index i = 0; i < p.points.rows(); ++i)
    found.push_back(assign_rule_category(g, p.points.row(i).transpose()));
  CHECK(evaluate::adjusted_rand_index(found, p.labels) >= 0.95);

  // Every planted center has a component mean within one unit.
  const double cx[4] = {3, 3, -3, -3};
  const double cy[4] = {3, -3, 3, -3};
  for (int k = 0; k < 4; ++k) {
    double best = 1e9;
    for (int j = 0; j < 4; ++j) {
      const double dx = g.means(j, 0) - cx[k];
      const double dy = g.means(j, 1) - cy[k];
      best = std::min(best, std::hypot(dx, dy));
    }
    CHECK(best < 1.0);
  }
}

TEST_CASE("single-component em is the closed-form gaussian fit", "[abstraction]") {
  SeededRng rng(405, 0);
  MatrixD X(40, 3);
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    for (Eigen::Index j = 0; j < X.cols(); ++j) X(i, j) = rng.normal() * (1.0 + j) + j;

  Gmm g = fit_gmm_em(X, 1, rng);
  REQUIRE(g.components() == 1);
  CHECK(g.weights[0] == Catch::Approx(1.0));

  Eigen::RowVectorXd mean = X.colwise().mean();
  MatrixD c = X.rowwise() - mean;
  MatrixD cov = c.transpose() * c / static_cast<double>(X.rows()) +
                1e-6 * MatrixD::Identity(3, 3);
  CHECK((g.means.row(0) - mean).norm() < 1e-9);
  CHECK((g.covariance(0) - cov).norm() < 1e-9);
}

TEST_CASE("em on identical points stays finite", "[abstraction]") {
  SeededRng rng(406, 0);
  MatrixD X = MatrixD::Zero(50, 2);
  X.col(0).setConstant(1.25);
  X.col(1).setConstant(-0.5);

  Gmm g = fit_gmm_em(X, 3, rng);
  REQUIRE(g.components() == 3);
  CHECK(std::abs(g.weights.sum() - 1.0) < 1e-12);
  for (int k = 0; k < 3; ++k) {
    if (g.weights[k] <= 0) continue;
    CHECK((g.means.row(k) - X.row(0)).norm() < 1e-9);
    CHECK(std::isfinite(g.covariance(k).norm()));
  }
  // The mixture still evaluates and samples without blowing up.
  VectorD at = X.row(0).transpose();
  CHECK(std::isfinite(gmm_logpdf(g, at)));
  CHECK(std::isfinite(gmm_sample(g, rng).norm()));
}

TEST_CASE("em rejects fewer points than components", "[abstraction]") {
  SeededRng rng(407, 0);
  MatrixD X = MatrixD::Random(3, 2);
  CHECK_THROWS_AS(fit_gmm_em(X, 4, rng), FitError);
  CHECK_THROWS_AS(fit_gmm_em(X, 0, rng), FitError);
}

TEST_CASE("category assignment picks the max joint log-likelihood", "[abstraction]") {
  VectorD w(2);
  w << 0.5, 0.5;
  MatrixD mu(2, 2);
  mu << -2, 0, 2, 0;
  std::vector<MatrixD> covs(2, MatrixD::Identity(2, 2));
  Gmm g = Gmm::from_covariances(w, mu, covs);

  VectorD left(2), right(2), mid(2);
  left << -2, 0;
  right << 2, 0;
  mid << 0, 0;
  CHECK(assign_rule_category(g, left) == 0);
  CHECK(assign_rule_category(g, right) == 1);
  CHECK(assign_rule_category(g, mid) == 0);  // exact tie -> lowest index
}

namespace {

RunConfig tiny_cfg() {
  RunConfig cfg;
  cfg.image_side = 8;
  cfg.concepts = 2;
  cfg.concept_dim = 4;
  cfg.rule_dim = 2;
  cfg.mixture_components = 2;
  cfg.width_scale = 0.01;
  cfg.batch_size = 4;
  cfg.seed = 7;
  return cfg;
}

template <typename T>
Matrix<T> random_batch(const RunConfig& cfg, int B, SeededRng& rng) {
  Matrix<T> X(cfg.pixels(), 9 * B);
  for (Eigen::Index c = 0; c < X.cols(); ++c)
    for (Eigen::Index r = 0; r < X.rows(); ++r)
      X(r, c) = static_cast<T>(0.05 + 0.9 * rng.uniform());
  return X;
}

}  // namespace

TEST_CASE("knowledge update fills every concept prior deterministically",
          "[abstraction]") {
  RunConfig cfg = tiny_cfg();
  model::CrabModel<double> m1(cfg), m2(cfg);
  SeededRng data_rng(52, 0);
  Matrix<double> X = random_batch<double>(cfg, 6, data_rng);

  REQUIRE_FALSE(m1.priors.active);
  SeededRng r1(9, 1), r2(9, 1);
  knowledge_update(m1, X, r1);
  knowledge_update(m2, X, r2);

  REQUIRE(m1.priors.active);
  REQUIRE(static_cast<int>(m1.priors.per_concept.size()) == cfg.concepts);
  for (int cm = 0; cm < cfg.concepts; ++cm) {
    const auto& a = m1.priors.per_concept[static_cast<std::size_t>(cm)];
    const auto& b = m2.priors.per_concept[static_cast<std::size_t>(cm)];
    REQUIRE(a.components() == cfg.mixture_components);
    REQUIRE(a.dim() == cfg.rule_dim);
    CHECK(a.weights == b.weights);
    CHECK(a.means == b.means);
    for (int k = 0; k < a.components(); ++k) CHECK(a.chol[k] == b.chol[k]);
    CHECK(m1.priors.diagnostics[static_cast<std::size_t>(cm)].iterations >= 1);
  }

  // Refit must not touch network parameters.
  std::vector<double> before;
  for (std::size_t pi = 0; pi < m1.store.size(); ++pi)
    before.push_back(m1.store[pi].value.sum());
  SeededRng r3(10, 2);
  knowledge_update(m1, X, r3);
  for (std::size_t pi = 0; pi < m1.store.size(); ++pi)
    CHECK(m1.store[pi].value.sum() == before[pi]);
}

TEST_CASE("crab iteration refits then steps against the fixed prior",
          "[abstraction]") {
  RunConfig cfg = tiny_cfg();
  model::CrabModel<double> m(cfg);
  nn::RmsProp<double> opt(cfg.lr);
  SeededRng data_rng(53, 0);

  const int B = 4;
  std::vector<Matrix<double>> batches;
  for (int u = 0; u < 3; ++u) batches.push_back(random_batch<double>(cfg, B, data_rng));
  std::vector<model::TargetMask> masks(B, model::TargetMask{1 << 8});

  BatchStream<double> stream;
  stream.count = 3;
  stream.images = [&](int u) { return batches[static_cast<std::size_t>(u)]; };
  stream.masks = [&](int) { return masks; };

  const double w_before = m.store[0].value.sum();
  SeededRng rng(54, 0);
  IterationReport rep = crab_iteration(m, stream, opt, rng, 64);

  CHECK(rep.prior_refit);
  CHECK(rep.gradient_steps == 2);
  CHECK(m.priors.active);
  CHECK(std::isfinite(rep.mean.loss));
  CHECK(rep.mean.r_cls != 0.0);  // prior participated in the gradient batches
  CHECK(m.store[0].value.sum() != w_before);

  BatchStream<double> short_stream;
  short_stream.count = 1;
  short_stream.images = stream.images;
  short_stream.masks = stream.masks;
  SeededRng rng2(55, 0);
  CHECK_THROWS_AS(crab_iteration(m, short_stream, opt, rng2, 64), ArgError);
}
