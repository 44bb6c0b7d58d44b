#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "crab/model/model.hpp"
#include "crab/model/objective.hpp"

using namespace crab;
using namespace crab::model;

namespace {

RunConfig tiny_cfg() {
  RunConfig c;
  c.image_side = 8;
  c.concepts = 2;
  c.concept_dim = 4;
  c.rule_dim = 2;
  c.mixture_components = 2;
  c.width_scale = 0.01;
  c.batch_size = 3;
  c.seed = 7;
  return c;
}

template <typename T>
Matrix<T> random_mat(Eigen::Index r, Eigen::Index c, SeededRng& rng, double lo = 0.0,
                     double hi = 1.0) {
  Matrix<T> m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i)
      m(i, j) = static_cast<T>(lo + (hi - lo) * rng.uniform());
  return m;
}

Gmm unit_gmm_2d() {
  Gmm g;
  g.weights = VectorD::Constant(2, 0.5);
  g.means = MatrixD(2, 2);
  g.means << 1.5, 0.0, -1.5, 0.0;
  g.chol = {MatrixD::Identity(2, 2), MatrixD::Identity(2, 2)};
  return g;
}

}  // namespace

TEST_CASE("model builds deterministically with the expected shapes", "[model]") {
  RunConfig cfg = tiny_cfg();
  CrabModel<double> a(cfg), b(cfg);
  REQUIRE(a.store.size() == b.store.size());
  for (std::size_t i = 0; i < a.store.size(); ++i) {
    REQUIRE(a.store[i].name == b.store[i].name);
    REQUIRE(a.store[i].value == b.store[i].value);
  }

  const int B = 2;
  SeededRng rng(3, 0);
  Matrix<double> x = random_mat<double>(cfg.pixels(), 9 * B, rng);
  Matrix<double> mu = a.encode_means(x);
  REQUIRE(mu.rows() == cfg.concepts * cfg.concept_dim);
  REQUIRE(mu.cols() == 9 * B);
  REQUIRE(a.encode_means(x) == mu);  // pure evaluation

  Matrix<double> xhat = a.decode_means(mu.leftCols(3));
  REQUIRE(xhat.rows() == cfg.pixels());
  REQUIRE(xhat.cols() == 3);
  REQUIRE(xhat.minCoeff() > 0.0);
  REQUIRE(xhat.maxCoeff() < 1.0);

  auto stats = a.rule_posterior(mu, B);
  REQUIRE(static_cast<int>(stats.mu.size()) == cfg.concepts);
  REQUIRE(stats.mu[0].rows() == cfg.rule_dim);
  REQUIRE(stats.mu[0].cols() == B);
  REQUIRE(stats.sigma[0].minCoeff() > 0.0);
}

TEST_CASE("gated pairs cannot influence the rule prior branch", "[model]") {
  RunConfig cfg = tiny_cfg();
  CrabModel<double> model(cfg);
  const int B = 4;
  SeededRng rng(11, 0);
  Matrix<double> Z = random_mat<double>(model.latent_dim(), 9 * B, rng, -1, 1);
  std::vector<TargetMask> masks = {1 << 8, 1 << 3, (1 << 2) | (1 << 7),
                                   (1 << 0) | (1 << 4) | (1 << 8)};

  auto base = model.rule_prior_branch(Z, masks);

  // Overwrite the target panels' latent columns with garbage.
  Matrix<double> Zc = Z;
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < 9; ++n)
      if (masks[b] >> n & 1) Zc.col(b * 9 + n).setConstant(1e6);
  auto corrupted = model.rule_prior_branch(Zc, masks);
  for (int m = 0; m < cfg.concepts; ++m) {
    REQUIRE(base.mu[m] == corrupted.mu[m]);        // bit-identical
    REQUIRE(base.sigma[m] == corrupted.sigma[m]);
  }

  // Same at the embedding level: garbage in gated embedding columns.
  auto gates = pair_gates(masks);
  int zeros_first = 0;
  for (int p = 0; p < kPairCount; ++p) zeros_first += gates[3 * kPairCount + p] == 0;
  // |T| = 3 knocks out pairs touching any of three panels.
  REQUIRE(zeros_first == 81 - 36);
  std::vector<TargetMask> single = {1 << 8};
  auto g1 = pair_gates(single);
  int zeros = 0;
  for (auto v : g1) zeros += v == 0;
  REQUIRE(zeros == 17);  // 9 + 9 - 1 pairs touch one target panel

  Matrix<double> pin = make_pair_input(model.concept_slice(Z, 0), B);
  Matrix<double> E = model.parsers[0].pair_forward(pin, nullptr);
  Matrix<double> head = model.parsers[0].relation_forward(E, gates, B, nullptr);
  Matrix<double> Ec = E;
  for (int b = 0; b < B; ++b)
    for (int p = 0; p < kPairCount; ++p)
      if (!gates[b * kPairCount + p]) Ec.col(b * kPairCount + p).setConstant(-4e9);
  REQUIRE(model.parsers[0].relation_forward(Ec, gates, B, nullptr) == head);
}

TEST_CASE("mask validation rejects degenerate target sets", "[model]") {
  RunConfig cfg = tiny_cfg();
  CrabModel<double> model(cfg);
  SeededRng rng(4, 0);
  Matrix<double> Z = random_mat<double>(model.latent_dim(), 9, rng);
  REQUIRE_THROWS_AS(model.rule_prior_branch(Z, {0}), MaskError);          // no target
  REQUIRE_THROWS_AS(model.rule_prior_branch(Z, {0x1ff}), MaskError);      // no context
  REQUIRE_THROWS_AS(model.rule_prior_branch(Z, {1 << 9}), MaskError);     // bad bit
}

TEST_CASE("objective satisfies the decomposition identity", "[model]") {
  RunConfig cfg = tiny_cfg();
  CrabModel<double> model(cfg);
  model.priors.per_concept = {unit_gmm_2d(), unit_gmm_2d()};
  model.priors.active = true;

  const int B = 3;
  SeededRng data_rng(21, 0);
  Matrix<double> X = random_mat<double>(cfg.pixels(), 9 * B, data_rng);
  std::vector<TargetMask> masks = {1 << 8, 1 << 2, 1 << 5};

  for (bool use_prior : {false, true}) {
    SeededRng rng(55, 1);
    auto rep = objective_step(model, X, masks, rng, use_prior, 64, false, false);
    REQUIRE(std::isfinite(rep.loss));
    REQUIRE(rep.r_r >= 0.0);
    REQUIRE(rep.r_t >= 0.0);
    REQUIRE(rep.r_c == 0.0);
    REQUIRE(std::abs(rep.elbo - (rep.l_r - rep.r_r - rep.r_t)) < 1e-12);
    const double expect = -rep.l_r + cfg.beta_r * rep.r_r + cfg.beta_t * rep.r_t +
                          cfg.beta_cls * rep.r_cls;
    REQUIRE(std::abs(rep.loss - expect) < 1e-12);
    if (!use_prior) REQUIRE(rep.r_cls == 0.0);
  }
}

TEST_CASE("objective is a pure function of the rng seed", "[model]") {
  RunConfig cfg = tiny_cfg();
  CrabModel<double> model(cfg);
  const int B = 2;
  SeededRng data_rng(22, 0);
  Matrix<double> X = random_mat<double>(cfg.pixels(), 9 * B, data_rng);
  std::vector<TargetMask> masks = {1 << 8, 1 << 1};

  SeededRng r1(9, 2), r2(9, 2), r3(10, 2);
  auto a = objective_step(model, X, masks, r1, false, 0, false, false);
  auto b = objective_step(model, X, masks, r2, false, 0, false, false);
  auto c = objective_step(model, X, masks, r3, false, 0, false, false);
  REQUIRE(a.loss == b.loss);
  REQUIRE(a.l_r == b.l_r);
  REQUIRE(a.loss != c.loss);
}

TEST_CASE("analytic gradients match finite differences through the whole loss",
          "[model][grad]") {
  RunConfig cfg = tiny_cfg();
  CrabModel<double> model(cfg);
  model.priors.per_concept = {unit_gmm_2d(), unit_gmm_2d()};
  model.priors.active = true;

  // Check at a generic point: fresh init leaves every bias at zero, which
  // parks many ReLU pre-activations on the kink where central differences
  // disagree with the (one-sided) analytic derivative.
  SeededRng jitter(91, 0);
  for (std::size_t pi = 0; pi < model.store.size(); ++pi) {
    auto& p = model.store[pi];
    if (!p.trainable) continue;
    for (Eigen::Index k = 0; k < p.value.size(); ++k)
      p.value.data()[k] += 0.06 * (jitter.uniform() - 0.5);
  }

  const int B = 3;
  SeededRng data_rng(31, 0);
  Matrix<double> X = random_mat<double>(cfg.pixels(), 9 * B, data_rng, 0.05, 0.95);
  std::vector<TargetMask> masks = {1 << 8, 1 << 4, 1 << 0};

  auto loss_fn = [&] {
    SeededRng rng(123, 9);
    return objective_step(model, X, masks, rng, true, 64, false, false).loss;
  };

  {
    SeededRng rng(123, 9);
    objective_step(model, X, masks, rng, true, 64, true, false);
  }

  const double h = 1e-6;
  int checked = 0;
  for (std::size_t pi = 0; pi < model.store.size(); ++pi) {
    auto& p = model.store[pi];
    if (!p.trainable) continue;
    const Eigen::Index n = p.value.size();
    for (Eigen::Index k : {Eigen::Index(0), n / 2, n - 1}) {
      double* v = p.value.data() + k;
      const double orig = *v;
      *v = orig + h;
      const double up = loss_fn();
      *v = orig - h;
      const double down = loss_fn();
      *v = orig;
      const double fd = (up - down) / (2 * h);
      const double an = p.grad.data()[k];
      INFO(p.name << " entry " << k << " fd=" << fd << " an=" << an);
      REQUIRE(std::abs(fd - an) < 1e-4 * std::max(std::abs(fd) + std::abs(an), 1e-2));
      ++checked;
    }
  }
  REQUIRE(checked > 100);
}

TEST_CASE("mws entropy estimator matches a brute-force evaluation", "[model]") {
  SeededRng rng(77, 0);
  const int B = 8, d = 2;
  Matrix<double> r = random_mat<double>(d, B, rng, -2, 2);
  Matrix<double> mu = random_mat<double>(d, B, rng, -2, 2);
  Matrix<double> sigma = random_mat<double>(d, B, rng, 0.3, 1.5);
  const std::size_t N = 40;

  // Brute force in probability space, no shared code with the estimator.
  double acc = 0;
  for (int i = 0; i < B; ++i) {
    double s = 0;
    for (int j = 0; j < B; ++j) {
      double pdf = 1;
      for (int e = 0; e < d; ++e) {
        const double zz = (r(e, i) - mu(e, j)) / sigma(e, j);
        pdf *= std::exp(-0.5 * zz * zz) / (sigma(e, j) * std::sqrt(2 * M_PI));
      }
      s += pdf;
    }
    acc += std::log(s / (static_cast<double>(N) * B));
  }
  const double brute = acc / B;
  REQUIRE(std::abs(mws_entropy(r, mu, sigma, N) - brute) < 1e-9);

  REQUIRE_THROWS_AS(mws_entropy(r, mu, sigma, 4), EstimatorError);  // N < B
}
