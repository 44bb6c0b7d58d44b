#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "crab/checkpoint.hpp"
#include "crab/dataset/generate.hpp"
#include "crab/train.hpp"

namespace {

crab::RunConfig train_cfg() {
  crab::RunConfig c;
  c.image_side = 64;
  c.concepts = 2;
  c.concept_dim = 4;
  c.rule_dim = 2;
  c.mixture_components = 2;
  c.width_scale = 0.02;
  c.lr = 1e-3;
  c.batch_size = 4;
  c.warmup_epochs = 2;
  c.abstraction_epochs = 2;
  c.seed = 31;
  return c;
}

const crab::dataset::Dataset& toy_ds() {
  static const crab::dataset::Dataset ds = crab::dataset::generate_dataset(
      crab::dataset::generator_config("center-toy"), 8, 4,
      crab::dataset::CandidateMode::Unbiased, 99);
  return ds;
}

void require_exact(const crab::MatrixD& a, const crab::MatrixD& b) {
  REQUIRE(a.rows() == b.rows());
  REQUIRE(a.cols() == b.cols());
  REQUIRE((a - b).cwiseAbs().maxCoeff() == 0.0);
}

void require_sessions_equal(const crab::train::Session<double>& a,
                            const crab::train::Session<double>& b) {
  REQUIRE(a.epochs_done == b.epochs_done);
  REQUIRE(a.rng_state == b.rng_state);
  REQUIRE(a.model.store.size() == b.model.store.size());
  for (std::size_t i = 0; i < a.model.store.size(); ++i) {
    REQUIRE(a.model.store[i].name == b.model.store[i].name);
    require_exact(a.model.store[i].value, b.model.store[i].value);
  }
  REQUIRE(a.opt.state().size() == b.opt.state().size());
  for (std::size_t i = 0; i < a.opt.state().size(); ++i)
    require_exact(a.opt.state()[i], b.opt.state()[i]);
  REQUIRE(a.model.priors.active == b.model.priors.active);
  REQUIRE(a.model.priors.per_concept.size() == b.model.priors.per_concept.size());
  for (std::size_t i = 0; i < a.model.priors.per_concept.size(); ++i) {
    const crab::Gmm& ga = a.model.priors.per_concept[i];
    const crab::Gmm& gb = b.model.priors.per_concept[i];
    REQUIRE(ga.components() == gb.components());
    require_exact(ga.weights, gb.weights);
    require_exact(ga.means, gb.means);
    for (int k = 0; k < ga.components(); ++k) require_exact(ga.chol[k], gb.chol[k]);
  }
}

void require_logs_equal(const std::vector<crab::train::StepLog>& a,
                        const std::vector<crab::train::StepLog>& b) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].epoch == b[i].epoch);
    REQUIRE(a[i].step == b[i].step);
    REQUIRE(a[i].report.loss == b[i].report.loss);
    REQUIRE(a[i].report.elbo == b[i].report.elbo);
    REQUIRE(a[i].report.l_r == b[i].report.l_r);
    REQUIRE(a[i].report.r_r == b[i].report.r_r);
    REQUIRE(a[i].report.r_t == b[i].report.r_t);
    REQUIRE(a[i].report.r_cls == b[i].report.r_cls);
  }
}

}  // namespace

TEST_CASE("epoch batches partition the dataset") {
  crab::SeededRng rng(1, 2);
  const auto plan = crab::train::epoch_batches(13, 4, rng);
  REQUIRE(plan.size() == 4);
  REQUIRE(plan[0].size() == 4);
  REQUIRE(plan[1].size() == 4);
  REQUIRE(plan[2].size() == 4);
  REQUIRE(plan[3].size() == 1);

  std::vector<int> seen;
  for (const auto& b : plan) seen.insert(seen.end(), b.begin(), b.end());
  std::sort(seen.begin(), seen.end());
  for (int i = 0; i < 13; ++i) REQUIRE(seen[static_cast<std::size_t>(i)] == i);

  crab::SeededRng rng2(1, 2);
  REQUIRE(crab::train::epoch_batches(13, 4, rng2) == plan);
  crab::SeededRng rng3(1, 3);
  REQUIRE(crab::train::epoch_batches(13, 4, rng3) != plan);

  REQUIRE_THROWS_AS(crab::train::epoch_batches(0, 4, rng), crab::ArgError);
  REQUIRE_THROWS_AS(crab::train::epoch_batches(4, 0, rng), crab::ArgError);
}

TEST_CASE("training masks blank exactly one panel per sample") {
  crab::SeededRng rng(5, 6);
  const auto masks = crab::train::random_single_masks(64, rng);
  REQUIRE(masks.size() == 64);
  bool saw_high = false;
  for (auto m : masks) {
    REQUIRE(std::popcount(static_cast<unsigned>(m)) == 1);
    REQUIRE(m < (1u << crab::kPanels));
    if (m >= (1u << 5)) saw_high = true;
  }
  REQUIRE(saw_high);  // draws cover the upper positions too

  crab::SeededRng rng2(5, 6);
  REQUIRE(crab::train::random_single_masks(64, rng2) == masks);
}

TEST_CASE("loss log rows round-trip through text") {
  std::ostringstream out;
  crab::train::write_log_header(out);
  crab::train::StepLog s;
  s.epoch = 3;
  s.step = 7;
  s.report.loss = 1.0 / 3.0;
  s.report.elbo = -2.718281828459045;
  s.report.l_r = 1e-17;
  s.report.r_r = 3.0;
  s.report.r_t = 0.1;
  s.report.r_cls = -7.5;
  crab::train::write_log_row(out, s);

  std::istringstream in(out.str());
  std::string header, row;
  std::getline(in, header);
  REQUIRE(header == "epoch,step,loss,elbo,l_r,r_r,r_t,r_cls");
  std::getline(in, row);
  std::vector<std::string> fields;
  std::stringstream rs(row);
  std::string f;
  while (std::getline(rs, f, ',')) fields.push_back(f);
  REQUIRE(fields.size() == 8);
  REQUIRE(std::stoi(fields[0]) == 3);
  REQUIRE(std::stoi(fields[1]) == 7);
  // precision 17 makes the decimal text an exact double round-trip
  REQUIRE(std::stod(fields[2]) == s.report.loss);
  REQUIRE(std::stod(fields[3]) == s.report.elbo);
  REQUIRE(std::stod(fields[4]) == s.report.l_r);
  REQUIRE(std::stod(fields[5]) == s.report.r_r);
  REQUIRE(std::stod(fields[6]) == s.report.r_t);
  REQUIRE(std::stod(fields[7]) == s.report.r_cls);
}

TEST_CASE("warm-up epochs take plain gradient steps") {
  crab::train::Session<double> s(train_cfg());
  const crab::VectorD before = s.model.store[0].value.col(0);

  const auto log = crab::train::run_epoch(s, toy_ds());
  REQUIRE(s.epochs_done == 1);
  REQUIRE(log.size() == 2);  // 8 samples / batch 4
  for (std::size_t i = 0; i < log.size(); ++i) {
    REQUIRE(log[i].epoch == 0);
    REQUIRE(log[i].step == static_cast<int>(i));
    REQUIRE(std::isfinite(log[i].report.loss));
    REQUIRE(log[i].report.r_cls == 0.0);  // no prior term during warm-up
  }
  REQUIRE_FALSE(s.model.priors.active);
  REQUIRE((s.model.store[0].value.col(0) - before).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("abstraction epochs refresh priors then step against them") {
  crab::train::Session<double> s(train_cfg());
  crab::train::run_epoch(s, toy_ds());
  crab::train::run_epoch(s, toy_ds());
  REQUIRE_FALSE(s.model.priors.active);  // warm-up covers epochs 0 and 1

  const auto log = crab::train::run_epoch(s, toy_ds());
  REQUIRE(s.epochs_done == 3);
  REQUIRE(s.model.priors.active);
  REQUIRE(s.model.priors.per_concept.size() == 2);
  REQUIRE(log.size() == 1);  // first batch feeds the refit, second steps
  REQUIRE(log[0].epoch == 2);
  REQUIRE(std::isfinite(log[0].report.loss));
  REQUIRE(log[0].report.r_cls != 0.0);
}

TEST_CASE("disabling abstraction keeps every batch a gradient step") {
  crab::train::Session<double> s(train_cfg());
  for (int e = 0; e < 4; ++e) {
    const auto log = crab::train::run_epoch(s, toy_ds(), /*abstraction_enabled=*/false);
    REQUIRE(log.size() == 2);
    REQUIRE_FALSE(s.model.priors.active);
  }
}

TEST_CASE("a single-batch epoch falls back to plain steps") {
  crab::RunConfig cfg = train_cfg();
  cfg.batch_size = 8;  // whole dataset in one batch
  cfg.warmup_epochs = 0;
  crab::train::Session<double> s(cfg);
  const auto log = crab::train::run_epoch(s, toy_ds());
  REQUIRE(log.size() == 1);
  REQUIRE_FALSE(s.model.priors.active);  // refits need a spare batch
}

TEST_CASE("run_epoch validates the dataset") {
  crab::train::Session<double> s(train_cfg());
  crab::dataset::Dataset empty;
  empty.meta.image_side = 64;
  REQUIRE_THROWS_AS(crab::train::run_epoch(s, empty), crab::ArgError);

  crab::dataset::Dataset wrong_side = toy_ds();
  wrong_side.meta.image_side = 32;
  REQUIRE_THROWS_AS(crab::train::run_epoch(s, wrong_side), crab::ArgError);
}

TEST_CASE("checkpoints round-trip byte-identically") {
  crab::train::Session<double> s(train_cfg());
  for (int e = 0; e < 3; ++e) crab::train::run_epoch(s, toy_ds());
  REQUIRE(s.model.priors.active);  // exercise the prior block of the format

  const auto bytes = crab::ckpt::serialize_session(s);
  auto loaded = crab::ckpt::parse_session<double>(bytes);
  require_sessions_equal(s, loaded);
  REQUIRE(loaded.cfg.seed == s.cfg.seed);
  REQUIRE(loaded.cfg.batch_size == s.cfg.batch_size);
  REQUIRE(crab::ckpt::serialize_session(loaded) == bytes);
}

TEST_CASE("fresh sessions checkpoint before any step") {
  crab::train::Session<double> s(train_cfg());
  const auto bytes = crab::ckpt::serialize_session(s);
  auto loaded = crab::ckpt::parse_session<double>(bytes);
  require_sessions_equal(s, loaded);
  REQUIRE(loaded.opt.state().empty());
}

TEST_CASE("corrupted checkpoints are rejected") {
  crab::train::Session<double> s(train_cfg());
  const auto bytes = crab::ckpt::serialize_session(s);

  auto bad_magic = bytes;
  bad_magic[0] ^= 0xff;
  REQUIRE_THROWS_AS(crab::ckpt::parse_session<double>(bad_magic), crab::FormatError);

  auto bad_version = bytes;
  bad_version[4] ^= 0xff;
  REQUIRE_THROWS_AS(crab::ckpt::parse_session<double>(bad_version), crab::FormatError);

  auto truncated = bytes;
  truncated.resize(truncated.size() - 5);
  REQUIRE_THROWS_AS(crab::ckpt::parse_session<double>(truncated), crab::FormatError);

  auto trailing = bytes;
  trailing.push_back(0);
  REQUIRE_THROWS_AS(crab::ckpt::parse_session<double>(trailing), crab::FormatError);
}

TEST_CASE("a reloaded session continues bit-identically") {
  std::vector<crab::train::StepLog> straight_log;
  crab::train::Session<double> straight(train_cfg());
  for (int e = 0; e < 4; ++e) {
    const auto log = crab::train::run_epoch(straight, toy_ds());
    straight_log.insert(straight_log.end(), log.begin(), log.end());
  }

  std::vector<crab::train::StepLog> resumed_log;
  std::vector<std::uint8_t> bytes;
  {
    crab::train::Session<double> first(train_cfg());
    for (int e = 0; e < 2; ++e) {
      const auto log = crab::train::run_epoch(first, toy_ds());
      resumed_log.insert(resumed_log.end(), log.begin(), log.end());
    }
    bytes = crab::ckpt::serialize_session(first);
  }
  auto second = crab::ckpt::parse_session<double>(bytes);
  REQUIRE(second.epochs_done == 2);
  for (int e = 0; e < 2; ++e) {
    const auto log = crab::train::run_epoch(second, toy_ds());
    resumed_log.insert(resumed_log.end(), log.begin(), log.end());
  }

  require_logs_equal(straight_log, resumed_log);
  require_sessions_equal(straight, second);
}
