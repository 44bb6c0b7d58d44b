#pragma once

#include <array>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "crab/abstraction.hpp"
#include "crab/config.hpp"
#include "crab/dataset/sample.hpp"
#include "crab/model/model.hpp"
#include "crab/model/objective.hpp"
#include "crab/nn/optimizer.hpp"

namespace crab::train {

// One training run: model, optimizer, and progress. Epoch randomness is
// derived from (seed, epoch index), so a session reloaded at an epoch
// boundary continues exactly like an uninterrupted run.
template <typename T>
struct Session {
  RunConfig cfg;
  model::CrabModel<T> model;
  nn::RmsProp<T> opt;
  int epochs_done = 0;
  std::array<std::uint64_t, 4> rng_state{};  // epoch rng at last save point

  explicit Session(const RunConfig& c)
      : cfg(c), model(c), opt(static_cast<T>(c.lr)) {}
};

struct StepLog {
  int epoch = 0;
  int step = 0;
  model::LossReport report;
};

inline void write_log_header(std::ostream& out) {
  out << "epoch,step,loss,elbo,l_r,r_r,r_t,r_cls\n";
}

inline void write_log_row(std::ostream& out, const StepLog& s) {
  out.precision(17);
  out << s.epoch << ',' << s.step << ',' << s.report.loss << ',' << s.report.elbo
      << ',' << s.report.l_r << ',' << s.report.r_r << ',' << s.report.r_t << ','
      << s.report.r_cls << '\n';
}

// Shuffled index batches covering the dataset once; the tail batch may be
// short.
inline std::vector<std::vector<int>> epoch_batches(int n, int batch_size,
                                                   SeededRng& rng) {
  require<ArgError>(n > 0 && batch_size > 0, "epoch_batches: empty plan");
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<int>> out;
  for (int at = 0; at < n; at += batch_size) {
    const int count = std::min(batch_size, n - at);
    out.emplace_back(order.begin() + at, order.begin() + at + count);
  }
  return out;
}

// Pixel matrix of whole samples: column b*9+n carries panel n of idx[b].
template <typename T>
Matrix<T> batch_images(const dataset::Dataset& ds, const std::vector<int>& idx) {
  std::vector<const dataset::Image8*> ptrs;
  ptrs.reserve(idx.size() * kPanels);
  for (int i : idx)
    for (const auto& p : ds.samples[static_cast<std::size_t>(i)].panels)
      ptrs.push_back(&p);
  return model::images_to_columns<T>(ptrs);
}

// Training masks: one uniformly random blank position per sample.
inline std::vector<model::TargetMask> random_single_masks(int B, SeededRng& rng) {
  std::vector<model::TargetMask> masks;
  masks.reserve(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b)
    masks.push_back(model::TargetMask(1) << rng.uniform_below(kPanels));
  return masks;
}

// Runs epoch `epochs_done`: plain objective steps during warm-up (or when
// abstraction is disabled), otherwise one alternating iteration whose first
// batch refreshes the priors. Appends one log row per optimizer step.
template <typename T>
std::vector<StepLog> run_epoch(Session<T>& s, const dataset::Dataset& ds,
                               bool abstraction_enabled = true) {
  require<ArgError>(!ds.samples.empty(), "run_epoch: empty dataset");
  require<ArgError>(ds.meta.image_side == s.cfg.image_side,
                    "run_epoch: dataset image side does not match model");
  const int epoch = s.epochs_done;
  SeededRng rng(s.cfg.seed, model::streams::epoch(epoch));
  const auto batches = epoch_batches(static_cast<int>(ds.samples.size()),
                                     s.cfg.batch_size, rng);
  const bool abstraction_phase =
      abstraction_enabled && epoch >= s.cfg.warmup_epochs && batches.size() >= 2;

  std::vector<StepLog> log;
  if (abstraction_phase) {
    abstraction::BatchStream<T> stream;
    stream.count = static_cast<int>(batches.size());
    stream.images = [&](int u) {
      return batch_images<T>(ds, batches[static_cast<std::size_t>(u)]);
    };
    // Masks must be drawn inside the stream callback so the rng sequence
    // interleaves exactly as the iteration consumes batches.
    stream.masks = [&](int u) {
      return random_single_masks(
          static_cast<int>(batches[static_cast<std::size_t>(u)].size()), rng);
    };
    abstraction::IterationReport rep =
        abstraction::crab_iteration(s.model, stream, s.opt, rng, ds.samples.size());
    for (std::size_t i = 0; i < rep.steps.size(); ++i)
      log.push_back({epoch, static_cast<int>(i), rep.steps[i]});
  } else {
    for (std::size_t u = 0; u < batches.size(); ++u) {
      const auto& idx = batches[u];
      Matrix<T> X = batch_images<T>(ds, idx);
      const auto masks = random_single_masks(static_cast<int>(idx.size()), rng);
      model::LossReport r =
          model::objective_step(s.model, X, masks, rng,
                                /*use_prior=*/false, ds.samples.size(),
                                /*backprop=*/true);
      s.opt.step(s.model.store);
      log.push_back({epoch, static_cast<int>(u), r});
    }
  }
  s.rng_state = rng.state();
  ++s.epochs_done;
  return log;
}

}  // namespace crab::train
