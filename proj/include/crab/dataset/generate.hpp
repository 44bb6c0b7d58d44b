#pragma once

#include <cstring>
#include <vector>

#include "crab/dataset/candidates.hpp"
#include "crab/dataset/rules.hpp"
#include "crab/dataset/sample.hpp"
#include "crab/rng.hpp"

namespace crab::dataset {

// Builds one puzzle: rules -> attribute grid -> renders -> candidate set.
// When `tuples_out` is given it receives the candidate attribute tuples
// (used by the bias audit, which must not re-derive them from pixels).
inline RpmSample generate_sample(const GeneratorConfig& cfg, CandidateMode mode,
                                 int n_candidates, SeededRng& rng,
                                 std::vector<AttrTuple>* tuples_out = nullptr) {
  const RuleAssignment rules = sample_rule_assignment(cfg, rng);
  const auto values = apply_rules(cfg, rules, rng);

  RpmSample s;
  for (int p = 0; p < kPanels; ++p) {
    AttrTuple t;
    for (std::size_t a = 0; a < values.size(); ++a) t.push_back(values[a][p]);
    s.panels[p] = render_panel(cfg, t);
  }

  AttrTuple answer;
  for (std::size_t a = 0; a < values.size(); ++a) answer.push_back(values[a][8]);
  CandidateSet cands = make_candidates(cfg, answer, n_candidates, mode, rng);

  for (const auto& t : cands.tuples) s.candidates.push_back(render_panel(cfg, t));
  s.answer_index = static_cast<std::uint8_t>(cands.answer_index);

  // Attribute-level distinctness must survive rendering.
  for (std::size_t i = 0; i < s.candidates.size(); ++i)
    for (std::size_t j = i + 1; j < s.candidates.size(); ++j)
      require<GenerationError>(
          std::memcmp(s.candidates[i].data(), s.candidates[j].data(), kImagePixels) != 0,
          "two candidates rendered identically");
  require<GenerationError>(
      std::memcmp(s.candidates[s.answer_index].data(), s.panels[8].data(),
                  kImagePixels) == 0,
      "answer candidate does not match the answer panel");

  for (std::size_t a = 0; a < values.size(); ++a) {
    RuleAnnotation ann;
    ann.attribute = cfg.attributes[a].name;
    ann.rule = rules[a];
    for (int p = 0; p < kPanels; ++p)
      ann.values[p] = static_cast<std::uint8_t>(values[a][p]);
    s.annotations.push_back(std::move(ann));
  }

  if (tuples_out) *tuples_out = std::move(cands.tuples);
  return s;
}

// Each sample draws from its own RNG stream, so a dataset is a pure function
// of (config, mode, n, n_candidates, seed) regardless of generation order.
inline Dataset generate_dataset(const GeneratorConfig& cfg, int num_samples,
                                int n_candidates, CandidateMode mode,
                                std::uint64_t seed, BiasAudit* audit = nullptr) {
  require<ArgError>(num_samples > 0, "num_samples must be positive");
  Dataset ds;
  ds.meta.config_name = cfg.name;
  ds.meta.num_candidates = n_candidates;
  ds.samples.reserve(num_samples);

  SeededRng audit_rng(seed, (1ull << 32) + 1);
  int hits = 0;
  for (int i = 0; i < num_samples; ++i) {
    SeededRng rng(seed, static_cast<std::uint64_t>(i));
    std::vector<AttrTuple> tuples;
    RpmSample s = generate_sample(cfg, mode, n_candidates, rng, &tuples);
    if (audit && majority_vote_choice(tuples, audit_rng) == s.answer_index) hits++;
    ds.samples.push_back(std::move(s));
  }
  if (audit) {
    audit->samples = num_samples;
    audit->vote_accuracy = static_cast<double>(hits) / num_samples;
    audit->chance = 1.0 / n_candidates;
  }
  return ds;
}

}  // namespace crab::dataset
