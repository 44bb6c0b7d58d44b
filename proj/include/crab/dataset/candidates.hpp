// Candidate-set construction and the context-blind vote audit.
//
// "biased" perturbs one attribute of the answer per distractor; a classifier
// that picks the most frequent attribute values finds the answer without
// looking at the context. "unbiased" builds the set by hierarchical
// splitting: each chosen attribute is flipped to one shared wrong value in
// half of the set, so every attribute value is tied and the vote is chance.
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <vector>

#include "crab/dataset/attributes.hpp"
#include "crab/rng.hpp"

namespace crab::dataset {

enum class CandidateMode { Biased, Unbiased };

inline const char* candidate_mode_name(CandidateMode m) {
  return m == CandidateMode::Biased ? "biased" : "unbiased";
}

namespace detail {

// All stored values an attribute may take (all valid masks for occupancy).
inline std::vector<int> stored_domain(const AttributeSpec& a) {
  if (!a.occupancy()) return a.levels;
  std::vector<int> masks;
  for (int m = 1; m <= 15; ++m)
    if (a.has_level(std::popcount(static_cast<unsigned>(m)))) masks.push_back(m);
  return masks;
}

inline int draw_wrong_value(const AttributeSpec& a, int avoid, SeededRng& rng) {
  std::vector<int> domain = stored_domain(a);
  std::erase(domain, avoid);
  require<GenerationError>(!domain.empty(),
                           "attribute " + a.name + " has a single value");
  return domain[rng.uniform_below(domain.size())];
}

}  // namespace detail

struct CandidateSet {
  std::vector<AttrTuple> tuples;
  int answer_index = 0;
};

inline CandidateSet make_candidates_biased(const GeneratorConfig& cfg,
                                           const AttrTuple& answer, int n,
                                           SeededRng& rng) {
  require<GenerationError>(n >= 2, "need at least two candidates");
  std::vector<AttrTuple> set = {answer};
  int tries = 0;
  while (static_cast<int>(set.size()) < n) {
    require<GenerationError>(++tries < 1000 * n,
                             "cannot build distinct biased candidates");
    const int a = static_cast<int>(rng.uniform_below(cfg.attributes.size()));
    AttrTuple t = answer;
    t[a] = detail::draw_wrong_value(cfg.attributes[a], answer[a], rng);
    if (std::find(set.begin(), set.end(), t) == set.end()) set.push_back(t);
  }
  rng.shuffle(set.begin(), set.end());
  CandidateSet out{std::move(set), 0};
  out.answer_index = static_cast<int>(
      std::find(out.tuples.begin(), out.tuples.end(), answer) - out.tuples.begin());
  return out;
}

inline CandidateSet make_candidates_unbiased(const GeneratorConfig& cfg,
                                             const AttrTuple& answer, int n,
                                             SeededRng& rng) {
  const int V = static_cast<int>(cfg.attributes.size());
  require<GenerationError>(n >= 2, "need at least two candidates");
  require<GenerationError>(n <= (1 << V),
                           "candidate count exceeds 2^attributes for unbiased sets");
  const int k = static_cast<int>(std::ceil(std::log2(static_cast<double>(n))));

  std::vector<int> attrs(V);
  for (int i = 0; i < V; ++i) attrs[i] = i;
  rng.shuffle(attrs.begin(), attrs.end());
  attrs.resize(k);

  std::vector<int> wrong(k);
  for (int i = 0; i < k; ++i)
    wrong[i] = detail::draw_wrong_value(cfg.attributes[attrs[i]], answer[attrs[i]], rng);

  // Subset bitmask u: flip attrs[i] for every set bit i. u = 0 is the answer.
  std::vector<int> subsets;
  for (int u = 1; u < (1 << k); ++u) subsets.push_back(u);
  // Trim, dropping the candidates that agree with the answer on the most
  // split attributes (fewest flips) first; deterministic order.
  std::sort(subsets.begin(), subsets.end(), [](int a, int b) {
    const int pa = std::popcount(static_cast<unsigned>(a));
    const int pb = std::popcount(static_cast<unsigned>(b));
    return pa != pb ? pa < pb : a < b;
  });
  subsets.erase(subsets.begin(), subsets.begin() + ((1 << k) - n));

  std::vector<AttrTuple> set = {answer};
  for (int u : subsets) {
    AttrTuple t = answer;
    for (int i = 0; i < k; ++i)
      if (u >> i & 1) t[attrs[i]] = wrong[i];
    set.push_back(t);
  }
  rng.shuffle(set.begin(), set.end());
  CandidateSet out{std::move(set), 0};
  out.answer_index = static_cast<int>(
      std::find(out.tuples.begin(), out.tuples.end(), answer) - out.tuples.begin());
  return out;
}

inline CandidateSet make_candidates(const GeneratorConfig& cfg, const AttrTuple& answer,
                                    int n, CandidateMode mode, SeededRng& rng) {
  return mode == CandidateMode::Biased ? make_candidates_biased(cfg, answer, n, rng)
                                       : make_candidates_unbiased(cfg, answer, n, rng);
}

// Context-blind selection: score each candidate by how often its attribute
// values occur across the candidate set; random tie-break.
inline int majority_vote_choice(const std::vector<AttrTuple>& cands, SeededRng& rng) {
  require<ArgError>(!cands.empty(), "empty candidate list");
  const std::size_t V = cands[0].size();
  std::vector<int> score(cands.size(), 0);
  for (std::size_t a = 0; a < V; ++a) {
    std::map<int, int> freq;
    for (const auto& t : cands) freq[t[a]]++;
    for (std::size_t i = 0; i < cands.size(); ++i) score[i] += freq.at(cands[i][a]);
  }
  const int best = *std::max_element(score.begin(), score.end());
  std::vector<int> winners;
  for (std::size_t i = 0; i < cands.size(); ++i)
    if (score[i] == best) winners.push_back(static_cast<int>(i));
  return winners[rng.uniform_below(winners.size())];
}

struct BiasAudit {
  double vote_accuracy = 0.0;
  double chance = 0.0;
  int samples = 0;
};

}  // namespace crab::dataset
