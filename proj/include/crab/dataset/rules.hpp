// Sampling rule assignments and materializing them into per-panel values.
#pragma once

#include <array>
#include <vector>

#include "crab/dataset/attributes.hpp"
#include "crab/rng.hpp"

namespace crab::dataset {

// One RuleSpec per attribute, in config order.
using RuleAssignment = std::vector<RuleSpec>;

inline RuleAssignment sample_rule_assignment(const GeneratorConfig& cfg,
                                             SeededRng& rng) {
  RuleAssignment out;
  for (int a = 0; a < static_cast<int>(cfg.attributes.size()); ++a) {
    auto options = admissible_rules(cfg, a);
    require<GenerationError>(!options.empty(),
                             "no admissible rule for attribute " + cfg.attributes[a].name);
    out.push_back(options[rng.uniform_below(options.size())]);
  }
  return out;
}

namespace detail {

inline int draw_level(const AttributeSpec& a, SeededRng& rng) {
  return a.levels[rng.uniform_below(a.levels.size())];
}

// Uniform occupancy mask with the given popcount.
inline int draw_mask(int count, SeededRng& rng) {
  std::vector<int> masks;
  for (int m = 1; m <= 15; ++m)
    if (std::popcount(static_cast<unsigned>(m)) == count) masks.push_back(m);
  require<GenerationError>(!masks.empty(), "no mask with requested count");
  return masks[rng.uniform_below(masks.size())];
}

constexpr int kMaxRedraws = 1000;

}  // namespace detail

// Fills the 3x3 grid of stored values for one attribute under one rule.
// Rows are independent draws except DistributeThree, which shares a value
// triple across rows. For occupancy attributes the rules constrain counts and
// positions are re-sampled per panel (Constant repeats the exact mask).
inline std::array<int, 9> apply_rule(const AttributeSpec& attr, const RuleSpec& rule,
                                     SeededRng& rng) {
  std::array<int, 9> counts{};  // rule-level values
  switch (rule.kind) {
    case RuleKind::Constant:
      for (int r = 0; r < 3; ++r) {
        int v = detail::draw_level(attr, rng);
        counts[3 * r] = counts[3 * r + 1] = counts[3 * r + 2] = v;
      }
      break;
    case RuleKind::Progression:
      for (int r = 0; r < 3; ++r) {
        int v = 0;
        bool ok = false;
        for (int tries = 0; tries < detail::kMaxRedraws && !ok; ++tries) {
          v = detail::draw_level(attr, rng);
          ok = attr.has_level(v + rule.parameter) && attr.has_level(v + 2 * rule.parameter);
        }
        require<GenerationError>(ok, "no valid progression start");
        for (int c = 0; c < 3; ++c) counts[3 * r + c] = v + c * rule.parameter;
      }
      break;
    case RuleKind::Arithmetic:
      for (int r = 0; r < 3; ++r) {
        int v1 = 0, v2 = 0;
        bool ok = false;
        for (int tries = 0; tries < detail::kMaxRedraws && !ok; ++tries) {
          v1 = detail::draw_level(attr, rng);
          v2 = detail::draw_level(attr, rng);
          ok = attr.has_level(v1 + rule.parameter * v2);
        }
        require<GenerationError>(ok, "no valid arithmetic pair");
        counts[3 * r] = v1;
        counts[3 * r + 1] = v2;
        counts[3 * r + 2] = v1 + rule.parameter * v2;
      }
      break;
    case RuleKind::DistributeThree: {
      require<GenerationError>(attr.levels.size() >= 3,
                               "DistributeThree needs three levels");
      std::vector<int> pool = attr.levels;
      rng.shuffle(pool.begin(), pool.end());
      std::array<int, 3> triple{pool[0], pool[1], pool[2]};
      rng.shuffle(triple.begin(), triple.end());  // base ordering
      std::array<int, 3> shift{0, 1, 2};          // cyclic shift per row
      rng.shuffle(shift.begin(), shift.end());
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) counts[3 * r + c] = triple[(c + shift[r]) % 3];
      break;
    }
  }

  if (!attr.occupancy()) return counts;

  std::array<int, 9> masks{};
  if (rule.kind == RuleKind::Constant) {
    for (int r = 0; r < 3; ++r) {
      int m = detail::draw_mask(counts[3 * r], rng);
      masks[3 * r] = masks[3 * r + 1] = masks[3 * r + 2] = m;
    }
  } else {
    for (int i = 0; i < 9; ++i) masks[i] = detail::draw_mask(counts[i], rng);
  }
  return masks;
}

// values[attr][panel]
inline std::vector<std::array<int, 9>> apply_rules(const GeneratorConfig& cfg,
                                                   const RuleAssignment& rules,
                                                   SeededRng& rng) {
  require<GenerationError>(rules.size() == cfg.attributes.size(),
                           "rule assignment size mismatch");
  std::vector<std::array<int, 9>> out;
  for (std::size_t a = 0; a < rules.size(); ++a)
    out.push_back(apply_rule(cfg.attributes[a], rules[a], rng));
  return out;
}

}  // namespace crab::dataset
