#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "crab/dataset/attributes.hpp"
#include "crab/dataset/render.hpp"

namespace crab::dataset {

struct RuleAnnotation {
  std::string attribute;
  RuleSpec rule;
  std::array<std::uint8_t, 9> values{};  // stored per-panel values
  bool mapped = true;  // false when an imported rule has no local equivalent
};

// One puzzle: a full 3x3 panel grid (the answer panel is panels[8]),
// a candidate list containing the answer, and the rule annotations.
struct RpmSample {
  std::array<Image8, kPanels> panels{};
  std::vector<Image8> candidates;
  std::uint8_t answer_index = 0;
  std::vector<RuleAnnotation> annotations;
};

struct DatasetMeta {
  std::string config_name;
  int image_side = kImageSide;
  int num_candidates = 0;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<RpmSample> samples;
};

inline AttrTuple panel_attrs(const RpmSample& s, int panel) {
  AttrTuple t;
  for (const auto& ann : s.annotations) t.push_back(ann.values[panel]);
  return t;
}

}  // namespace crab::dataset
