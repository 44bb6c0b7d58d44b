// Attribute domains, rule taxonomy and the built-in panel configurations.
#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <string>
#include <vector>

#include "crab/common.hpp"

namespace crab::dataset {

enum class RuleKind : std::uint8_t {
  Constant = 0,
  Progression = 1,
  Arithmetic = 2,
  DistributeThree = 3,
};

inline const char* rule_kind_name(RuleKind k) {
  switch (k) {
    case RuleKind::Constant: return "Constant";
    case RuleKind::Progression: return "Progression";
    case RuleKind::Arithmetic: return "Arithmetic";
    case RuleKind::DistributeThree: return "DistributeThree";
  }
  return "?";
}

// parameter: stride (+-1, +-2) for Progression, sign (+-1) for Arithmetic,
// 0 otherwise.
struct RuleSpec {
  RuleKind kind = RuleKind::Constant;
  int parameter = 0;

  bool operator==(const RuleSpec&) const = default;
};

enum class AttributeRole : std::uint8_t { Type, Size, Color, NumPos };

// `levels` is the ordered value domain rules act on. For NumPos the levels
// are object counts; the stored per-panel value is an occupancy bitmask over
// grid cells and rules constrain its popcount (Constant constrains the mask
// itself).
struct AttributeSpec {
  std::string name;
  AttributeRole role = AttributeRole::Type;
  std::vector<int> levels;

  bool occupancy() const { return role == AttributeRole::NumPos; }
  bool has_level(int v) const {
    return std::find(levels.begin(), levels.end(), v) != levels.end();
  }
};

struct GeneratorConfig {
  std::string name;
  int grid = 1;  // 1 = single centered object, 2 = 2x2 grid with occupancy
  std::vector<AttributeSpec> attributes;
  std::vector<RuleKind> allowed_kinds;
};

// Value assignment for one panel: one stored value per attribute, in
// config.attributes order.
using AttrTuple = std::vector<int>;

inline GeneratorConfig generator_config(const std::string& name) {
  auto levels = [](int lo, int hi) {
    std::vector<int> v;
    for (int i = lo; i <= hi; ++i) v.push_back(i);
    return v;
  };
  if (name == "center") {
    return GeneratorConfig{
        .name = name,
        .grid = 1,
        .attributes = {{"Type", AttributeRole::Type, levels(0, 4)},
                       {"Size", AttributeRole::Size, levels(0, 5)},
                       {"Color", AttributeRole::Color, levels(0, 7)}},
        .allowed_kinds = {RuleKind::Constant, RuleKind::Progression,
                          RuleKind::Arithmetic, RuleKind::DistributeThree}};
  }
  if (name == "center-toy") {
    return GeneratorConfig{
        .name = name,
        .grid = 1,
        .attributes = {{"Type", AttributeRole::Type, levels(0, 2)},
                       {"Size", AttributeRole::Size, levels(0, 3)},
                       {"Color", AttributeRole::Color, levels(0, 5)}},
        .allowed_kinds = {RuleKind::Constant, RuleKind::Progression,
                          RuleKind::DistributeThree}};
  }
  if (name == "grid2x2") {
    return GeneratorConfig{
        .name = name,
        .grid = 2,
        .attributes = {{"Num/Pos", AttributeRole::NumPos, levels(1, 4)},
                       {"Type", AttributeRole::Type, levels(0, 4)},
                       {"Size", AttributeRole::Size, levels(0, 5)},
                       {"Color", AttributeRole::Color, levels(0, 7)}},
        .allowed_kinds = {RuleKind::Constant, RuleKind::Progression,
                          RuleKind::Arithmetic, RuleKind::DistributeThree}};
  }
  throw ConfigError("unknown generator config: " + name);
}

// The value a rule constrains: the object count for occupancy attributes,
// the stored level otherwise.
inline int rule_value(const AttributeSpec& a, int stored) {
  return a.occupancy() ? std::popcount(static_cast<unsigned>(stored)) : stored;
}

inline bool value_in_domain(const AttributeSpec& a, int stored) {
  if (a.occupancy()) {
    if (stored < 1 || stored > 15) return false;  // nonempty 2x2 bitmask
    return a.has_level(std::popcount(static_cast<unsigned>(stored)));
  }
  return a.has_level(stored);
}

// Every (kind, parameter) pair that can produce a full row within the
// attribute's domain. Arithmetic is excluded for categorical Type.
inline std::vector<RuleSpec> admissible_rules(const GeneratorConfig& cfg,
                                              int attr_index) {
  const AttributeSpec& a = cfg.attributes.at(attr_index);
  std::vector<RuleSpec> out;
  for (RuleKind k : cfg.allowed_kinds) {
    switch (k) {
      case RuleKind::Constant:
        out.push_back({k, 0});
        break;
      case RuleKind::Progression:
        for (int stride : {-2, -1, 1, 2}) {
          bool feasible = false;
          for (int v : a.levels)
            if (a.has_level(v + stride) && a.has_level(v + 2 * stride)) {
              feasible = true;
              break;
            }
          if (feasible) out.push_back({k, stride});
        }
        break;
      case RuleKind::Arithmetic: {
        if (a.role == AttributeRole::Type) break;
        for (int sign : {1, -1}) {
          bool feasible = false;
          for (int v1 : a.levels) {
            for (int v2 : a.levels)
              if (a.has_level(v1 + sign * v2)) {
                feasible = true;
                break;
              }
            if (feasible) break;
          }
          if (feasible) out.push_back({k, sign});
        }
        break;
      }
      case RuleKind::DistributeThree:
        if (a.levels.size() >= 3) out.push_back({k, 0});
        break;
    }
  }
  return out;
}

}  // namespace crab::dataset
