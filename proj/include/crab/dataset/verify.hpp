// Standalone rule checker. Deliberately written as direct row-by-row
// predicate checks with no code shared with the sampling logic, so it can
// vouch for the generator.
#pragma once

#include <array>
#include <cstring>
#include <set>
#include <sstream>
#include <string>
#include <tuple>

#include "crab/dataset/attributes.hpp"
#include "crab/dataset/sample.hpp"

namespace crab::dataset {

// Empty string = rule holds on all three rows; otherwise a human-readable
// reason.
inline std::string check_rule(const AttributeSpec& attr, const RuleSpec& rule,
                              const std::array<int, 9>& stored) {
  auto fail = [&](int row, const std::string& why) {
    std::ostringstream os;
    os << attr.name << " " << rule_kind_name(rule.kind) << "(" << rule.parameter
       << ") row " << row << ": " << why;
    return os.str();
  };

  for (int i = 0; i < 9; ++i)
    if (!value_in_domain(attr, stored[i]))
      return fail(i / 3, "value " + std::to_string(stored[i]) + " outside domain");

  std::array<int, 9> v{};
  for (int i = 0; i < 9; ++i) v[i] = rule_value(attr, stored[i]);

  switch (rule.kind) {
    case RuleKind::Constant:
      for (int r = 0; r < 3; ++r) {
        // Constant pins the stored value, i.e. the exact occupancy mask for
        // Num/Pos, not just the count.
        if (stored[3 * r + 1] != stored[3 * r] || stored[3 * r + 2] != stored[3 * r])
          return fail(r, "values differ");
      }
      break;
    case RuleKind::Progression:
      if (rule.parameter == 0 || std::abs(rule.parameter) > 2)
        return fail(0, "invalid stride");
      for (int r = 0; r < 3; ++r) {
        if (v[3 * r + 1] - v[3 * r] != rule.parameter ||
            v[3 * r + 2] - v[3 * r + 1] != rule.parameter)
          return fail(r, "not an arithmetic progression with the given stride");
      }
      break;
    case RuleKind::Arithmetic:
      if (rule.parameter != 1 && rule.parameter != -1)
        return fail(0, "invalid sign");
      for (int r = 0; r < 3; ++r) {
        if (v[3 * r + 2] != v[3 * r] + rule.parameter * v[3 * r + 1])
          return fail(r, "third value is not first (+/-) second");
      }
      break;
    case RuleKind::DistributeThree: {
      std::set<int> triple(v.begin(), v.begin() + 3);
      if (triple.size() != 3) return fail(0, "row values not distinct");
      for (int r = 1; r < 3; ++r) {
        std::set<int> row(v.begin() + 3 * r, v.begin() + 3 * r + 3);
        if (row != triple) return fail(r, "row is not a permutation of the shared triple");
      }
      std::set<std::tuple<int, int, int>> rows;
      for (int r = 0; r < 3; ++r)
        rows.insert({v[3 * r], v[3 * r + 1], v[3 * r + 2]});
      if (rows.size() != 3) return fail(0, "two rows use the same ordering");
      break;
    }
  }
  return {};
}

// Full-sample validation: rule structure, candidate bookkeeping and
// (optionally) that the stored pixels are exactly what the annotations
// describe. Empty string = valid.
inline std::string check_sample(const GeneratorConfig& cfg, const RpmSample& s,
                                bool check_render = false) {
  if (s.candidates.empty()) return "no candidates";
  if (s.answer_index >= s.candidates.size()) return "answer index out of range";
  if (std::memcmp(s.candidates[s.answer_index].data(), s.panels[8].data(),
                  kImagePixels) != 0)
    return "candidate at answer index differs from the answer panel";
  if (s.annotations.empty()) return "no rule annotations";

  for (const auto& ann : s.annotations) {
    const AttributeSpec* spec = nullptr;
    for (const auto& a : cfg.attributes)
      if (a.name == ann.attribute) spec = &a;
    if (!spec) return "unknown attribute " + ann.attribute;

    std::array<int, 9> vals{};
    for (int i = 0; i < 9; ++i) vals[i] = ann.values[i];
    if (!ann.mapped) {
      for (int i = 0; i < 9; ++i)
        if (!value_in_domain(*spec, vals[i]))
          return ann.attribute + ": value outside domain";
      continue;  // imported rule with no local equivalent: domain check only
    }
    if (std::string err = check_rule(*spec, ann.rule, vals); !err.empty()) return err;
  }

  if (check_render) {
    if (s.annotations.size() != cfg.attributes.size())
      return "render check needs a full annotation set";
    for (int p = 0; p < kPanels; ++p) {
      Image8 img = render_panel(cfg, panel_attrs(s, p));
      if (std::memcmp(img.data(), s.panels[p].data(), kImagePixels) != 0)
        return "panel " + std::to_string(p) + " does not match its annotations";
    }
  }
  return {};
}

}  // namespace crab::dataset
