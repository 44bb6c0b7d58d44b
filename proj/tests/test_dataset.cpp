#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <set>

#include "crab/dataset/candidates.hpp"
#include "crab/dataset/generate.hpp"
#include "crab/dataset/io.hpp"
#include "crab/dataset/verify.hpp"

using namespace crab;
using namespace crab::dataset;

TEST_CASE("config registry", "[dataset]") {
  auto center = generator_config("center");
  REQUIRE(center.attributes.size() == 3);
  REQUIRE(center.attributes[0].levels.size() == 5);
  REQUIRE(center.attributes[1].levels.size() == 6);
  REQUIRE(center.attributes[2].levels.size() == 8);
  REQUIRE(center.grid == 1);

  auto toy = generator_config("center-toy");
  REQUIRE(toy.attributes[0].levels.size() == 3);
  REQUIRE(toy.attributes[1].levels.size() == 4);
  REQUIRE(toy.attributes[2].levels.size() == 6);

  auto grid = generator_config("grid2x2");
  REQUIRE(grid.grid == 2);
  REQUIRE(grid.attributes[0].occupancy());

  REQUIRE_THROWS_AS(generator_config("nope"), ConfigError);
}

TEST_CASE("admissible rules respect domains and roles", "[dataset]") {
  auto toy = generator_config("center-toy");
  // Type has 3 levels: Constant, Progression +-1, DistributeThree.
  auto type_rules = admissible_rules(toy, 0);
  REQUIRE(type_rules.size() == 4);
  for (const auto& r : type_rules) {
    REQUIRE(r.kind != RuleKind::Arithmetic);
    if (r.kind == RuleKind::Progression) REQUIRE(std::abs(r.parameter) == 1);
  }

  auto center = generator_config("center");
  // Type is categorical: Arithmetic stays excluded even though allowed.
  for (const auto& r : admissible_rules(center, 0))
    REQUIRE(r.kind != RuleKind::Arithmetic);
  // Size (6 levels) admits strides +-1 and +-2 plus both Arithmetic signs.
  auto size_rules = admissible_rules(center, 1);
  int prog = 0, arith = 0;
  for (const auto& r : size_rules) {
    prog += r.kind == RuleKind::Progression;
    arith += r.kind == RuleKind::Arithmetic;
  }
  REQUIRE(prog == 4);
  REQUIRE(arith == 2);
}

TEST_CASE("rule checker accepts hand-built positives", "[dataset]") {
  auto toy = generator_config("center-toy");
  const auto& size = toy.attributes[1];   // levels 0..3
  const auto& color = toy.attributes[2];  // levels 0..5

  REQUIRE(check_rule(size, {RuleKind::Constant, 0}, {2, 2, 2, 0, 0, 0, 3, 3, 3}).empty());
  REQUIRE(check_rule(size, {RuleKind::Progression, 1}, {0, 1, 2, 1, 2, 3, 0, 1, 2}).empty());
  REQUIRE(check_rule(size, {RuleKind::Progression, -1}, {3, 2, 1, 2, 1, 0, 3, 2, 1}).empty());
  REQUIRE(check_rule(color, {RuleKind::Arithmetic, 1}, {1, 2, 3, 0, 5, 5, 2, 2, 4}).empty());
  REQUIRE(check_rule(color, {RuleKind::Arithmetic, -1}, {5, 2, 3, 4, 4, 0, 3, 1, 2}).empty());
  REQUIRE(check_rule(size, {RuleKind::DistributeThree, 0},
                     {0, 1, 2, 1, 2, 0, 2, 0, 1}).empty());
}

TEST_CASE("rule checker rejects hand-built negatives", "[dataset]") {
  auto toy = generator_config("center-toy");
  const auto& size = toy.attributes[1];

  REQUIRE_FALSE(check_rule(size, {RuleKind::Constant, 0}, {2, 2, 1, 0, 0, 0, 3, 3, 3}).empty());
  REQUIRE_FALSE(check_rule(size, {RuleKind::Progression, 1}, {0, 1, 3, 1, 2, 3, 0, 1, 2}).empty());
  REQUIRE_FALSE(check_rule(size, {RuleKind::DistributeThree, 0},
                           {0, 1, 2, 0, 1, 2, 2, 0, 1}).empty());  // repeated row
  REQUIRE_FALSE(check_rule(size, {RuleKind::DistributeThree, 0},
                           {0, 1, 2, 1, 2, 0, 2, 0, 0}).empty());  // not a permutation
  REQUIRE_FALSE(check_rule(size, {RuleKind::Constant, 0}, {9, 9, 9, 0, 0, 0, 1, 1, 1}).empty());
  REQUIRE_FALSE(check_rule(size, {RuleKind::Progression, 0}, {0, 0, 0, 1, 1, 1, 2, 2, 2}).empty());
}

TEST_CASE("rule checker handles occupancy masks", "[dataset]") {
  auto grid = generator_config("grid2x2");
  const auto& np = grid.attributes[0];

  // Constant pins the exact mask, not just the count.
  REQUIRE(check_rule(np, {RuleKind::Constant, 0}, {5, 5, 5, 3, 3, 3, 12, 12, 12}).empty());
  REQUIRE_FALSE(check_rule(np, {RuleKind::Constant, 0}, {5, 6, 5, 3, 3, 3, 12, 12, 12}).empty());
  // Progression on counts: popcounts 1,2,3 per row.
  REQUIRE(check_rule(np, {RuleKind::Progression, 1}, {1, 3, 7, 8, 12, 14, 2, 5, 11}).empty());
  // Arithmetic on counts: 1+2=3, 2+2=4, 1+1=2.
  REQUIRE(check_rule(np, {RuleKind::Arithmetic, 1}, {4, 3, 13, 6, 9, 15, 8, 1, 3}).empty());
  // Mask 0 (no objects) is outside the domain.
  REQUIRE_FALSE(check_rule(np, {RuleKind::Constant, 0}, {0, 0, 0, 3, 3, 3, 5, 5, 5}).empty());
}

TEST_CASE("sampled rules always satisfy the checker", "[dataset]") {
  SeededRng rng(2024, 0);
  for (const char* name : {"center", "center-toy", "grid2x2"}) {
    auto cfg = generator_config(name);
    for (int a = 0; a < static_cast<int>(cfg.attributes.size()); ++a) {
      for (const auto& rule : admissible_rules(cfg, a)) {
        for (int rep = 0; rep < 50; ++rep) {
          auto vals = apply_rule(cfg.attributes[a], rule, rng);
          INFO(name << " " << cfg.attributes[a].name << " "
                    << rule_kind_name(rule.kind) << " " << rule.parameter);
          REQUIRE(check_rule(cfg.attributes[a], rule, vals).empty());
        }
      }
    }
  }
}

TEST_CASE("renderer is deterministic and injective on tuples", "[dataset]") {
  auto toy = generator_config("center-toy");
  std::vector<Image8> images;
  for (int t = 0; t < 3; ++t)
    for (int s = 0; s < 4; ++s)
      for (int c = 0; c < 6; ++c) {
        Image8 img = render_panel(toy, {t, s, c});
        Image8 again = render_panel(toy, {t, s, c});
        REQUIRE(std::memcmp(img.data(), again.data(), kImagePixels) == 0);
        REQUIRE(img[0] == 255);                      // white background corner
        REQUIRE(img[32 * kImageSide + 32] < 250);    // object covers the center
        images.push_back(img);
      }
  for (std::size_t i = 0; i < images.size(); ++i)
    for (std::size_t j = i + 1; j < images.size(); ++j)
      REQUIRE(std::memcmp(images[i].data(), images[j].data(), kImagePixels) != 0);
}

TEST_CASE("grid renderer puts objects in masked cells only", "[dataset]") {
  auto grid = generator_config("grid2x2");
  // mask 5 = bits 0 and 2 = cells (0,0) and (1,0): left column occupied.
  Image8 img = render_panel(grid, {5, 1, 2, 3});
  auto at = [&](int x, int y) { return img[y * kImageSide + x]; };
  REQUIRE(at(16, 16) < 250);
  REQUIRE(at(16, 48) < 250);
  REQUIRE(at(48, 16) == 255);
  REQUIRE(at(48, 48) == 255);
}

TEST_CASE("biased candidates perturb exactly one attribute", "[dataset]") {
  auto toy = generator_config("center-toy");
  SeededRng rng(7, 0);
  AttrTuple answer{1, 2, 3};
  for (int rep = 0; rep < 30; ++rep) {
    auto set = make_candidates_biased(toy, answer, 8, rng);
    REQUIRE(set.tuples.size() == 8);
    REQUIRE(set.tuples[set.answer_index] == answer);
    std::set<AttrTuple> uniq(set.tuples.begin(), set.tuples.end());
    REQUIRE(uniq.size() == 8);
    for (int i = 0; i < 8; ++i) {
      if (i == set.answer_index) continue;
      int diffs = 0;
      for (int a = 0; a < 3; ++a) diffs += set.tuples[i][a] != answer[a];
      REQUIRE(diffs == 1);
    }
  }
}

TEST_CASE("unbiased candidates tie every attribute vote", "[dataset]") {
  auto toy = generator_config("center-toy");
  SeededRng rng(8, 0);
  AttrTuple answer{0, 3, 5};
  for (int rep = 0; rep < 30; ++rep) {
    auto set = make_candidates_unbiased(toy, answer, 8, rng);
    REQUIRE(set.tuples.size() == 8);
    REQUIRE(set.tuples[set.answer_index] == answer);
    std::set<AttrTuple> uniq(set.tuples.begin(), set.tuples.end());
    REQUIRE(uniq.size() == 8);
    // With 8 = 2^3 candidates every attribute splits into two values, four
    // candidates each.
    for (int a = 0; a < 3; ++a) {
      std::map<int, int> freq;
      for (const auto& t : set.tuples) freq[t[a]]++;
      REQUIRE(freq.size() == 2);
      for (const auto& [v, c] : freq) REQUIRE(c == 4);
    }
  }
}

TEST_CASE("unbiased truncation drops the near-answer distractors", "[dataset]") {
  auto toy = generator_config("center-toy");
  SeededRng rng(9, 0);
  AttrTuple answer{1, 1, 1};
  auto set = make_candidates_unbiased(toy, answer, 5, rng);
  REQUIRE(set.tuples.size() == 5);
  for (int i = 0; i < 5; ++i) {
    if (i == set.answer_index) continue;
    int diffs = 0;
    for (int a = 0; a < 3; ++a) diffs += set.tuples[i][a] != answer[a];
    REQUIRE(diffs >= 2);  // one-flip candidates were truncated away
  }
  REQUIRE_THROWS_AS(make_candidates_unbiased(toy, answer, 9, rng), GenerationError);
}

TEST_CASE("majority vote picks the most frequent attribute values", "[dataset]") {
  SeededRng rng(1, 0);
  std::vector<AttrTuple> cands = {{0, 0}, {0, 1}, {0, 2}, {1, 0}};
  // scores: 5, 4, 4, 3 -> unique argmax 0
  REQUIRE(majority_vote_choice(cands, rng) == 0);
}

TEST_CASE("generated samples pass the checker including pixels", "[dataset]") {
  for (const char* name : {"center", "center-toy", "grid2x2"}) {
    auto cfg = generator_config(name);
    for (auto mode : {CandidateMode::Biased, CandidateMode::Unbiased}) {
      SeededRng rng(55, 3);
      RpmSample s = generate_sample(cfg, mode, 8, rng);
      REQUIRE(s.candidates.size() == 8);
      INFO(name << " " << candidate_mode_name(mode));
      REQUIRE(check_sample(cfg, s, /*check_render=*/true).empty());
    }
  }
}

TEST_CASE("generation is deterministic in the seed", "[dataset]") {
  auto toy = generator_config("center-toy");
  Dataset a = generate_dataset(toy, 5, 8, CandidateMode::Unbiased, 99);
  Dataset b = generate_dataset(toy, 5, 8, CandidateMode::Unbiased, 99);
  REQUIRE(serialize_dataset(a) == serialize_dataset(b));
  Dataset c = generate_dataset(toy, 5, 8, CandidateMode::Unbiased, 100);
  REQUIRE(serialize_dataset(a) != serialize_dataset(c));
}

TEST_CASE("vote audit separates biased from unbiased sets", "[dataset]") {
  auto toy = generator_config("center-toy");
  BiasAudit biased, unbiased;
  generate_dataset(toy, 300, 8, CandidateMode::Biased, 5, &biased);
  generate_dataset(toy, 300, 8, CandidateMode::Unbiased, 5, &unbiased);
  REQUIRE(biased.vote_accuracy > 0.5);
  REQUIRE(std::abs(unbiased.vote_accuracy - 0.125) < 0.06);
  REQUIRE(unbiased.chance == Catch::Approx(0.125));
}

TEST_CASE("dataset wire format round-trips bit-exactly", "[dataset]") {
  auto toy = generator_config("center-toy");
  Dataset ds = generate_dataset(toy, 4, 6, CandidateMode::Biased, 321);
  auto bytes = serialize_dataset(ds);
  Dataset back = parse_dataset(bytes.data(), bytes.size());
  REQUIRE(serialize_dataset(back) == bytes);
  REQUIRE(back.meta.config_name == "center-toy");
  REQUIRE(back.meta.num_candidates == 6);
  REQUIRE(back.samples.size() == 4);
  for (int i = 0; i < 4; ++i)
    REQUIRE(check_sample(toy, back.samples[i], true).empty());

  const auto tmp = std::filesystem::temp_directory_path() / "crab_io_test.bin";
  write_dataset(ds, tmp.string());
  Dataset from_file = read_dataset(tmp.string());
  REQUIRE(serialize_dataset(from_file) == bytes);
  std::filesystem::remove(tmp);
}

TEST_CASE("malformed dataset bytes raise FormatError", "[dataset]") {
  auto toy = generator_config("center-toy");
  Dataset ds = generate_dataset(toy, 2, 4, CandidateMode::Biased, 11);
  auto bytes = serialize_dataset(ds);

  auto truncated = bytes;
  truncated.resize(truncated.size() / 2);
  REQUIRE_THROWS_AS(parse_dataset(truncated.data(), truncated.size()), FormatError);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  REQUIRE_THROWS_AS(parse_dataset(bad_magic.data(), bad_magic.size()), FormatError);

  auto bad_version = bytes;
  bad_version[4] = 9;
  REQUIRE_THROWS_AS(parse_dataset(bad_version.data(), bad_version.size()), FormatError);

  auto trailing = bytes;
  trailing.push_back(0);
  REQUIRE_THROWS_AS(parse_dataset(trailing.data(), trailing.size()), FormatError);
}

TEST_CASE("manifest round-trips and checksum matches known vectors", "[dataset]") {
  REQUIRE(fnv1a64(nullptr, 0) == 0xcbf29ce484222325ull);
  const std::uint8_t a = 'a';
  REQUIRE(fnv1a64(&a, 1) == 0xaf63dc4c8601ec8cull);
  const char* hello = "hello";
  REQUIRE(fnv1a64(reinterpret_cast<const std::uint8_t*>(hello), 5) ==
          0xa430d84680aabd0bull);

  const auto tmp = std::filesystem::temp_directory_path() / "crab_manifest_test.bin";
  write_file_bytes(tmp.string(), {1, 2, 3});
  write_manifest(tmp.string(), {{"config", "center-toy"}, {"seed", "7"}});
  auto m = read_manifest(tmp.string());
  REQUIRE(manifest_value(m, "config") == "center-toy");
  REQUIRE(manifest_value(m, "seed") == "7");
  REQUIRE_THROWS_AS(manifest_value(m, "missing"), FormatError);
  std::filesystem::remove(tmp);
  std::filesystem::remove(tmp.string() + ".manifest");
}
