#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include "crab/common.hpp"

namespace crab {

// Model and training hyperparameters. `width_scale` multiplies every hidden
// channel/unit count; 1.0 reproduces the reference widths, smaller values
// give proportionally cheaper models for quick experiments.
struct RunConfig {
  // model
  int image_side = 64;          // 64 for real panels; 8 = reduced test stack
  int concepts = 4;             // M
  int concept_dim = 32;         // d_z
  int rule_dim = 2;             // d_r
  int mixture_components = 4;   // K, per-concept prior mixture size
  double sigma_z = 0.3;         // fixed concept std
  double sigma_x = 0.1;         // fixed pixel std of the decoder likelihood
  double width_scale = 1.0;
  // training
  double lr = 3e-4;
  int batch_size = 512;
  int warmup_epochs = 20;       // epochs before the mixture prior joins in
  int abstraction_epochs = 60;  // epochs with knowledge updates + R_cls
  double beta_r = 10.0;
  double beta_t = 10.0;
  double beta_cls = 1e-5;
  std::uint64_t seed = 0;

  int scaled(int base) const {
    return std::max(4, static_cast<int>(std::lround(base * width_scale)));
  }
  int pixels() const { return image_side * image_side; }
  int total_epochs() const { return warmup_epochs + abstraction_epochs; }
};

inline RunConfig run_config_preset(const std::string& name) {
  if (name == "center") return RunConfig{};
  if (name == "center-toy") {
    RunConfig c;
    c.concept_dim = 8;
    c.width_scale = 0.125;
    c.batch_size = 128;
    c.warmup_epochs = 20;
    c.abstraction_epochs = 30;
    return c;
  }
  throw ConfigError("unknown run config preset: " + name);
}

// Applies "key=value" overrides (one per line; '#' starts a comment).
inline void apply_config_line(RunConfig& c, const std::string& key,
                              const std::string& value) {
  auto as_int = [&] {
    std::size_t pos = 0;
    int v = std::stoi(value, &pos);
    require<ConfigError>(pos == value.size(), "bad integer for " + key);
    return v;
  };
  auto as_double = [&] {
    std::size_t pos = 0;
    double v = std::stod(value, &pos);
    require<ConfigError>(pos == value.size(), "bad number for " + key);
    return v;
  };
  if (key == "image_side") c.image_side = as_int();
  else if (key == "concepts") c.concepts = as_int();
  else if (key == "concept_dim") c.concept_dim = as_int();
  else if (key == "rule_dim") c.rule_dim = as_int();
  else if (key == "mixture_components") c.mixture_components = as_int();
  else if (key == "sigma_z") c.sigma_z = as_double();
  else if (key == "sigma_x") c.sigma_x = as_double();
  else if (key == "width_scale") c.width_scale = as_double();
  else if (key == "lr") c.lr = as_double();
  else if (key == "batch_size") c.batch_size = as_int();
  else if (key == "warmup_epochs") c.warmup_epochs = as_int();
  else if (key == "abstraction_epochs") c.abstraction_epochs = as_int();
  else if (key == "beta_r") c.beta_r = as_double();
  else if (key == "beta_t") c.beta_t = as_double();
  else if (key == "beta_cls") c.beta_cls = as_double();
  else if (key == "seed") c.seed = static_cast<std::uint64_t>(std::stoull(value));
  else throw ConfigError("unknown config key: " + key);
}

inline void apply_config_file(RunConfig& c, const std::string& path) {
  std::ifstream f(path);
  require<ConfigError>(f.good(), "cannot open config file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    std::string body = line.substr(first, last - first + 1);
    const auto eq = body.find('=');
    require<ConfigError>(eq != std::string::npos,
                         "config line " + std::to_string(lineno) + " lacks '='");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t");
      const auto b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    apply_config_line(c, trim(body.substr(0, eq)), trim(body.substr(eq + 1)));
  }
}

// Round-trippable text form: every key apply_config_line accepts, one per
// line, doubles at full precision.
inline std::string config_to_text(const RunConfig& c) {
  std::ostringstream out;
  out.precision(17);
  out << "image_side=" << c.image_side << '\n'
      << "concepts=" << c.concepts << '\n'
      << "concept_dim=" << c.concept_dim << '\n'
      << "rule_dim=" << c.rule_dim << '\n'
      << "mixture_components=" << c.mixture_components << '\n'
      << "sigma_z=" << c.sigma_z << '\n'
      << "sigma_x=" << c.sigma_x << '\n'
      << "width_scale=" << c.width_scale << '\n'
      << "lr=" << c.lr << '\n'
      << "batch_size=" << c.batch_size << '\n'
      << "warmup_epochs=" << c.warmup_epochs << '\n'
      << "abstraction_epochs=" << c.abstraction_epochs << '\n'
      << "beta_r=" << c.beta_r << '\n'
      << "beta_t=" << c.beta_t << '\n'
      << "beta_cls=" << c.beta_cls << '\n'
      << "seed=" << c.seed << '\n';
  return out.str();
}

inline RunConfig config_from_text(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require<ConfigError>(eq != std::string::npos, "config text line lacks '='");
    apply_config_line(c, line.substr(0, eq), line.substr(eq + 1));
  }
  return c;
}

inline void validate(const RunConfig& c) {
  require<ConfigError>(c.image_side == 64 || c.image_side == 8,
                       "image_side must be 64 or 8");
  require<ConfigError>(c.concepts >= 1, "concepts must be >= 1");
  require<ConfigError>(c.concept_dim >= 1, "concept_dim must be >= 1");
  require<ConfigError>(c.rule_dim >= 1, "rule_dim must be >= 1");
  require<ConfigError>(c.mixture_components >= 1, "mixture_components must be >= 1");
  require<ConfigError>(c.sigma_z > 0 && c.sigma_x > 0, "sigmas must be positive");
  require<ConfigError>(c.width_scale > 0, "width_scale must be positive");
  require<ConfigError>(c.lr > 0, "lr must be positive");
  require<ConfigError>(c.batch_size >= 2, "batch_size must be >= 2");
  require<ConfigError>(c.warmup_epochs >= 0 && c.abstraction_epochs >= 0,
                       "epoch counts must be non-negative");
}

}  // namespace crab
