// Panel rasterizer: anti-aliased signed-distance rendering of the shape
// grid described by an attribute tuple. All math is double precision and
// panels are quantized to 8-bit grayscale at render time, so identical
// tuples always produce byte-identical images.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "crab/dataset/attributes.hpp"

namespace crab::dataset {

using Image8 = std::array<std::uint8_t, kImagePixels>;

namespace detail {

// Signed distance to a regular n-gon (circumradius R, one vertex pointing
// up) or to a circle when n == 0. Exact, including the vertex corners.
inline double shape_sdf(double x, double y, double R, int n) {
  if (n == 0) return std::hypot(x, y) - R;
  const double sector = 2.0 * M_PI / n;
  // Fold the angle about the nearest edge normal; edge normals sit half a
  // sector away from the top vertex.
  const double theta = std::atan2(y, x) - M_PI / 2.0 - sector / 2.0;
  const double b = std::remainder(theta, sector);
  const double r = std::hypot(x, y);
  const double u = r * std::cos(b);          // along the edge normal
  const double v = r * std::sin(b);          // along the edge
  const double apothem = R * std::cos(M_PI / n);
  const double half_edge = R * std::sin(M_PI / n);
  const double vc = std::clamp(v, -half_edge, half_edge);
  const double d = std::hypot(u - apothem, v - vc);
  return u >= apothem ? d : -d;
}

// Shape outline (polygon side count; 0 = circle) per Type level, most
// distinguishable first so small domains stay visually far apart.
inline int type_sides(int level) {
  static constexpr int kSides[] = {3, 4, 0, 5, 6};
  require<GenerationError>(level >= 0 && level < 5, "Type level out of range");
  return kSides[level];
}

inline double size_radius_frac(int level, int n_levels) {
  if (n_levels <= 1) return 0.95;
  return 0.35 + 0.60 * static_cast<double>(level) / (n_levels - 1);
}

inline double color_fill(int level, int n_levels) {
  if (n_levels <= 1) return 0.05;
  return 0.80 - 0.75 * static_cast<double>(level) / (n_levels - 1);
}

struct Blob {
  double cx, cy, radius, fill;
  int sides;
};

}  // namespace detail

inline Image8 render_panel(const GeneratorConfig& cfg, const AttrTuple& attrs) {
  require<GenerationError>(attrs.size() == cfg.attributes.size(),
                           "attribute tuple size mismatch");
  int type_level = 0, size_level = 0, color_level = 0, mask = 1;
  int n_size = 1, n_color = 1;
  for (std::size_t a = 0; a < attrs.size(); ++a) {
    const auto& spec = cfg.attributes[a];
    require<GenerationError>(value_in_domain(spec, attrs[a]),
                             spec.name + " value outside domain");
    switch (spec.role) {
      case AttributeRole::Type: type_level = attrs[a]; break;
      case AttributeRole::Size: size_level = attrs[a]; n_size = static_cast<int>(spec.levels.size()); break;
      case AttributeRole::Color: color_level = attrs[a]; n_color = static_cast<int>(spec.levels.size()); break;
      case AttributeRole::NumPos: mask = attrs[a]; break;
    }
  }

  const int sides = detail::type_sides(type_level);
  const double fill = detail::color_fill(color_level, n_color);
  const double frac = detail::size_radius_frac(size_level, n_size);

  std::vector<detail::Blob> blobs;
  if (cfg.grid == 1) {
    blobs.push_back({32.0, 32.0, frac * 0.85 * 32.0, fill, sides});
  } else {
    for (int bit = 0; bit < 4; ++bit) {
      if (!(mask >> bit & 1)) continue;
      const int row = bit / 2, col = bit % 2;
      blobs.push_back({col * 32.0 + 16.0, row * 32.0 + 16.0, frac * 0.85 * 16.0,
                       fill, sides});
    }
  }

  Image8 img{};
  for (int py = 0; py < kImageSide; ++py) {
    for (int px = 0; px < kImageSide; ++px) {
      double value = 1.0;  // white background
      for (const auto& b : blobs) {
        const double x = px + 0.5 - b.cx;
        const double y = b.cy - (py + 0.5);  // image y-down -> math y-up
        const double d = detail::shape_sdf(x, y, b.radius, b.sides);
        const double inside = std::clamp(0.5 - d, 0.0, 1.0);
        value = value * (1.0 - inside) + b.fill * inside;
        // 1px dark outline so shapes stay crisp against light fills
        const double edge = std::clamp(1.0 - std::abs(d), 0.0, 1.0);
        value *= 1.0 - 0.85 * edge;
      }
      img[py * kImageSide + px] =
          static_cast<std::uint8_t>(std::lround(std::clamp(value, 0.0, 1.0) * 255.0));
    }
  }
  return img;
}

}  // namespace crab::dataset
