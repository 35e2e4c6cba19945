#pragma once

#include "palpation/active_search.hpp"
#include "palpation/geometry.hpp"
#include "palpation/phantom.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace palpation {

/// Row-major RGBA8 image. Pixel (x, y) with y = 0 at the top textures
/// uv = (x / (W-1), 1 - y / (H-1)), i.e. v grows upwards as in OBJ files.
struct Texture {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgba;

  std::size_t offset(int x, int y) const { return (static_cast<std::size_t>(y) * width + x) * 4; }
  void check() const;
};

Vec2 pixel_to_uv(int x, int y, int width, int height);
/// Continuous pixel coordinates of a uv point.
Vec2 uv_to_pixel(const Vec2& uv, int width, int height);

/// Colour ramp from s = 0 (first entry) to s = 1 (last entry). Rec. 709 luma
/// must be non-increasing along the table and the last entry darker than the
/// first.
struct ColorRamp {
  std::vector<std::array<std::uint8_t, 3>> lut;

  static ColorRamp blues();
  void validate() const;
  std::array<std::uint8_t, 3> at(double s) const;
};

nlohmann::json to_json(const ColorRamp& ramp);
ColorRamp color_ramp_from_json(const nlohmann::json& j);

struct BakeParams {
  int width = 512;
  int height = 512;
  /// Alpha of in-ROI heat-map pixels.
  double opacity = 1.0;
  /// Fixed [lo, hi] normalisation; per-bake min/max over ROI nodes otherwise.
  std::optional<std::array<double, 2>> fixed_range;
  ColorRamp ramp = ColorRamp::blues();
};

struct HeatmapTexture {
  Texture image;
  /// Normalised stiffness per pixel in [0, 1]; 0 outside the ROI.
  std::vector<double> s;
  /// 1 inside the ROI.
  std::vector<std::uint8_t> mask;
  double range_lo = 0.0;
  double range_hi = 0.0;
};

/// Bilinear interpolation of a row-major R x R node field over the ROI box.
double interpolate_grid(const SearchGrid& grid, const Eigen::AlignedBox2d& box, std::span<const double> field,
                        const Vec2& uv);

HeatmapTexture bake_heatmap(const SearchGrid& grid, const Roi& roi, const BakeParams& params = {});

/// out = base * (1 - opacity * mask * s) on RGB; base alpha is kept.
/// The heat map is resampled nearest-neighbour when sizes differ.
Texture blend_textures(const Texture& base, const HeatmapTexture& heatmap, double opacity);

/// Deterministic procedural tissue-like base texture.
Texture default_base_texture(int width = 512, int height = 512);

struct PatchPoint {
  int grid_index = -1;
  Vec2 uv = Vec2::Zero();
  int face = -1;
  Eigen::Vector3d barycentric = Eigen::Vector3d::Zero();
  Vec3 point = Vec3::Zero();
};

/// Surface location textured by every in-ROI grid node.
/// Throws "grid point outside UV atlas".
std::vector<PatchPoint> uv_to_surface_patch(const SearchGrid& grid, const PhantomModel& phantom);
std::vector<PatchPoint> uv_to_surface_patch(const Roi& roi, const PhantomModel& phantom);

// PNG (RGBA8) via libpng.
std::vector<std::uint8_t> encode_png(const Texture& tex);
Texture decode_png(std::span<const std::uint8_t> bytes);
void write_png(const std::string& path, const Texture& tex);
Texture read_png(const std::string& path);

}  // namespace palpation
