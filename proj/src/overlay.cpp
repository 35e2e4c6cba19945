#include "palpation/overlay.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace palpation {

void Texture::check() const {
  if (width <= 0 || height <= 0) throw Error("texture has no pixels");
  if (rgba.size() != static_cast<std::size_t>(width) * height * 4) throw Error("texture size mismatch");
}

Vec2 pixel_to_uv(int x, int y, int width, int height) {
  return {width > 1 ? static_cast<double>(x) / (width - 1) : 0.5,
          height > 1 ? 1.0 - static_cast<double>(y) / (height - 1) : 0.5};
}

Vec2 uv_to_pixel(const Vec2& uv, int width, int height) {
  return {uv.x() * (width - 1), (1.0 - uv.y()) * (height - 1)};
}

// ---------------------------------------------------------------------------
// Colour ramp

namespace {

double luma(const std::array<std::uint8_t, 3>& c) { return 0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]; }

}  // namespace

ColorRamp ColorRamp::blues() {
  static constexpr std::array<std::array<int, 3>, 9> anchors{{{247, 251, 255},
                                                              {222, 235, 247},
                                                              {198, 219, 239},
                                                              {158, 202, 225},
                                                              {107, 174, 214},
                                                              {66, 146, 198},
                                                              {33, 113, 181},
                                                              {8, 81, 156},
                                                              {8, 48, 107}}};
  ColorRamp ramp;
  ramp.lut.resize(256);
  for (int i = 0; i < 256; ++i) {
    const double t = i / 255.0 * (anchors.size() - 1);
    const int k = std::min(static_cast<int>(t), static_cast<int>(anchors.size()) - 2);
    const double f = t - k;
    for (int c = 0; c < 3; ++c)
      ramp.lut[i][c] = static_cast<std::uint8_t>(std::lround(anchors[k][c] + f * (anchors[k + 1][c] - anchors[k][c])));
  }
  return ramp;
}

void ColorRamp::validate() const {
  if (lut.size() < 2) throw Error("colour ramp needs at least 2 entries");
  for (std::size_t i = 1; i < lut.size(); ++i)
    if (luma(lut[i]) > luma(lut[i - 1])) throw Error("colour ramp must darken monotonically");
  if (!(luma(lut.back()) < luma(lut.front()))) throw Error("colour ramp must darken monotonically");
}

std::array<std::uint8_t, 3> ColorRamp::at(double s) const {
  const double c = std::clamp(s, 0.0, 1.0);
  return lut[static_cast<std::size_t>(std::lround(c * static_cast<double>(lut.size() - 1)))];
}

nlohmann::json to_json(const ColorRamp& ramp) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& c : ramp.lut) j.push_back({c[0], c[1], c[2]});
  return j;
}

ColorRamp color_ramp_from_json(const nlohmann::json& j) {
  ColorRamp ramp;
  try {
    for (const auto& c : j) {
      std::array<std::uint8_t, 3> rgb{};
      for (int k = 0; k < 3; ++k) {
        const int v = c.at(k).get<int>();
        if (v < 0 || v > 255) throw Error("colour ramp entry out of range");
        rgb[k] = static_cast<std::uint8_t>(v);
      }
      ramp.lut.push_back(rgb);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("invalid colour ramp: ") + e.what());
  }
  ramp.validate();
  return ramp;
}

// ---------------------------------------------------------------------------
// Bake and blend

double interpolate_grid(const SearchGrid& grid, const Eigen::AlignedBox2d& box, std::span<const double> field,
                        const Vec2& uv) {
  const int r = grid.resolution;
  const double gx = std::clamp((uv.x() - box.min().x()) / box.sizes().x(), 0.0, 1.0) * (r - 1);
  const double gy = std::clamp((uv.y() - box.min().y()) / box.sizes().y(), 0.0, 1.0) * (r - 1);
  const int c0 = std::min(static_cast<int>(gx), r - 2);
  const int r0 = std::min(static_cast<int>(gy), r - 2);
  const double fx = gx - c0;
  const double fy = gy - r0;
  const auto at = [&](int row, int col) { return field[static_cast<std::size_t>(row) * r + col]; };
  return (1 - fy) * ((1 - fx) * at(r0, c0) + fx * at(r0, c0 + 1)) + fy * ((1 - fx) * at(r0 + 1, c0) + fx * at(r0 + 1, c0 + 1));
}

HeatmapTexture bake_heatmap(const SearchGrid& grid, const Roi& roi, const BakeParams& params) {
  if (grid.updates < 1 || grid.mu.size() != grid.size()) throw Error("grid has no posterior to bake");
  if (params.width < grid.resolution || params.height < grid.resolution)
    throw Error("texture resolution below grid resolution");
  if (!(params.opacity >= 0.0 && params.opacity <= 1.0)) throw Error("opacity must be in [0, 1]");
  params.ramp.validate();
  const auto box = roi.bounds();

  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  if (params.fixed_range) {
    lo = (*params.fixed_range)[0];
    hi = (*params.fixed_range)[1];
    if (!(hi > lo)) throw Error("fixed range must have hi > lo");
  } else {
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (!grid.in_roi[i]) continue;
      lo = std::min(lo, grid.mu[i]);
      hi = std::max(hi, grid.mu[i]);
    }
    if (lo > hi) throw Error("empty ROI");
  }

  HeatmapTexture out;
  out.range_lo = lo;
  out.range_hi = hi;
  out.image.width = params.width;
  out.image.height = params.height;
  const std::size_t n = static_cast<std::size_t>(params.width) * params.height;
  out.image.rgba.assign(n * 4, 0);
  out.s.assign(n, 0.0);
  out.mask.assign(n, 0);
  const auto alpha = static_cast<std::uint8_t>(std::lround(255.0 * params.opacity));
  const bool degenerate = !(hi > lo);
  std::size_t inside = 0;
  for (int y = 0; y < params.height; ++y) {
    for (int x = 0; x < params.width; ++x) {
      const Vec2 uv = pixel_to_uv(x, y, params.width, params.height);
      if (!roi.contains(uv)) continue;
      const std::size_t p = static_cast<std::size_t>(y) * params.width + x;
      const double mu = interpolate_grid(grid, box, grid.mu, uv);
      const double s = degenerate ? 0.5 : std::clamp((mu - lo) / (hi - lo), 0.0, 1.0);
      const auto rgb = params.ramp.at(s);
      out.s[p] = s;
      out.mask[p] = 1;
      out.image.rgba[p * 4 + 0] = rgb[0];
      out.image.rgba[p * 4 + 1] = rgb[1];
      out.image.rgba[p * 4 + 2] = rgb[2];
      out.image.rgba[p * 4 + 3] = alpha;
      ++inside;
    }
  }
  if (inside == 0) throw Error("empty ROI");
  return out;
}

Texture blend_textures(const Texture& base, const HeatmapTexture& heatmap, double opacity) {
  base.check();
  heatmap.image.check();
  if (!(opacity >= 0.0 && opacity <= 1.0)) throw Error("opacity must be in [0, 1]");
  const int hw = heatmap.image.width;
  const int hh = heatmap.image.height;
  if (heatmap.s.size() != static_cast<std::size_t>(hw) * hh || heatmap.mask.size() != heatmap.s.size())
    throw Error("dimension mismatch");

  Texture out = base;
  for (int y = 0; y < base.height; ++y) {
    // Nearest neighbour in uv space; identity when sizes agree.
    const int sy = base.height > 1 ? static_cast<int>(std::lround(static_cast<double>(y) * (hh - 1) / (base.height - 1))) : 0;
    for (int x = 0; x < base.width; ++x) {
      const int sx = base.width > 1 ? static_cast<int>(std::lround(static_cast<double>(x) * (hw - 1) / (base.width - 1))) : 0;
      const std::size_t hp = static_cast<std::size_t>(sy) * hw + sx;
      if (!heatmap.mask[hp]) continue;
      const double factor = 1.0 - opacity * heatmap.s[hp];
      const std::size_t o = out.offset(x, y);
      for (int c = 0; c < 3; ++c)
        out.rgba[o + c] = static_cast<std::uint8_t>(std::lround(base.rgba[o + c] * factor));
    }
  }
  return out;
}

namespace {

double hash_noise(int x, int y, std::uint32_t seed) {
  std::uint32_t h = static_cast<std::uint32_t>(x) * 374761393u + static_cast<std::uint32_t>(y) * 668265263u + seed * 2246822519u;
  h = (h ^ (h >> 13)) * 1274126177u;
  h ^= h >> 16;
  return (h & 0xffffu) / 65535.0;
}

double value_noise(double u, double v, int cells, std::uint32_t seed) {
  const double x = u * cells;
  const double y = v * cells;
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0;
  const double fy = y - y0;
  const double sx = fx * fx * (3 - 2 * fx);
  const double sy = fy * fy * (3 - 2 * fy);
  const double a = hash_noise(x0, y0, seed), b = hash_noise(x0 + 1, y0, seed);
  const double c = hash_noise(x0, y0 + 1, seed), d = hash_noise(x0 + 1, y0 + 1, seed);
  return (1 - sy) * ((1 - sx) * a + sx * b) + sy * ((1 - sx) * c + sx * d);
}

}  // namespace

Texture default_base_texture(int width, int height) {
  if (width < 2 || height < 2) throw Error("texture must be at least 2x2");
  Texture tex;
  tex.width = width;
  tex.height = height;
  tex.rgba.resize(static_cast<std::size_t>(width) * height * 4);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const Vec2 uv = pixel_to_uv(x, y, width, height);
      const double mottling = 0.6 * value_noise(uv.x(), uv.y(), 8, 1) + 0.4 * value_noise(uv.x(), uv.y(), 32, 2);
      const double vein = std::exp(-std::pow((value_noise(uv.x(), uv.y(), 6, 3) - 0.5) * 40.0, 2.0));
      const double shade = 0.82 + 0.18 * mottling - 0.25 * vein;
      const std::size_t o = tex.offset(x, y);
      tex.rgba[o + 0] = static_cast<std::uint8_t>(std::lround(std::clamp(232.0 * shade, 0.0, 255.0)));
      tex.rgba[o + 1] = static_cast<std::uint8_t>(std::lround(std::clamp(158.0 * shade, 0.0, 255.0)));
      tex.rgba[o + 2] = static_cast<std::uint8_t>(std::lround(std::clamp(150.0 * shade, 0.0, 255.0)));
      tex.rgba[o + 3] = 255;
    }
  }
  return tex;
}

std::vector<PatchPoint> uv_to_surface_patch(const SearchGrid& grid, const PhantomModel& phantom) {
  std::vector<PatchPoint> out;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!grid.in_roi[i]) continue;
    const auto hit = phantom.locator().locate(grid.uv[i]);
    if (!hit) throw Error("grid point outside UV atlas");
    PatchPoint p;
    p.grid_index = static_cast<int>(i);
    p.uv = grid.uv[i];
    p.face = hit->first;
    p.barycentric = hit->second;
    p.point = surface_point_at(phantom.mesh(), p.face, p.barycentric).point;
    out.push_back(p);
  }
  return out;
}

std::vector<PatchPoint> uv_to_surface_patch(const Roi& roi, const PhantomModel& phantom) {
  return uv_to_surface_patch(make_grid(roi), phantom);
}

}  // namespace palpation
