#include "deshadow/shadowlab/synth.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numbers>
#include <vector>

#include "deshadow/errors.hpp"
#include "deshadow/numerics/random.hpp"

namespace deshadow::shadowlab {
namespace {

struct Point {
  double x, y;
};

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

double cross(const Point& o, const Point& a, const Point& b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

// Andrew's monotone chain, counter-clockwise.
std::vector<Point> convex_hull(std::vector<Point> pts) {
  std::sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  std::vector<Point> hull(2 * pts.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k > 1 ? k - 1 : k);
  return hull;
}

bool inside_convex(const std::vector<Point>& hull, const Point& p) {
  if (hull.size() < 3) return false;
  for (std::size_t i = 0; i < hull.size(); ++i)
    if (cross(hull[i], hull[(i + 1) % hull.size()], p) < 0) return false;
  return true;
}

Tensor background(Rng& rng, std::size_t h, std::size_t w) {
  Tensor img({3, h, w});
  std::array<double, 3> base;
  for (auto& c : base) c = rng.uniform(0.35, 0.85);
  // Two layered linear gradients in random directions.
  for (int layer = 0; layer < 2; ++layer) {
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double dx = std::cos(angle), dy = std::sin(angle);
    std::array<double, 3> amp;
    for (auto& a : amp) a = rng.uniform(-0.15, 0.15);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double t = (dx * (static_cast<double>(j) / static_cast<double>(w) - 0.5) +
                          dy * (static_cast<double>(i) / static_cast<double>(h) - 0.5));
        for (std::size_t c = 0; c < 3; ++c) img.at(c, i, j) += amp[c] * t;
      }
  }
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < h * w; ++p) img[c * h * w + p] += base[c];

  const std::size_t shapes = 2 + rng.below(3);
  for (std::size_t s = 0; s < shapes; ++s) {
    std::array<double, 3> color;
    for (auto& c : color) c = rng.uniform(0.1, 0.95);
    const int kind = static_cast<int>(rng.below(3));
    const double cx = rng.uniform(0, static_cast<double>(w)), cy = rng.uniform(0, static_cast<double>(h));
    const double rx = rng.uniform(0.08, 0.3) * static_cast<double>(w), ry = rng.uniform(0.08, 0.3) * static_cast<double>(h);
    std::vector<Point> tri;
    if (kind == 2)
      for (int k = 0; k < 3; ++k) tri.push_back({cx + rng.uniform(-rx, rx) * 1.5, cy + rng.uniform(-ry, ry) * 1.5});
    tri = kind == 2 ? convex_hull(tri) : tri;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const Point p{static_cast<double>(j) + 0.5, static_cast<double>(i) + 0.5};
        bool in = false;
        if (kind == 0) in = std::pow((p.x - cx) / rx, 2) + std::pow((p.y - cy) / ry, 2) <= 1.0;
        if (kind == 1) in = std::abs(p.x - cx) <= rx && std::abs(p.y - cy) <= ry;
        if (kind == 2) in = inside_convex(tri, p);
        if (in)
          for (std::size_t c = 0; c < 3; ++c) img.at(c, i, j) = color[c];
      }
  }
  for (double& v : img.data()) v = quantize(v);
  return img;
}

std::optional<Tensor> shadow_mask(Rng& rng, std::size_t h, std::size_t w) {
  for (int attempt = 0; attempt < 20; ++attempt) {
    Tensor m({h, w});
    const std::size_t polys = 1 + rng.below(3);
    for (std::size_t k = 0; k < polys; ++k) {
      const double cx = rng.uniform(0, static_cast<double>(w)), cy = rng.uniform(0, static_cast<double>(h));
      const double r = rng.uniform(0.15, 0.45) * static_cast<double>(std::min(h, w));
      std::vector<Point> pts;
      const std::size_t n = 3 + rng.below(6);
      for (std::size_t i = 0; i < n; ++i) pts.push_back({cx + rng.uniform(-r, r), cy + rng.uniform(-r, r)});
      const auto hull = convex_hull(pts);
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
          if (inside_convex(hull, {static_cast<double>(j) + 0.5, static_cast<double>(i) + 0.5})) m.at(i, j) = 1.0;
    }
    const double coverage = sum(m) / static_cast<double>(h * w);
    if (coverage >= kMinCoverage && coverage <= kMaxCoverage) return m;
  }
  return std::nullopt;
}

// Shadow strength ramps over the two mask pixels nearest the boundary: distance
// 1 -> 1/3, 2 -> 2/3, 3 or more -> 1.
Tensor penumbra(const Tensor& mask) {
  const long h = static_cast<long>(mask.dim(0)), w = static_cast<long>(mask.dim(1));
  Tensor alpha({mask.dim(0), mask.dim(1)});
  for (long i = 0; i < h; ++i)
    for (long j = 0; j < w; ++j) {
      if (mask.at(i, j) == 0.0) continue;
      double best = 3.0;
      for (long di = -3; di <= 3; ++di)
        for (long dj = -3; dj <= 3; ++dj) {
          const long y = i + di, x = j + dj;
          if (y < 0 || x < 0 || y >= h || x >= w || mask.at(y, x) != 0.0) continue;
          best = std::min(best, std::sqrt(static_cast<double>(di * di + dj * dj)));
        }
      alpha.at(i, j) = std::min(1.0, best / 3.0);
    }
  return alpha;
}

}  // namespace

ShadowSample synth_shadow_sample(std::uint64_t seed, std::size_t height, std::size_t width,
                                 const SynthOptions& options) {
  require(height >= 16 && width >= 16 && height % 4 == 0 && width % 4 == 0,
          "synth: height and width must be multiples of 4 and at least 16");
  for (std::uint64_t s = seed;; ++s) {
    Rng rng(s);
    ShadowSample out;
    out.seed = s;
    out.target = background(rng, height, width);
    auto mask = shadow_mask(rng, height, width);
    if (!mask) {
      std::clog << "synth: seed " << s << " gave no mask within coverage bounds after 20 tries; using seed " << s + 1
                << "\n";
      continue;
    }
    out.mask = std::move(*mask);
    std::array<double, 3> gain, offset;
    for (auto& g : gain) g = rng.uniform(0.2, 0.6);
    for (auto& b : offset) b = rng.uniform(0.0, 0.05);
    if (options.gain) gain = *options.gain;
    if (options.offset) offset = *options.offset;
    const Tensor alpha = penumbra(out.mask);
    out.input = out.target;
    const std::size_t plane = height * width;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        if (out.mask[p] == 0.0) continue;
        const double g = out.target[c * plane + p];
        out.input[c * plane + p] = quantize(g + alpha[p] * ((gain[c] - 1.0) * g + offset[c]));
      }
    return out;
  }
}

model::Sample to_training(const ShadowSample& s) { return {s.input, s.mask, s.target}; }

}  // namespace deshadow::shadowlab
