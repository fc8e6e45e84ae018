#include "deshadow/shadowlab/metrics.hpp"

#include <cmath>
#include <limits>

#include "deshadow/colorshift/colorshift.hpp"
#include "deshadow/errors.hpp"

namespace deshadow::shadowlab {
namespace {

Tensor grayscale(const Tensor& img) {
  const std::size_t h = img.dim(1), w = img.dim(2), plane = h * w;
  Tensor g({h, w});
  for (std::size_t p = 0; p < plane; ++p) g[p] = (img[p] + img[plane + p] + img[2 * plane + p]) / 3.0;
  return g;
}

void require_pair(const Tensor& a, const Tensor& b, const char* what) {
  require(a.shape() == b.shape(), std::string(what) + ": images differ in shape (" + shape_string(a.shape()) + " vs " +
                                      shape_string(b.shape()) + ")");
  require(a.rank() == 3 && a.dim(0) == 3, std::string(what) + ": expected 3 x H x W images");
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b) {
  require_pair(a, b, "psnr");
  // Running mean: exact when every squared difference is the same value.
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    mse += (d * d - mse) / static_cast<double>(i + 1);
  }
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

double ssim(const Tensor& a, const Tensor& b) {
  require_pair(a, b, "ssim");
  constexpr std::size_t kWin = 8;
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const std::size_t h = a.dim(1), w = a.dim(2);
  require(h >= kWin && w >= kWin, "ssim: image is smaller than one 8 x 8 window");
  const Tensor ga = grayscale(a), gb = grayscale(b);
  const double n = kWin * kWin;
  double total = 0.0;
  std::size_t windows = 0;
  for (std::size_t i0 = 0; i0 + kWin <= h; i0 += kWin)
    for (std::size_t j0 = 0; j0 + kWin <= w; j0 += kWin) {
      double ma = 0.0, mb = 0.0;
      for (std::size_t i = i0; i < i0 + kWin; ++i)
        for (std::size_t j = j0; j < j0 + kWin; ++j) ma += ga.at(i, j), mb += gb.at(i, j);
      ma /= n;
      mb /= n;
      double va = 0.0, vb = 0.0, cov = 0.0;
      for (std::size_t i = i0; i < i0 + kWin; ++i)
        for (std::size_t j = j0; j < j0 + kWin; ++j) {
          const double da = ga.at(i, j) - ma, db = gb.at(i, j) - mb;
          va += da * da;
          vb += db * db;
          cov += da * db;
        }
      va /= n;
      vb /= n;
      cov /= n;
      total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++windows;
    }
  return total / static_cast<double>(windows);
}

MetricsReport region_metrics(const Tensor& prediction, const Tensor& target, const Tensor& mask) {
  require_pair(prediction, target, "region_metrics");
  require(mask.shape() == Shape{prediction.dim(1), prediction.dim(2)}, "region_metrics: mask does not match images");
  Tensor inverse = mask;
  for (double& v : inverse.data()) {
    require(v == 0.0 || v == 1.0, "region_metrics: mask must be binary");
    v = 1.0 - v;
  }
  Tensor a = prediction, b = target;
  a *= 255.0;
  b *= 255.0;
  MetricsReport r;
  r.lab_rmse_shadow = colorshift::lab_rmse(a, b, mask);
  r.lab_rmse_nonshadow = colorshift::lab_rmse(a, b, inverse);
  r.lab_rmse_all = colorshift::lab_rmse(a, b);
  r.psnr = psnr(prediction, target);
  r.ssim = ssim(prediction, target);
  r.shadow_pixels = static_cast<std::size_t>(sum(mask));
  r.nonshadow_pixels = mask.size() - r.shadow_pixels;
  return r;
}

MetricsReport mean_report(std::span<const MetricsReport> reports) {
  require(!reports.empty(), "mean_report: no reports");
  MetricsReport m;
  double shadow = 0.0, nonshadow = 0.0;
  std::size_t ns = 0, nn = 0;
  for (const auto& r : reports) {
    if (r.lab_rmse_shadow) shadow += *r.lab_rmse_shadow, ++ns;
    if (r.lab_rmse_nonshadow) nonshadow += *r.lab_rmse_nonshadow, ++nn;
    m.lab_rmse_all += r.lab_rmse_all;
    m.psnr += r.psnr;
    m.ssim += r.ssim;
    m.shadow_pixels += r.shadow_pixels;
    m.nonshadow_pixels += r.nonshadow_pixels;
  }
  const double n = static_cast<double>(reports.size());
  if (ns) m.lab_rmse_shadow = shadow / static_cast<double>(ns);
  if (nn) m.lab_rmse_nonshadow = nonshadow / static_cast<double>(nn);
  m.lab_rmse_all /= n;
  m.psnr /= n;
  m.ssim /= n;
  return m;
}

nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["lab_rmse_shadow"] = r.lab_rmse_shadow ? nlohmann::ordered_json(*r.lab_rmse_shadow) : nullptr;
  j["lab_rmse_nonshadow"] = r.lab_rmse_nonshadow ? nlohmann::ordered_json(*r.lab_rmse_nonshadow) : nullptr;
  j["lab_rmse_all"] = r.lab_rmse_all;
  j["psnr"] = std::isinf(r.psnr) ? nlohmann::ordered_json("inf") : nlohmann::ordered_json(r.psnr);
  j["ssim"] = r.ssim;
  j["shadow_pixels"] = r.shadow_pixels;
  j["nonshadow_pixels"] = r.nonshadow_pixels;
  return j;
}

}  // namespace deshadow::shadowlab
