#pragma once

#include <optional>

#include <json.hpp>

#include "deshadow/numerics/tensor.hpp"

namespace deshadow::shadowlab {

// 10 log10(1 / MSE) for images on 0..1; +infinity when the images are equal.
double psnr(const Tensor& a, const Tensor& b);

// Mean SSIM over non-overlapping 8x8 windows of the channel-mean grayscale,
// C1 = 0.01^2, C2 = 0.03^2. Pixels past the last full window are ignored.
double ssim(const Tensor& a, const Tensor& b);

struct MetricsReport {
  std::optional<double> lab_rmse_shadow;     // absent for an empty shadow region
  std::optional<double> lab_rmse_nonshadow;  // absent for an empty non-shadow region
  double lab_rmse_all = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  std::size_t shadow_pixels = 0;
  std::size_t nonshadow_pixels = 0;
};

// LAB RMSE per region (images on 0..1 are scaled to 8-bit range first) plus
// full-image PSNR and SSIM.
MetricsReport region_metrics(const Tensor& prediction, const Tensor& target, const Tensor& mask);

// Per-field mean over reports; a region RMSE is averaged over the reports that have it.
MetricsReport mean_report(std::span<const MetricsReport> reports);

// Stable keys: lab_rmse_shadow, lab_rmse_nonshadow, lab_rmse_all, psnr, ssim,
// shadow_pixels, nonshadow_pixels. Missing regions are null, infinite PSNR is "inf".
nlohmann::ordered_json to_json(const MetricsReport& r);

}  // namespace deshadow::shadowlab
