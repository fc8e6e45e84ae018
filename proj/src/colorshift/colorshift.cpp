#include "deshadow/colorshift/colorshift.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "deshadow/errors.hpp"
#include "deshadow/numerics/kernels.hpp"
#include "deshadow/numerics/ops.hpp"
#include "deshadow/numerics/random.hpp"

namespace deshadow::colorshift {
namespace {

void require_image(const Tensor& image, const char* what) {
  require(image.rank() == 3 && image.dim(0) == 3 && image.dim(1) > 0 && image.dim(2) > 0,
          std::string(what) + ": expected a non-empty 3 x H x W image, got " + shape_string(image.shape()));
}

void require_mask_for(const Tensor& image, const Tensor& mask, const char* what) {
  require(mask.rank() == 2 && mask.dim(0) == image.dim(1) && mask.dim(1) == image.dim(2),
          std::string(what) + ": mask shape " + shape_string(mask.shape()) + " does not match the image");
}

double dist2(const Color& a, const Color& b) {
  const double d0 = a[0] - b[0], d1 = a[1] - b[1], d2 = a[2] - b[2];
  return d0 * d0 + d1 * d1 + d2 * d2;
}

Color pixel(const Tensor& image, std::size_t p) {
  const std::size_t plane = image.dim(1) * image.dim(2);
  return {image[p], image[plane + p], image[2 * plane + p]};
}

double srgb_to_linear(double v) {
  const double c = v / 255.0;
  return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

double lab_f(double t) {
  constexpr double d = 6.0 / 29.0;
  return t > d * d * d ? std::cbrt(t) : t / (3.0 * d * d) + 4.0 / 29.0;
}

double sign(double x) { return (x > 0.0) - (x < 0.0); }

double l1_distance(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s;
}

void check_loss_operands(const Tensor& anchor, const Tensor& positive, std::span<const Tensor> negatives,
                         std::span<const double> weights) {
  require(!negatives.empty(), "colorshift_loss: at least one negative is required");
  require(negatives.size() == weights.size(), "colorshift_loss: one weight per negative");
  require(positive.shape() == anchor.shape(), "colorshift_loss: positive features have a different shape");
  for (const Tensor& n : negatives)
    require(n.shape() == anchor.shape(), "colorshift_loss: negative features have a different shape");
}

// Row-orthonormalizes a Cout x (Cin*9) weight block in place (modified Gram-Schmidt).
void orthonormalize_rows(Tensor& w) {
  const std::size_t rows = w.dim(0), cols = w.size() / rows;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = &w[r * cols];
    for (std::size_t q = 0; q < r; ++q) {
      const double* prev = &w[q * cols];
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += row[c] * prev[c];
      for (std::size_t c = 0; c < cols; ++c) row[c] -= dot * prev[c];
    }
    double norm = 0.0;
    for (std::size_t c = 0; c < cols; ++c) norm += row[c] * row[c];
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < cols; ++c) row[c] /= norm;
  }
}

constexpr kernels::Conv2dSpec kStageConv{.stride = 2, .padding = 1};

}  // namespace

KMeansResult kmeans_rgb(const Tensor& image, std::size_t clusters, std::uint64_t seed) {
  require(clusters >= 1, "kmeans_rgb: cluster count must be at least 1");
  require_image(image, "kmeans_rgb");
  const std::size_t n = image.dim(1) * image.dim(2);
  std::vector<Color> px(n);
  for (std::size_t p = 0; p < n; ++p) px[p] = pixel(image, p);

  Rng rng(seed);
  KMeansResult result;
  auto& cent = result.centroids;
  cent.push_back(px[rng.below(n)]);
  std::vector<double> nearest(n);
  for (std::size_t p = 0; p < n; ++p) nearest[p] = dist2(px[p], cent[0]);
  while (cent.size() < clusters) {
    const double total = std::accumulate(nearest.begin(), nearest.end(), 0.0);
    std::size_t pick = 0;
    if (total <= 0.0) {
      // Every pixel already coincides with a centroid.
      result.duplicated = true;
      cent.push_back(cent.back());
      continue;
    }
    double r = rng.uniform() * total;
    for (pick = 0; pick + 1 < n; ++pick) {
      if (nearest[pick] > 0.0 && r < nearest[pick]) break;
      r -= nearest[pick];
    }
    while (nearest[pick] <= 0.0) --pick;  // rounding can walk past the last positive weight
    cent.push_back(px[pick]);
    for (std::size_t p = 0; p < n; ++p) nearest[p] = std::min(nearest[p], dist2(px[p], cent.back()));
  }

  std::vector<std::size_t> assign(n);
  for (std::size_t it = 0; it < 100; ++it) {
    for (std::size_t p = 0; p < n; ++p) {
      std::size_t best = 0;
      double best_d = dist2(px[p], cent[0]);
      for (std::size_t k = 1; k < cent.size(); ++k) {
        const double d = dist2(px[p], cent[k]);
        if (d < best_d) best = k, best_d = d;
      }
      assign[p] = best;
    }
    std::vector<Color> sums(cent.size(), Color{});
    std::vector<std::size_t> counts(cent.size(), 0);
    for (std::size_t p = 0; p < n; ++p) {
      for (int c = 0; c < 3; ++c) sums[assign[p]][c] += px[p][c];
      ++counts[assign[p]];
    }
    double moved = 0.0;
    for (std::size_t k = 0; k < cent.size(); ++k) {
      if (counts[k] == 0) continue;
      Color next;
      for (int c = 0; c < 3; ++c) next[c] = sums[k][c] / static_cast<double>(counts[k]);
      moved = std::max(moved, std::sqrt(dist2(next, cent[k])));
      cent[k] = next;
    }
    result.iterations = it + 1;
    if (moved < 1e-4) break;
  }
  return result;
}

std::optional<Color> shadow_mean_color(const Tensor& image, const Tensor& mask) {
  require_image(image, "shadow_mean_color");
  require_mask_for(image, mask, "shadow_mean_color");
  Color sum{};
  std::size_t count = 0;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (mask[p] == 0.0) continue;
    const Color c = pixel(image, p);
    for (int k = 0; k < 3; ++k) sum[k] += c[k];
    ++count;
  }
  if (count == 0) return std::nullopt;
  for (double& v : sum) v /= static_cast<double>(count);
  return sum;
}

Tensor synth_negative(const Tensor& image, const Tensor& mask, const Color& color, const Color& shadow_color) {
  require_image(image, "synth_negative");
  require_mask_for(image, mask, "synth_negative");
  Tensor out = image;
  const std::size_t plane = mask.size();
  for (std::size_t c = 0; c < 3; ++c) {
    const double ratio = color[c] / std::max(shadow_color[c], kRatioGuard);
    for (std::size_t p = 0; p < plane; ++p)
      if (mask[p] != 0.0) out[c * plane + p] = std::clamp(image[c * plane + p] * ratio, 0.0, 255.0);
  }
  return out;
}

Color srgb_to_lab(const Color& rgb) {
  const double r = srgb_to_linear(rgb[0]), g = srgb_to_linear(rgb[1]), b = srgb_to_linear(rgb[2]);
  const double x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
  const double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
  const double z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
  const double fx = lab_f(x / 0.95047), fy = lab_f(y), fz = lab_f(z / 1.08883);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

Tensor srgb_to_lab(const Tensor& image) {
  require_image(image, "srgb_to_lab");
  Tensor out(image.shape());
  const std::size_t plane = image.dim(1) * image.dim(2);
  for (std::size_t p = 0; p < plane; ++p) {
    const Color lab = srgb_to_lab(pixel(image, p));
    for (std::size_t c = 0; c < 3; ++c) out[c * plane + p] = lab[c];
  }
  return out;
}

double rms_difference(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "rms_difference: shape mismatch");
  require(a.size() > 0, "rms_difference: empty input");
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(sq / static_cast<double>(a.size()));
}

double lab_rmse(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "lab_rmse: images differ in shape");
  return rms_difference(srgb_to_lab(a), srgb_to_lab(b));
}

std::optional<double> lab_rmse(const Tensor& a, const Tensor& b, const Tensor& region) {
  require(a.shape() == b.shape(), "lab_rmse: images differ in shape");
  require_image(a, "lab_rmse");
  require_mask_for(a, region, "lab_rmse");
  double sq = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < region.size(); ++p) {
    if (region[p] == 0.0) continue;
    const Color la = srgb_to_lab(pixel(a, p)), lb = srgb_to_lab(pixel(b, p));
    sq += dist2(la, lb);
    ++count;
  }
  if (count == 0) return std::nullopt;
  return std::sqrt(sq / (3.0 * static_cast<double>(count)));
}

FilterResult filter_negatives(std::span<const double> difficulties) {
  require(!difficulties.empty(), "filter_negatives: at least one candidate is required");
  const double n = static_cast<double>(difficulties.size());
  FilterResult r;
  r.mean = std::accumulate(difficulties.begin(), difficulties.end(), 0.0) / n;
  double var = 0.0;
  for (double d : difficulties) var += (d - r.mean) * (d - r.mean);
  r.stddev = std::sqrt(var / n);
  for (std::size_t i = 0; i < difficulties.size(); ++i)
    if (difficulties[i] > r.mean - r.stddev && difficulties[i] < r.mean + r.stddev) r.kept.push_back(i);
  if (r.kept.empty()) {
    r.fallback = true;
    std::size_t best = 0;
    for (std::size_t i = 1; i < difficulties.size(); ++i)
      if (std::abs(difficulties[i] - r.mean) < std::abs(difficulties[best] - r.mean)) best = i;
    r.kept.push_back(best);
  }
  return r;
}

std::vector<double> weight_negatives(std::span<const double> difficulties) {
  require(!difficulties.empty(), "weight_negatives: no negatives to weight");
  double total = 0.0;
  for (double d : difficulties) {
    require(d > 0.0 && std::isfinite(d), "weight_negatives: difficulties must be positive and finite");
    total += 1.0 / d;
  }
  std::vector<double> w;
  w.reserve(difficulties.size());
  for (double d : difficulties) w.push_back((1.0 / d) / total);
  return w;
}

FeatureExtractor::FeatureExtractor(std::string name, std::vector<Stage> stages)
    : name_(std::move(name)), stages_(std::move(stages)) {}

FeatureExtractor FeatureExtractor::seeded(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Stage> stages;
  const std::size_t widths[] = {3, 8, 16, 16};
  for (std::size_t s = 0; s < 3; ++s) {
    Tensor w = rng.normal_tensor({widths[s + 1], widths[s], 3, 3}, 1.0);
    orthonormalize_rows(w);
    stages.push_back({std::move(w), Tensor({widths[s + 1]})});
  }
  return FeatureExtractor("seeded:" + std::to_string(seed), std::move(stages));
}

FeatureExtractor FeatureExtractor::from_archive(const Archive& archive, const std::string& name) {
  std::vector<Stage> stages;
  std::size_t in = 3;
  for (std::size_t s = 0;; ++s) {
    const Tensor* w = archive.find("stage" + std::to_string(s) + ".weight");
    const Tensor* b = archive.find("stage" + std::to_string(s) + ".bias");
    if (!w && !b) break;
    const std::string where = name + ": stage " + std::to_string(s);
    if (!w || !b) throw ConfigError(where + " needs both weight and bias");
    if (w->rank() != 4 || w->dim(1) != in || w->dim(2) != 3 || w->dim(3) != 3)
      throw ConfigError(where + " weight has shape " + shape_string(w->shape()) + ", expected Cout x " +
                        std::to_string(in) + " x 3 x 3");
    if (b->shape() != Shape{w->dim(0)})
      throw ConfigError(where + " bias has shape " + shape_string(b->shape()) + ", expected " +
                        std::to_string(w->dim(0)));
    stages.push_back({*w, *b});
    in = w->dim(0);
  }
  if (stages.empty()) throw ConfigError(name + ": no feature stages found");
  return FeatureExtractor("file:" + name, std::move(stages));
}

FeatureExtractor FeatureExtractor::from_file(const std::filesystem::path& path) {
  return from_archive(read_archive(path), path.filename().string());
}

Archive FeatureExtractor::to_archive() const {
  Archive a;
  a.header_json = nlohmann::json{{"kind", "feature_extractor"}, {"name", name_}}.dump();
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    a.tensors.push_back({"stage" + std::to_string(s) + ".weight", stages_[s].weight});
    a.tensors.push_back({"stage" + std::to_string(s) + ".bias", stages_[s].bias});
  }
  return a;
}

Tensor FeatureExtractor::extract(const Tensor& image, const Tensor& mask) const {
  require_image(image, "feature_extract");
  require_mask_for(image, mask, "feature_extract");
  Tensor x = image;
  const std::size_t plane = mask.size();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < plane; ++p) x[c * plane + p] *= mask[p];
  for (const Stage& s : stages_) x = kernels::softplus(kernels::conv2d(x, s.weight, s.bias, kStageConv));
  return x;
}

ad::Var FeatureExtractor::extract(ad::Tape& tape, ad::Var image, const Tensor& mask) const {
  const Tensor& img = tape.value(image);
  require_image(img, "feature_extract");
  require_mask_for(img, mask, "feature_extract");
  Tensor broadcast(img.shape());
  const std::size_t plane = mask.size();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < plane; ++p) broadcast[c * plane + p] = mask[p];
  ad::Var x = ad::mul_const(tape, image, broadcast);
  for (const Stage& s : stages_)
    x = ad::softplus(tape, ad::conv2d(tape, x, tape.constant(s.weight), tape.constant(s.bias), kStageConv));
  return x;
}

double colorshift_loss(const Tensor& anchor, const Tensor& positive, std::span<const Tensor> negatives,
                       std::span<const double> weights) {
  check_loss_operands(anchor, positive, negatives, weights);
  const double num = l1_distance(anchor, positive);
  double neg = 0.0;
  for (std::size_t i = 0; i < negatives.size(); ++i) neg += weights[i] * l1_distance(anchor, negatives[i]);
  return num / std::max(num + neg, 1e-12);
}

ad::Var colorshift_loss(ad::Tape& tape, ad::Var anchor, const Tensor& positive, std::span<const Tensor> negatives,
                        std::span<const double> weights) {
  const Tensor& a = tape.value(anchor);
  check_loss_operands(a, positive, negatives, weights);
  const double num = l1_distance(a, positive);
  double neg = 0.0;
  for (std::size_t i = 0; i < negatives.size(); ++i) neg += weights[i] * l1_distance(a, negatives[i]);
  const double den = num + neg;
  const bool guarded = den < 1e-12;
  std::vector<Tensor> negs(negatives.begin(), negatives.end());
  std::vector<double> ws(weights.begin(), weights.end());
  return tape.record(Tensor::scalar(num / std::max(den, 1e-12)), {anchor},
                     [positive, negs = std::move(negs), ws = std::move(ws), num, neg, den,
                      guarded](const ad::BackwardArgs& b) {
                       if (guarded) return;
                       const Tensor& a = *b.in[0];
                       Tensor& g = *b.grad_in[0];
                       // d/da num/(num+neg) = (neg * dnum - num * dneg) / den^2
                       const double s = b.grad_out.item() / (den * den);
                       for (std::size_t k = 0; k < a.size(); ++k) {
                         double dneg = 0.0;
                         for (std::size_t i = 0; i < negs.size(); ++i) dneg += ws[i] * sign(a[k] - negs[i][k]);
                         g[k] += s * (neg * sign(a[k] - positive[k]) - num * dneg);
                       }
                     });
}

NegativeSetOutcome build_negative_set(const Tensor& image, const Tensor& mask, std::size_t clusters,
                                      std::uint64_t seed, const FeatureExtractor* extractor) {
  require_image(image, "build_negative_set");
  require_mask_for(image, mask, "build_negative_set");
  const auto shadow = shadow_mean_color(image, mask);
  if (!shadow) return {std::nullopt, SkipReason::kNoShadow};

  NegativeSet set;
  const KMeansResult km = kmeans_rgb(image, clusters, seed);
  set.centroids = km.centroids;
  set.duplicated_centroids = km.duplicated;
  set.shadow_color = *shadow;
  std::vector<Tensor> candidates;
  for (const Color& c : km.centroids) {
    Color ratio;
    for (int k = 0; k < 3; ++k) ratio[k] = c[k] / std::max((*shadow)[k], kRatioGuard);
    set.ratios.push_back(ratio);
    candidates.push_back(synth_negative(image, mask, c, *shadow));
    set.candidate_difficulties.push_back(lab_rmse(candidates.back(), image));
  }
  const FilterResult filt = filter_negatives(set.candidate_difficulties);
  set.difficulty_mean = filt.mean;
  set.difficulty_stddev = filt.stddev;
  set.fallback = filt.fallback;
  for (std::size_t i : filt.kept) {
    // A zero-difficulty candidate is the ground truth itself.
    if (set.candidate_difficulties[i] <= 0.0) continue;
    set.kept.push_back(i);
    set.negatives.push_back(candidates[i]);
    set.difficulties.push_back(set.candidate_difficulties[i]);
  }
  if (set.kept.empty()) return {std::nullopt, SkipReason::kNoUsableNegative};
  set.weights = weight_negatives(set.difficulties);
  if (extractor) {
    for (const Tensor& n : set.negatives) {
      Tensor unit = n;
      unit *= 1.0 / 255.0;
      set.features.push_back(extractor->extract(unit, mask));
    }
  }
  return {std::move(set), SkipReason::kNone};
}

nlohmann::ordered_json manifest(const NegativeSet& set) {
  nlohmann::ordered_json j;
  j["shadow_color"] = set.shadow_color;
  j["centroids"] = set.centroids;
  j["ratios"] = set.ratios;
  j["candidate_difficulties"] = set.candidate_difficulties;
  j["difficulty_mean"] = set.difficulty_mean;
  j["difficulty_stddev"] = set.difficulty_stddev;
  j["fallback"] = set.fallback;
  j["duplicated_centroids"] = set.duplicated_centroids;
  j["kept"] = set.kept;
  j["difficulties"] = set.difficulties;
  j["weights"] = set.weights;
  return j;
}

}  // namespace deshadow::colorshift
