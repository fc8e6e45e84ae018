#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "deshadow/numerics/archive.hpp"
#include "deshadow/numerics/tape.hpp"
#include "deshadow/numerics/tensor.hpp"

// Color-shifted contrastive negatives. Images here are 3 x H x W sRGB on the
// 0..255 scale unless stated otherwise; masks are binary H x W with 1 = shadow.
namespace deshadow::colorshift {

using Color = std::array<double, 3>;

inline constexpr std::size_t kDefaultClusters = 10;
inline constexpr double kRatioGuard = 1e-6;

struct KMeansResult {
  std::vector<Color> centroids;
  // Set when the image has fewer distinct colors than requested clusters and
  // some centroids are copies.
  bool duplicated = false;
  std::size_t iterations = 0;
};

// k-means++ seeding followed by Lloyd iterations until every centroid moves
// less than 1e-4 or 100 iterations pass.
KMeansResult kmeans_rgb(const Tensor& image, std::size_t clusters, std::uint64_t seed);

// Mean color over mask == 1 pixels; nullopt when the mask has no shadow pixel.
std::optional<Color> shadow_mean_color(const Tensor& image, const Tensor& mask);

// Scales shadow pixels by color / max(shadow_color, 1e-6) per channel and clamps to [0, 255].
Tensor synth_negative(const Tensor& image, const Tensor& mask, const Color& color, const Color& shadow_color);

Color srgb_to_lab(const Color& rgb);
Tensor srgb_to_lab(const Tensor& image);

// RMS of a - b over every entry (used on LAB images).
double rms_difference(const Tensor& a, const Tensor& b);

// RMS difference over all pixels and all three LAB channels.
double lab_rmse(const Tensor& a, const Tensor& b);
// Same, restricted to pixels where region == 1. nullopt for an empty region.
std::optional<double> lab_rmse(const Tensor& a, const Tensor& b, const Tensor& region);

struct FilterResult {
  std::vector<std::size_t> kept;
  double mean = 0.0;
  double stddev = 0.0;  // population
  bool fallback = false;
};

// Keeps candidates strictly inside (mean - stddev, mean + stddev); if none
// qualify, keeps the one closest to the mean (lowest index on ties).
FilterResult filter_negatives(std::span<const double> difficulties);

// Normalized reciprocals. Every difficulty must be positive.
std::vector<double> weight_negatives(std::span<const double> difficulties);

// Frozen convolutional feature map applied to I * M. Input images are on the
// 0..1 scale here.
class FeatureExtractor {
 public:
  struct Stage {
    Tensor weight;  // Cout x Cin x 3 x 3
    Tensor bias;    // Cout
  };

  // Three stride-2 3x3 convolutions (3 -> 8 -> 16 -> 16) with softplus, weights
  // drawn from the seed and row-orthonormalized.
  static FeatureExtractor seeded(std::uint64_t seed);
  // Tensors named stage<k>.weight / stage<k>.bias. Shape problems raise ConfigError.
  static FeatureExtractor from_archive(const Archive& archive, const std::string& name);
  static FeatureExtractor from_file(const std::filesystem::path& path);

  const std::string& name() const { return name_; }
  const std::vector<Stage>& stages() const { return stages_; }
  Archive to_archive() const;

  Tensor extract(const Tensor& image, const Tensor& mask) const;
  ad::Var extract(ad::Tape& tape, ad::Var image, const Tensor& mask) const;

 private:
  FeatureExtractor(std::string name, std::vector<Stage> stages);
  std::string name_;
  std::vector<Stage> stages_;
};

// ||a - p||_1 / (||a - p||_1 + sum_i w_i ||a - n_i||_1), distances over all entries.
double colorshift_loss(const Tensor& anchor, const Tensor& positive, std::span<const Tensor> negatives,
                       std::span<const double> weights);
ad::Var colorshift_loss(ad::Tape& tape, ad::Var anchor, const Tensor& positive, std::span<const Tensor> negatives,
                        std::span<const double> weights);

struct NegativeSet {
  // Every synthesized candidate, before filtering.
  std::vector<Color> centroids;
  Color shadow_color{};
  std::vector<Color> ratios;
  std::vector<double> candidate_difficulties;
  double difficulty_mean = 0.0;
  double difficulty_stddev = 0.0;
  bool fallback = false;
  bool duplicated_centroids = false;

  // Survivors, aligned with each other.
  std::vector<std::size_t> kept;
  std::vector<Tensor> negatives;
  std::vector<double> difficulties;
  std::vector<double> weights;
  // V(N_i / 255 * M); filled only when an extractor is supplied.
  std::vector<Tensor> features;
};

enum class SkipReason { kNone, kNoShadow, kNoUsableNegative };

struct NegativeSetOutcome {
  std::optional<NegativeSet> set;
  SkipReason skip = SkipReason::kNone;
};

NegativeSetOutcome build_negative_set(const Tensor& image, const Tensor& mask, std::size_t clusters,
                                      std::uint64_t seed, const FeatureExtractor* extractor = nullptr);

nlohmann::ordered_json manifest(const NegativeSet& set);

}  // namespace deshadow::colorshift
