#ifndef GRADSIGN_TRANSFORMS_HPP
#define GRADSIGN_TRANSFORMS_HPP

#include <string>
#include <vector>

#include "gradsign/core.hpp"

namespace gradsign::transforms {

/// Gaussian convolution, separable, kernel radius ceil(3*sigma), edges handled
/// by clamping sample coordinates. sigma 0 is the identity.
Image gaussian_blur(const Image& x, double sigma);

/// Inverse-mapped bilinear affine resample about the image center. Out of
/// bounds samples take the nearest edge pixel. Identity parameters reproduce
/// the input bit-exactly.
Image affine(const Image& x, double scale, double translate_x,
             double translate_y, double rotate_deg, double shear_deg);

/// Centered sub-window. When the trim is odd the extra discarded pixel sits on
/// the top/left side.
Image center_crop(const Image& x, int out_h, int out_w);

/// Bilinear resize with half-pixel centers; same-size resize is the identity.
Image resize_bilinear(const Image& x, int out_h, int out_w);

/// Luma conversion replicated across channels; single-channel input returned
/// unchanged.
Image grayscale(const Image& x);

/// (pixel - mean) / std per channel. The result is not an Image because it
/// leaves [0, 1].
std::vector<double> normalize(const Image& x, const std::vector<double>& mean,
                              const std::vector<double>& std);

/// Inverse of normalize; restores the original image within 1e-12.
Image denormalize(const std::vector<double>& values, int height, int width,
                  int channels, const std::vector<double>& mean,
                  const std::vector<double>& std);

enum class StepKind {
  CenterCrop,
  GaussianBlur,
  ContrastNormalize,
  Affine,
  Grayscale,
  RandomCrop,
};

struct TransformStep {
  StepKind kind;
  // CenterCrop / RandomCrop: fraction of each side kept, in (0, 1].
  double fraction = 0.875;
  // GaussianBlur: sigma >= 0.
  double sigma = 0.5;
  // ContrastNormalize: strength drawn uniformly from [lo, hi] per application.
  double contrast_lo = 0.75;
  double contrast_hi = 1.25;
  // Grayscale: independent application probability.
  double gray_prob = 0.25;
  // Affine: per-application draw ranges.
  double scale_lo = 0.9, scale_hi = 1.1;
  double translate_frac = 0.05;
  double rotate_max_deg = 10.0;
  double shear_max_deg = 8.0;

  void validate() const;
  std::string describe() const;
};

TransformStep make_center_crop(double fraction);
TransformStep make_gaussian_blur(double sigma);
TransformStep make_contrast(double lo, double hi);
TransformStep make_affine();
TransformStep make_grayscale(double probability);
TransformStep make_random_crop(double fraction);

/// Ordered stochastic transform T(X; p): with probability p the step list is
/// applied in order, otherwise the input passes through untouched.
struct TransformPipeline {
  std::vector<TransformStep> steps;
  double probability = 0.5;
  uint64_t seed = 0;

  void validate() const;
  std::string describe() const;
};

/// One draw of T(X; p). Consumes exactly one Bernoulli draw from rng when
/// deciding, then the per-step parameter draws only if the transform fires.
/// Output is clamped to [0, 1] and keeps the input shape.
Image apply_stochastic(const TransformPipeline& pipeline, const Image& x,
                       Rng& rng);

/// Applies the step list unconditionally (the p = 1 path of apply_stochastic).
Image apply_steps(const TransformPipeline& pipeline, const Image& x, Rng& rng);

/// Static source expansion: |sources| * factor images where each source
/// contributes its original followed by factor-1 forced transform draws.
std::vector<Image> expand_sources(const std::vector<Image>& sources, int factor,
                                  const TransformPipeline& pipeline,
                                  uint64_t seed);

/// Parses the run-config pipeline grammar: whitespace-separated steps, each
/// "name" or "name(arg[,arg])", e.g.
///   "random-crop(0.875) gaussian-blur(0.5) contrast-normalize(0.75,1.25)
///    affine grayscale(0.25)".
std::vector<TransformStep> parse_pipeline_steps(const std::string& text);

}  // namespace gradsign::transforms

#endif
