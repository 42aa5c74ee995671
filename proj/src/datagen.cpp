#include "gradsign/datagen.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <stdexcept>

namespace gradsign::datagen {

IdentitySpec IdentitySpec::from_seed(uint64_t seed, int id, int height,
                                     int width) {
  if (height < 8 || width < 8)
    throw std::invalid_argument("identity faces need at least 8x8 pixels");
  Rng rng(derive_seed(seed, static_cast<uint64_t>(id)));
  IdentitySpec s;
  s.id = id;
  double h = static_cast<double>(height);
  double w = static_cast<double>(width);
  s.center_y = (h - 1.0) / 2.0 + rng.uniform(-1.5, 1.5);
  s.center_x = (w - 1.0) / 2.0 + rng.uniform(-1.5, 1.5);
  s.axis_y = rng.uniform(0.33, 0.43) * h;
  s.axis_x = rng.uniform(0.28, 0.38) * w;
  for (int c = 0; c < 3; ++c) s.face_tint[c] = rng.uniform(0.45, 0.85);
  for (int c = 0; c < 3; ++c) s.background[c] = rng.uniform(0.05, 0.30);
  s.eye_dy = -rng.uniform(0.10, 0.18) * h;
  s.eye_dx = rng.uniform(0.12, 0.20) * w;
  s.eye_radius = rng.uniform(1.2, 2.2);
  s.eye_shade = rng.uniform(0.05, 0.25);
  s.mouth_dy = rng.uniform(0.10, 0.20) * h;
  s.mouth_curve = rng.uniform(-0.08, 0.08) * h;
  s.mouth_half_width = rng.uniform(0.15, 0.25) * w;
  s.mouth_shade = rng.uniform(0.15, 0.35);
  return s;
}

namespace {

double soft_step(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

Image render_identity(const IdentitySpec& spec, int height, int width,
                      double rotation_deg) {
  Image img(height, width, 3);
  double theta = rotation_deg * std::numbers::pi / 180.0;
  double ct = std::cos(theta);
  double st = std::sin(theta);
  double edge = std::min(spec.axis_y, spec.axis_x);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double dy = y - spec.center_y;
      double dx = x - spec.center_x;
      double u = ct * dy + st * dx;
      double v = -st * dy + ct * dx;

      double e = std::sqrt((u / spec.axis_y) * (u / spec.axis_y) +
                           (v / spec.axis_x) * (v / spec.axis_x));
      double face = soft_step(2.5 * (1.0 - e) * edge);

      double eyes = 0.0;
      for (double side : {-1.0, 1.0}) {
        double ey = u - spec.eye_dy;
        double ex = v - side * spec.eye_dx;
        double d = std::sqrt(ey * ey + ex * ex);
        eyes += soft_step(3.0 * (spec.eye_radius - d));
      }

      double rel = spec.mouth_half_width > 0.0 ? v / spec.mouth_half_width : 0.0;
      double mouth_center = spec.mouth_dy + spec.mouth_curve * rel * rel;
      double mouth = soft_step(4.0 * (0.8 - std::abs(u - mouth_center))) *
                     soft_step(2.0 * (spec.mouth_half_width - std::abs(v)));

      double dark = spec.eye_shade * eyes + spec.mouth_shade * mouth;
      for (int c = 0; c < 3; ++c) {
        double val = spec.background[c] +
                     (spec.face_tint[c] - spec.background[c] - dark) * face;
        img.at(y, x, c) = clamp01(val);
      }
    }
  }
  return img;
}

Image render_sample(const IdentitySpec& spec, int height, int width,
                    uint64_t seed, int sample_index) {
  Rng rng(derive_seed(seed, static_cast<uint64_t>(spec.id),
                      static_cast<uint64_t>(sample_index)));
  double rotation = rng.uniform(-8.0, 8.0);
  Image img = render_identity(spec, height, width, rotation);
  for (double& v : img.data) v = clamp01(v + 0.03 * rng.normal());
  return img;
}

void DatasetOptions::validate() const {
  if (identities < 1) throw std::invalid_argument("identities must be >= 1");
  if (per_identity < 1)
    throw std::invalid_argument("per_identity must be >= 1");
  if (height < 8 || width < 8)
    throw std::invalid_argument("image size must be at least 8x8");
  if (train_fraction < 0.0 || heldout_fraction < 0.0 ||
      train_fraction + heldout_fraction > 1.0)
    throw std::invalid_argument("split fractions must be nonnegative and sum to <= 1");
  if (first_identity < 0)
    throw std::invalid_argument("first_identity must be >= 0");
  if (first_sample < 0)
    throw std::invalid_argument("first_sample must be >= 0");
}

std::vector<GeneratedSample> generate_images(const DatasetOptions& options) {
  options.validate();
  int n_train =
      static_cast<int>(std::lround(options.train_fraction * options.per_identity));
  int n_held = static_cast<int>(
      std::lround(options.heldout_fraction * options.per_identity));
  std::vector<GeneratedSample> out;
  out.reserve(static_cast<size_t>(options.identities) * options.per_identity);
  for (int local = 0; local < options.identities; ++local) {
    int id = options.first_identity + local;
    IdentitySpec spec =
        IdentitySpec::from_seed(options.seed, id, options.height, options.width);
    bool source_half = local * 2 < options.identities;
    for (int k = 0; k < options.per_identity; ++k) {
      int j = options.first_sample + k;
      GeneratedSample sample;
      sample.image =
          render_sample(spec, options.height, options.width, options.seed, j);
      sample.label = local;
      sample.sample_index = j;
      if (k < n_train)
        sample.split = dataio::Split::Train;
      else if (k < n_train + n_held)
        sample.split = dataio::Split::Heldout;
      else
        sample.split = source_half ? dataio::Split::AttackSource
                                   : dataio::Split::AttackTarget;
      char name[32];
      std::snprintf(name, sizeof(name), "img_%03d_%03d.ppm", local, j);
      sample.filename = name;
      out.push_back(std::move(sample));
    }
  }
  return out;
}

dataio::Manifest generate_dataset(const DatasetOptions& options,
                                  const std::string& out_dir) {
  std::vector<GeneratedSample> samples = generate_images(options);
  std::filesystem::create_directories(out_dir);
  dataio::Manifest manifest;
  for (const GeneratedSample& s : samples) {
    dataio::save_image(s.image,
                       (std::filesystem::path(out_dir) / s.filename).string());
    manifest.records.push_back({s.filename, s.label, s.split});
  }
  dataio::save_manifest(manifest,
                        (std::filesystem::path(out_dir) / "manifest.tsv").string());
  return manifest;
}

std::vector<model::LabeledImage> as_labeled(
    const std::vector<GeneratedSample>& samples, dataio::Split split) {
  std::vector<model::LabeledImage> out;
  for (const GeneratedSample& s : samples) {
    if (s.split != split) continue;
    model::LabeledImage li;
    li.image = s.image;
    li.label = s.label;
    out.push_back(std::move(li));
  }
  return out;
}

}  // namespace gradsign::datagen
