#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gradsign/core.hpp"
#include "gradsign/dataio.hpp"
#include "gradsign/model.hpp"

namespace gradsign::datagen {

// Parametric face: a soft-edged ellipse with two eye discs and a curved
// mouth band on a flat background. All parameters are drawn in a fixed
// order from Rng(derive_seed(seed, id)), so (seed, id) pins the identity.
struct IdentitySpec {
  int id = 0;
  double center_y = 0.0;
  double center_x = 0.0;
  double axis_y = 0.0;
  double axis_x = 0.0;
  double face_tint[3] = {0.0, 0.0, 0.0};
  double background[3] = {0.0, 0.0, 0.0};
  double eye_dy = 0.0;
  double eye_dx = 0.0;
  double eye_radius = 0.0;
  double eye_shade = 0.0;
  double mouth_dy = 0.0;
  double mouth_curve = 0.0;
  double mouth_half_width = 0.0;
  double mouth_shade = 0.0;

  static IdentitySpec from_seed(uint64_t seed, int id, int height, int width);
};

// Evaluates the parametric face at coordinates rotated about the face
// center, so rotation never resamples pixels.
Image render_identity(const IdentitySpec& spec, int height, int width,
                      double rotation_deg);

inline Image render_archetype(const IdentitySpec& spec, int height, int width) {
  return render_identity(spec, height, width, 0.0);
}

// Archetype plus per-image jitter: rotation drawn uniform in +/-8 degrees,
// then per-pixel gaussian intensity noise (sigma 0.03), clamped to [0,1].
// The jitter stream is Rng(derive_seed(seed, identity_id, sample_index)).
Image render_sample(const IdentitySpec& spec, int height, int width,
                    uint64_t seed, int sample_index);

struct DatasetOptions {
  int identities = 10;
  int per_identity = 120;
  int height = 32;
  int width = 32;
  uint64_t seed = 0;
  double train_fraction = 0.7;
  double heldout_fraction = 0.2;
  // Offset into the identity space; disjoint offsets give disjoint faces,
  // labels always run 0..identities-1.
  int first_identity = 0;
  // Offset into each identity's sample sequence; the same (seed, identity,
  // sample index) triple always renders the same image, so disjoint offsets
  // give fresh poses of the same faces.
  int first_sample = 0;

  void validate() const;
};

struct GeneratedSample {
  Image image;
  int label = 0;
  int sample_index = 0;
  dataio::Split split = dataio::Split::Train;
  std::string filename;
};

// Pure generation: no filesystem access. Per identity the first
// round(train_fraction*n) samples are train, the next
// round(heldout_fraction*n) heldout, and the remainder attack-source for
// the first half of the identities, attack-target for the second half.
std::vector<GeneratedSample> generate_images(const DatasetOptions& options);

// Writes every sample as a pixmap plus manifest.tsv under out_dir and
// returns the manifest (paths relative to out_dir).
dataio::Manifest generate_dataset(const DatasetOptions& options,
                                  const std::string& out_dir);

std::vector<model::LabeledImage> as_labeled(
    const std::vector<GeneratedSample>& samples, dataio::Split split);

}  // namespace gradsign::datagen
