#ifndef GRADSIGN_DATAIO_HPP
#define GRADSIGN_DATAIO_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "gradsign/core.hpp"
#include "gradsign/model.hpp"

namespace gradsign::dataio {

/// 8-bit quantization used at the image-file boundary; in-memory math stays
/// in doubles.
uint8_t quantize_pixel(double v);
double dequantize_pixel(uint8_t b);

/// Portable pixmap, P6 for RGB and P5 for grayscale, maxval 255.
void save_image(const Image& img, const std::string& path);
Image load_image(const std::string& path);

enum class Split { Train, Heldout, AttackSource, AttackTarget };

std::string split_name(Split s);
Split parse_split(const std::string& name);

struct ManifestRecord {
  std::string path;  // relative to the manifest file
  int label = -1;
  Split split = Split::Train;
};

struct Manifest {
  std::vector<ManifestRecord> records;

  /// Enforces unique paths and disjoint attack-source/attack-target labels.
  void validate() const;
  std::vector<ManifestRecord> with_split(Split s) const;
};

/// Line format: "path<TAB>label<TAB>split".
void save_manifest(const Manifest& manifest, const std::string& path);
Manifest load_manifest(const std::string& path);

/// Loads the images behind the records of one split; paths resolve relative
/// to the manifest location.
std::vector<model::LabeledImage> load_split(const std::string& manifest_path,
                                            Split split);

/// Descriptor matrix file: magic "GSDX1", row and column counts, row-major
/// little-endian doubles.
void export_descriptors(const std::vector<std::vector<double>>& rows,
                        const std::string& path);
std::vector<std::vector<double>> load_descriptors(const std::string& path);

}  // namespace gradsign::dataio

#endif
