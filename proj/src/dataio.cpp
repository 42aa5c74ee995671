#include "gradsign/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "gradsign/binio.hpp"

namespace gradsign::dataio {

uint8_t quantize_pixel(double v) {
  double c = clamp01(v);
  return static_cast<uint8_t>(std::lround(c * 255.0));
}

double dequantize_pixel(uint8_t b) { return static_cast<double>(b) / 255.0; }

void save_image(const Image& img, const std::string& path) {
  if (img.channels != 1 && img.channels != 3)
    throw std::invalid_argument("save_image: pixmaps support 1 or 3 channels, got " +
                                std::to_string(img.channels));
  if (img.height <= 0 || img.width <= 0 ||
      img.data.size() != static_cast<size_t>(img.height) * img.width * img.channels)
    throw std::invalid_argument("save_image: malformed image");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << (img.channels == 3 ? "P6" : "P5") << "\n"
      << img.width << " " << img.height << "\n255\n";
  std::vector<uint8_t> bytes(img.data.size());
  for (size_t i = 0; i < img.data.size(); ++i) bytes[i] = quantize_pixel(img.data[i]);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

namespace {

[[noreturn]] void ppm_error(const std::string& path, size_t offset,
                            const std::string& what) {
  throw binio::ParseError(path + ": " + what + " at byte " +
                          std::to_string(offset));
}

// Skips whitespace and # comments so pos lands on the next token start.
void skip_space(const std::string& bytes, size_t& pos) {
  while (pos < bytes.size()) {
    char c = bytes[pos];
    if (c == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      ++pos;
    } else {
      break;
    }
  }
}

std::string ppm_token(const std::string& bytes, size_t& pos,
                      const std::string& path, const char* what) {
  skip_space(bytes, pos);
  size_t start = pos;
  while (pos < bytes.size() &&
         !std::isspace(static_cast<unsigned char>(bytes[pos])))
    ++pos;
  if (start == pos) ppm_error(path, start, std::string("expected ") + what);
  return bytes.substr(start, pos - start);
}

int ppm_int(const std::string& bytes, size_t& pos, const std::string& path,
            const char* what) {
  skip_space(bytes, pos);
  size_t at = pos;
  std::string tok = ppm_token(bytes, pos, path, what);
  try {
    size_t used = 0;
    int v = std::stoi(tok, &used);
    if (used != tok.size() || v < 0) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    ppm_error(path, at, std::string("bad ") + what + " '" + tok + "'");
  }
}

}  // namespace

Image load_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());

  size_t pos = 0;
  std::string magic = ppm_token(bytes, pos, path, "magic");
  int channels;
  if (magic == "P6")
    channels = 3;
  else if (magic == "P5")
    channels = 1;
  else
    ppm_error(path, 0, "bad magic '" + magic + "' (expected P5 or P6)");

  int width = ppm_int(bytes, pos, path, "width");
  int height = ppm_int(bytes, pos, path, "height");
  if (width <= 0 || height <= 0)
    ppm_error(path, pos, "image dimensions must be positive");
  skip_space(bytes, pos);
  size_t maxval_at = pos;
  int maxval = ppm_int(bytes, pos, path, "maxval");
  if (maxval != 255)
    ppm_error(path, maxval_at, "unsupported maxval " + std::to_string(maxval));

  if (pos >= bytes.size() ||
      !std::isspace(static_cast<unsigned char>(bytes[pos])))
    ppm_error(path, pos, "expected single whitespace before pixel data");
  ++pos;

  size_t need = static_cast<size_t>(width) * height * channels;
  if (bytes.size() - pos < need)
    ppm_error(path, bytes.size(),
              "truncated payload: need " + std::to_string(need) +
                  " pixel bytes, found " + std::to_string(bytes.size() - pos));

  Image img(height, width, channels);
  for (size_t i = 0; i < need; ++i)
    img.data[i] = dequantize_pixel(static_cast<uint8_t>(bytes[pos + i]));
  return img;
}

std::string split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Heldout: return "heldout";
    case Split::AttackSource: return "attack-source";
    case Split::AttackTarget: return "attack-target";
  }
  throw std::logic_error("unreachable split");
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "heldout") return Split::Heldout;
  if (name == "attack-source") return Split::AttackSource;
  if (name == "attack-target") return Split::AttackTarget;
  throw std::invalid_argument("unknown split '" + name + "'");
}

void Manifest::validate() const {
  std::set<std::string> paths;
  std::set<int> source_labels, target_labels;
  for (const ManifestRecord& r : records) {
    if (!paths.insert(r.path).second)
      throw std::invalid_argument("manifest: duplicate path '" + r.path + "'");
    if (r.label < 0)
      throw std::invalid_argument("manifest: negative label for '" + r.path + "'");
    if (r.split == Split::AttackSource) source_labels.insert(r.label);
    if (r.split == Split::AttackTarget) target_labels.insert(r.label);
  }
  for (int id : source_labels)
    if (target_labels.count(id))
      throw std::invalid_argument(
          "manifest: identity " + std::to_string(id) +
          " appears in both attack-source and attack-target");
}

std::vector<ManifestRecord> Manifest::with_split(Split s) const {
  std::vector<ManifestRecord> out;
  for (const ManifestRecord& r : records)
    if (r.split == s) out.push_back(r);
  return out;
}

void save_manifest(const Manifest& manifest, const std::string& path) {
  manifest.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  for (const ManifestRecord& r : manifest.records)
    out << r.path << "\t" << r.label << "\t" << split_name(r.split) << "\n";
  if (!out) throw std::runtime_error("write failed: " + path);
}

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open manifest: " + path);
  Manifest m;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    size_t t1 = line.find('\t');
    size_t t2 = t1 == std::string::npos ? std::string::npos
                                        : line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos ||
        line.find('\t', t2 + 1) != std::string::npos)
      throw binio::ParseError(path + ":" + std::to_string(lineno) +
                              ": expected 3 tab-separated fields");
    ManifestRecord r;
    r.path = line.substr(0, t1);
    std::string label_text = line.substr(t1 + 1, t2 - t1 - 1);
    try {
      size_t used = 0;
      r.label = std::stoi(label_text, &used);
      if (used != label_text.size()) throw std::invalid_argument(label_text);
    } catch (const std::exception&) {
      throw binio::ParseError(path + ":" + std::to_string(lineno) +
                              ": bad label '" + label_text + "'");
    }
    try {
      r.split = parse_split(line.substr(t2 + 1));
    } catch (const std::invalid_argument& e) {
      throw binio::ParseError(path + ":" + std::to_string(lineno) + ": " +
                              e.what());
    }
    m.records.push_back(std::move(r));
  }
  m.validate();
  return m;
}

std::vector<model::LabeledImage> load_split(const std::string& manifest_path,
                                            Split split) {
  Manifest m = load_manifest(manifest_path);
  std::filesystem::path base =
      std::filesystem::path(manifest_path).parent_path();
  std::vector<model::LabeledImage> out;
  for (const ManifestRecord& r : m.records) {
    if (r.split != split) continue;
    model::LabeledImage sample;
    sample.image = load_image((base / r.path).string());
    sample.label = r.label;
    out.push_back(std::move(sample));
  }
  return out;
}

namespace {
constexpr char kDescriptorMagic[] = "GSDX1";
}

void export_descriptors(const std::vector<std::vector<double>>& rows,
                        const std::string& path) {
  size_t cols = rows.empty() ? 0 : rows.front().size();
  for (size_t i = 0; i < rows.size(); ++i)
    if (rows[i].size() != cols)
      throw std::invalid_argument(
          "export_descriptors: ragged input (row " + std::to_string(i) +
          " has " + std::to_string(rows[i].size()) + " values, expected " +
          std::to_string(cols) + ")");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out.write(kDescriptorMagic, 5);
  binio::write_u32(out, static_cast<uint32_t>(rows.size()));
  binio::write_u32(out, static_cast<uint32_t>(cols));
  for (const auto& row : rows) binio::write_f64_array(out, row);
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<std::vector<double>> load_descriptors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open descriptor file: " + path);
  binio::expect_magic(in, kDescriptorMagic, "descriptor file " + path);
  uint32_t rows = binio::read_u32(in, "descriptor row count");
  uint32_t cols = binio::read_u32(in, "descriptor column count");
  std::vector<std::vector<double>> out(rows);
  for (uint32_t i = 0; i < rows; ++i)
    out[i] = binio::read_f64_array(in, cols, "descriptor rows");
  return out;
}

}  // namespace gradsign::dataio
