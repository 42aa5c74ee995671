#include "gradsign/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace gradsign::transforms {

namespace {

int clamp_index(int v, int n) { return std::clamp(v, 0, n - 1); }

std::vector<double> gaussian_kernel(double sigma) {
  int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    double w = std::exp(-(static_cast<double>(i) * i) / (2.0 * sigma * sigma));
    k[i + radius] = w;
    sum += w;
  }
  for (double& w : k) w /= sum;
  return k;
}

double bilinear_sample(const Image& x, double sy, double sx, int c) {
  int y0 = static_cast<int>(std::floor(sy));
  int x0 = static_cast<int>(std::floor(sx));
  double fy = sy - y0;
  double fx = sx - x0;
  int y1 = clamp_index(y0 + 1, x.height);
  int x1 = clamp_index(x0 + 1, x.width);
  y0 = clamp_index(y0, x.height);
  x0 = clamp_index(x0, x.width);
  double top = x.at(y0, x0, c) * (1.0 - fx) + x.at(y0, x1, c) * fx;
  double bot = x.at(y1, x0, c) * (1.0 - fx) + x.at(y1, x1, c) * fx;
  return top * (1.0 - fy) + bot * fy;
}

}  // namespace

Image gaussian_blur(const Image& x, double sigma) {
  if (sigma < 0.0)
    throw std::invalid_argument("gaussian_blur: sigma must be >= 0, got " +
                                std::to_string(sigma));
  if (sigma == 0.0) return x;
  std::vector<double> k = gaussian_kernel(sigma);
  int radius = (static_cast<int>(k.size()) - 1) / 2;

  Image horiz(x.height, x.width, x.channels);
  for (int y = 0; y < x.height; ++y) {
    for (int xx = 0; xx < x.width; ++xx) {
      for (int c = 0; c < x.channels; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[i + radius] * x.at(y, clamp_index(xx + i, x.width), c);
        horiz.at(y, xx, c) = acc;
      }
    }
  }
  Image out(x.height, x.width, x.channels);
  for (int y = 0; y < x.height; ++y) {
    for (int xx = 0; xx < x.width; ++xx) {
      for (int c = 0; c < x.channels; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i)
          acc += k[i + radius] * horiz.at(clamp_index(y + i, x.height), xx, c);
        out.at(y, xx, c) = acc;
      }
    }
  }
  return out;
}

Image affine(const Image& x, double scale, double translate_x,
             double translate_y, double rotate_deg, double shear_deg) {
  if (scale <= 0.0)
    throw std::invalid_argument("affine: scale must be positive, got " +
                                std::to_string(scale));
  if (scale == 1.0 && translate_x == 0.0 && translate_y == 0.0 &&
      rotate_deg == 0.0 && shear_deg == 0.0)
    return x;

  double theta = rotate_deg * std::numbers::pi / 180.0;
  double phi = shear_deg * std::numbers::pi / 180.0;
  double cos_t = std::cos(theta), sin_t = std::sin(theta);
  double tan_p = std::tan(phi);

  // Forward map about the center: scale * rotate * shear, then translate.
  // m = S R Sh with Sh = [[1, tan phi], [0, 1]].
  double m00 = scale * cos_t;
  double m01 = scale * (cos_t * tan_p - sin_t);
  double m10 = scale * sin_t;
  double m11 = scale * (sin_t * tan_p + cos_t);
  double det = m00 * m11 - m01 * m10;
  double i00 = m11 / det, i01 = -m01 / det;
  double i10 = -m10 / det, i11 = m00 / det;

  double cy = (x.height - 1) / 2.0;
  double cx = (x.width - 1) / 2.0;

  Image out(x.height, x.width, x.channels);
  for (int y = 0; y < x.height; ++y) {
    for (int xx = 0; xx < x.width; ++xx) {
      double dx = xx - cx - translate_x;
      double dy = y - cy - translate_y;
      double sx = cx + i00 * dx + i01 * dy;
      double sy = cy + i10 * dx + i11 * dy;
      for (int c = 0; c < x.channels; ++c)
        out.at(y, xx, c) = bilinear_sample(x, sy, sx, c);
    }
  }
  return out;
}

Image center_crop(const Image& x, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0 || out_h > x.height || out_w > x.width)
    throw std::invalid_argument(
        "center_crop: requested " + std::to_string(out_h) + "x" +
        std::to_string(out_w) + " from " + std::to_string(x.height) + "x" +
        std::to_string(x.width));
  int off_y = (x.height - out_h + 1) / 2;
  int off_x = (x.width - out_w + 1) / 2;
  Image out(out_h, out_w, x.channels);
  for (int y = 0; y < out_h; ++y)
    for (int xx = 0; xx < out_w; ++xx)
      for (int c = 0; c < x.channels; ++c)
        out.at(y, xx, c) = x.at(y + off_y, xx + off_x, c);
  return out;
}

Image resize_bilinear(const Image& x, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0)
    throw std::invalid_argument("resize_bilinear: output must be positive");
  if (out_h == x.height && out_w == x.width) return x;
  double scale_y = static_cast<double>(x.height) / out_h;
  double scale_x = static_cast<double>(x.width) / out_w;
  Image out(out_h, out_w, x.channels);
  for (int y = 0; y < out_h; ++y) {
    double sy = (y + 0.5) * scale_y - 0.5;
    for (int xx = 0; xx < out_w; ++xx) {
      double sx = (xx + 0.5) * scale_x - 0.5;
      for (int c = 0; c < x.channels; ++c)
        out.at(y, xx, c) = bilinear_sample(x, sy, sx, c);
    }
  }
  return out;
}

Image grayscale(const Image& x) {
  if (x.channels == 1) return x;
  if (x.channels != 3)
    throw std::invalid_argument("grayscale expects 1 or 3 channels, got " +
                                std::to_string(x.channels));
  Image out(x.height, x.width, 3);
  for (int y = 0; y < x.height; ++y) {
    for (int xx = 0; xx < x.width; ++xx) {
      double r = x.at(y, xx, 0), g = x.at(y, xx, 1), b = x.at(y, xx, 2);
      // Already-gray pixels stay bit-exact fixed points.
      double luma = (r == g && g == b) ? g : 0.299 * r + 0.587 * g + 0.114 * b;
      for (int c = 0; c < 3; ++c) out.at(y, xx, c) = luma;
    }
  }
  return out;
}

std::vector<double> normalize(const Image& x, const std::vector<double>& mean,
                              const std::vector<double>& std) {
  if (mean.size() != static_cast<size_t>(x.channels) ||
      std.size() != static_cast<size_t>(x.channels))
    throw std::invalid_argument("normalize: constants must match channels");
  for (double s : std)
    if (s == 0.0) throw std::invalid_argument("normalize: zero std");
  std::vector<double> out(x.data.size());
  size_t n = static_cast<size_t>(x.height) * x.width;
  for (size_t i = 0; i < n; ++i)
    for (int c = 0; c < x.channels; ++c)
      out[i * x.channels + c] = (x.data[i * x.channels + c] - mean[c]) / std[c];
  return out;
}

Image denormalize(const std::vector<double>& values, int height, int width,
                  int channels, const std::vector<double>& mean,
                  const std::vector<double>& std) {
  if (values.size() != static_cast<size_t>(height) * width * channels)
    throw std::invalid_argument("denormalize: value count does not match shape");
  if (mean.size() != static_cast<size_t>(channels) ||
      std.size() != static_cast<size_t>(channels))
    throw std::invalid_argument("denormalize: constants must match channels");
  Image out(height, width, channels);
  size_t n = static_cast<size_t>(height) * width;
  for (size_t i = 0; i < n; ++i)
    for (int c = 0; c < channels; ++c)
      out.data[i * channels + c] = values[i * channels + c] * std[c] + mean[c];
  return out;
}

void TransformStep::validate() const {
  switch (kind) {
    case StepKind::CenterCrop:
    case StepKind::RandomCrop:
      if (!(fraction > 0.0 && fraction <= 1.0))
        throw std::invalid_argument("crop fraction must be in (0, 1], got " +
                                    std::to_string(fraction));
      break;
    case StepKind::GaussianBlur:
      if (sigma < 0.0)
        throw std::invalid_argument("blur sigma must be >= 0, got " +
                                    std::to_string(sigma));
      break;
    case StepKind::ContrastNormalize:
      if (contrast_lo < 0.0 || contrast_hi < contrast_lo)
        throw std::invalid_argument("contrast range must satisfy 0 <= lo <= hi");
      break;
    case StepKind::Grayscale:
      if (gray_prob < 0.0 || gray_prob > 1.0)
        throw std::invalid_argument("grayscale probability must be in [0, 1]");
      break;
    case StepKind::Affine:
      if (scale_lo <= 0.0 || scale_hi < scale_lo)
        throw std::invalid_argument("affine scale range must satisfy 0 < lo <= hi");
      break;
  }
}

std::string TransformStep::describe() const {
  std::ostringstream os;
  switch (kind) {
    case StepKind::CenterCrop:
      os << "center-crop(" << fraction << ")";
      break;
    case StepKind::GaussianBlur:
      os << "gaussian-blur(" << sigma << ")";
      break;
    case StepKind::ContrastNormalize:
      os << "contrast-normalize(" << contrast_lo << "," << contrast_hi << ")";
      break;
    case StepKind::Affine:
      os << "affine";
      break;
    case StepKind::Grayscale:
      os << "grayscale(" << gray_prob << ")";
      break;
    case StepKind::RandomCrop:
      os << "random-crop(" << fraction << ")";
      break;
  }
  return os.str();
}

TransformStep make_center_crop(double fraction) {
  TransformStep s;
  s.kind = StepKind::CenterCrop;
  s.fraction = fraction;
  s.validate();
  return s;
}

TransformStep make_gaussian_blur(double sigma) {
  TransformStep s;
  s.kind = StepKind::GaussianBlur;
  s.sigma = sigma;
  s.validate();
  return s;
}

TransformStep make_contrast(double lo, double hi) {
  TransformStep s;
  s.kind = StepKind::ContrastNormalize;
  s.contrast_lo = lo;
  s.contrast_hi = hi;
  s.validate();
  return s;
}

TransformStep make_affine() {
  TransformStep s;
  s.kind = StepKind::Affine;
  return s;
}

TransformStep make_grayscale(double probability) {
  TransformStep s;
  s.kind = StepKind::Grayscale;
  s.gray_prob = probability;
  s.validate();
  return s;
}

TransformStep make_random_crop(double fraction) {
  TransformStep s;
  s.kind = StepKind::RandomCrop;
  s.fraction = fraction;
  s.validate();
  return s;
}

void TransformPipeline::validate() const {
  if (probability < 0.0 || probability > 1.0)
    throw std::invalid_argument("pipeline probability must be in [0, 1], got " +
                                std::to_string(probability));
  for (const TransformStep& s : steps) s.validate();
}

std::string TransformPipeline::describe() const {
  std::ostringstream os;
  for (size_t i = 0; i < steps.size(); ++i) {
    if (i) os << " ";
    os << steps[i].describe();
  }
  return os.str();
}

namespace {

int cropped_side(int side, double fraction) {
  int out = static_cast<int>(std::lround(side * fraction));
  return std::clamp(out, 1, side);
}

Image apply_one(const TransformStep& step, const Image& x, Rng& rng) {
  switch (step.kind) {
    case StepKind::CenterCrop: {
      int oh = cropped_side(x.height, step.fraction);
      int ow = cropped_side(x.width, step.fraction);
      return resize_bilinear(center_crop(x, oh, ow), x.height, x.width);
    }
    case StepKind::GaussianBlur:
      return gaussian_blur(x, step.sigma);
    case StepKind::ContrastNormalize: {
      double s = rng.uniform(step.contrast_lo, step.contrast_hi);
      Image out = x;
      for (int c = 0; c < x.channels; ++c) {
        double mean = 0.0;
        size_t n = static_cast<size_t>(x.height) * x.width;
        for (size_t i = 0; i < n; ++i) mean += x.data[i * x.channels + c];
        mean /= static_cast<double>(n);
        for (size_t i = 0; i < n; ++i) {
          double& v = out.data[i * x.channels + c];
          v = clamp01(mean + s * (v - mean));
        }
      }
      return out;
    }
    case StepKind::Affine: {
      double scale = rng.uniform(step.scale_lo, step.scale_hi);
      double tx = rng.uniform(-step.translate_frac, step.translate_frac) * x.width;
      double ty = rng.uniform(-step.translate_frac, step.translate_frac) * x.height;
      double rot = rng.uniform(-step.rotate_max_deg, step.rotate_max_deg);
      double shear = rng.uniform(-step.shear_max_deg, step.shear_max_deg);
      return affine(x, scale, tx, ty, rot, shear);
    }
    case StepKind::Grayscale:
      if (rng.bernoulli(step.gray_prob)) return grayscale(x);
      return x;
    case StepKind::RandomCrop: {
      int oh = cropped_side(x.height, step.fraction);
      int ow = cropped_side(x.width, step.fraction);
      int max_oy = x.height - oh;
      int max_ox = x.width - ow;
      int oy = max_oy > 0 ? static_cast<int>(rng.uniform_int(max_oy + 1)) : 0;
      int ox = max_ox > 0 ? static_cast<int>(rng.uniform_int(max_ox + 1)) : 0;
      Image window(oh, ow, x.channels);
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx)
          for (int c = 0; c < x.channels; ++c)
            window.at(y, xx, c) = x.at(y + oy, xx + ox, c);
      return resize_bilinear(window, x.height, x.width);
    }
  }
  throw std::logic_error("unreachable transform step kind");
}

}  // namespace

Image apply_steps(const TransformPipeline& pipeline, const Image& x, Rng& rng) {
  Image out = x;
  for (const TransformStep& step : pipeline.steps)
    out = apply_one(step, out, rng);
  for (double& v : out.data) v = clamp01(v);
  return out;
}

Image apply_stochastic(const TransformPipeline& pipeline, const Image& x,
                       Rng& rng) {
  pipeline.validate();
  if (!rng.bernoulli(pipeline.probability)) return x;
  return apply_steps(pipeline, x, rng);
}

std::vector<Image> expand_sources(const std::vector<Image>& sources, int factor,
                                  const TransformPipeline& pipeline,
                                  uint64_t seed) {
  if (sources.empty())
    throw std::invalid_argument("expand_sources: empty source list");
  if (factor < 1)
    throw std::invalid_argument("expand_sources: factor must be >= 1, got " +
                                std::to_string(factor));
  pipeline.validate();
  std::vector<Image> out;
  out.reserve(sources.size() * static_cast<size_t>(factor));
  for (size_t i = 0; i < sources.size(); ++i) {
    out.push_back(sources[i]);
    for (int j = 1; j < factor; ++j) {
      Rng rng(derive_seed(seed, i, static_cast<uint64_t>(j)));
      out.push_back(apply_steps(pipeline, sources[i], rng));
    }
  }
  return out;
}

namespace {

std::vector<double> parse_args(const std::string& name,
                               const std::string& body, size_t lo, size_t hi) {
  std::vector<double> args;
  std::string token;
  std::istringstream is(body);
  while (std::getline(is, token, ',')) {
    size_t pos = 0;
    double v;
    try {
      v = std::stod(token, &pos);
    } catch (const std::exception&) {
      throw std::invalid_argument("pipeline step " + name +
                                  ": bad numeric argument '" + token + "'");
    }
    while (pos < token.size() && std::isspace(static_cast<unsigned char>(token[pos])))
      ++pos;
    if (pos != token.size())
      throw std::invalid_argument("pipeline step " + name +
                                  ": bad numeric argument '" + token + "'");
    args.push_back(v);
  }
  if (args.size() < lo || args.size() > hi)
    throw std::invalid_argument("pipeline step " + name +
                                " takes between " + std::to_string(lo) +
                                " and " + std::to_string(hi) +
                                " arguments, got " + std::to_string(args.size()));
  return args;
}

}  // namespace

std::vector<TransformStep> parse_pipeline_steps(const std::string& text) {
  std::vector<TransformStep> steps;
  std::istringstream is(text);
  std::string token;
  while (is >> token) {
    std::string name = token;
    std::string body;
    size_t open = token.find('(');
    if (open != std::string::npos) {
      if (token.back() != ')')
        throw std::invalid_argument("pipeline step '" + token +
                                    "': missing closing parenthesis");
      name = token.substr(0, open);
      body = token.substr(open + 1, token.size() - open - 2);
    }
    if (name == "center-crop") {
      auto a = parse_args(name, body, 1, 1);
      steps.push_back(make_center_crop(a[0]));
    } else if (name == "gaussian-blur") {
      auto a = parse_args(name, body, 1, 1);
      steps.push_back(make_gaussian_blur(a[0]));
    } else if (name == "contrast-normalize") {
      auto a = parse_args(name, body, 1, 2);
      if (a.size() == 1)
        steps.push_back(make_contrast(a[0], a[0]));
      else
        steps.push_back(make_contrast(a[0], a[1]));
    } else if (name == "affine") {
      if (!body.empty())
        throw std::invalid_argument("pipeline step affine takes no arguments");
      steps.push_back(make_affine());
    } else if (name == "grayscale") {
      if (body.empty() && open == std::string::npos) {
        steps.push_back(make_grayscale(0.25));
      } else {
        auto a = parse_args(name, body, 1, 1);
        steps.push_back(make_grayscale(a[0]));
      }
    } else if (name == "random-crop") {
      auto a = parse_args(name, body, 1, 1);
      steps.push_back(make_random_crop(a[0]));
    } else {
      throw std::invalid_argument("unknown pipeline step '" + name + "'");
    }
  }
  return steps;
}

}  // namespace gradsign::transforms
