#include "gradsign/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "gradsign/binio.hpp"

namespace gradsign::model {

namespace {

void check_finite(const std::vector<double>& v, const char* layer) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NonFiniteError(layer);
  }
}

void conv3x3_forward(const double* in, int h, int w, int ic, const double* wgt,
                     const double* bias, int oc, double* out) {
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double* o = out + (static_cast<size_t>(y) * w + x) * oc;
      for (int f = 0; f < oc; ++f) o[f] = bias[f];
      for (int ky = 0; ky < 3; ++ky) {
        int yy = y + ky - 1;
        if (yy < 0 || yy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          int xx = x + kx - 1;
          if (xx < 0 || xx >= w) continue;
          const double* src = in + (static_cast<size_t>(yy) * w + xx) * ic;
          for (int f = 0; f < oc; ++f) {
            const double* wp =
                wgt + ((static_cast<size_t>(f) * 3 + ky) * 3 + kx) * ic;
            double acc = 0.0;
            for (int c = 0; c < ic; ++c) acc += wp[c] * src[c];
            o[f] += acc;
          }
        }
      }
    }
  }
}

void conv3x3_backward_data(const double* dout, int h, int w, int oc,
                           const double* wgt, int ic, double* din) {
  std::fill(din, din + static_cast<size_t>(h) * w * ic, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double* dof = dout + (static_cast<size_t>(y) * w + x) * oc;
      for (int ky = 0; ky < 3; ++ky) {
        int yy = y + ky - 1;
        if (yy < 0 || yy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          int xx = x + kx - 1;
          if (xx < 0 || xx >= w) continue;
          double* dst = din + (static_cast<size_t>(yy) * w + xx) * ic;
          for (int f = 0; f < oc; ++f) {
            const double* wp =
                wgt + ((static_cast<size_t>(f) * 3 + ky) * 3 + kx) * ic;
            double df = dof[f];
            for (int c = 0; c < ic; ++c) dst[c] += df * wp[c];
          }
        }
      }
    }
  }
}

void conv3x3_backward_params(const double* in, int h, int w, int ic,
                             const double* dout, int oc, double* dwgt,
                             double* dbias) {
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double* dof = dout + (static_cast<size_t>(y) * w + x) * oc;
      for (int ky = 0; ky < 3; ++ky) {
        int yy = y + ky - 1;
        if (yy < 0 || yy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          int xx = x + kx - 1;
          if (xx < 0 || xx >= w) continue;
          const double* src = in + (static_cast<size_t>(yy) * w + xx) * ic;
          for (int f = 0; f < oc; ++f) {
            double* dwp =
                dwgt + ((static_cast<size_t>(f) * 3 + ky) * 3 + kx) * ic;
            double df = dof[f];
            for (int c = 0; c < ic; ++c) dwp[c] += df * src[c];
          }
        }
      }
      for (int f = 0; f < oc; ++f) dbias[f] += dof[f];
    }
  }
}

void relu_inplace(std::vector<double>& v) {
  for (double& x : v)
    if (x < 0.0) x = 0.0;
}

// Masks delta by the sign of the preactivation; derivative 0 at exactly 0.
void relu_backward_inplace(std::vector<double>& delta,
                           const std::vector<double>& pre) {
  for (size_t i = 0; i < delta.size(); ++i)
    if (pre[i] <= 0.0) delta[i] = 0.0;
}

void dense_forward(const double* in, int n_in, const double* wgt,
                   const double* bias, int n_out, double* out) {
  for (int o = 0; o < n_out; ++o) {
    const double* wp = wgt + static_cast<size_t>(o) * n_in;
    double acc = bias[o];
    for (int i = 0; i < n_in; ++i) acc += wp[i] * in[i];
    out[o] = acc;
  }
}

void dense_backward_data(const double* dout, int n_out, const double* wgt,
                         int n_in, double* din) {
  std::fill(din, din + n_in, 0.0);
  for (int o = 0; o < n_out; ++o) {
    const double* wp = wgt + static_cast<size_t>(o) * n_in;
    double df = dout[o];
    for (int i = 0; i < n_in; ++i) din[i] += df * wp[i];
  }
}

void dense_backward_params(const double* in, int n_in, const double* dout,
                           int n_out, double* dwgt, double* dbias) {
  for (int o = 0; o < n_out; ++o) {
    double* dwp = dwgt + static_cast<size_t>(o) * n_in;
    double df = dout[o];
    for (int i = 0; i < n_in; ++i) dwp[i] += df * in[i];
    dbias[o] += df;
  }
}

void avgpool2(const double* in, int h, int w, int c, double* out) {
  int oh = h / 2, ow = w / 2;
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      const double* p00 = in + (static_cast<size_t>(2 * y) * w + 2 * x) * c;
      const double* p01 = p00 + c;
      const double* p10 = in + (static_cast<size_t>(2 * y + 1) * w + 2 * x) * c;
      const double* p11 = p10 + c;
      double* o = out + (static_cast<size_t>(y) * ow + x) * c;
      for (int ch = 0; ch < c; ++ch)
        o[ch] = 0.25 * (p00[ch] + p01[ch] + p10[ch] + p11[ch]);
    }
  }
}

void avgpool2_backward(const double* dout, int h, int w, int c, double* din) {
  int oh = h / 2, ow = w / 2;
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      const double* d = dout + (static_cast<size_t>(y) * ow + x) * c;
      double* p00 = din + (static_cast<size_t>(2 * y) * w + 2 * x) * c;
      double* p01 = p00 + c;
      double* p10 = din + (static_cast<size_t>(2 * y + 1) * w + 2 * x) * c;
      double* p11 = p10 + c;
      for (int ch = 0; ch < c; ++ch) {
        double g = 0.25 * d[ch];
        p00[ch] = g;
        p01[ch] = g;
        p10[ch] = g;
        p11[ch] = g;
      }
    }
  }
}

// Forward activations kept around for the backward pass.
struct Activations {
  std::vector<double> xn;      // normalized input
  std::vector<double> a1, r1;  // conv1 pre/post relu
  std::vector<double> a2, r2;  // conv2 pre/post relu
  std::vector<double> pool;
  std::vector<double> h, hr;  // dense pre/post relu
  std::vector<double> logits;
  std::vector<double> emb_pre;
};

void check_input_shape(const ModelConfig& cfg, const Image& x,
                       const char* op) {
  if (x.height != cfg.height || x.width != cfg.width ||
      x.channels != cfg.channels) {
    throw shape_mismatch(op,
                         std::to_string(cfg.height) + "x" +
                             std::to_string(cfg.width) + "x" +
                             std::to_string(cfg.channels),
                         x.shape_string());
  }
}

void forward_trunk(const ModelParams& p, const Image& x, Activations& act) {
  const ModelConfig& cfg = p.config;
  int h = cfg.height, w = cfg.width, c = cfg.channels;
  size_t n = static_cast<size_t>(h) * w;

  act.xn.resize(n * c);
  for (size_t i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      act.xn[i * c + ch] =
          (x.data[i * c + ch] - cfg.norm_mean[ch]) / cfg.norm_std[ch];
    }
  }
  check_finite(act.xn, "normalize");

  act.a1.resize(n * cfg.conv1_filters);
  conv3x3_forward(act.xn.data(), h, w, c, p.conv1_w.data(), p.conv1_b.data(),
                  cfg.conv1_filters, act.a1.data());
  check_finite(act.a1, "conv1");
  act.r1 = act.a1;
  relu_inplace(act.r1);

  act.a2.resize(n * cfg.conv2_filters);
  conv3x3_forward(act.r1.data(), h, w, cfg.conv1_filters, p.conv2_w.data(),
                  p.conv2_b.data(), cfg.conv2_filters, act.a2.data());
  check_finite(act.a2, "conv2");
  act.r2 = act.a2;
  relu_inplace(act.r2);

  act.pool.resize(static_cast<size_t>(cfg.flat_size()));
  avgpool2(act.r2.data(), h, w, cfg.conv2_filters, act.pool.data());

  act.h.resize(cfg.dense_units);
  dense_forward(act.pool.data(), cfg.flat_size(), p.fc1_w.data(),
                p.fc1_b.data(), cfg.dense_units, act.h.data());
  check_finite(act.h, "fc1");
  act.hr = act.h;
  relu_inplace(act.hr);
}

void forward_logits(const ModelParams& p, Activations& act) {
  act.logits.resize(p.config.classes);
  dense_forward(act.hr.data(), p.config.dense_units, p.cls_w.data(),
                p.cls_b.data(), p.config.classes, act.logits.data());
  check_finite(act.logits, "classifier_head");
}

void forward_embedding(const ModelParams& p, Activations& act) {
  act.emb_pre.resize(p.config.embed_dim);
  dense_forward(act.hr.data(), p.config.dense_units, p.emb_w.data(),
                p.emb_b.data(), p.config.embed_dim, act.emb_pre.data());
  check_finite(act.emb_pre, "embedding_head");
}

std::vector<double> softmax(const std::vector<double>& logits) {
  double max_logit = *std::max_element(logits.begin(), logits.end());
  std::vector<double> probs(logits.size());
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] - max_logit);
    sum += probs[i];
  }
  for (double& v : probs) v /= sum;
  return probs;
}

double logsumexp(const std::vector<double>& logits) {
  double max_logit = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - max_logit);
  return max_logit + std::log(sum);
}

Descriptor normalize_embedding(const std::vector<double>& emb_pre) {
  Descriptor d;
  double norm_sq = 0.0;
  for (double v : emb_pre) norm_sq += v * v;
  if (norm_sq == 0.0) {
    d.values.assign(emb_pre.size(), 0.0);
    d.values[0] = 1.0;
    d.degenerate = true;
    return d;
  }
  double norm = std::sqrt(norm_sq);
  d.values.resize(emb_pre.size());
  for (size_t i = 0; i < emb_pre.size(); ++i) d.values[i] = emb_pre[i] / norm;
  return d;
}

// Backpropagates a head delta down to the raw input pixels.
std::vector<double> backward_to_input(const ModelParams& p,
                                      const Activations& act,
                                      const std::vector<double>& dhr_in) {
  const ModelConfig& cfg = p.config;
  int h = cfg.height, w = cfg.width;

  std::vector<double> dh = dhr_in;
  relu_backward_inplace(dh, act.h);

  std::vector<double> dpool(static_cast<size_t>(cfg.flat_size()));
  dense_backward_data(dh.data(), cfg.dense_units, p.fc1_w.data(),
                      cfg.flat_size(), dpool.data());

  std::vector<double> da2(act.a2.size());
  avgpool2_backward(dpool.data(), h, w, cfg.conv2_filters, da2.data());
  relu_backward_inplace(da2, act.a2);
  check_finite(da2, "conv2_backward");

  std::vector<double> da1(act.a1.size());
  conv3x3_backward_data(da2.data(), h, w, cfg.conv2_filters, p.conv2_w.data(),
                        cfg.conv1_filters, da1.data());
  relu_backward_inplace(da1, act.a1);
  check_finite(da1, "conv1_backward");

  std::vector<double> dxn(act.xn.size());
  conv3x3_backward_data(da1.data(), h, w, cfg.conv1_filters, p.conv1_w.data(),
                        cfg.channels, dxn.data());

  size_t n = static_cast<size_t>(h) * w;
  std::vector<double> dx(dxn.size());
  for (size_t i = 0; i < n; ++i)
    for (int ch = 0; ch < cfg.channels; ++ch)
      dx[i * cfg.channels + ch] = dxn[i * cfg.channels + ch] / cfg.norm_std[ch];
  check_finite(dx, "input_gradient");
  return dx;
}

// Head delta (dL/dhr) for the given loss, plus the loss value.
struct HeadBackward {
  double loss = 0.0;
  std::vector<double> dhr;
  std::vector<double> dlogits;  // kept for the parameter-gradient path
};

HeadBackward loss_head_backward(const ModelParams& p, Activations& act,
                                const LossSpec& loss) {
  const ModelConfig& cfg = p.config;
  HeadBackward hb;
  if (loss.kind == LossKind::CrossEntropyOnLabel) {
    forward_logits(p, act);
    std::vector<double> probs = softmax(act.logits);
    hb.loss = logsumexp(act.logits) - act.logits[loss.label];
    hb.dlogits = probs;
    hb.dlogits[loss.label] -= 1.0;
    hb.dhr.resize(cfg.dense_units);
    dense_backward_data(hb.dlogits.data(), cfg.classes, p.cls_w.data(),
                        cfg.dense_units, hb.dhr.data());
  } else {
    forward_embedding(p, act);
    Descriptor d = normalize_embedding(act.emb_pre);
    const std::vector<double>& t = loss.target_descriptor;
    double loss_val = 0.0;
    std::vector<double> dd(d.values.size());
    for (size_t i = 0; i < d.values.size(); ++i) {
      double diff = d.values[i] - t[i];
      loss_val += diff * diff;
      dd[i] = 2.0 * diff;
    }
    hb.loss = loss_val;
    std::vector<double> demb(act.emb_pre.size(), 0.0);
    if (!d.degenerate) {
      double norm_sq = 0.0;
      for (double v : act.emb_pre) norm_sq += v * v;
      double norm = std::sqrt(norm_sq);
      double dot = 0.0;
      for (size_t i = 0; i < dd.size(); ++i) dot += dd[i] * d.values[i];
      for (size_t i = 0; i < dd.size(); ++i)
        demb[i] = (dd[i] - d.values[i] * dot) / norm;
    }
    hb.dhr.resize(cfg.dense_units);
    dense_backward_data(demb.data(), cfg.embed_dim, p.emb_w.data(),
                        cfg.dense_units, hb.dhr.data());
  }
  return hb;
}

}  // namespace

double Descriptor::l2_norm() const {
  double s = 0.0;
  for (double v : values) s += v * v;
  return std::sqrt(s);
}

double descriptor_distance(const Descriptor& a, const Descriptor& b) {
  if (a.values.size() != b.values.size()) {
    throw std::invalid_argument("descriptor length mismatch: " +
                                std::to_string(a.values.size()) + " vs " +
                                std::to_string(b.values.size()));
  }
  double s = 0.0;
  for (size_t i = 0; i < a.values.size(); ++i) {
    double d = a.values[i] - b.values[i];
    s += d * d;
  }
  return std::sqrt(s);
}

void LossSpec::validate() const {
  if (kind == LossKind::CrossEntropyOnLabel) {
    if (label < 0)
      throw std::invalid_argument("cross-entropy loss requires a label target");
  } else {
    if (target_descriptor.empty())
      throw std::invalid_argument(
          "descriptor-distance loss requires a target descriptor");
  }
}

LossSpec LossSpec::untargeted_label(int label) {
  LossSpec s;
  s.kind = LossKind::CrossEntropyOnLabel;
  s.direction = LossDirection::Maximize;
  s.label = label;
  return s;
}

LossSpec LossSpec::targeted_descriptor(std::vector<double> target) {
  LossSpec s;
  s.kind = LossKind::DescriptorDistance;
  s.direction = LossDirection::Minimize;
  s.target_descriptor = std::move(target);
  return s;
}

void ModelConfig::apply_default_normalization() {
  if (!norm_mean.empty()) return;
  if (channels == 3) {
    norm_mean = {0.485, 0.456, 0.406};
    norm_std = {0.229, 0.224, 0.225};
  } else {
    norm_mean.assign(channels, 0.5);
    norm_std.assign(channels, 0.25);
  }
}

void ModelConfig::validate() const {
  if (height <= 0 || width <= 0 || height % 2 != 0 || width % 2 != 0)
    throw std::invalid_argument("model input height/width must be positive and even");
  if (channels != 1 && channels != 3)
    throw std::invalid_argument("model channels must be 1 or 3");
  if (conv1_filters <= 0 || conv2_filters <= 0 || dense_units <= 0 ||
      classes <= 0 || embed_dim <= 0)
    throw std::invalid_argument("model layer sizes must be positive");
  if (norm_mean.size() != static_cast<size_t>(channels) ||
      norm_std.size() != static_cast<size_t>(channels))
    throw std::invalid_argument("normalization constants must match channels");
  for (double s : norm_std)
    if (s == 0.0) throw std::invalid_argument("normalization std must be nonzero");
}

ModelParams ModelParams::zero_init(const ModelConfig& config) {
  ModelConfig cfg = config;
  cfg.apply_default_normalization();
  cfg.validate();
  ModelParams p;
  p.config = cfg;
  p.conv1_w.assign(static_cast<size_t>(cfg.conv1_filters) * 9 * cfg.channels, 0.0);
  p.conv1_b.assign(cfg.conv1_filters, 0.0);
  p.conv2_w.assign(static_cast<size_t>(cfg.conv2_filters) * 9 * cfg.conv1_filters, 0.0);
  p.conv2_b.assign(cfg.conv2_filters, 0.0);
  p.fc1_w.assign(static_cast<size_t>(cfg.dense_units) * cfg.flat_size(), 0.0);
  p.fc1_b.assign(cfg.dense_units, 0.0);
  p.cls_w.assign(static_cast<size_t>(cfg.classes) * cfg.dense_units, 0.0);
  p.cls_b.assign(cfg.classes, 0.0);
  p.emb_w.assign(static_cast<size_t>(cfg.embed_dim) * cfg.dense_units, 0.0);
  p.emb_b.assign(cfg.embed_dim, 0.0);
  return p;
}

ModelParams ModelParams::random_init(const ModelConfig& config, uint64_t seed) {
  ModelParams p = zero_init(config);
  Rng rng(derive_seed(seed, 0x6d6f64656cULL));  // "model"
  auto he_fill = [&rng](std::vector<double>& v, int fan_in) {
    double scale = std::sqrt(2.0 / fan_in);
    for (double& x : v) x = rng.normal(0.0, scale);
  };
  const ModelConfig& cfg = p.config;
  he_fill(p.conv1_w, 9 * cfg.channels);
  he_fill(p.conv2_w, 9 * cfg.conv1_filters);
  he_fill(p.fc1_w, cfg.flat_size());
  he_fill(p.cls_w, cfg.dense_units);
  // Embedding head is a random projection of the trained trunk features;
  // unit-variance scaling keeps descriptors well spread before normalization.
  double emb_scale = std::sqrt(1.0 / cfg.dense_units);
  for (double& x : p.emb_w) x = rng.normal(0.0, emb_scale);
  return p;
}

void ModelParams::validate() const {
  config.validate();
  const ModelConfig& cfg = config;
  auto expect = [](const std::vector<double>& v, size_t n, const char* name) {
    if (v.size() != n)
      throw std::invalid_argument(std::string("model tensor ") + name +
                                  " has inconsistent size");
    for (double x : v)
      if (!std::isfinite(x))
        throw std::invalid_argument(std::string("model tensor ") + name +
                                    " contains non-finite values");
  };
  expect(conv1_w, static_cast<size_t>(cfg.conv1_filters) * 9 * cfg.channels, "conv1_w");
  expect(conv1_b, cfg.conv1_filters, "conv1_b");
  expect(conv2_w, static_cast<size_t>(cfg.conv2_filters) * 9 * cfg.conv1_filters, "conv2_w");
  expect(conv2_b, cfg.conv2_filters, "conv2_b");
  expect(fc1_w, static_cast<size_t>(cfg.dense_units) * cfg.flat_size(), "fc1_w");
  expect(fc1_b, cfg.dense_units, "fc1_b");
  expect(cls_w, static_cast<size_t>(cfg.classes) * cfg.dense_units, "cls_w");
  expect(cls_b, cfg.classes, "cls_b");
  expect(emb_w, static_cast<size_t>(cfg.embed_dim) * cfg.dense_units, "emb_w");
  expect(emb_b, cfg.embed_dim, "emb_b");
}

size_t ModelParams::parameter_count() const {
  return conv1_w.size() + conv1_b.size() + conv2_w.size() + conv2_b.size() +
         fc1_w.size() + fc1_b.size() + cls_w.size() + cls_b.size() +
         emb_w.size() + emb_b.size();
}

bool ModelParams::trunk_equal(const ModelParams& other) const {
  return conv1_w == other.conv1_w && conv1_b == other.conv1_b &&
         conv2_w == other.conv2_w && conv2_b == other.conv2_b;
}

std::vector<double> forward_classify(const ModelParams& params,
                                     const Image& x) {
  check_input_shape(params.config, x, "forward_classify");
  Activations act;
  forward_trunk(params, x, act);
  forward_logits(params, act);
  return softmax(act.logits);
}

Descriptor forward_embed(const ModelParams& params, const Image& x) {
  check_input_shape(params.config, x, "forward_embed");
  Activations act;
  forward_trunk(params, x, act);
  forward_embedding(params, act);
  return normalize_embedding(act.emb_pre);
}

LossGradient input_gradient(const ModelParams& params, const Image& x,
                            const LossSpec& loss) {
  check_input_shape(params.config, x, "input_gradient");
  loss.validate();
  if (loss.kind == LossKind::CrossEntropyOnLabel &&
      loss.label >= params.config.classes) {
    throw std::invalid_argument("loss label " + std::to_string(loss.label) +
                                " out of range for " +
                                std::to_string(params.config.classes) +
                                " classes");
  }
  if (loss.kind == LossKind::DescriptorDistance &&
      loss.target_descriptor.size() !=
          static_cast<size_t>(params.config.embed_dim)) {
    throw std::invalid_argument("target descriptor length does not match the "
                                "model embedding dimension");
  }
  Activations act;
  forward_trunk(params, x, act);
  HeadBackward hb = loss_head_backward(params, act, loss);
  LossGradient out;
  out.loss = hb.loss;
  out.gradient = backward_to_input(params, act, hb.dhr);
  return out;
}

int predict_label(const ModelParams& params, const Image& x) {
  std::vector<double> probs = forward_classify(params, x);
  return static_cast<int>(std::max_element(probs.begin(), probs.end()) -
                          probs.begin());
}

double classification_accuracy(const ModelParams& params,
                               const std::vector<LabeledImage>& dataset) {
  if (dataset.empty()) return 0.0;
  size_t correct = 0;
  for (const auto& sample : dataset) {
    if (predict_label(params, sample.image) == sample.label) ++correct;
  }
  return static_cast<double>(correct) / dataset.size();
}

namespace {

// Gradient accumulators / velocity buffers, one per trainable tensor.
struct ParamGrads {
  std::vector<double> conv1_w, conv1_b, conv2_w, conv2_b;
  std::vector<double> fc1_w, fc1_b, cls_w, cls_b;

  explicit ParamGrads(const ModelParams& p)
      : conv1_w(p.conv1_w.size(), 0.0),
        conv1_b(p.conv1_b.size(), 0.0),
        conv2_w(p.conv2_w.size(), 0.0),
        conv2_b(p.conv2_b.size(), 0.0),
        fc1_w(p.fc1_w.size(), 0.0),
        fc1_b(p.fc1_b.size(), 0.0),
        cls_w(p.cls_w.size(), 0.0),
        cls_b(p.cls_b.size(), 0.0) {}

  void zero() {
    auto z = [](std::vector<double>& v) { std::fill(v.begin(), v.end(), 0.0); };
    z(conv1_w); z(conv1_b); z(conv2_w); z(conv2_b);
    z(fc1_w); z(fc1_b); z(cls_w); z(cls_b);
  }
};

// Accumulates parameter gradients for one sample. Returns the loss. When
// freeze_trunk is set the conv gradients are skipped entirely and the
// backward pass stops at the dense layer input.
double accumulate_sample(const ModelParams& p, const LabeledImage& sample,
                         bool soft, bool freeze_trunk, Activations& act,
                         ParamGrads& grads) {
  const ModelConfig& cfg = p.config;
  forward_trunk(p, sample.image, act);
  forward_logits(p, act);
  std::vector<double> probs = softmax(act.logits);

  std::vector<double> dlogits = probs;
  double loss;
  if (soft && !sample.soft_target.empty()) {
    loss = logsumexp(act.logits);
    double dot = 0.0;
    for (int k = 0; k < cfg.classes; ++k) {
      dlogits[k] -= sample.soft_target[k];
      dot += sample.soft_target[k] * act.logits[k];
    }
    loss -= dot;
  } else {
    loss = logsumexp(act.logits) - act.logits[sample.label];
    dlogits[sample.label] -= 1.0;
  }

  dense_backward_params(act.hr.data(), cfg.dense_units, dlogits.data(),
                        cfg.classes, grads.cls_w.data(), grads.cls_b.data());

  std::vector<double> dhr(cfg.dense_units);
  dense_backward_data(dlogits.data(), cfg.classes, p.cls_w.data(),
                      cfg.dense_units, dhr.data());
  relu_backward_inplace(dhr, act.h);

  dense_backward_params(act.pool.data(), cfg.flat_size(), dhr.data(),
                        cfg.dense_units, grads.fc1_w.data(),
                        grads.fc1_b.data());
  if (freeze_trunk) return loss;

  std::vector<double> dpool(static_cast<size_t>(cfg.flat_size()));
  dense_backward_data(dhr.data(), cfg.dense_units, p.fc1_w.data(),
                      cfg.flat_size(), dpool.data());

  std::vector<double> da2(act.a2.size());
  avgpool2_backward(dpool.data(), cfg.height, cfg.width, cfg.conv2_filters,
                    da2.data());
  relu_backward_inplace(da2, act.a2);
  conv3x3_backward_params(act.r1.data(), cfg.height, cfg.width,
                          cfg.conv1_filters, da2.data(), cfg.conv2_filters,
                          grads.conv2_w.data(), grads.conv2_b.data());

  std::vector<double> da1(act.a1.size());
  conv3x3_backward_data(da2.data(), cfg.height, cfg.width, cfg.conv2_filters,
                        p.conv2_w.data(), cfg.conv1_filters, da1.data());
  relu_backward_inplace(da1, act.a1);
  conv3x3_backward_params(act.xn.data(), cfg.height, cfg.width, cfg.channels,
                          da1.data(), cfg.conv1_filters, grads.conv1_w.data(),
                          grads.conv1_b.data());
  return loss;
}

void sgd_update(std::vector<double>& param, std::vector<double>& velocity,
                const std::vector<double>& grad, double lr, double momentum,
                double inv_batch) {
  for (size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i] * inv_batch;
    param[i] -= lr * velocity[i];
  }
}

}  // namespace

TrainResult train_from(const ModelParams& init,
                       const std::vector<LabeledImage>& dataset,
                       const TrainOptions& options,
                       const std::vector<LabeledImage>* heldout) {
  if (dataset.empty()) throw std::invalid_argument("training dataset is empty");
  init.validate();
  const ModelConfig& cfg = init.config;
  for (const auto& sample : dataset) {
    if (!options.soft_targets &&
        (sample.label < 0 || sample.label >= cfg.classes))
      throw std::invalid_argument("training label out of range: " +
                                  std::to_string(sample.label));
  }
  if (options.batch_size <= 0 || options.epochs < 0)
    throw std::invalid_argument("invalid training options");

  TrainResult result;
  result.params = init;
  ModelParams& p = result.params;

  ParamGrads grads(p), velocity(p);
  velocity.zero();
  Activations act;
  Rng rng(derive_seed(options.seed, 0x747261696eULL));  // "train"

  std::vector<size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    // Fisher-Yates with the session RNG keeps the whole run reproducible.
    for (size_t i = order.size() - 1; i > 0; --i) {
      size_t j = rng.uniform_int(i + 1);
      std::swap(order[i], order[j]);
    }

    double loss_sum = 0.0;
    size_t correct = 0;
    size_t pos = 0;
    while (pos < order.size()) {
      size_t batch_end =
          std::min(order.size(), pos + static_cast<size_t>(options.batch_size));
      grads.zero();
      double batch_loss = 0.0;
      try {
        for (size_t i = pos; i < batch_end; ++i) {
          const LabeledImage& sample = dataset[order[i]];
          batch_loss += accumulate_sample(p, sample, options.soft_targets,
                                          options.freeze_trunk, act, grads);
        }
      } catch (const NonFiniteError&) {
        throw TrainingDiverged(epoch - 1);
      }
      if (!std::isfinite(batch_loss)) throw TrainingDiverged(epoch - 1);
      loss_sum += batch_loss;

      double inv_batch = 1.0 / static_cast<double>(batch_end - pos);
      double lr = options.learning_rate;
      if (!options.freeze_trunk) {
        sgd_update(p.conv1_w, velocity.conv1_w, grads.conv1_w, lr,
                   options.momentum, inv_batch);
        sgd_update(p.conv1_b, velocity.conv1_b, grads.conv1_b, lr,
                   options.momentum, inv_batch);
        sgd_update(p.conv2_w, velocity.conv2_w, grads.conv2_w, lr,
                   options.momentum, inv_batch);
        sgd_update(p.conv2_b, velocity.conv2_b, grads.conv2_b, lr,
                   options.momentum, inv_batch);
      }
      sgd_update(p.fc1_w, velocity.fc1_w, grads.fc1_w, lr, options.momentum,
                 inv_batch);
      sgd_update(p.fc1_b, velocity.fc1_b, grads.fc1_b, lr, options.momentum,
                 inv_batch);
      sgd_update(p.cls_w, velocity.cls_w, grads.cls_w, lr, options.momentum,
                 inv_batch);
      sgd_update(p.cls_b, velocity.cls_b, grads.cls_b, lr, options.momentum,
                 inv_batch);
      pos = batch_end;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.mean_loss = loss_sum / static_cast<double>(dataset.size());
    if (!std::isfinite(stats.mean_loss)) throw TrainingDiverged(epoch - 1);
    size_t n_eval = dataset.size();
    for (size_t i = 0; i < n_eval; ++i) {
      if (predict_label(p, dataset[i].image) == dataset[i].label) ++correct;
    }
    stats.train_accuracy = static_cast<double>(correct) / n_eval;
    if (heldout && !heldout->empty())
      stats.heldout_accuracy = classification_accuracy(p, *heldout);
    result.log.push_back(stats);
  }
  return result;
}

TrainResult train_classifier(const std::vector<LabeledImage>& dataset,
                             const ModelConfig& config,
                             const TrainOptions& options,
                             const std::vector<LabeledImage>* heldout) {
  ModelParams init = ModelParams::random_init(config, options.seed);
  return train_from(init, dataset, options, heldout);
}

namespace {

constexpr char kCheckpointMagic[] = "GSTM1";

std::vector<std::vector<uint32_t>> shape_table(const ModelConfig& cfg) {
  uint32_t f1 = static_cast<uint32_t>(cfg.conv1_filters);
  uint32_t f2 = static_cast<uint32_t>(cfg.conv2_filters);
  uint32_t c = static_cast<uint32_t>(cfg.channels);
  uint32_t d = static_cast<uint32_t>(cfg.dense_units);
  uint32_t k = static_cast<uint32_t>(cfg.classes);
  uint32_t e = static_cast<uint32_t>(cfg.embed_dim);
  uint32_t flat = static_cast<uint32_t>(cfg.flat_size());
  return {
      {f1, 3, 3, c}, {f1}, {f2, 3, 3, f1}, {f2}, {d, flat}, {d},
      {k, d},        {k},  {e, d},         {e},  {c},       {c},
  };
}

std::vector<const std::vector<double>*> tensor_list(const ModelParams& p) {
  return {&p.conv1_w, &p.conv1_b, &p.conv2_w, &p.conv2_b, &p.fc1_w, &p.fc1_b,
          &p.cls_w,   &p.cls_b,   &p.emb_w,   &p.emb_b,
          &p.config.norm_mean,    &p.config.norm_std};
}

std::vector<std::vector<double>*> tensor_list(ModelParams& p) {
  return {&p.conv1_w, &p.conv1_b, &p.conv2_w, &p.conv2_b, &p.fc1_w, &p.fc1_b,
          &p.cls_w,   &p.cls_b,   &p.emb_w,   &p.emb_b,
          &p.config.norm_mean,    &p.config.norm_std};
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
  params.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for write: " + path);
  out.write(kCheckpointMagic, 5);
  const ModelConfig& cfg = params.config;
  for (int v : {cfg.height, cfg.width, cfg.channels, cfg.conv1_filters,
                cfg.conv2_filters, cfg.dense_units, cfg.classes, cfg.embed_dim})
    binio::write_u32(out, static_cast<uint32_t>(v));
  auto table = shape_table(cfg);
  binio::write_u32(out, static_cast<uint32_t>(table.size()));
  for (const auto& dims : table) {
    binio::write_u32(out, static_cast<uint32_t>(dims.size()));
    for (uint32_t d : dims) binio::write_u32(out, d);
  }
  for (const auto* tensor : tensor_list(params))
    binio::write_f64_array(out, *tensor);
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  binio::expect_magic(in, kCheckpointMagic, "checkpoint " + path);

  ModelConfig cfg;
  cfg.height = binio::read_i32(in, "checkpoint header");
  cfg.width = binio::read_i32(in, "checkpoint header");
  cfg.channels = binio::read_i32(in, "checkpoint header");
  cfg.conv1_filters = binio::read_i32(in, "checkpoint header");
  cfg.conv2_filters = binio::read_i32(in, "checkpoint header");
  cfg.dense_units = binio::read_i32(in, "checkpoint header");
  cfg.classes = binio::read_i32(in, "checkpoint header");
  cfg.embed_dim = binio::read_i32(in, "checkpoint header");
  cfg.norm_mean.assign(cfg.channels, 0.0);
  cfg.norm_std.assign(cfg.channels, 1.0);

  auto expected = shape_table(cfg);
  uint32_t count = binio::read_u32(in, "checkpoint shape table");
  if (count != expected.size())
    throw binio::ParseError("checkpoint " + path + ": shape table mismatch");
  for (const auto& dims : expected) {
    uint32_t ndim = binio::read_u32(in, "checkpoint shape table");
    if (ndim != dims.size())
      throw binio::ParseError("checkpoint " + path + ": shape table mismatch");
    for (uint32_t d : dims) {
      uint32_t got = binio::read_u32(in, "checkpoint shape table");
      if (got != d)
        throw binio::ParseError("checkpoint " + path + ": shape table mismatch");
    }
  }

  ModelParams p = ModelParams::zero_init(cfg);
  for (auto* tensor : tensor_list(p)) {
    *tensor = binio::read_f64_array(in, tensor->size(), "checkpoint tensors");
  }
  p.validate();
  return p;
}

}  // namespace gradsign::model
