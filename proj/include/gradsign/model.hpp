#ifndef GRADSIGN_MODEL_HPP
#define GRADSIGN_MODEL_HPP

#include <optional>
#include <string>
#include <vector>

#include "gradsign/core.hpp"

namespace gradsign::model {

/// Unit-norm embedding vector. `degenerate` is set when the pre-normalization
/// activation was exactly zero and the canonical vector (1, 0, ..., 0) was
/// substituted.
struct Descriptor {
  std::vector<double> values;
  bool degenerate = false;

  double l2_norm() const;
};

double descriptor_distance(const Descriptor& a, const Descriptor& b);

enum class LossKind { CrossEntropyOnLabel, DescriptorDistance };
enum class LossDirection { Maximize, Minimize };

/// Scalar objective the attack differentiates: cross-entropy against a label,
/// or squared L2 distance between the embedding and a target descriptor.
struct LossSpec {
  LossKind kind = LossKind::CrossEntropyOnLabel;
  LossDirection direction = LossDirection::Maximize;
  int label = -1;
  std::vector<double> target_descriptor;

  void validate() const;

  static LossSpec untargeted_label(int label);
  static LossSpec targeted_descriptor(std::vector<double> target);
};

struct LossGradient {
  double loss = 0.0;
  std::vector<double> gradient;  // same layout as the input image
};

/// Anything the attack engine can differentiate through. The engine consumes
/// only this surface; oracles deliberately do not implement it.
class DifferentiableModel {
 public:
  virtual ~DifferentiableModel() = default;
  virtual int input_height() const = 0;
  virtual int input_width() const = 0;
  virtual int input_channels() const = 0;
  /// Loss value and exact gradient of the loss with respect to every pixel.
  virtual LossGradient loss_gradient(const Image& x,
                                     const LossSpec& loss) const = 0;
};

/// Fixed architecture: conv3x3 -> relu -> conv3x3 -> relu -> avgpool2x2 ->
/// dense -> relu -> {classifier head, embedding head}. Input height and width
/// must be even. All math in double precision.
struct ModelConfig {
  int height = 32;
  int width = 32;
  int channels = 3;
  int conv1_filters = 8;
  int conv2_filters = 16;
  int dense_units = 64;
  int classes = 10;
  int embed_dim = 32;
  std::vector<double> norm_mean;  // per channel; defaulted in validate()
  std::vector<double> norm_std;

  void apply_default_normalization();
  void validate() const;

  int pooled_height() const { return height / 2; }
  int pooled_width() const { return width / 2; }
  int flat_size() const {
    return pooled_height() * pooled_width() * conv2_filters;
  }
};

/// All learned tensors. Conv weights are stored [out][ky][kx][in] so the
/// innermost loop runs over the contiguous channel dimension of an HWC image.
struct ModelParams {
  ModelConfig config;
  std::vector<double> conv1_w, conv1_b;
  std::vector<double> conv2_w, conv2_b;
  std::vector<double> fc1_w, fc1_b;
  std::vector<double> cls_w, cls_b;
  std::vector<double> emb_w, emb_b;

  static ModelParams random_init(const ModelConfig& config, uint64_t seed);
  static ModelParams zero_init(const ModelConfig& config);

  void validate() const;
  size_t parameter_count() const;

  /// Trunk = the two conv layers; these stay frozen during the first phase of
  /// substitute fine-tuning.
  bool trunk_equal(const ModelParams& other) const;
};

class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(const std::string& layer)
      : std::runtime_error("non-finite values produced in layer: " + layer),
        layer_(layer) {}
  const std::string& layer() const { return layer_; }

 private:
  std::string layer_;
};

std::vector<double> forward_classify(const ModelParams& params, const Image& x);
Descriptor forward_embed(const ModelParams& params, const Image& x);
LossGradient input_gradient(const ModelParams& params, const Image& x,
                            const LossSpec& loss);

/// DifferentiableModel view over a ModelParams value. Shares the params by
/// reference; keep the params alive for the model's lifetime.
class ConvNet : public DifferentiableModel {
 public:
  explicit ConvNet(const ModelParams& params) : params_(&params) {}
  int input_height() const override { return params_->config.height; }
  int input_width() const override { return params_->config.width; }
  int input_channels() const override { return params_->config.channels; }
  LossGradient loss_gradient(const Image& x,
                             const LossSpec& loss) const override {
    return input_gradient(*params_, x, loss);
  }
  const ModelParams& params() const { return *params_; }

 private:
  const ModelParams* params_;
};

struct LabeledImage {
  Image image;
  int label = -1;
  std::vector<double> soft_target;  // optional; overrides label when non-empty
};

struct TrainOptions {
  double learning_rate = 0.01;
  int epochs = 10;
  int batch_size = 16;
  double momentum = 0.9;
  uint64_t seed = 0;
  bool freeze_trunk = false;
  bool soft_targets = false;
};

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
  double heldout_accuracy = -1.0;  // -1 when no held-out set was given
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochStats> log;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(int last_stable_epoch)
      : std::runtime_error("training diverged (non-finite loss); last stable "
                           "epoch: " +
                           std::to_string(last_stable_epoch)),
        last_stable_epoch_(last_stable_epoch) {}
  int last_stable_epoch() const { return last_stable_epoch_; }

 private:
  int last_stable_epoch_;
};

/// Seeded minibatch SGD with momentum on the cross-entropy head. Deterministic:
/// same dataset, options and seed give bit-identical parameters.
TrainResult train_classifier(const std::vector<LabeledImage>& dataset,
                             const ModelConfig& config,
                             const TrainOptions& options,
                             const std::vector<LabeledImage>* heldout = nullptr);

/// Continues training from existing parameters (used by substitute
/// fine-tuning; train_classifier starts from a seeded random init).
TrainResult train_from(const ModelParams& init,
                       const std::vector<LabeledImage>& dataset,
                       const TrainOptions& options,
                       const std::vector<LabeledImage>* heldout = nullptr);

double classification_accuracy(const ModelParams& params,
                               const std::vector<LabeledImage>& dataset);

int predict_label(const ModelParams& params, const Image& x);

/// Checkpoint container: magic "GSTM1", shape metadata, layer shape table,
/// then little-endian 64-bit floats in declaration order.
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace gradsign::model

#endif  // GRADSIGN_MODEL_HPP
