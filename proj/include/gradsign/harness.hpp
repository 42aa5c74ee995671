#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gradsign/attacks.hpp"
#include "gradsign/blackbox.hpp"
#include "gradsign/datagen.hpp"
#include "gradsign/perceptual.hpp"

namespace gradsign::harness {

inline constexpr int kExitOk = 0;
inline constexpr int kExitOperational = 1;
inline constexpr int kExitConstraint = 2;

inline constexpr const char* kToolkitVersion = "gradsign 1.0.0";

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Line-oriented "section.key = value" configuration. '#' lines and blank
// lines are ignored; unknown keys are errors; later lines win. The master
// seed has no default: commands that need randomness fail without one.
struct RunConfig {
  std::optional<uint64_t> seed;
  int workers = 1;

  std::string dataset_dir = "dataset";
  std::string victim_checkpoint = "victim.ckpt";
  std::string oracle_checkpoint = "oracle.ckpt";
  std::string substitute_checkpoint = "substitute.ckpt";
  std::string pretrain_checkpoint;
  std::string output_dir = "out";
  std::string report_path;

  int dataset_identities = 10;
  int dataset_per_identity = 120;
  int dataset_height = 32;
  int dataset_width = 32;
  double dataset_train_fraction = 0.7;
  double dataset_heldout_fraction = 0.2;
  int dataset_first_identity = 0;
  bool dataset_overwrite = false;

  std::string train_model = "victim";  // victim | oracle
  std::optional<double> train_learning_rate;
  std::optional<int> train_epochs;
  int train_batch_size = 16;
  double train_momentum = 0.9;

  int substitute_queries = 5000;
  int substitute_freeze_epochs = 2;
  int substitute_total_epochs = 5;
  double substitute_freeze_lr = 0.05;
  double substitute_finetune_lr = 0.01;
  bool substitute_soft_targets = false;
  std::optional<uint64_t> substitute_query_budget;
  int substitute_pretrain_offset = 100;

  std::string attack_name = "mdi2fgsm";
  std::optional<double> attack_epsilon;
  std::optional<double> attack_alpha;
  std::optional<int> attack_iterations;
  std::optional<double> attack_mu;
  std::optional<double> attack_probability;
  int attack_streams = 4;
  bool attack_targeted = true;
  int attack_max_sources = 0;  // 0 means every attack-source image

  std::string pipeline_steps =
      "random-crop(0.875) affine gaussian-blur(0.5) "
      "contrast-normalize(0.75,1.25) grayscale(0.25)";

  perceptual::EpsController controller;

  std::string sweep_cells = "fgsm ifgsm mifgsm di2fgsm mdi2fgsm";

  static RunConfig from_text(const std::string& text,
                             const std::string& origin = "<config>");
  static RunConfig from_file(const std::string& path);

  // Full effective key listing in a fixed order; hashing it gives the
  // report provenance hash.
  std::string serialize() const;
  std::string hash() const;

  uint64_t require_seed() const;
  datagen::DatasetOptions dataset_options() const;
};

struct SweepCellSpec {
  std::string name;
  std::vector<std::pair<std::string, double>> overrides;
};

// Grammar: whitespace-separated cells, each "name" or
// "name(key=value,...)" with keys eps, alpha, n, mu, p.
std::vector<SweepCellSpec> parse_sweep_cells(const std::string& text);

std::string format_table(const std::vector<std::string>& header,
                         const std::vector<std::vector<std::string>>& rows);

// Parses the report, recomputes every aggregate from the per-image records
// and throws std::runtime_error on any mismatch.
void verify_report_consistency(const std::string& path);

int cmd_generate(const RunConfig& config);
int cmd_train_victim(const RunConfig& config);
int cmd_train_substitute(const RunConfig& config);
int cmd_attack(const RunConfig& config);
int cmd_evaluate(const RunConfig& config);
int cmd_sweep(const RunConfig& config);
int cmd_report(const RunConfig& config);

}  // namespace gradsign::harness
