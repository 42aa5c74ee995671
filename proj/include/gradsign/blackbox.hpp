#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradsign/core.hpp"
#include "gradsign/model.hpp"

namespace gradsign::blackbox {

struct OracleOutput {
  int label = -1;
  std::vector<double> probabilities;
  std::vector<double> descriptor;
};

class BudgetExhausted : public std::runtime_error {
 public:
  explicit BudgetExhausted(uint64_t budget)
      : std::runtime_error("oracle query budget of " + std::to_string(budget) +
                           " exhausted"),
        budget_(budget) {}
  uint64_t budget() const { return budget_; }

 private:
  uint64_t budget_;
};

// Opaque query interface. Every successful query() increments the counter
// exactly once; a query past the budget throws without incrementing.
class Oracle {
 public:
  explicit Oracle(std::optional<uint64_t> budget = std::nullopt)
      : budget_(budget) {}
  virtual ~Oracle() = default;
  Oracle(const Oracle&) = delete;
  Oracle& operator=(const Oracle&) = delete;

  OracleOutput query(const Image& x);
  uint64_t queries_made() const;
  std::optional<uint64_t> budget() const { return budget_; }
  bool exhausted() const;

 protected:
  virtual OracleOutput answer(const Image& x) = 0;

 private:
  mutable std::mutex mutex_;
  uint64_t count_ = 0;
  std::optional<uint64_t> budget_;
};

class ModelOracle : public Oracle {
 public:
  ModelOracle(model::ModelParams params,
              std::optional<uint64_t> budget = std::nullopt)
      : Oracle(budget), params_(std::move(params)) {}

  const model::ModelParams& params() const { return params_; }

 protected:
  OracleOutput answer(const Image& x) override;

 private:
  model::ModelParams params_;
};

// The independent black box used in tests: wider than the default model
// and trained with its own hyperparameters (the wider net needs a lower
// learning rate to stay stable).
model::ModelConfig oracle_model_config();
model::TrainOptions oracle_train_options(uint64_t seed);

struct QueryRecord {
  Image image;
  uint64_t image_hash = 0;
  OracleOutput output;
  uint64_t ordinal = 0;
};

struct QueryLog {
  std::vector<QueryRecord> records;
  bool truncated = false;
};

// One oracle call per image, log order matches input order. If the budget
// runs out mid-batch the partial log is returned with truncated set.
QueryLog collect_queries(Oracle& oracle, const std::vector<Image>& images);

// Replay file: image-hash keyed oracle answers, magic "GSQL1".
void save_query_log(const QueryLog& log, const std::string& path);

class ReplayOracle : public Oracle {
 public:
  explicit ReplayOracle(const std::string& path,
                        std::optional<uint64_t> budget = std::nullopt);

  size_t distinct_images() const { return answers_.size(); }

 protected:
  OracleOutput answer(const Image& x) override;

 private:
  std::map<uint64_t, OracleOutput> answers_;
  std::string path_;
};

struct FinetuneSchedule {
  int freeze_epochs = 2;
  int total_epochs = 5;
  double freeze_lr = 0.05;
  double finetune_lr = 0.01;
  int batch_size = 16;
  double momentum = 0.9;
  bool soft_targets = false;

  void validate() const;
};

struct SubstituteResult {
  model::ModelParams params;
  model::ModelParams after_freeze;
  std::vector<model::EpochStats> log;
};

// Distills the oracle's labels into a substitute: freeze phase updates only
// the dense head (trunk bit-identical throughout), then every layer.
SubstituteResult train_substitute(const QueryLog& log,
                                  const FinetuneSchedule& schedule,
                                  const model::ModelParams& init,
                                  uint64_t seed);

// Stand-in for large-corpus pretraining: trains the default architecture on
// a procedurally generated identity set starting at disjoint_offset, so its
// faces never overlap the attack dataset's identities.
model::ModelParams pretrained_backbone(uint64_t seed, int disjoint_offset = 100,
                                       int height = 32, int width = 32,
                                       int identities = 10);

enum class TransferMode { Untargeted, Targeted };

struct AttackedSample {
  Image adversarial;
  int true_label = -1;
  int source_identity = -1;
  int target_identity = -1;
};

struct TransferStats {
  int evaluated = 0;
  int transferred = 0;
  bool empty = true;
  bool truncated = false;
  double rate = 0.0;
};

// Untargeted: oracle label differs from the true label. Targeted: oracle
// embedding is closer (L2) to the target identity's mean descriptor than to
// the source identity's. identity_means is required for targeted mode.
TransferStats transfer_rate(
    const std::vector<AttackedSample>& samples, Oracle& oracle,
    TransferMode mode,
    const std::map<int, std::vector<double>>& identity_means = {});

// Mean oracle descriptor per identity over the given labeled images,
// renormalized to unit length (one oracle query per image).
std::map<int, std::vector<double>> oracle_identity_means(
    Oracle& oracle, const std::vector<model::LabeledImage>& images);

}  // namespace gradsign::blackbox
