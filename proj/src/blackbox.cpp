#include "gradsign/blackbox.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "gradsign/binio.hpp"
#include "gradsign/datagen.hpp"

namespace gradsign::blackbox {

OracleOutput Oracle::query(const Image& x) {
  std::lock_guard<std::mutex> lock(mutex_);
  if (budget_ && count_ >= *budget_) throw BudgetExhausted(*budget_);
  OracleOutput out = answer(x);
  ++count_;
  return out;
}

uint64_t Oracle::queries_made() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return count_;
}

bool Oracle::exhausted() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return budget_ && count_ >= *budget_;
}

OracleOutput ModelOracle::answer(const Image& x) {
  OracleOutput out;
  out.probabilities = model::forward_classify(params_, x);
  out.label = static_cast<int>(
      std::max_element(out.probabilities.begin(), out.probabilities.end()) -
      out.probabilities.begin());
  out.descriptor = model::forward_embed(params_, x).values;
  return out;
}

model::ModelConfig oracle_model_config() {
  model::ModelConfig cfg;
  cfg.conv1_filters = 12;
  cfg.conv2_filters = 24;
  return cfg;
}

model::TrainOptions oracle_train_options(uint64_t seed) {
  model::TrainOptions opt;
  opt.learning_rate = 0.02;
  opt.epochs = 6;
  opt.seed = seed;
  return opt;
}

QueryLog collect_queries(Oracle& oracle, const std::vector<Image>& images) {
  QueryLog log;
  log.records.reserve(images.size());
  for (const Image& img : images) {
    QueryRecord rec;
    try {
      rec.output = oracle.query(img);
    } catch (const BudgetExhausted&) {
      log.truncated = true;
      break;
    }
    rec.image = img;
    rec.image_hash = hash_image(img);
    rec.ordinal = log.records.size();
    log.records.push_back(std::move(rec));
  }
  return log;
}

namespace {
constexpr char kQueryMagic[] = "GSQL1";
}

void save_query_log(const QueryLog& log, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out.write(kQueryMagic, 5);
  binio::write_u8(out, log.truncated ? 1 : 0);
  binio::write_u32(out, static_cast<uint32_t>(log.records.size()));
  for (const QueryRecord& rec : log.records) {
    binio::write_u64(out, rec.image_hash);
    binio::write_u64(out, rec.ordinal);
    binio::write_i32(out, rec.output.label);
    binio::write_u32(out, static_cast<uint32_t>(rec.output.probabilities.size()));
    binio::write_f64_array(out, rec.output.probabilities);
    binio::write_u32(out, static_cast<uint32_t>(rec.output.descriptor.size()));
    binio::write_f64_array(out, rec.output.descriptor);
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

ReplayOracle::ReplayOracle(const std::string& path,
                           std::optional<uint64_t> budget)
    : Oracle(budget), path_(path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open query log: " + path);
  binio::expect_magic(in, kQueryMagic, "query log " + path);
  binio::read_u8(in, "query log flags");
  uint32_t count = binio::read_u32(in, "query log record count");
  for (uint32_t i = 0; i < count; ++i) {
    uint64_t hash = binio::read_u64(in, "query log image hash");
    binio::read_u64(in, "query log ordinal");
    OracleOutput out;
    out.label = binio::read_i32(in, "query log label");
    uint32_t np = binio::read_u32(in, "query log probability count");
    out.probabilities = binio::read_f64_array(in, np, "query log probabilities");
    uint32_t nd = binio::read_u32(in, "query log descriptor count");
    out.descriptor = binio::read_f64_array(in, nd, "query log descriptor");
    answers_[hash] = std::move(out);
  }
}

OracleOutput ReplayOracle::answer(const Image& x) {
  auto it = answers_.find(hash_image(x));
  if (it == answers_.end())
    throw std::runtime_error("replay oracle " + path_ +
                             " has no answer for the queried image");
  return it->second;
}

void FinetuneSchedule::validate() const {
  if (total_epochs < 1)
    throw std::invalid_argument("finetune schedule needs at least one epoch");
  if (freeze_epochs < 0 || freeze_epochs > total_epochs)
    throw std::invalid_argument(
        "freeze epochs must lie in [0, total epochs]");
  if (!(freeze_lr > 0.0) || !(finetune_lr > 0.0))
    throw std::invalid_argument("learning rates must be positive");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0)
    throw std::invalid_argument("momentum must lie in [0, 1)");
}

SubstituteResult train_substitute(const QueryLog& log,
                                  const FinetuneSchedule& schedule,
                                  const model::ModelParams& init,
                                  uint64_t seed) {
  schedule.validate();
  if (log.records.empty())
    throw std::invalid_argument("cannot distill from an empty query log");

  std::vector<model::LabeledImage> data;
  data.reserve(log.records.size());
  for (const QueryRecord& rec : log.records) {
    model::LabeledImage li;
    li.image = rec.image;
    li.label = rec.output.label;
    if (schedule.soft_targets) {
      if (rec.output.probabilities.empty())
        throw std::invalid_argument(
            "soft-target distillation needs oracle probabilities");
      li.soft_target = rec.output.probabilities;
    }
    data.push_back(std::move(li));
  }

  SubstituteResult result;
  result.after_freeze = init;
  if (schedule.freeze_epochs > 0) {
    model::TrainOptions opt;
    opt.learning_rate = schedule.freeze_lr;
    opt.epochs = schedule.freeze_epochs;
    opt.batch_size = schedule.batch_size;
    opt.momentum = schedule.momentum;
    opt.seed = derive_seed(seed, 1);
    opt.freeze_trunk = true;
    opt.soft_targets = schedule.soft_targets;
    model::TrainResult frozen = model::train_from(init, data, opt);
    result.after_freeze = std::move(frozen.params);
    result.log = std::move(frozen.log);
  }
  result.params = result.after_freeze;
  int remaining = schedule.total_epochs - schedule.freeze_epochs;
  if (remaining > 0) {
    model::TrainOptions opt;
    opt.learning_rate = schedule.finetune_lr;
    opt.epochs = remaining;
    opt.batch_size = schedule.batch_size;
    opt.momentum = schedule.momentum;
    opt.seed = derive_seed(seed, 2);
    opt.freeze_trunk = false;
    opt.soft_targets = schedule.soft_targets;
    model::TrainResult tuned = model::train_from(result.after_freeze, data, opt);
    result.params = std::move(tuned.params);
    for (model::EpochStats stats : tuned.log) {
      stats.epoch += schedule.freeze_epochs;
      result.log.push_back(stats);
    }
  }
  return result;
}

model::ModelParams pretrained_backbone(uint64_t seed, int disjoint_offset,
                                       int height, int width, int identities) {
  datagen::DatasetOptions opt;
  opt.identities = identities;
  opt.per_identity = 50;
  opt.height = height;
  opt.width = width;
  opt.seed = seed;
  opt.first_identity = disjoint_offset;
  std::vector<datagen::GeneratedSample> samples = datagen::generate_images(opt);
  std::vector<model::LabeledImage> train =
      datagen::as_labeled(samples, dataio::Split::Train);
  model::ModelConfig cfg;
  cfg.height = height;
  cfg.width = width;
  cfg.classes = identities;
  model::TrainOptions topt;
  topt.epochs = 4;
  topt.seed = derive_seed(seed, 0x70726521ULL);
  return model::train_classifier(train, cfg, topt).params;
}

TransferStats transfer_rate(
    const std::vector<AttackedSample>& samples, Oracle& oracle,
    TransferMode mode,
    const std::map<int, std::vector<double>>& identity_means) {
  TransferStats stats;
  for (const AttackedSample& sample : samples) {
    OracleOutput out;
    try {
      out = oracle.query(sample.adversarial);
    } catch (const BudgetExhausted&) {
      stats.truncated = true;
      break;
    }
    bool hit = false;
    if (mode == TransferMode::Untargeted) {
      hit = out.label != sample.true_label;
    } else {
      auto src = identity_means.find(sample.source_identity);
      auto dst = identity_means.find(sample.target_identity);
      if (src == identity_means.end() || dst == identity_means.end())
        throw std::invalid_argument(
            "targeted transfer needs mean descriptors for both identities");
      if (src->second.size() != out.descriptor.size() ||
          dst->second.size() != out.descriptor.size())
        throw std::invalid_argument("descriptor length mismatch");
      double d_src = 0.0, d_dst = 0.0;
      for (size_t i = 0; i < out.descriptor.size(); ++i) {
        double es = out.descriptor[i] - src->second[i];
        double ed = out.descriptor[i] - dst->second[i];
        d_src += es * es;
        d_dst += ed * ed;
      }
      hit = d_dst < d_src;
    }
    ++stats.evaluated;
    if (hit) ++stats.transferred;
  }
  stats.empty = stats.evaluated == 0;
  if (!stats.empty)
    stats.rate = static_cast<double>(stats.transferred) / stats.evaluated;
  return stats;
}

std::map<int, std::vector<double>> oracle_identity_means(
    Oracle& oracle, const std::vector<model::LabeledImage>& images) {
  std::map<int, std::vector<double>> sums;
  std::map<int, int> counts;
  for (const model::LabeledImage& li : images) {
    OracleOutput out = oracle.query(li.image);
    std::vector<double>& sum = sums[li.label];
    if (sum.empty()) sum.assign(out.descriptor.size(), 0.0);
    if (sum.size() != out.descriptor.size())
      throw std::logic_error("oracle descriptor length changed mid-batch");
    for (size_t i = 0; i < sum.size(); ++i) sum[i] += out.descriptor[i];
    counts[li.label] += 1;
  }
  for (auto& [label, sum] : sums) {
    double norm = 0.0;
    for (double v : sum) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (double& v : sum) v /= norm;
  }
  return sums;
}

}  // namespace gradsign::blackbox
