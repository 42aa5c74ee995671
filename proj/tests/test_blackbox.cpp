#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "gradsign/binio.hpp"
#include "gradsign/blackbox.hpp"
#include "gradsign/core.hpp"
#include "gradsign/datagen.hpp"
#include "gradsign/model.hpp"

using namespace gradsign;
using namespace gradsign::blackbox;

namespace {

model::ModelConfig tiny_config() {
  model::ModelConfig cfg;
  cfg.height = 16;
  cfg.width = 16;
  cfg.conv1_filters = 4;
  cfg.conv2_filters = 6;
  cfg.dense_units = 16;
  cfg.classes = 3;
  cfg.embed_dim = 8;
  cfg.apply_default_normalization();
  return cfg;
}

Image random_image(int h, int w, uint64_t seed) {
  Rng rng(seed);
  Image img(h, w, 3);
  for (double& v : img.data) v = rng.uniform();
  return img;
}

// Answers from a fixed table keyed by image hash; used to enumerate
// transfer rates by hand.
class TableOracle : public Oracle {
 public:
  TableOracle(std::map<uint64_t, OracleOutput> table,
              std::optional<uint64_t> budget = std::nullopt)
      : Oracle(budget), table_(std::move(table)) {}

 protected:
  OracleOutput answer(const Image& x) override {
    return table_.at(hash_image(x));
  }

 private:
  std::map<uint64_t, OracleOutput> table_;
};

QueryLog tiny_log(const model::ModelConfig& cfg, int n, uint64_t seed) {
  model::ModelParams oracle_params =
      model::ModelParams::random_init(cfg, derive_seed(seed, 77));
  ModelOracle oracle(oracle_params);
  std::vector<Image> images;
  for (int i = 0; i < n; ++i)
    images.push_back(random_image(cfg.height, cfg.width, derive_seed(seed, i)));
  return collect_queries(oracle, images);
}

}  // namespace

TEST_CASE("oracle counts each query exactly once") {
  model::ModelConfig cfg = tiny_config();
  ModelOracle oracle(model::ModelParams::random_init(cfg, 1));
  CHECK(oracle.queries_made() == 0);
  Image x = random_image(16, 16, 5);
  oracle.query(x);
  oracle.query(x);
  CHECK(oracle.queries_made() == 2);
  CHECK_FALSE(oracle.exhausted());
}

TEST_CASE("oracle budget exhaustion is observable and does not consume") {
  model::ModelConfig cfg = tiny_config();
  ModelOracle oracle(model::ModelParams::random_init(cfg, 1), 2);
  Image x = random_image(16, 16, 5);
  oracle.query(x);
  oracle.query(x);
  CHECK(oracle.exhausted());
  CHECK_THROWS_AS(oracle.query(x), BudgetExhausted);
  CHECK(oracle.queries_made() == 2);
}

TEST_CASE("model oracle output matches direct model inference") {
  model::ModelConfig cfg = tiny_config();
  model::ModelParams params = model::ModelParams::random_init(cfg, 9);
  ModelOracle oracle(params);
  Image x = random_image(16, 16, 11);
  OracleOutput out = oracle.query(x);
  CHECK(out.label == model::predict_label(params, x));
  std::vector<double> probs = model::forward_classify(params, x);
  REQUIRE(out.probabilities.size() == probs.size());
  for (size_t i = 0; i < probs.size(); ++i)
    CHECK(out.probabilities[i] == probs[i]);
  model::Descriptor d = model::forward_embed(params, x);
  REQUIRE(out.descriptor.size() == d.values.size());
  for (size_t i = 0; i < d.values.size(); ++i)
    CHECK(out.descriptor[i] == d.values[i]);
}

TEST_CASE("collect_queries preserves order and counts") {
  model::ModelConfig cfg = tiny_config();
  ModelOracle oracle(model::ModelParams::random_init(cfg, 1), 100);
  std::vector<Image> images;
  for (int i = 0; i < 100; ++i) images.push_back(random_image(16, 16, i));
  QueryLog log = collect_queries(oracle, images);
  CHECK(log.records.size() == 100);
  CHECK_FALSE(log.truncated);
  CHECK(oracle.queries_made() == 100);
  for (size_t i = 0; i < log.records.size(); ++i) {
    CHECK(log.records[i].image_hash == hash_image(images[i]));
    CHECK(log.records[i].ordinal == i);
  }
}

TEST_CASE("collect_queries truncates when the budget runs out") {
  model::ModelConfig cfg = tiny_config();
  ModelOracle oracle(model::ModelParams::random_init(cfg, 1), 50);
  std::vector<Image> images;
  for (int i = 0; i < 100; ++i) images.push_back(random_image(16, 16, i));
  QueryLog log = collect_queries(oracle, images);
  CHECK(log.records.size() == 50);
  CHECK(log.truncated);
  CHECK(oracle.queries_made() == 50);
}

TEST_CASE("querying the same image twice appends two records") {
  model::ModelConfig cfg = tiny_config();
  ModelOracle oracle(model::ModelParams::random_init(cfg, 1));
  Image x = random_image(16, 16, 3);
  QueryLog log = collect_queries(oracle, {x, x});
  REQUIRE(log.records.size() == 2);
  CHECK(log.records[0].image_hash == log.records[1].image_hash);
  CHECK(log.records[0].ordinal == 0);
  CHECK(log.records[1].ordinal == 1);
}

TEST_CASE("replay oracle reproduces recorded answers") {
  namespace fs = std::filesystem;
  std::string path = "blackbox_replay.gsql";
  model::ModelConfig cfg = tiny_config();
  ModelOracle live(model::ModelParams::random_init(cfg, 21));
  std::vector<Image> images;
  for (int i = 0; i < 5; ++i) images.push_back(random_image(16, 16, 40 + i));
  QueryLog log = collect_queries(live, images);
  save_query_log(log, path);

  ReplayOracle replay(path);
  CHECK(replay.distinct_images() == 5);
  for (size_t i = 0; i < images.size(); ++i) {
    OracleOutput out = replay.query(images[i]);
    CHECK(out.label == log.records[i].output.label);
    REQUIRE(out.descriptor.size() == log.records[i].output.descriptor.size());
    for (size_t j = 0; j < out.descriptor.size(); ++j)
      CHECK(out.descriptor[j] == log.records[i].output.descriptor[j]);
  }
  CHECK(replay.queries_made() == 5);

  Image unknown = random_image(16, 16, 999);
  CHECK_THROWS_WITH_AS(replay.query(unknown), doctest::Contains("no answer"),
                       std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("replay oracle rejects a corrupt file") {
  std::string path = "blackbox_replay_bad.gsql";
  {
    std::ofstream out(path, std::ios::binary);
    out << "GSQLX junk";
  }
  CHECK_THROWS_AS(ReplayOracle{path}, binio::ParseError);
  std::remove(path.c_str());
}

TEST_CASE("finetune schedule validation") {
  FinetuneSchedule s;
  CHECK_NOTHROW(s.validate());
  SUBCASE("freeze beyond total") {
    s.freeze_epochs = 6;
    s.total_epochs = 5;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  }
  SUBCASE("no epochs") {
    s.total_epochs = 0;
    s.freeze_epochs = 0;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  }
  SUBCASE("bad learning rate") {
    s.finetune_lr = 0.0;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  }
}

TEST_CASE("empty query log cannot be distilled") {
  FinetuneSchedule schedule;
  model::ModelConfig cfg = tiny_config();
  model::ModelParams init = model::ModelParams::random_init(cfg, 2);
  CHECK_THROWS_AS(train_substitute(QueryLog{}, schedule, init, 0),
                  std::invalid_argument);
}

TEST_CASE("full freeze leaves the trunk bit-identical to the init") {
  model::ModelConfig cfg = tiny_config();
  QueryLog log = tiny_log(cfg, 24, 5);
  model::ModelParams init = model::ModelParams::random_init(cfg, 2);
  FinetuneSchedule schedule;
  schedule.freeze_epochs = 2;
  schedule.total_epochs = 2;
  SubstituteResult result = train_substitute(log, schedule, init, 0);
  CHECK(result.params.trunk_equal(init));
  CHECK(result.after_freeze.trunk_equal(init));
  CHECK(result.log.size() == 2);
  CHECK(result.log[0].epoch == 0);
  CHECK(result.log[1].epoch == 1);
}

TEST_CASE("freeze phase pins the trunk, unfreeze moves it") {
  model::ModelConfig cfg = tiny_config();
  QueryLog log = tiny_log(cfg, 24, 6);
  model::ModelParams init = model::ModelParams::random_init(cfg, 3);
  FinetuneSchedule schedule;
  schedule.freeze_epochs = 1;
  schedule.total_epochs = 3;
  SubstituteResult result = train_substitute(log, schedule, init, 0);
  CHECK(result.after_freeze.trunk_equal(init));
  CHECK_FALSE(result.params.trunk_equal(init));
  CHECK(result.log.size() == 3);
  CHECK(result.log.back().epoch == 2);
}

TEST_CASE("zero freeze epochs is standard training") {
  model::ModelConfig cfg = tiny_config();
  QueryLog log = tiny_log(cfg, 24, 7);
  model::ModelParams init = model::ModelParams::random_init(cfg, 4);
  FinetuneSchedule schedule;
  schedule.freeze_epochs = 0;
  schedule.total_epochs = 2;
  SubstituteResult result = train_substitute(log, schedule, init, 0);
  CHECK(result.after_freeze.trunk_equal(init));
  CHECK_FALSE(result.params.trunk_equal(init));
}

TEST_CASE("distillation is deterministic in its seed") {
  model::ModelConfig cfg = tiny_config();
  QueryLog log = tiny_log(cfg, 24, 8);
  model::ModelParams init = model::ModelParams::random_init(cfg, 5);
  FinetuneSchedule schedule;
  schedule.freeze_epochs = 1;
  schedule.total_epochs = 2;
  SubstituteResult a = train_substitute(log, schedule, init, 123);
  SubstituteResult b = train_substitute(log, schedule, init, 123);
  CHECK(a.params.trunk_equal(b.params));
  CHECK(a.params.conv1_w == b.params.conv1_w);
  CHECK(a.params.cls_w == b.params.cls_w);
  SubstituteResult c = train_substitute(log, schedule, init, 124);
  CHECK_FALSE(c.params.cls_w == a.params.cls_w);
}

TEST_CASE("soft-target distillation needs probabilities") {
  model::ModelConfig cfg = tiny_config();
  QueryLog log = tiny_log(cfg, 8, 9);
  for (auto& rec : log.records) rec.output.probabilities.clear();
  model::ModelParams init = model::ModelParams::random_init(cfg, 5);
  FinetuneSchedule schedule;
  schedule.soft_targets = true;
  CHECK_THROWS_AS(train_substitute(log, schedule, init, 0),
                  std::invalid_argument);
}

TEST_CASE("hand-enumerated untargeted transfer rate is 2/4") {
  std::vector<Image> imgs;
  for (int i = 0; i < 4; ++i) imgs.push_back(random_image(8, 8, i));
  std::map<uint64_t, OracleOutput> table;
  int oracle_labels[4] = {0, 1, 2, 3};
  for (int i = 0; i < 4; ++i) {
    OracleOutput out;
    out.label = oracle_labels[i];
    table[hash_image(imgs[i])] = out;
  }
  TableOracle oracle(std::move(table));

  std::vector<AttackedSample> samples(4);
  int true_labels[4] = {0, 1, 9, 9};
  for (int i = 0; i < 4; ++i) {
    samples[i].adversarial = imgs[i];
    samples[i].true_label = true_labels[i];
  }
  TransferStats stats = transfer_rate(samples, oracle, TransferMode::Untargeted);
  CHECK_FALSE(stats.empty);
  CHECK(stats.evaluated == 4);
  CHECK(stats.transferred == 2);
  CHECK(stats.rate == 0.5);
  CHECK(oracle.queries_made() == 4);
}

TEST_CASE("transfer on unmodified images complements oracle accuracy") {
  model::ModelConfig cfg = tiny_config();
  model::ModelParams params = model::ModelParams::random_init(cfg, 31);
  std::vector<AttackedSample> samples;
  std::vector<model::LabeledImage> labeled;
  for (int i = 0; i < 20; ++i) {
    AttackedSample s;
    s.adversarial = random_image(16, 16, 100 + i);
    s.true_label = i % cfg.classes;
    samples.push_back(s);
    labeled.push_back({s.adversarial, s.true_label, {}});
  }
  double acc = model::classification_accuracy(params, labeled);
  ModelOracle oracle(params);
  TransferStats stats = transfer_rate(samples, oracle, TransferMode::Untargeted);
  CHECK(stats.rate == doctest::Approx(1.0 - acc).epsilon(1e-12));
}

TEST_CASE("empty transfer input is reported as empty, not zero") {
  model::ModelConfig cfg = tiny_config();
  ModelOracle oracle(model::ModelParams::random_init(cfg, 1));
  TransferStats stats = transfer_rate({}, oracle, TransferMode::Untargeted);
  CHECK(stats.empty);
  CHECK(stats.evaluated == 0);
}

TEST_CASE("budget exhaustion mid-evaluation yields a partial rate") {
  std::vector<Image> imgs;
  for (int i = 0; i < 4; ++i) imgs.push_back(random_image(8, 8, i));
  std::map<uint64_t, OracleOutput> table;
  for (int i = 0; i < 4; ++i) {
    OracleOutput out;
    out.label = 0;
    table[hash_image(imgs[i])] = out;
  }
  TableOracle oracle(std::move(table), 3);
  std::vector<AttackedSample> samples(4);
  for (int i = 0; i < 4; ++i) {
    samples[i].adversarial = imgs[i];
    samples[i].true_label = 1;
  }
  TransferStats stats = transfer_rate(samples, oracle, TransferMode::Untargeted);
  CHECK(stats.truncated);
  CHECK(stats.evaluated == 3);
  CHECK(stats.transferred == 3);
  CHECK(stats.rate == 1.0);
}

TEST_CASE("targeted transfer compares descriptor distances") {
  std::vector<Image> imgs;
  for (int i = 0; i < 3; ++i) imgs.push_back(random_image(8, 8, 60 + i));
  std::map<uint64_t, OracleOutput> table;
  std::vector<std::vector<double>> descs = {
      {0.9, 0.1}, {0.1, 0.9}, {0.6, 0.4}};
  for (int i = 0; i < 3; ++i) {
    OracleOutput out;
    out.label = 0;
    out.descriptor = descs[i];
    table[hash_image(imgs[i])] = out;
  }
  TableOracle oracle(std::move(table));

  std::map<int, std::vector<double>> means;
  means[0] = {1.0, 0.0};
  means[1] = {0.0, 1.0};
  std::vector<AttackedSample> samples(3);
  for (int i = 0; i < 3; ++i) {
    samples[i].adversarial = imgs[i];
    samples[i].source_identity = 0;
    samples[i].target_identity = 1;
  }
  TransferStats stats =
      transfer_rate(samples, oracle, TransferMode::Targeted, means);
  CHECK(stats.evaluated == 3);
  CHECK(stats.transferred == 1);
  CHECK(stats.rate == doctest::Approx(1.0 / 3.0));

  SUBCASE("missing identity mean is an error") {
    samples[0].target_identity = 7;
    CHECK_THROWS_AS(
        transfer_rate(samples, oracle, TransferMode::Targeted, means),
        std::invalid_argument);
  }
}

TEST_CASE("oracle identity means are unit length per identity") {
  model::ModelConfig cfg = tiny_config();
  model::ModelParams params = model::ModelParams::random_init(cfg, 17);
  ModelOracle oracle(params);
  std::vector<model::LabeledImage> images;
  for (int i = 0; i < 12; ++i)
    images.push_back({random_image(16, 16, 200 + i), i % 3, {}});
  auto means = oracle_identity_means(oracle, images);
  CHECK(means.size() == 3);
  for (auto& [label, mean] : means) {
    double norm = 0.0;
    for (double v : mean) norm += v * v;
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(oracle.queries_made() == 12);
}

TEST_CASE("query accounting matches collection plus evaluation") {
  model::ModelConfig cfg = tiny_config();
  ModelOracle oracle(model::ModelParams::random_init(cfg, 23));
  std::vector<Image> queries;
  for (int i = 0; i < 9; ++i) queries.push_back(random_image(16, 16, 300 + i));
  collect_queries(oracle, queries);
  std::vector<AttackedSample> samples(4);
  for (int i = 0; i < 4; ++i) {
    samples[i].adversarial = random_image(16, 16, 400 + i);
    samples[i].true_label = 0;
  }
  transfer_rate(samples, oracle, TransferMode::Untargeted);
  CHECK(oracle.queries_made() == 9 + 4);
}

TEST_CASE("oracle model config is wider than the default") {
  model::ModelConfig cfg = oracle_model_config();
  model::ModelConfig base;
  CHECK(cfg.conv1_filters > base.conv1_filters);
  CHECK(cfg.conv2_filters > base.conv2_filters);
  CHECK(oracle_train_options(3).learning_rate < 0.05);
  CHECK(oracle_train_options(3).seed == 3);
}
