#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "gradsign/harness.hpp"

using namespace gradsign;
using harness::RunConfig;
namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

std::string write_temp(const std::string& name, const std::string& text) {
  fs::path p = fs::path("harness_scratch") / name;
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
  return p.string();
}

}  // namespace

TEST_CASE("config text parses every section") {
  RunConfig c = RunConfig::from_text(
      "# comment line\n"
      "\n"
      "run.seed = 42\n"
      "run.workers = 3\n"
      "paths.dataset = d\n"
      "paths.victim = v.ckpt\n"
      "paths.output = results\n"
      "dataset.identities = 6\n"
      "dataset.per_identity = 30\n"
      "dataset.height = 16\n"
      "dataset.width = 16\n"
      "dataset.train_fraction = 0.5\n"
      "dataset.overwrite = true\n"
      "train.model = oracle\n"
      "train.learning_rate = 0.01\n"
      "train.epochs = 7\n"
      "substitute.queries = 99\n"
      "substitute.soft_targets = true\n"
      "substitute.query_budget = 1000\n"
      "attack.name = ifgsm\n"
      "attack.epsilon = 0.1\n"
      "attack.alpha = 0.01\n"
      "attack.iterations = 12\n"
      "attack.mu = 0.5\n"
      "attack.probability = 0.25\n"
      "attack.streams = 2\n"
      "attack.targeted = false\n"
      "attack.max_sources = 8\n"
      "pipeline.steps = gaussian-blur(0.5)\n"
      "controller.ssim_floor = 0.9\n"
      "controller.max_adjustments = 3\n"
      "sweep.cells = ifgsm mdi2fgsm(p=0.7,mu=0.5)\n");
  CHECK(c.seed.has_value());
  CHECK(*c.seed == 42);
  CHECK(c.workers == 3);
  CHECK(c.dataset_dir == "d");
  CHECK(c.victim_checkpoint == "v.ckpt");
  CHECK(c.output_dir == "results");
  CHECK(c.dataset_identities == 6);
  CHECK(c.dataset_per_identity == 30);
  CHECK(c.dataset_height == 16);
  CHECK(c.dataset_train_fraction == 0.5);
  CHECK(c.dataset_overwrite);
  CHECK(c.train_model == "oracle");
  CHECK(*c.train_learning_rate == 0.01);
  CHECK(*c.train_epochs == 7);
  CHECK(c.substitute_queries == 99);
  CHECK(c.substitute_soft_targets);
  CHECK(*c.substitute_query_budget == 1000);
  CHECK(c.attack_name == "ifgsm");
  CHECK(*c.attack_epsilon == 0.1);
  CHECK(*c.attack_alpha == 0.01);
  CHECK(*c.attack_iterations == 12);
  CHECK(*c.attack_mu == 0.5);
  CHECK(*c.attack_probability == 0.25);
  CHECK(c.attack_streams == 2);
  CHECK_FALSE(c.attack_targeted);
  CHECK(c.attack_max_sources == 8);
  CHECK(c.pipeline_steps == "gaussian-blur(0.5)");
  CHECK(c.controller.ssim_floor == 0.9);
  CHECK(c.controller.max_adjustments == 3);
  CHECK(c.sweep_cells == "ifgsm mdi2fgsm(p=0.7,mu=0.5)");
}

TEST_CASE("config defaults survive an empty file") {
  RunConfig c = RunConfig::from_text("");
  CHECK_FALSE(c.seed.has_value());
  CHECK(c.workers == 1);
  CHECK(c.dataset_identities == 10);
  CHECK(c.dataset_per_identity == 120);
  CHECK(c.attack_name == "mdi2fgsm");
  CHECK(c.attack_streams == 4);
  CHECK(c.attack_targeted);
  CHECK(c.controller.ssim_floor == 0.95);
  CHECK(c.substitute_queries == 5000);
  CHECK_THROWS_AS(c.require_seed(), harness::ConfigError);
}

TEST_CASE("later config lines win") {
  RunConfig c = RunConfig::from_text(
      "attack.epsilon = 0.1\n"
      "attack.epsilon = 0.2\n");
  CHECK(*c.attack_epsilon == 0.2);
}

TEST_CASE("config values may contain an equals sign") {
  RunConfig c = RunConfig::from_text("sweep.cells = mdi2fgsm(p=0)\n");
  CHECK(c.sweep_cells == "mdi2fgsm(p=0)");
}

TEST_CASE("config rejections carry origin and line number") {
  CHECK_THROWS_WITH_AS(RunConfig::from_text("no.such.key = 1\n", "f.cfg"),
                       doctest::Contains("f.cfg:1: unknown key 'no.such.key'"),
                       harness::ConfigError);
  CHECK_THROWS_WITH_AS(
      RunConfig::from_text("run.seed = 1\nbroken line\n", "f.cfg"),
      doctest::Contains("f.cfg:2"), harness::ConfigError);
  CHECK_THROWS_WITH_AS(RunConfig::from_text("run.workers = many\n", "f.cfg"),
                       doctest::Contains("not an integer"),
                       harness::ConfigError);
  CHECK_THROWS_WITH_AS(RunConfig::from_text("attack.epsilon = tiny\n"),
                       doctest::Contains("not a number"), harness::ConfigError);
  CHECK_THROWS_WITH_AS(RunConfig::from_text("dataset.overwrite = yes\n"),
                       doctest::Contains("expected true or false"),
                       harness::ConfigError);
  CHECK_THROWS_WITH_AS(RunConfig::from_text("run.seed = -3\n"),
                       doctest::Contains("not an unsigned integer"),
                       harness::ConfigError);
  CHECK_THROWS_WITH_AS(RunConfig::from_text("train.model = referee\n"),
                       doctest::Contains("must be victim or oracle"),
                       harness::ConfigError);
  CHECK_THROWS_WITH_AS(RunConfig::from_text("attack.name = pgd\n"),
                       doctest::Contains("unknown attack"),
                       harness::ConfigError);
}

TEST_CASE("config from_file matches from_text and reports missing files") {
  std::string path = write_temp("round.cfg", "run.seed = 9\nattack.name = fgsm\n");
  RunConfig c = RunConfig::from_file(path);
  CHECK(*c.seed == 9);
  CHECK(c.attack_name == "fgsm");
  CHECK_THROWS_AS(RunConfig::from_file("harness_scratch/absent.cfg"),
                  harness::ConfigError);
}

TEST_CASE("serialization is a fixed point of parsing") {
  RunConfig c = RunConfig::from_text(
      "run.seed = 11\nattack.epsilon = 0.0625\nattack.targeted = false\n"
      "pipeline.steps = affine grayscale(0.25)\n");
  std::string first = c.serialize();
  RunConfig reparsed = RunConfig::from_text(first);
  CHECK(reparsed.serialize() == first);
  CHECK(reparsed.hash() == c.hash());
}

TEST_CASE("hash tracks result-relevant keys only") {
  RunConfig a = RunConfig::from_text("run.seed = 1\n");
  RunConfig b = RunConfig::from_text("run.seed = 2\n");
  RunConfig c = RunConfig::from_text("run.seed = 1\nrun.workers = 8\n");
  RunConfig d = RunConfig::from_text("run.seed = 1\nattack.epsilon = 0.05\n");
  CHECK(a.hash().size() == 16);
  CHECK(a.hash() != b.hash());
  CHECK(a.hash() == c.hash());
  CHECK(a.hash() != d.hash());
  for (char ch : a.hash()) CHECK(std::isxdigit(static_cast<unsigned char>(ch)));
}

TEST_CASE("unset optionals serialize as placeholders and round trip") {
  RunConfig c;
  std::string text = c.serialize();
  CHECK(text.find("run.seed = ~") != std::string::npos);
  CHECK(text.find("attack.epsilon = ~") != std::string::npos);
  RunConfig reparsed = RunConfig::from_text(text);
  CHECK_FALSE(reparsed.seed.has_value());
  CHECK_FALSE(reparsed.attack_epsilon.has_value());
}

TEST_CASE("dataset options mirror the config") {
  RunConfig c = RunConfig::from_text(
      "run.seed = 3\ndataset.identities = 4\ndataset.per_identity = 10\n"
      "dataset.height = 16\ndataset.width = 16\ndataset.first_identity = 7\n"
      "dataset.train_fraction = 0.6\ndataset.heldout_fraction = 0.2\n");
  datagen::DatasetOptions opt = c.dataset_options();
  CHECK(opt.identities == 4);
  CHECK(opt.per_identity == 10);
  CHECK(opt.height == 16);
  CHECK(opt.width == 16);
  CHECK(opt.seed == 3);
  CHECK(opt.first_identity == 7);
  CHECK(opt.train_fraction == 0.6);
  CHECK(opt.heldout_fraction == 0.2);
}

TEST_CASE("sweep cell grammar") {
  auto cells = harness::parse_sweep_cells(
      "fgsm ifgsm(n=20) mdi2fgsm(p=0.7,mu=0.5,eps=0.1,alpha=0.01)");
  REQUIRE(cells.size() == 3);
  CHECK(cells[0].name == "fgsm");
  CHECK(cells[0].overrides.empty());
  CHECK(cells[1].name == "ifgsm");
  REQUIRE(cells[1].overrides.size() == 1);
  CHECK(cells[1].overrides[0].first == "n");
  CHECK(cells[1].overrides[0].second == 20.0);
  REQUIRE(cells[2].overrides.size() == 4);
  CHECK(cells[2].overrides[0] == std::pair<std::string, double>{"p", 0.7});
  CHECK(cells[2].overrides[3] == std::pair<std::string, double>{"alpha", 0.01});

  CHECK_THROWS_WITH_AS(harness::parse_sweep_cells("pgd"),
                       doctest::Contains("unknown attack"),
                       harness::ConfigError);
  CHECK_THROWS_WITH_AS(harness::parse_sweep_cells("ifgsm(n=20"),
                       doctest::Contains("missing ')'"), harness::ConfigError);
  CHECK_THROWS_WITH_AS(harness::parse_sweep_cells("ifgsm(banana=1)"),
                       doctest::Contains("unknown key"), harness::ConfigError);
  CHECK_THROWS_WITH_AS(harness::parse_sweep_cells("ifgsm(n)"),
                       doctest::Contains("expected key=value"),
                       harness::ConfigError);
  CHECK_THROWS_WITH_AS(harness::parse_sweep_cells("ifgsm(n=two)"),
                       doctest::Contains("not a number"),
                       harness::ConfigError);
  CHECK_THROWS_WITH_AS(harness::parse_sweep_cells("   "),
                       doctest::Contains("empty"), harness::ConfigError);
}

TEST_CASE("table formatting pads every column to its widest cell") {
  std::string table = harness::format_table(
      {"cell", "rate"}, {{"fgsm", "0.5"}, {"mdi2fgsm", "0.875"}});
  CHECK(table ==
        "cell      rate \n"
        "--------  -----\n"
        "fgsm      0.5  \n"
        "mdi2fgsm  0.875\n");
}

namespace {

ordered_json make_campaign_report() {
  ordered_json img1;
  img1["source"] = "a.ppm";
  img1["adversarial"] = "adv_a.ppm";
  img1["final_epsilon"] = 0.0625;
  img1["final_ssim"] = 0.96875;
  img1["attack_runs"] = 2;
  img1["failed_constraint"] = false;
  img1["whitebox_success"] = true;
  ordered_json img2;
  img2["source"] = "b.ppm";
  img2["adversarial"] = "adv_b.ppm";
  img2["final_epsilon"] = 0.125;
  img2["final_ssim"] = 0.984375;
  img2["attack_runs"] = 1;
  img2["failed_constraint"] = false;
  img2["whitebox_success"] = false;

  ordered_json agg;
  agg["count"] = 2;
  agg["ssim_pass_rate"] = 1.0;
  agg["mean_ssim"] = 0.9765625;
  agg["mean_final_epsilon"] = 0.09375;
  agg["whitebox_success_rate"] = 0.5;
  agg["constraint_failures"] = 0;
  agg["max_attack_runs"] = 2;

  ordered_json controller;
  controller["ssim_floor"] = 0.95;

  ordered_json report;
  report["kind"] = "attack-campaign";
  report["controller"] = controller;
  report["images"] = ordered_json::array({img1, img2});
  report["aggregates"] = agg;
  return report;
}

std::string dump_report(const ordered_json& j, const std::string& name) {
  return write_temp(name, j.dump(2) + "\n");
}

}  // namespace

TEST_CASE("report verification accepts exact aggregates") {
  std::string path = dump_report(make_campaign_report(), "good.json");
  CHECK_NOTHROW(harness::verify_report_consistency(path));
}

TEST_CASE("report verification rejects any tampered aggregate") {
  ordered_json j = make_campaign_report();
  j["aggregates"]["mean_ssim"] = 0.97;
  CHECK_THROWS_WITH(
      harness::verify_report_consistency(dump_report(j, "bad_agg.json")),
      doctest::Contains("aggregates do not match"));

  j = make_campaign_report();
  j["images"][0]["final_ssim"] = 0.9;
  CHECK_THROWS_WITH(
      harness::verify_report_consistency(dump_report(j, "bad_img.json")),
      doctest::Contains("aggregates do not match"));

  j = make_campaign_report();
  j["aggregates"]["count"] = 3;
  CHECK_THROWS(
      harness::verify_report_consistency(dump_report(j, "bad_count.json")));
}

TEST_CASE("report verification covers evaluation and training kinds") {
  ordered_json pair1;
  pair1["ssim"] = 0.96875;
  pair1["pass"] = true;
  ordered_json pair2;
  pair2["ssim"] = 0.90625;
  pair2["pass"] = false;
  ordered_json agg;
  agg["count"] = 2;
  agg["passed"] = 1;
  agg["pass_rate"] = 0.5;
  agg["mean_ssim"] = 0.9375;
  agg["stored_record_mismatches"] = 0;
  ordered_json ev;
  ev["kind"] = "evaluation";
  ev["ssim_floor"] = 0.95;
  ev["pairs"] = ordered_json::array({pair1, pair2});
  ev["aggregates"] = agg;
  CHECK_NOTHROW(
      harness::verify_report_consistency(dump_report(ev, "eval.json")));
  ev["aggregates"]["passed"] = 2;
  CHECK_THROWS(
      harness::verify_report_consistency(dump_report(ev, "eval_bad.json")));

  ordered_json epoch;
  epoch["epoch"] = 0;
  epoch["mean_loss"] = 1.5;
  epoch["train_accuracy"] = 0.5;
  epoch["heldout_accuracy"] = 0.75;
  ordered_json tr;
  tr["kind"] = "training";
  tr["log"] = ordered_json::array({epoch});
  tr["final_heldout_accuracy"] = 0.75;
  CHECK_NOTHROW(
      harness::verify_report_consistency(dump_report(tr, "train.json")));
  tr["final_heldout_accuracy"] = 1.0;
  CHECK_THROWS(
      harness::verify_report_consistency(dump_report(tr, "train_bad.json")));
}

TEST_CASE("report verification rejects unknown kinds and broken files") {
  ordered_json j;
  j["kind"] = "mystery";
  CHECK_THROWS_WITH(
      harness::verify_report_consistency(dump_report(j, "kind.json")),
      doctest::Contains("unknown kind"));
  std::string path = write_temp("not_json.json", "{nope");
  CHECK_THROWS_WITH(harness::verify_report_consistency(path),
                    doctest::Contains("not parseable"));
  CHECK_THROWS(harness::verify_report_consistency("harness_scratch/nope.json"));
}

TEST_CASE("sweep reports with a failing cell still verify") {
  ordered_json okimg;
  okimg["final_ssim"] = 0.96875;
  okimg["whitebox_success"] = true;
  ordered_json okcell;
  okcell["name"] = "ifgsm";
  okcell["ssim_floor"] = 0.95;
  okcell["images"] = ordered_json::array({okimg});
  ordered_json metrics;
  metrics["count"] = 1;
  metrics["mean_ssim"] = 0.96875;
  metrics["ssim_pass_rate"] = 1.0;
  metrics["whitebox_success_rate"] = 1.0;
  okcell["metrics"] = metrics;
  ordered_json badcell;
  badcell["name"] = "mdi2fgsm";
  badcell["error"] = "attack iterations must be >= 1, got 0";
  ordered_json j;
  j["kind"] = "sweep";
  j["cells"] = ordered_json::array({okcell, badcell});
  CHECK_NOTHROW(
      harness::verify_report_consistency(dump_report(j, "sweep.json")));
  j["cells"][0]["metrics"]["whitebox_success_rate"] = 0.0;
  CHECK_THROWS(
      harness::verify_report_consistency(dump_report(j, "sweep_bad.json")));
}
