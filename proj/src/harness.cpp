#include "gradsign/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include <json.hpp>

#include "gradsign/dataio.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace gradsign::harness {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_double_value(const std::string& text) {
  try {
    size_t used = 0;
    double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("not a number: '" + text + "'");
  }
}

long long parse_int_value(const std::string& text) {
  try {
    size_t used = 0;
    long long v = std::stoll(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("not an integer: '" + text + "'");
  }
}

uint64_t parse_u64_value(const std::string& text) {
  try {
    size_t used = 0;
    if (!text.empty() && text[0] == '-') throw std::invalid_argument(text);
    uint64_t v = std::stoull(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("not an unsigned integer: '" + text + "'");
  }
}

bool parse_bool_value(const std::string& text) {
  if (text == "true") return true;
  if (text == "false") return false;
  throw ConfigError("expected true or false, got '" + text + "'");
}

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

using KeyHandler = std::function<void(const std::string&)>;

// "~" clears an optional key, mirroring how serialize() writes unset ones.
template <typename T, typename Parse>
void assign_optional(std::optional<T>& slot, const std::string& v,
                     Parse parse) {
  if (v == "~")
    slot.reset();
  else
    slot = parse(v);
}

std::map<std::string, KeyHandler> key_table(RunConfig& c) {
  std::map<std::string, KeyHandler> t;
  t["run.seed"] = [&](const std::string& v) {
    assign_optional(c.seed, v, parse_u64_value);
  };
  t["run.workers"] = [&](const std::string& v) {
    c.workers = static_cast<int>(parse_int_value(v));
  };
  t["paths.dataset"] = [&](const std::string& v) { c.dataset_dir = v; };
  t["paths.victim"] = [&](const std::string& v) { c.victim_checkpoint = v; };
  t["paths.oracle"] = [&](const std::string& v) { c.oracle_checkpoint = v; };
  t["paths.substitute"] = [&](const std::string& v) {
    c.substitute_checkpoint = v;
  };
  t["paths.pretrain"] = [&](const std::string& v) { c.pretrain_checkpoint = v; };
  t["paths.output"] = [&](const std::string& v) { c.output_dir = v; };
  t["paths.report"] = [&](const std::string& v) { c.report_path = v; };
  t["dataset.identities"] = [&](const std::string& v) {
    c.dataset_identities = static_cast<int>(parse_int_value(v));
  };
  t["dataset.per_identity"] = [&](const std::string& v) {
    c.dataset_per_identity = static_cast<int>(parse_int_value(v));
  };
  t["dataset.height"] = [&](const std::string& v) {
    c.dataset_height = static_cast<int>(parse_int_value(v));
  };
  t["dataset.width"] = [&](const std::string& v) {
    c.dataset_width = static_cast<int>(parse_int_value(v));
  };
  t["dataset.train_fraction"] = [&](const std::string& v) {
    c.dataset_train_fraction = parse_double_value(v);
  };
  t["dataset.heldout_fraction"] = [&](const std::string& v) {
    c.dataset_heldout_fraction = parse_double_value(v);
  };
  t["dataset.first_identity"] = [&](const std::string& v) {
    c.dataset_first_identity = static_cast<int>(parse_int_value(v));
  };
  t["dataset.overwrite"] = [&](const std::string& v) {
    c.dataset_overwrite = parse_bool_value(v);
  };
  t["train.model"] = [&](const std::string& v) {
    if (v != "victim" && v != "oracle")
      throw ConfigError("train.model must be victim or oracle, got '" + v + "'");
    c.train_model = v;
  };
  t["train.learning_rate"] = [&](const std::string& v) {
    assign_optional(c.train_learning_rate, v, parse_double_value);
  };
  t["train.epochs"] = [&](const std::string& v) {
    assign_optional(c.train_epochs, v, [](const std::string& s) {
      return static_cast<int>(parse_int_value(s));
    });
  };
  t["train.batch_size"] = [&](const std::string& v) {
    c.train_batch_size = static_cast<int>(parse_int_value(v));
  };
  t["train.momentum"] = [&](const std::string& v) {
    c.train_momentum = parse_double_value(v);
  };
  t["substitute.queries"] = [&](const std::string& v) {
    c.substitute_queries = static_cast<int>(parse_int_value(v));
  };
  t["substitute.freeze_epochs"] = [&](const std::string& v) {
    c.substitute_freeze_epochs = static_cast<int>(parse_int_value(v));
  };
  t["substitute.total_epochs"] = [&](const std::string& v) {
    c.substitute_total_epochs = static_cast<int>(parse_int_value(v));
  };
  t["substitute.freeze_lr"] = [&](const std::string& v) {
    c.substitute_freeze_lr = parse_double_value(v);
  };
  t["substitute.finetune_lr"] = [&](const std::string& v) {
    c.substitute_finetune_lr = parse_double_value(v);
  };
  t["substitute.soft_targets"] = [&](const std::string& v) {
    c.substitute_soft_targets = parse_bool_value(v);
  };
  t["substitute.query_budget"] = [&](const std::string& v) {
    assign_optional(c.substitute_query_budget, v, parse_u64_value);
  };
  t["substitute.pretrain_offset"] = [&](const std::string& v) {
    c.substitute_pretrain_offset = static_cast<int>(parse_int_value(v));
  };
  t["attack.name"] = [&](const std::string& v) {
    if (std::find(attacks::kAttackNames.begin(), attacks::kAttackNames.end(),
                  v) == attacks::kAttackNames.end())
      throw ConfigError("unknown attack '" + v + "'");
    c.attack_name = v;
  };
  t["attack.epsilon"] = [&](const std::string& v) {
    assign_optional(c.attack_epsilon, v, parse_double_value);
  };
  t["attack.alpha"] = [&](const std::string& v) {
    assign_optional(c.attack_alpha, v, parse_double_value);
  };
  t["attack.iterations"] = [&](const std::string& v) {
    assign_optional(c.attack_iterations, v, [](const std::string& s) {
      return static_cast<int>(parse_int_value(s));
    });
  };
  t["attack.mu"] = [&](const std::string& v) {
    assign_optional(c.attack_mu, v, parse_double_value);
  };
  t["attack.probability"] = [&](const std::string& v) {
    assign_optional(c.attack_probability, v, parse_double_value);
  };
  t["attack.streams"] = [&](const std::string& v) {
    c.attack_streams = static_cast<int>(parse_int_value(v));
  };
  t["attack.targeted"] = [&](const std::string& v) {
    c.attack_targeted = parse_bool_value(v);
  };
  t["attack.max_sources"] = [&](const std::string& v) {
    c.attack_max_sources = static_cast<int>(parse_int_value(v));
  };
  t["pipeline.steps"] = [&](const std::string& v) { c.pipeline_steps = v; };
  t["controller.initial_epsilon"] = [&](const std::string& v) {
    c.controller.initial_epsilon = parse_double_value(v);
  };
  t["controller.factor"] = [&](const std::string& v) {
    c.controller.factor = parse_double_value(v);
  };
  t["controller.max_adjustments"] = [&](const std::string& v) {
    c.controller.max_adjustments = static_cast<int>(parse_int_value(v));
  };
  t["controller.ssim_floor"] = [&](const std::string& v) {
    c.controller.ssim_floor = parse_double_value(v);
  };
  t["controller.probe_iterations"] = [&](const std::string& v) {
    c.controller.probe_iterations = static_cast<int>(parse_int_value(v));
  };
  t["sweep.cells"] = [&](const std::string& v) { c.sweep_cells = v; };
  return t;
}

std::string flatten_name(const std::string& rel_path) {
  std::string out = rel_path;
  for (char& ch : out)
    if (ch == '/' || ch == '\\') ch = '_';
  return out;
}

struct SourceSample {
  Image image;
  int label = -1;
  std::string path;
};

std::vector<SourceSample> load_samples(const std::string& manifest_path,
                                       dataio::Split split) {
  dataio::Manifest manifest = dataio::load_manifest(manifest_path);
  fs::path base = fs::path(manifest_path).parent_path();
  std::vector<SourceSample> out;
  for (const dataio::ManifestRecord& rec : manifest.records) {
    if (rec.split != split) continue;
    SourceSample s;
    s.image = dataio::load_image((base / rec.path).string());
    s.label = rec.label;
    s.path = rec.path;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<model::LabeledImage> as_labeled(
    const std::vector<SourceSample>& samples) {
  std::vector<model::LabeledImage> out;
  out.reserve(samples.size());
  for (const SourceSample& s : samples) out.push_back({s.image, s.label, {}});
  return out;
}

std::string require_manifest(const RunConfig& config) {
  std::string path = (fs::path(config.dataset_dir) / "manifest.tsv").string();
  if (!fs::exists(path))
    throw ConfigError("dataset manifest not found: " + path);
  return path;
}

model::ModelParams require_checkpoint(const std::string& path,
                                      const char* role) {
  if (path.empty() || !fs::exists(path))
    throw ConfigError(std::string(role) + " checkpoint not found: " +
                      (path.empty() ? "(unset)" : path));
  return model::load_checkpoint(path);
}

std::map<int, std::vector<double>> identity_means(
    const model::ModelParams& params, const std::vector<SourceSample>& images) {
  std::map<int, std::vector<double>> sums;
  std::map<int, int> counts;
  for (const SourceSample& s : images) {
    model::Descriptor d = model::forward_embed(params, s.image);
    std::vector<double>& sum = sums[s.label];
    if (sum.empty()) sum.assign(d.values.size(), 0.0);
    for (size_t i = 0; i < sum.size(); ++i) sum[i] += d.values[i];
    counts[s.label] += 1;
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

std::map<int, int> pair_identities(const std::set<int>& sources,
                                   const std::set<int>& targets) {
  if (targets.empty())
    throw ConfigError("attack-target split is empty; targeted mode needs it");
  std::vector<int> t(targets.begin(), targets.end());
  std::map<int, int> pairing;
  size_t i = 0;
  for (int s : sources) pairing[s] = t[i++ % t.size()];
  return pairing;
}

double l2_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double sum = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    sum += d * d;
  }
  return std::sqrt(sum);
}

void validate_attack_shape(const attacks::AttackConfig& base) {
  attacks::AttackConfig probe = base;
  probe.loss = model::LossSpec::untargeted_label(0);
  probe.validate();
}

attacks::AttackConfig build_attack_config(const RunConfig& config,
                                          const std::string& name) {
  attacks::AttackConfig base;
  base.epsilon = config.attack_epsilon.value_or(0.06);
  base.iterations = config.attack_iterations.value_or(60);
  base.pipeline.steps = transforms::parse_pipeline_steps(config.pipeline_steps);
  attacks::AttackConfig resolved = attacks::named_attack(name, base);
  if (config.attack_alpha) resolved.alpha = *config.attack_alpha;
  if (config.attack_iterations) resolved.iterations = *config.attack_iterations;
  if (config.attack_mu) resolved.mu = *config.attack_mu;
  if (config.attack_probability)
    resolved.pipeline.probability = *config.attack_probability;
  resolved.streams = config.attack_streams;
  resolved.targeted = config.attack_targeted;
  return resolved;
}

struct CampaignRow {
  perceptual::BudgetOutcome outcome;
  Image artifact;  // adversarial snapped to the 8-bit grid the codec writes
  double artifact_ssim = 1.0;
  double linf = 0.0;
  bool whitebox = false;
  double descriptor_distance = -1.0;
  int target_identity = -1;
};

Image quantize_roundtrip(const Image& x) {
  Image out = x;
  for (double& v : out.data)
    v = dataio::dequantize_pixel(dataio::quantize_pixel(v));
  return out;
}

std::vector<CampaignRow> run_campaign(
    const model::ModelParams& substitute,
    const std::vector<SourceSample>& sources, const std::map<int, int>& pairing,
    const std::map<int, std::vector<double>>& target_means,
    const std::map<int, std::vector<double>>& source_means,
    const attacks::AttackConfig& base, const perceptual::EpsController& ctl,
    int workers, uint64_t master_seed) {
  model::ConvNet net(substitute);
  return parallel_map<CampaignRow>(
      sources.size(), workers, [&](size_t i) {
        const SourceSample& s = sources[i];
        attacks::AttackConfig cfg = base;
        cfg.seed = derive_seed(master_seed, i);
        if (base.targeted) {
          int tid = pairing.at(s.label);
          cfg.loss =
              model::LossSpec::targeted_descriptor(target_means.at(tid));
        } else {
          cfg.loss = model::LossSpec::untargeted_label(s.label);
        }
        CampaignRow row;
        row.outcome = perceptual::attack_with_budget(net, s.image, cfg, ctl);
        const Image& adv = row.outcome.attack.adversarial;
        row.linf = linf_distance(s.image, adv);
        row.artifact = quantize_roundtrip(adv);
        row.artifact_ssim = perceptual::ssim(s.image, row.artifact);
        if (base.targeted) {
          row.target_identity = pairing.at(s.label);
          model::Descriptor d = model::forward_embed(substitute, row.artifact);
          double dt = l2_distance(d.values, target_means.at(row.target_identity));
          double ds = l2_distance(d.values, source_means.at(s.label));
          row.descriptor_distance = dt;
          row.whitebox = dt < ds;
        } else {
          row.whitebox =
              model::predict_label(substitute, row.artifact) != s.label;
        }
        return row;
      });
}

bool oracle_hit(const blackbox::OracleOutput& out, const SourceSample& src,
                int target_identity,
                const std::map<int, std::vector<double>>& oracle_means,
                bool targeted) {
  if (!targeted) return out.label != src.label;
  const std::vector<double>& tm = oracle_means.at(target_identity);
  const std::vector<double>& sm = oracle_means.at(src.label);
  return l2_distance(out.descriptor, tm) < l2_distance(out.descriptor, sm);
}

ordered_json attack_config_json(const attacks::AttackConfig& cfg,
                                const std::string& name) {
  ordered_json j;
  j["name"] = name;
  j["epsilon"] = cfg.epsilon;
  j["alpha"] = cfg.resolved_alpha();
  j["iterations"] = cfg.iterations;
  j["mu"] = cfg.mu;
  j["probability"] = cfg.pipeline.probability;
  j["streams"] = cfg.streams;
  j["targeted"] = cfg.targeted;
  j["pipeline"] = cfg.pipeline.describe();
  return j;
}

ordered_json controller_json(const perceptual::EpsController& ctl) {
  ordered_json j;
  j["initial_epsilon"] = ctl.initial_epsilon;
  j["factor"] = ctl.factor;
  j["max_adjustments"] = ctl.max_adjustments;
  j["ssim_floor"] = ctl.ssim_floor;
  j["probe_iterations"] = ctl.probe_iterations;
  return j;
}

ordered_json provenance_json(const RunConfig& config, uint64_t seed) {
  ordered_json j;
  j["toolkit"] = kToolkitVersion;
  j["config_hash"] = config.hash();
  j["master_seed"] = seed;
  return j;
}

ordered_json campaign_aggregates(const ordered_json& images, double floor) {
  ordered_json agg;
  int count = static_cast<int>(images.size());
  int pass = 0, failures = 0, whitebox = 0, max_runs = 0;
  double ssim_sum = 0.0, eps_sum = 0.0;
  double dist_sum = 0.0;
  int dist_count = 0, transfer_hits = 0, transfer_count = 0;
  for (const auto& img : images) {
    double s = img.at("final_ssim").get<double>();
    ssim_sum += s;
    if (s >= floor) ++pass;
    eps_sum += img.at("final_epsilon").get<double>();
    if (img.at("failed_constraint").get<bool>()) ++failures;
    if (img.at("whitebox_success").get<bool>()) ++whitebox;
    max_runs = std::max(max_runs, img.at("attack_runs").get<int>());
    if (img.contains("descriptor_distance")) {
      dist_sum += img.at("descriptor_distance").get<double>();
      ++dist_count;
    }
    if (img.contains("transfer")) {
      ++transfer_count;
      if (img.at("transfer").get<bool>()) ++transfer_hits;
    }
  }
  agg["count"] = count;
  agg["ssim_pass_rate"] = count ? static_cast<double>(pass) / count : 1.0;
  agg["mean_ssim"] = count ? ssim_sum / count : 1.0;
  agg["mean_final_epsilon"] = count ? eps_sum / count : 0.0;
  agg["whitebox_success_rate"] =
      count ? static_cast<double>(whitebox) / count : 0.0;
  agg["constraint_failures"] = failures;
  agg["max_attack_runs"] = max_runs;
  if (dist_count)
    agg["mean_descriptor_distance"] = dist_sum / dist_count;
  if (transfer_count)
    agg["transfer_rate"] = static_cast<double>(transfer_hits) / transfer_count;
  return agg;
}

ordered_json sweep_cell_metrics(const ordered_json& images, double floor) {
  ordered_json m;
  int count = static_cast<int>(images.size());
  int pass = 0, whitebox = 0, transfer_hits = 0, transfer_count = 0;
  double ssim_sum = 0.0;
  for (const auto& img : images) {
    double s = img.at("final_ssim").get<double>();
    ssim_sum += s;
    if (s >= floor) ++pass;
    if (img.at("whitebox_success").get<bool>()) ++whitebox;
    if (img.contains("transfer")) {
      ++transfer_count;
      if (img.at("transfer").get<bool>()) ++transfer_hits;
    }
  }
  m["count"] = count;
  m["mean_ssim"] = count ? ssim_sum / count : 1.0;
  m["ssim_pass_rate"] = count ? static_cast<double>(pass) / count : 1.0;
  m["whitebox_success_rate"] =
      count ? static_cast<double>(whitebox) / count : 0.0;
  if (transfer_count)
    m["transfer_rate"] = static_cast<double>(transfer_hits) / transfer_count;
  return m;
}

ordered_json evaluation_aggregates(const ordered_json& pairs) {
  ordered_json agg;
  int count = static_cast<int>(pairs.size());
  int pass = 0, whitebox = 0, whitebox_count = 0;
  int transfer_hits = 0, transfer_count = 0, mismatches = 0;
  double ssim_sum = 0.0;
  for (const auto& p : pairs) {
    double s = p.at("ssim").get<double>();
    ssim_sum += s;
    if (p.at("pass").get<bool>()) ++pass;
    if (p.contains("whitebox_success")) {
      ++whitebox_count;
      if (p.at("whitebox_success").get<bool>()) ++whitebox;
    }
    if (p.contains("transfer")) {
      ++transfer_count;
      if (p.at("transfer").get<bool>()) ++transfer_hits;
    }
    if (p.contains("matches_stored") && !p.at("matches_stored").get<bool>())
      ++mismatches;
  }
  agg["count"] = count;
  agg["passed"] = pass;
  agg["pass_rate"] = count ? static_cast<double>(pass) / count : 1.0;
  agg["mean_ssim"] = count ? ssim_sum / count : 1.0;
  if (whitebox_count)
    agg["whitebox_success_rate"] =
        static_cast<double>(whitebox) / whitebox_count;
  if (transfer_count)
    agg["transfer_rate"] = static_cast<double>(transfer_hits) / transfer_count;
  agg["stored_record_mismatches"] = mismatches;
  return agg;
}

void write_text_file(const std::string& path, const std::string& text) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path);
}

void write_report(const std::string& path, const ordered_json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

ordered_json read_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open report: " + path);
  try {
    return ordered_json::parse(in);
  } catch (const std::exception& e) {
    throw std::runtime_error("report " + path + " is not parseable: " +
                             e.what());
  }
}

std::string fmt_rate(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

model::ModelConfig config_for_images(const std::vector<SourceSample>& train,
                                     int classes) {
  if (train.empty()) throw ConfigError("train split is empty");
  model::ModelConfig cfg;
  cfg.height = train.front().image.height;
  cfg.width = train.front().image.width;
  cfg.channels = train.front().image.channels;
  cfg.classes = classes;
  return cfg;
}

int count_classes(const std::vector<SourceSample>& samples) {
  int classes = 0;
  for (const SourceSample& s : samples) classes = std::max(classes, s.label + 1);
  return classes;
}

}  // namespace

RunConfig RunConfig::from_text(const std::string& text,
                               const std::string& origin) {
  RunConfig cfg;
  auto table = key_table(cfg);
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": expected 'section.key = value'");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    auto it = table.find(key);
    if (it == table.end())
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": unknown key '" + key + "'");
    try {
      it->second(value);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + key +
                        ": " + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return from_text(text, path);
}

std::string RunConfig::serialize() const {
  std::ostringstream out;
  auto opt_u64 = [](const std::optional<uint64_t>& v) {
    return v ? std::to_string(*v) : std::string("~");
  };
  auto opt_int = [](const std::optional<int>& v) {
    return v ? std::to_string(*v) : std::string("~");
  };
  auto opt_double = [](const std::optional<double>& v) {
    return v ? fmt_double(*v) : std::string("~");
  };
  // run.workers is deliberately absent: thread count never changes results,
  // so it must not change the provenance hash either.
  out << "run.seed = " << opt_u64(seed) << "\n";
  out << "paths.dataset = " << dataset_dir << "\n";
  out << "paths.victim = " << victim_checkpoint << "\n";
  out << "paths.oracle = " << oracle_checkpoint << "\n";
  out << "paths.substitute = " << substitute_checkpoint << "\n";
  out << "paths.pretrain = " << pretrain_checkpoint << "\n";
  out << "paths.output = " << output_dir << "\n";
  out << "paths.report = " << report_path << "\n";
  out << "dataset.identities = " << dataset_identities << "\n";
  out << "dataset.per_identity = " << dataset_per_identity << "\n";
  out << "dataset.height = " << dataset_height << "\n";
  out << "dataset.width = " << dataset_width << "\n";
  out << "dataset.train_fraction = " << fmt_double(dataset_train_fraction)
      << "\n";
  out << "dataset.heldout_fraction = " << fmt_double(dataset_heldout_fraction)
      << "\n";
  out << "dataset.first_identity = " << dataset_first_identity << "\n";
  out << "dataset.overwrite = " << (dataset_overwrite ? "true" : "false")
      << "\n";
  out << "train.model = " << train_model << "\n";
  out << "train.learning_rate = " << opt_double(train_learning_rate) << "\n";
  out << "train.epochs = " << opt_int(train_epochs) << "\n";
  out << "train.batch_size = " << train_batch_size << "\n";
  out << "train.momentum = " << fmt_double(train_momentum) << "\n";
  out << "substitute.queries = " << substitute_queries << "\n";
  out << "substitute.freeze_epochs = " << substitute_freeze_epochs << "\n";
  out << "substitute.total_epochs = " << substitute_total_epochs << "\n";
  out << "substitute.freeze_lr = " << fmt_double(substitute_freeze_lr) << "\n";
  out << "substitute.finetune_lr = " << fmt_double(substitute_finetune_lr)
      << "\n";
  out << "substitute.soft_targets = "
      << (substitute_soft_targets ? "true" : "false") << "\n";
  out << "substitute.query_budget = " << opt_u64(substitute_query_budget)
      << "\n";
  out << "substitute.pretrain_offset = " << substitute_pretrain_offset << "\n";
  out << "attack.name = " << attack_name << "\n";
  out << "attack.epsilon = " << opt_double(attack_epsilon) << "\n";
  out << "attack.alpha = " << opt_double(attack_alpha) << "\n";
  out << "attack.iterations = " << opt_int(attack_iterations) << "\n";
  out << "attack.mu = " << opt_double(attack_mu) << "\n";
  out << "attack.probability = " << opt_double(attack_probability) << "\n";
  out << "attack.streams = " << attack_streams << "\n";
  out << "attack.targeted = " << (attack_targeted ? "true" : "false") << "\n";
  out << "attack.max_sources = " << attack_max_sources << "\n";
  out << "pipeline.steps = " << pipeline_steps << "\n";
  out << "controller.initial_epsilon = " << fmt_double(controller.initial_epsilon)
      << "\n";
  out << "controller.factor = " << fmt_double(controller.factor) << "\n";
  out << "controller.max_adjustments = " << controller.max_adjustments << "\n";
  out << "controller.ssim_floor = " << fmt_double(controller.ssim_floor)
      << "\n";
  out << "controller.probe_iterations = " << controller.probe_iterations
      << "\n";
  out << "sweep.cells = " << sweep_cells << "\n";
  return out.str();
}

std::string RunConfig::hash() const {
  std::string text = serialize();
  uint64_t h = fnv1a(text.data(), text.size());
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

uint64_t RunConfig::require_seed() const {
  if (!seed)
    throw ConfigError(
        "run.seed (or --seed) is required; there is no wall-clock default");
  return *seed;
}

datagen::DatasetOptions RunConfig::dataset_options() const {
  datagen::DatasetOptions opt;
  opt.identities = dataset_identities;
  opt.per_identity = dataset_per_identity;
  opt.height = dataset_height;
  opt.width = dataset_width;
  opt.seed = require_seed();
  opt.train_fraction = dataset_train_fraction;
  opt.heldout_fraction = dataset_heldout_fraction;
  opt.first_identity = dataset_first_identity;
  return opt;
}

std::vector<SweepCellSpec> parse_sweep_cells(const std::string& text) {
  static const std::set<std::string> kKeys = {"eps", "alpha", "n", "mu", "p"};
  std::vector<SweepCellSpec> cells;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) {
    SweepCellSpec cell;
    size_t open = tok.find('(');
    if (open == std::string::npos) {
      cell.name = tok;
    } else {
      if (tok.back() != ')')
        throw ConfigError("sweep cell '" + tok + "' is missing ')'");
      cell.name = tok.substr(0, open);
      std::string body = tok.substr(open + 1, tok.size() - open - 2);
      size_t pos = 0;
      while (pos < body.size()) {
        size_t comma = body.find(',', pos);
        std::string kv = body.substr(
            pos, comma == std::string::npos ? std::string::npos : comma - pos);
        size_t eq = kv.find('=');
        if (eq == std::string::npos)
          throw ConfigError("sweep cell '" + tok + "': expected key=value");
        std::string key = kv.substr(0, eq);
        if (!kKeys.count(key))
          throw ConfigError("sweep cell '" + tok + "': unknown key '" + key +
                            "'");
        cell.overrides.emplace_back(key, parse_double_value(kv.substr(eq + 1)));
        pos = comma == std::string::npos ? body.size() : comma + 1;
      }
    }
    if (std::find(attacks::kAttackNames.begin(), attacks::kAttackNames.end(),
                  cell.name) == attacks::kAttackNames.end())
      throw ConfigError("sweep cell '" + tok + "': unknown attack '" +
                        cell.name + "'");
    cells.push_back(std::move(cell));
  }
  if (cells.empty()) throw ConfigError("sweep.cells is empty");
  return cells;
}

std::string format_table(const std::vector<std::string>& header,
                         const std::vector<std::vector<std::string>>& rows) {
  std::vector<size_t> widths(header.size());
  for (size_t c = 0; c < header.size(); ++c) widths[c] = header[c].size();
  for (const auto& row : rows)
    for (size_t c = 0; c < row.size() && c < widths.size(); ++c)
      widths[c] = std::max(widths[c], row[c].size());
  std::ostringstream out;
  auto emit = [&](const std::vector<std::string>& row) {
    for (size_t c = 0; c < widths.size(); ++c) {
      std::string cell = c < row.size() ? row[c] : "";
      out << cell << std::string(widths[c] - cell.size(), ' ');
      if (c + 1 < widths.size()) out << "  ";
    }
    out << "\n";
  };
  emit(header);
  std::vector<std::string> rule;
  for (size_t w : widths) rule.push_back(std::string(w, '-'));
  emit(rule);
  for (const auto& row : rows) emit(row);
  return out.str();
}

void verify_report_consistency(const std::string& path) {
  ordered_json j = read_json(path);
  std::string kind = j.at("kind").get<std::string>();
  auto mismatch = [&path](const std::string& where) {
    throw std::runtime_error("report " + path +
                             ": aggregates do not match their records (" +
                             where + ")");
  };
  if (kind == "attack-campaign") {
    double floor = j.at("controller").at("ssim_floor").get<double>();
    if (campaign_aggregates(j.at("images"), floor) != j.at("aggregates"))
      mismatch("aggregates");
  } else if (kind == "sweep") {
    for (const auto& cell : j.at("cells")) {
      if (cell.contains("error")) continue;
      double floor = cell.at("ssim_floor").get<double>();
      if (sweep_cell_metrics(cell.at("images"), floor) != cell.at("metrics"))
        mismatch("cell " + cell.at("name").get<std::string>());
    }
  } else if (kind == "evaluation") {
    if (evaluation_aggregates(j.at("pairs")) != j.at("aggregates"))
      mismatch("aggregates");
  } else if (kind == "training") {
    const auto& log = j.at("log");
    double last =
        log.empty() ? -1.0 : log.back().at("heldout_accuracy").get<double>();
    if (j.at("final_heldout_accuracy").get<double>() != last)
      mismatch("final_heldout_accuracy");
  } else if (kind == "substitute-training") {
    double agreement = j.at("heldout_agreement").get<double>();
    if (agreement > 1.0 || (agreement < 0.0 && agreement != -1.0))
      mismatch("heldout_agreement");
  } else {
    throw std::runtime_error("report " + path + ": unknown kind '" + kind +
                             "'");
  }
}

int cmd_generate(const RunConfig& config) {
  datagen::DatasetOptions opt = config.dataset_options();
  fs::path manifest = fs::path(config.dataset_dir) / "manifest.tsv";
  if (fs::exists(manifest) && !config.dataset_overwrite)
    throw ConfigError("dataset already exists at " + manifest.string() +
                      "; set dataset.overwrite = true to replace it");
  dataio::Manifest m = datagen::generate_dataset(opt, config.dataset_dir);
  std::cout << "wrote " << m.records.size() << " images ("
            << opt.identities << " identities x " << opt.per_identity
            << ") under " << config.dataset_dir << "\n";
  return kExitOk;
}

int cmd_train_victim(const RunConfig& config) {
  uint64_t seed = config.require_seed();
  std::string manifest = require_manifest(config);
  std::vector<SourceSample> train_all =
      load_samples(manifest, dataio::Split::Train);
  std::vector<SourceSample> held_all =
      load_samples(manifest, dataio::Split::Heldout);
  int classes = std::max(count_classes(train_all), count_classes(held_all));

  bool oracle = config.train_model == "oracle";
  std::vector<SourceSample> subset;
  for (size_t i = 0; i < train_all.size(); ++i)
    if ((i % 2 == 1) == oracle) subset.push_back(train_all[i]);

  model::ModelConfig cfg = config_for_images(subset, classes);
  model::TrainOptions topt;
  if (oracle) {
    model::ModelConfig wide = blackbox::oracle_model_config();
    cfg.conv1_filters = wide.conv1_filters;
    cfg.conv2_filters = wide.conv2_filters;
    topt = blackbox::oracle_train_options(derive_seed(seed, 0x6f7261636cULL));
  } else {
    topt.seed = derive_seed(seed, 0x76696374ULL);
  }
  if (config.train_learning_rate) topt.learning_rate = *config.train_learning_rate;
  if (config.train_epochs) topt.epochs = *config.train_epochs;
  topt.batch_size = config.train_batch_size;
  topt.momentum = config.train_momentum;

  std::vector<model::LabeledImage> data = as_labeled(subset);
  std::vector<model::LabeledImage> held = as_labeled(held_all);
  model::TrainResult result;
  try {
    result = model::train_classifier(data, cfg, topt, &held);
  } catch (const model::TrainingDiverged& e) {
    throw std::runtime_error(std::string("training diverged: ") + e.what());
  }

  std::string ckpt =
      oracle ? config.oracle_checkpoint : config.victim_checkpoint;
  if (ckpt.empty()) throw ConfigError("checkpoint path is empty");
  if (fs::path(ckpt).has_parent_path())
    fs::create_directories(fs::path(ckpt).parent_path());
  model::save_checkpoint(result.params, ckpt);

  ordered_json report;
  report["kind"] = "training";
  report["provenance"] = provenance_json(config, seed);
  report["model"] = config.train_model;
  report["train_images"] = data.size();
  report["heldout_images"] = held.size();
  ordered_json log = ordered_json::array();
  for (const model::EpochStats& e : result.log) {
    ordered_json entry;
    entry["epoch"] = e.epoch;
    entry["mean_loss"] = e.mean_loss;
    entry["train_accuracy"] = e.train_accuracy;
    entry["heldout_accuracy"] = e.heldout_accuracy;
    log.push_back(entry);
  }
  report["log"] = log;
  double final_acc = result.log.empty() ? -1.0 : result.log.back().heldout_accuracy;
  report["final_heldout_accuracy"] = final_acc;
  write_report((fs::path(config.output_dir) /
                (config.train_model + "_training.json"))
                   .string(),
               report);
  std::cout << config.train_model << " trained on " << data.size()
            << " images; held-out accuracy " << fmt_rate(final_acc) << "; saved "
            << ckpt << "\n";
  return kExitOk;
}

int cmd_train_substitute(const RunConfig& config) {
  uint64_t seed = config.require_seed();
  std::string manifest = require_manifest(config);
  model::ModelParams oracle_params =
      require_checkpoint(config.oracle_checkpoint, "oracle");

  model::ModelParams init;
  bool cached = !config.pretrain_checkpoint.empty() &&
                fs::exists(config.pretrain_checkpoint);
  if (cached) {
    init = model::load_checkpoint(config.pretrain_checkpoint);
  } else {
    init = blackbox::pretrained_backbone(
        derive_seed(seed, 0x70726574ULL), config.substitute_pretrain_offset,
        config.dataset_height, config.dataset_width, config.dataset_identities);
    if (!config.pretrain_checkpoint.empty()) {
      if (fs::path(config.pretrain_checkpoint).has_parent_path())
        fs::create_directories(fs::path(config.pretrain_checkpoint).parent_path());
      model::save_checkpoint(init, config.pretrain_checkpoint);
    }
  }

  // Query faces are fresh poses of the dataset's identities: same generator
  // seed, sample indices starting past the bundled dataset.
  datagen::DatasetOptions qopt = config.dataset_options();
  qopt.first_sample = config.dataset_per_identity;
  qopt.per_identity =
      (config.substitute_queries + qopt.identities - 1) / qopt.identities;
  std::vector<datagen::GeneratedSample> generated =
      datagen::generate_images(qopt);
  std::vector<Image> queries;
  for (const auto& s : generated) {
    if (static_cast<int>(queries.size()) >= config.substitute_queries) break;
    queries.push_back(s.image);
  }

  blackbox::ModelOracle oracle(oracle_params, config.substitute_query_budget);
  blackbox::QueryLog log = blackbox::collect_queries(oracle, queries);
  if (log.records.empty())
    throw std::runtime_error("oracle budget left no usable queries");
  fs::create_directories(config.output_dir);
  blackbox::save_query_log(
      log, (fs::path(config.output_dir) / "queries.gsql").string());

  blackbox::FinetuneSchedule schedule;
  schedule.freeze_epochs = config.substitute_freeze_epochs;
  schedule.total_epochs = config.substitute_total_epochs;
  schedule.freeze_lr = config.substitute_freeze_lr;
  schedule.finetune_lr = config.substitute_finetune_lr;
  schedule.batch_size = config.train_batch_size;
  schedule.momentum = config.train_momentum;
  schedule.soft_targets = config.substitute_soft_targets;
  blackbox::SubstituteResult result = blackbox::train_substitute(
      log, schedule, init, derive_seed(seed, 0x64697374ULL));

  if (config.substitute_checkpoint.empty())
    throw ConfigError("paths.substitute is empty");
  if (fs::path(config.substitute_checkpoint).has_parent_path())
    fs::create_directories(fs::path(config.substitute_checkpoint).parent_path());
  model::save_checkpoint(result.params, config.substitute_checkpoint);

  std::vector<SourceSample> held =
      load_samples(manifest, dataio::Split::Heldout);
  double agreement = -1.0;
  bool agreement_truncated = false;
  int agree = 0, total = 0;
  try {
    for (const SourceSample& s : held) {
      blackbox::OracleOutput out = oracle.query(s.image);
      if (model::predict_label(result.params, s.image) == out.label) ++agree;
      ++total;
    }
  } catch (const blackbox::BudgetExhausted&) {
    agreement_truncated = true;
  }
  if (total > 0) agreement = static_cast<double>(agree) / total;

  ordered_json report;
  report["kind"] = "substitute-training";
  report["provenance"] = provenance_json(config, seed);
  report["queries_requested"] = config.substitute_queries;
  report["queries_collected"] = log.records.size();
  report["query_log_truncated"] = log.truncated;
  report["pretrain_cached"] = cached;
  ordered_json sched;
  sched["freeze_epochs"] = schedule.freeze_epochs;
  sched["total_epochs"] = schedule.total_epochs;
  sched["freeze_lr"] = schedule.freeze_lr;
  sched["finetune_lr"] = schedule.finetune_lr;
  sched["soft_targets"] = schedule.soft_targets;
  report["schedule"] = sched;
  report["trunk_frozen_intact"] = result.after_freeze.trunk_equal(init);
  ordered_json log_json = ordered_json::array();
  for (const model::EpochStats& e : result.log) {
    ordered_json entry;
    entry["epoch"] = e.epoch;
    entry["mean_loss"] = e.mean_loss;
    entry["train_accuracy"] = e.train_accuracy;
    log_json.push_back(entry);
  }
  report["log"] = log_json;
  report["heldout_agreement"] = agreement;
  report["heldout_agreement_truncated"] = agreement_truncated;
  write_report(
      (fs::path(config.output_dir) / "substitute_training.json").string(),
      report);
  std::cout << "substitute distilled from " << log.records.size()
            << " oracle queries; held-out agreement " << fmt_rate(agreement)
            << "; saved " << config.substitute_checkpoint << "\n";
  return kExitOk;
}

namespace {

struct CampaignContext {
  std::vector<SourceSample> sources;
  std::vector<SourceSample> targets;
  std::map<int, int> pairing;
  std::map<int, std::vector<double>> target_means;
  std::map<int, std::vector<double>> source_means;
};

CampaignContext load_campaign_context(const RunConfig& config,
                                      const model::ModelParams& substitute) {
  CampaignContext ctx;
  std::string manifest = require_manifest(config);
  ctx.sources = load_samples(manifest, dataio::Split::AttackSource);
  if (ctx.sources.empty())
    throw ConfigError("attack-source split is empty");
  ctx.targets = load_samples(manifest, dataio::Split::AttackTarget);
  if (config.attack_targeted) {
    std::set<int> source_ids, target_ids;
    for (const auto& s : ctx.sources) source_ids.insert(s.label);
    for (const auto& t : ctx.targets) target_ids.insert(t.label);
    ctx.pairing = pair_identities(source_ids, target_ids);
    ctx.target_means = identity_means(substitute, ctx.targets);
    ctx.source_means = identity_means(substitute, ctx.sources);
  }
  if (config.attack_max_sources > 0 &&
      static_cast<int>(ctx.sources.size()) > config.attack_max_sources)
    ctx.sources.resize(config.attack_max_sources);
  return ctx;
}

std::vector<std::optional<bool>> oracle_transfer(
    const RunConfig& config, const CampaignContext& ctx,
    const std::vector<CampaignRow>& rows) {
  std::vector<std::optional<bool>> transfer(rows.size());
  if (config.oracle_checkpoint.empty() ||
      !fs::exists(config.oracle_checkpoint))
    return transfer;
  blackbox::ModelOracle oracle(
      model::load_checkpoint(config.oracle_checkpoint));
  std::map<int, std::vector<double>> oracle_means;
  if (config.attack_targeted) {
    std::vector<model::LabeledImage> clean = as_labeled(ctx.sources);
    std::vector<model::LabeledImage> tclean = as_labeled(ctx.targets);
    clean.insert(clean.end(), tclean.begin(), tclean.end());
    oracle_means = blackbox::oracle_identity_means(oracle, clean);
  }
  for (size_t i = 0; i < rows.size(); ++i) {
    blackbox::OracleOutput out = oracle.query(rows[i].artifact);
    transfer[i] = oracle_hit(out, ctx.sources[i], rows[i].target_identity,
                             oracle_means, config.attack_targeted);
  }
  return transfer;
}

ordered_json campaign_images_json(const RunConfig& config,
                                  const CampaignContext& ctx,
                                  const std::vector<CampaignRow>& rows,
                                  const std::vector<std::optional<bool>>& transfer,
                                  uint64_t seed) {
  ordered_json images = ordered_json::array();
  for (size_t i = 0; i < rows.size(); ++i) {
    const CampaignRow& row = rows[i];
    ordered_json img;
    img["source"] = ctx.sources[i].path;
    img["adversarial"] = "adv_" + flatten_name(ctx.sources[i].path);
    img["label"] = ctx.sources[i].label;
    if (config.attack_targeted)
      img["target_identity"] = row.target_identity;
    img["seed"] = derive_seed(seed, i);
    img["iterations_run"] = row.outcome.attack.iterations_run;
    img["attack_runs"] = row.outcome.attack_runs;
    img["probe_runs"] = row.outcome.probe_runs;
    img["adjustments"] = row.outcome.adjustments;
    img["final_epsilon"] = row.outcome.final_epsilon;
    img["final_ssim"] = row.outcome.final_ssim;
    img["artifact_ssim"] = row.artifact_ssim;
    img["linf"] = row.linf;
    img["accepted"] = row.outcome.accepted;
    img["gradient_starved"] = row.outcome.gradient_starved;
    img["fell_back"] = row.outcome.fell_back;
    img["failed_constraint"] = row.outcome.failed_constraint;
    img["whitebox_success"] = row.whitebox;
    if (config.attack_targeted)
      img["descriptor_distance"] = row.descriptor_distance;
    if (transfer[i].has_value()) img["transfer"] = *transfer[i];
    images.push_back(img);
  }
  return images;
}

}  // namespace

int cmd_attack(const RunConfig& config) {
  uint64_t seed = config.require_seed();
  model::ModelParams substitute =
      require_checkpoint(config.substitute_checkpoint, "substitute");
  CampaignContext ctx = load_campaign_context(config, substitute);
  attacks::AttackConfig base = build_attack_config(config, config.attack_name);
  validate_attack_shape(base);
  config.controller.validate();

  std::vector<CampaignRow> rows = run_campaign(
      substitute, ctx.sources, ctx.pairing, ctx.target_means, ctx.source_means,
      base, config.controller, config.workers, seed);

  fs::create_directories(config.output_dir);
  std::vector<std::vector<double>> descriptor_rows;
  for (size_t i = 0; i < rows.size(); ++i) {
    dataio::save_image(rows[i].artifact,
                       (fs::path(config.output_dir) /
                        ("adv_" + flatten_name(ctx.sources[i].path)))
                           .string());
    descriptor_rows.push_back(
        model::forward_embed(substitute, rows[i].artifact).values);
  }
  dataio::export_descriptors(
      descriptor_rows,
      (fs::path(config.output_dir) / "descriptors.gsdx").string());

  std::vector<std::optional<bool>> transfer =
      oracle_transfer(config, ctx, rows);

  ordered_json report;
  report["kind"] = "attack-campaign";
  report["provenance"] = provenance_json(config, seed);
  report["attack"] = attack_config_json(base, config.attack_name);
  report["controller"] = controller_json(config.controller);
  report["images"] = campaign_images_json(config, ctx, rows, transfer, seed);
  report["aggregates"] =
      campaign_aggregates(report["images"], config.controller.ssim_floor);
  write_report((fs::path(config.output_dir) / "report.json").string(), report);

  bool all_accepted = true;
  for (const CampaignRow& row : rows) all_accepted &= row.outcome.accepted;
  const ordered_json& agg = report["aggregates"];
  std::cout << "attacked " << rows.size() << " sources: mean ssim "
            << fmt_rate(agg["mean_ssim"].get<double>()) << ", pass rate "
            << fmt_rate(agg["ssim_pass_rate"].get<double>())
            << ", white-box success "
            << fmt_rate(agg["whitebox_success_rate"].get<double>());
  if (agg.contains("transfer_rate"))
    std::cout << ", transfer " << fmt_rate(agg["transfer_rate"].get<double>());
  std::cout << "\n";
  return all_accepted ? kExitOk : kExitConstraint;
}

int cmd_evaluate(const RunConfig& config) {
  model::ModelParams substitute;
  bool have_substitute = !config.substitute_checkpoint.empty() &&
                         fs::exists(config.substitute_checkpoint);
  if (have_substitute)
    substitute = model::load_checkpoint(config.substitute_checkpoint);

  CampaignContext ctx;
  if (config.attack_targeted && !have_substitute)
    throw ConfigError(
        "targeted evaluation needs the substitute checkpoint for descriptor "
        "distances");
  ctx = load_campaign_context(
      config, have_substitute ? substitute : model::ModelParams{});

  fs::path out(config.output_dir);
  ordered_json stored;
  bool have_stored = fs::exists(out / "report.json");
  if (have_stored) {
    stored = read_json((out / "report.json").string());
    have_stored = stored.contains("images");
  }

  std::vector<Image> originals, adversarials;
  std::vector<std::string> adv_names;
  for (const SourceSample& s : ctx.sources) {
    std::string adv_name = "adv_" + flatten_name(s.path);
    fs::path adv_path = out / adv_name;
    if (!fs::exists(adv_path))
      throw ConfigError("adversarial image missing: " + adv_path.string());
    originals.push_back(s.image);
    adversarials.push_back(dataio::load_image(adv_path.string()));
    adv_names.push_back(adv_name);
  }

  perceptual::SubmissionReport checked = perceptual::validate_submission(
      originals, adversarials, config.controller.ssim_floor);

  std::map<std::string, double> stored_ssim;
  if (have_stored)
    for (const auto& img : stored.at("images"))
      stored_ssim[img.at("adversarial").get<std::string>()] =
          img.at("artifact_ssim").get<double>();

  blackbox::ModelOracle* oracle = nullptr;
  std::unique_ptr<blackbox::ModelOracle> oracle_box;
  std::map<int, std::vector<double>> oracle_means;
  bool have_oracle = !config.oracle_checkpoint.empty() &&
                     fs::exists(config.oracle_checkpoint);
  if (have_oracle) {
    oracle_box = std::make_unique<blackbox::ModelOracle>(
        model::load_checkpoint(config.oracle_checkpoint));
    oracle = oracle_box.get();
    if (config.attack_targeted) {
      std::vector<model::LabeledImage> clean = as_labeled(ctx.sources);
      std::vector<model::LabeledImage> tclean = as_labeled(ctx.targets);
      clean.insert(clean.end(), tclean.begin(), tclean.end());
      oracle_means = blackbox::oracle_identity_means(*oracle, clean);
    }
  }

  ordered_json pairs = ordered_json::array();
  size_t mismatches = 0;
  for (size_t i = 0; i < ctx.sources.size(); ++i) {
    const perceptual::PairCheck& pc = checked.pairs[i];
    ordered_json p;
    p["original"] = ctx.sources[i].path;
    p["adversarial"] = adv_names[i];
    p["ssim"] = pc.ssim_value;
    p["pass"] = pc.pass;
    if (!pc.error.empty()) p["error"] = pc.error;
    if (have_substitute) {
      if (config.attack_targeted) {
        int tid = ctx.pairing.at(ctx.sources[i].label);
        model::Descriptor d =
            model::forward_embed(substitute, adversarials[i]);
        double dt = l2_distance(d.values, ctx.target_means.at(tid));
        double ds =
            l2_distance(d.values, ctx.source_means.at(ctx.sources[i].label));
        p["whitebox_success"] = dt < ds;
        p["descriptor_distance"] = dt;
      } else {
        p["whitebox_success"] =
            model::predict_label(substitute, adversarials[i]) !=
            ctx.sources[i].label;
      }
    }
    if (oracle) {
      blackbox::OracleOutput o = oracle->query(adversarials[i]);
      int tid = config.attack_targeted ? ctx.pairing.at(ctx.sources[i].label)
                                       : -1;
      p["transfer"] = oracle_hit(o, ctx.sources[i], tid, oracle_means,
                                 config.attack_targeted);
    }
    if (have_stored) {
      auto it = stored_ssim.find(adv_names[i]);
      bool matches =
          it != stored_ssim.end() && std::abs(it->second - pc.ssim_value) <= 1e-9;
      p["matches_stored"] = matches;
      if (!matches) ++mismatches;
    }
    pairs.push_back(p);
  }

  ordered_json report;
  report["kind"] = "evaluation";
  report["provenance"] = provenance_json(config, config.seed.value_or(0));
  report["ssim_floor"] = config.controller.ssim_floor;
  report["checked_against_stored_report"] = have_stored;
  report["pairs"] = pairs;
  report["aggregates"] = evaluation_aggregates(report["pairs"]);
  write_report((out / "evaluation.json").string(), report);

  const ordered_json& agg = report["aggregates"];
  std::cout << "evaluated " << pairs.size() << " pairs: pass rate "
            << fmt_rate(agg["pass_rate"].get<double>()) << ", mean ssim "
            << fmt_rate(agg["mean_ssim"].get<double>());
  if (agg.contains("transfer_rate"))
    std::cout << ", transfer " << fmt_rate(agg["transfer_rate"].get<double>());
  std::cout << "\n";
  if (mismatches > 0) {
    std::cerr << "warning: " << mismatches
              << " pair(s) do not match the stored attack report\n";
    return kExitOperational;
  }
  if (checked.passed != checked.pairs.size()) return kExitConstraint;
  return kExitOk;
}

int cmd_sweep(const RunConfig& config) {
  uint64_t seed = config.require_seed();
  model::ModelParams substitute =
      require_checkpoint(config.substitute_checkpoint, "substitute");
  CampaignContext ctx = load_campaign_context(config, substitute);
  std::vector<SweepCellSpec> cells = parse_sweep_cells(config.sweep_cells);

  ordered_json cells_json = ordered_json::array();
  std::vector<std::vector<std::string>> rows_text;
  bool any_failed = false;
  for (const SweepCellSpec& cell : cells) {
    std::string cell_label = cell.name;
    if (!cell.overrides.empty()) {
      cell_label += "(";
      for (size_t i = 0; i < cell.overrides.size(); ++i) {
        if (i) cell_label += ",";
        cell_label += cell.overrides[i].first + "=" +
                      fmt_double(cell.overrides[i].second);
      }
      cell_label += ")";
    }
    ordered_json cj;
    cj["name"] = cell.name;
    cj["label"] = cell_label;
    try {
      attacks::AttackConfig base = build_attack_config(config, cell.name);
      for (const auto& [key, value] : cell.overrides) {
        if (key == "eps") base.epsilon = value;
        else if (key == "alpha") base.alpha = value;
        else if (key == "n") base.iterations = static_cast<int>(value);
        else if (key == "mu") base.mu = value;
        else if (key == "p") base.pipeline.probability = value;
      }
      validate_attack_shape(base);
      std::vector<CampaignRow> rows = run_campaign(
          substitute, ctx.sources, ctx.pairing, ctx.target_means,
          ctx.source_means, base, config.controller, config.workers, seed);
      std::vector<std::optional<bool>> transfer =
          oracle_transfer(config, ctx, rows);
      ordered_json images = ordered_json::array();
      for (size_t i = 0; i < rows.size(); ++i) {
        ordered_json img;
        img["final_ssim"] = rows[i].outcome.final_ssim;
        img["whitebox_success"] = rows[i].whitebox;
        if (transfer[i].has_value()) img["transfer"] = *transfer[i];
        images.push_back(img);
      }
      cj["config"] = attack_config_json(base, cell.name);
      cj["ssim_floor"] = config.controller.ssim_floor;
      cj["images"] = images;
      cj["metrics"] =
          sweep_cell_metrics(cj["images"], config.controller.ssim_floor);
      const ordered_json& m = cj["metrics"];
      rows_text.push_back(
          {cell_label, fmt_rate(m["whitebox_success_rate"].get<double>()),
           m.contains("transfer_rate")
               ? fmt_rate(m["transfer_rate"].get<double>())
               : std::string("-"),
           fmt_rate(m["mean_ssim"].get<double>()),
           fmt_rate(m["ssim_pass_rate"].get<double>())});
    } catch (const std::exception& e) {
      any_failed = true;
      cj["error"] = e.what();
      rows_text.push_back({cell_label, "error", e.what(), "", ""});
    }
    cells_json.push_back(cj);
  }

  std::string table = format_table(
      {"cell", "whitebox", "transfer", "mean_ssim", "pass_rate"}, rows_text);

  ordered_json report;
  report["kind"] = "sweep";
  report["provenance"] = provenance_json(config, seed);
  report["cells"] = cells_json;
  report["table"] = table;
  fs::create_directories(config.output_dir);
  write_report((fs::path(config.output_dir) / "sweep.json").string(), report);
  write_text_file((fs::path(config.output_dir) / "sweep_table.txt").string(),
                  table);
  std::cout << table;
  return any_failed ? kExitOperational : kExitOk;
}

int cmd_report(const RunConfig& config) {
  std::string path = config.report_path.empty()
                         ? (fs::path(config.output_dir) / "report.json").string()
                         : config.report_path;
  if (!fs::exists(path)) {
    std::cerr << "error: report not found: " << path << "\n";
    return kExitOperational;
  }
  try {
    verify_report_consistency(path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOperational;
  }
  ordered_json j = read_json(path);
  std::string kind = j.at("kind").get<std::string>();
  std::cout << "report " << path << " (" << kind << ") is consistent\n";
  if (kind == "sweep") {
    std::cout << j.at("table").get<std::string>();
  } else if (j.contains("aggregates")) {
    std::vector<std::vector<std::string>> rows;
    for (const auto& [key, value] : j.at("aggregates").items())
      rows.push_back({key, value.dump()});
    std::cout << format_table({"aggregate", "value"}, rows);
  }
  return kExitOk;
}

}  // namespace gradsign::harness
