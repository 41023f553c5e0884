#include "metadm/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <utility>

#include "json.hpp"
#include "metadm/checkpoint.hpp"
#include "metadm/config.hpp"
#include "metadm/diffusion.hpp"
#include "metadm/digest.hpp"
#include "metadm/errors.hpp"
#include "metadm/rng.hpp"
#include "metadm/version.hpp"

namespace metadm::pipe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

// The access log records inputs and outputs at artifact granularity
// (manifests, checkpoints, reports), enough to show which inputs an arm
// consumed without listing every image file.
void log_access(const RunConfig& cfg, const char* verb, const std::string& path) {
  std::ofstream out(access_log_path(cfg), std::ios::app);
  out << verb << ' ' << path << '\n';
}

void log_read(const RunConfig& cfg, const std::string& path) { log_access(cfg, "read", path); }
void log_write(const RunConfig& cfg, const std::string& path) { log_access(cfg, "write", path); }

// Upserts one key in digests.json. Unreadable bookkeeping is rebuilt rather
// than fatal; stages re-record their digests on every run.
void record_digest(const RunConfig& cfg, const std::string& key, const std::string& value) {
  json j = json::object();
  {
    std::ifstream in(digests_path(cfg));
    if (in) {
      try {
        in >> j;
      } catch (const json::exception&) {
        j = json::object();
      }
    }
    if (!j.is_object()) j = json::object();
  }
  j[key] = value;
  std::ofstream out(digests_path(cfg));
  out << j.dump(2) << '\n';
}

struct DatasetInput {
  data::DatasetManifest manifest;
  data::LoadedDataset ds;
};

DatasetInput load_input_dataset(const RunConfig& cfg) {
  const std::string mp = dataset_manifest_path(cfg);
  log_read(cfg, mp);
  DatasetInput in;
  in.manifest = data::load_manifest(mp);
  in.ds = data::load_dataset(in.manifest);
  return in;
}

void write_curve_csv(const std::string& path, const char* header,
                     const std::vector<std::pair<int, double>>& rows) {
  std::ofstream out(path);
  out << header << '\n';
  for (const auto& [x, y] : rows) out << x << ',' << format_f64(y) << '\n';
}

std::string value_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace

std::string dataset_dir(const RunConfig& cfg) {
  return cfg.dataset.dir.empty() ? join(cfg.output_dir, "dataset") : cfg.dataset.dir;
}
std::string dataset_manifest_path(const RunConfig& cfg) {
  return join(dataset_dir(cfg), "manifest.json");
}
std::string denoiser_checkpoint_path(const RunConfig& cfg) {
  return cfg.diffusion.checkpoint.empty() ? join(cfg.output_dir, "denoiser.ckpt")
                                          : cfg.diffusion.checkpoint;
}
std::string diffusion_loss_csv_path(const RunConfig& cfg) {
  return join(cfg.output_dir, "diffusion_loss.csv");
}
std::string augmented_dir(const RunConfig& cfg) {
  return cfg.metadm.augmented_dir.empty() ? join(cfg.output_dir, "augmented")
                                          : cfg.metadm.augmented_dir;
}
std::string augmented_manifest_path(const RunConfig& cfg) {
  return join(augmented_dir(cfg), "manifest.json");
}
std::string fsl_checkpoint_path(const RunConfig& cfg) {
  return cfg.fsl.checkpoint.empty() ? join(cfg.output_dir, "fsl.ckpt") : cfg.fsl.checkpoint;
}
std::string fsl_train_csv_path(const RunConfig& cfg) {
  return join(cfg.output_dir, "fsl_train.csv");
}
std::string fsl_val_csv_path(const RunConfig& cfg) { return join(cfg.output_dir, "fsl_val.csv"); }
std::string fsl_summary_path(const RunConfig& cfg) {
  return join(cfg.output_dir, "fsl_summary.json");
}

static std::string tagged(const std::string& stem, const std::string& tag, const char* ext) {
  if (tag.empty()) return stem + ext;
  for (char c : tag) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '-' || c == '_';
    if (!ok) throw ConfigError("eval tag may only use letters, digits, '-' and '_'");
  }
  return stem + "_" + tag + ext;
}

std::string eval_report_path(const RunConfig& cfg, const std::string& tag) {
  return join(cfg.output_dir, tagged("eval_report", tag, ".json"));
}
std::string eval_csv_path(const RunConfig& cfg, const std::string& tag) {
  return join(cfg.output_dir, tagged("eval_episodes", tag, ".csv"));
}
std::string resolved_config_path(const RunConfig& cfg) {
  return join(cfg.output_dir, "resolved_config.ini");
}
std::string digests_path(const RunConfig& cfg) { return join(cfg.output_dir, "digests.json"); }
std::string access_log_path(const RunConfig& cfg) { return join(cfg.output_dir, "access.log"); }

void prepare_output(const RunConfig& cfg) {
  if (cfg.output_dir.empty()) throw ConfigError("output_dir must not be empty");
  fs::create_directories(cfg.output_dir);
  run_config_to(cfg).save(resolved_config_path(cfg));
  record_digest(cfg, "config_digest", run_config_digest(cfg));
  record_digest(cfg, "tool_version", kVersion);
}

data::DatasetManifest run_synth(const RunConfig& cfg) {
  prepare_output(cfg);
  auto m = data::synth_generate(synth_spec(cfg), dataset_dir(cfg));
  log_write(cfg, dataset_manifest_path(cfg));
  record_digest(cfg, "dataset_digest", m.digest);
  return m;
}

std::vector<double> run_train_diffusion(const RunConfig& cfg) {
  prepare_output(cfg);
  auto in = load_input_dataset(cfg);
  std::vector<std::vector<float>> train_images;
  for (const auto& cls : in.ds.classes) {
    if (cls.split != data::Split::kTrain) continue;
    for (const auto& img : cls.images) train_images.push_back(img);
  }
  if (train_images.empty()) throw ConfigError("train split holds no images");

  auto schedule =
      diff::make_schedule(cfg.diffusion.timesteps, cfg.diffusion.beta_min, cfg.diffusion.beta_max);
  Rng init_rng(Rng::mix(cfg.seed, kSeedDiffusionInit));
  diff::Denoiser model(init_rng);
  diff::DiffusionTrainOptions opts;
  opts.epochs = cfg.diffusion.epochs;
  opts.batch_size = cfg.diffusion.batch_size;
  opts.lr = cfg.diffusion.lr;
  opts.seed = Rng::mix(cfg.seed, kSeedDiffusionTrain);
  auto losses = diff::train_denoiser(model, train_images, in.ds.image_shape, schedule, opts);

  const std::string ckpt = denoiser_checkpoint_path(cfg);
  diff::save_denoiser(ckpt, model, schedule);
  log_write(cfg, ckpt);
  std::vector<std::pair<int, double>> rows;
  for (std::size_t e = 0; e < losses.size(); ++e) rows.emplace_back(static_cast<int>(e) + 1, losses[e]);
  write_curve_csv(diffusion_loss_csv_path(cfg), "epoch,loss", rows);
  log_write(cfg, diffusion_loss_csv_path(cfg));
  record_digest(cfg, "denoiser_digest", sha256_file_hex(ckpt));
  return losses;
}

dm::AugmentedDataset run_generate(const RunConfig& cfg) {
  prepare_output(cfg);
  auto gcfg = metadm_config(cfg, Rng::mix(cfg.seed, kSeedGenerate));
  dm::validate_config(gcfg);
  auto in = load_input_dataset(cfg);

  const std::string ckpt = denoiser_checkpoint_path(cfg);
  log_read(cfg, ckpt);
  Rng dummy(0);
  diff::Denoiser model(dummy);
  auto schedule = diff::load_denoiser(ckpt, model);
  const std::string denoiser_digest = sha256_file_hex(ckpt);

  auto aug = dm::build_augmented_dataset(in.ds, data::Split::kTrain, model, schedule, gcfg,
                                         in.manifest.digest, denoiser_digest);
  dm::save_augmented(aug, augmented_dir(cfg));
  log_write(cfg, augmented_manifest_path(cfg));
  record_digest(cfg, "augmented_digest", aug.manifest_digest);
  return aug;
}

FslRunResult run_train_fsl(const RunConfig& cfg) {
  prepare_output(cfg);
  const bool active = cfg.metadm.augment || cfg.metadm.sharpen;
  auto in = load_input_dataset(cfg);

  fsl::FewShotPool train_pool;
  if (active) {
    const std::string mp = augmented_manifest_path(cfg);
    log_read(cfg, mp);
    auto aug = dm::load_augmented(mp);
    if (cfg.metadm.augment && !aug.config.augment_enabled)
      throw DataIntegrityError("augment is enabled but the augmented dataset holds no good samples");
    if (cfg.metadm.sharpen && !aug.config.sharpen_enabled)
      throw DataIntegrityError("sharpen is enabled but the augmented dataset holds no bad samples");
    if (aug.dataset_digest != in.manifest.digest)
      throw DataIntegrityError("augmented dataset was generated from a different dataset");
    dm::PoolBuildOptions popts;
    popts.include_good = cfg.metadm.augment;
    popts.include_bad = cfg.metadm.sharpen;
    popts.good_as_queries = cfg.fsl.good_as_queries;
    train_pool = dm::pool_from_augmented(aug, popts);
  } else {
    train_pool = dm::pool_from_split(in.ds, data::Split::kTrain);
  }
  auto val_pool = dm::pool_from_split(in.ds, data::Split::kVal);

  Rng init_rng(Rng::mix(cfg.seed, kSeedFslInit));
  fsl::Conv4 model(init_rng, in.ds.image_shape[0]);
  fsl::FslTrainOptions topts;
  topts.episodes = cfg.fsl.episodes_train;
  topts.n_way = cfg.fsl.n_way;
  topts.k_shot = cfg.fsl.k_shot;
  topts.n_query = cfg.fsl.n_query_train;
  topts.lr = cfg.fsl.lr;
  topts.lambda_reg = cfg.fsl.lambda_reg;
  topts.seed = Rng::mix(cfg.seed, kSeedFslTrain);
  topts.val_every = cfg.fsl.val_every;
  topts.val_episodes = cfg.fsl.val_episodes;
  FslRunResult result;
  result.used_augmented = active;
  result.log = fsl::train_fsl(model, train_pool, val_pool, topts);

  const std::string ckpt = fsl_checkpoint_path(cfg);
  nn::save_params(ckpt, model.params());
  log_write(cfg, ckpt);

  std::vector<std::pair<int, double>> loss_rows;
  for (std::size_t e = 0; e < result.log.episode_losses.size(); ++e)
    loss_rows.emplace_back(static_cast<int>(e) + 1, result.log.episode_losses[e]);
  write_curve_csv(fsl_train_csv_path(cfg), "episode,loss", loss_rows);
  log_write(cfg, fsl_train_csv_path(cfg));
  write_curve_csv(fsl_val_csv_path(cfg), "episode,accuracy", result.log.val_curve);
  log_write(cfg, fsl_val_csv_path(cfg));

  json summary;
  summary["episodes"] = result.log.episode_losses.size();
  summary["final_loss"] = result.log.episode_losses.empty() ? 0.0 : result.log.episode_losses.back();
  summary["best_val_accuracy"] = result.log.best_val_accuracy;
  summary["episodes_with_fake_ways"] = result.log.episodes_with_fake_ways;
  summary["used_augmented"] = active;
  summary["val_points"] = result.log.val_curve.size();
  {
    std::ofstream out(fsl_summary_path(cfg));
    out << summary.dump(2) << '\n';
  }
  log_write(cfg, fsl_summary_path(cfg));
  record_digest(cfg, "fsl_checkpoint_digest", sha256_file_hex(ckpt));
  return result;
}

fsl::EvalReport run_eval(const RunConfig& cfg, const std::string& tag) {
  prepare_output(cfg);
  auto in = load_input_dataset(cfg);
  auto pool = dm::pool_from_split(in.ds, data::Split::kTest);

  Rng init_rng(Rng::mix(cfg.seed, kSeedFslInit));
  fsl::Conv4 model(init_rng, in.ds.image_shape[0]);
  const std::string ckpt = fsl_checkpoint_path(cfg);
  log_read(cfg, ckpt);
  nn::load_params_into(ckpt, model.params());

  fsl::EvalOptions eo;
  eo.n_episodes = cfg.fsl.episodes_eval;
  eo.n_way = cfg.fsl.n_way;
  eo.k_shot = cfg.fsl.k_shot;
  eo.n_query = cfg.fsl.n_query_eval;
  eo.seed = Rng::mix(cfg.seed, kSeedEval);
  eo.config_digest = run_config_digest(cfg);
  auto report = fsl::evaluate(pool, model, eo);

  const std::string rp = eval_report_path(cfg, tag);
  fsl::save_eval_report(rp, report);
  log_write(cfg, rp);
  const std::string cp = eval_csv_path(cfg, tag);
  fsl::save_episode_csv(cp, report);
  log_write(cfg, cp);
  const std::string key =
      tag.empty() ? std::string("eval_report_digest") : "eval_report_" + tag + "_digest";
  record_digest(cfg, key, sha256_file_hex(rp));
  return report;
}

const char* ablation_axis_name(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::kModules: return "modules";
    case AblationAxis::kGoodStrength: return "good-strength";
    case AblationAxis::kBadStrength: return "bad-strength";
    case AblationAxis::kBadCount: return "bad-count";
  }
  return "modules";
}

AblationAxis ablation_axis_from_name(const std::string& name) {
  if (name == "modules") return AblationAxis::kModules;
  if (name == "good-strength") return AblationAxis::kGoodStrength;
  if (name == "bad-strength") return AblationAxis::kBadStrength;
  if (name == "bad-count") return AblationAxis::kBadCount;
  throw ConfigError("unknown ablation axis '" + name +
                    "' (expected modules, good-strength, bad-strength or bad-count)");
}

namespace {

// Arms inherit the parent's shared artifacts by absolute path, so an arm's
// own output directory never re-renders or re-trains what the sweep built
// once. Everything the arm does write lands under its own directory.
RunConfig arm_config(const RunConfig& parent, const std::string& label) {
  RunConfig sub = parent;
  sub.output_dir = join(parent.output_dir, "arm-" + label);
  sub.dataset.dir = dataset_dir(parent);
  sub.diffusion.checkpoint = denoiser_checkpoint_path(parent);
  return sub;
}

void run_arm(const RunConfig& sub, bool generate_here, AblationArm& arm) {
  try {
    if (generate_here) run_generate(sub);
    run_train_fsl(sub);
    auto report = run_eval(sub);
    arm.mean_accuracy = report.mean_accuracy;
    arm.ci95_halfwidth = report.ci95_halfwidth;
    arm.ok = true;
  } catch (const std::exception& e) {
    arm.ok = false;
    arm.error = e.what();
  }
}

}  // namespace

AblationResult run_ablation(const RunConfig& cfg, AblationAxis axis,
                            const std::vector<double>& values) {
  prepare_output(cfg);
  if (axis != AblationAxis::kModules && values.empty())
    throw ConfigError("ablation axis needs at least one value");
  if (axis == AblationAxis::kGoodStrength && !cfg.metadm.augment)
    throw ConfigError("good-strength sweep needs augment enabled");
  if ((axis == AblationAxis::kBadStrength || axis == AblationAxis::kBadCount) &&
      !cfg.metadm.sharpen)
    throw ConfigError("bad-strength and bad-count sweeps need sharpen enabled");
  if (axis == AblationAxis::kBadCount) {
    if (cfg.metadm.strategy != dm::Strategy::kSingleExtra)
      throw ConfigError("bad-count sweep needs the single-extra strategy");
    for (double v : values) {
      if (std::fabs(v - std::round(v)) > 1e-9 || v < 1.0)
        throw ConfigError("bad-count values must be positive whole numbers");
    }
  }

  // External dataset and denoiser paths are reused as-is; run-owned ones are
  // (re)built here so every arm shares the same inputs.
  if (cfg.dataset.dir.empty()) run_synth(cfg);
  if (cfg.diffusion.checkpoint.empty()) run_train_diffusion(cfg);

  AblationResult result;
  result.axis = axis;

  if (axis == AblationAxis::kModules) {
    // One generation pass with both modules on serves every arm: the pool
    // builder filters per arm, and the single-extra subsampling streams are
    // shared with per-class generation, so filtering is exact.
    RunConfig gen_cfg = cfg;
    gen_cfg.metadm.augment = true;
    gen_cfg.metadm.sharpen = true;
    run_generate(gen_cfg);
    const std::string shared_aug = augmented_dir(cfg);

    struct ModuleArm {
      const char* label;
      bool augment;
      bool sharpen;
    };
    const ModuleArm arms[] = {{"neither", false, false},
                              {"good-only", true, false},
                              {"bad-only", false, true},
                              {"both", true, true}};
    int ordinal = 0;
    for (const auto& spec : arms) {
      AblationArm arm;
      arm.label = spec.label;
      arm.value = ordinal++;
      RunConfig sub = arm_config(cfg, arm.label);
      sub.metadm.augment = spec.augment;
      sub.metadm.sharpen = spec.sharpen;
      sub.metadm.augmented_dir = shared_aug;
      run_arm(sub, /*generate_here=*/false, arm);
      result.arms.push_back(std::move(arm));
    }
  } else {
    for (double v : values) {
      AblationArm arm;
      arm.value = v;
      arm.label = std::string(ablation_axis_name(axis)) + "-" + value_label(v);
      RunConfig sub = arm_config(cfg, arm.label);
      sub.metadm.augmented_dir.clear();  // each value generates its own samples
      switch (axis) {
        case AblationAxis::kGoodStrength:
          sub.metadm.good_strength = static_cast<float>(v);
          break;
        case AblationAxis::kBadStrength:
          sub.metadm.bad_strength = static_cast<float>(v);
          break;
        case AblationAxis::kBadCount:
          sub.metadm.bad_per_class = static_cast<int>(std::lround(v));
          break;
        case AblationAxis::kModules: break;
      }
      run_arm(sub, /*generate_here=*/true, arm);
      result.arms.push_back(std::move(arm));
    }
  }

  result.csv_path = join(cfg.output_dir, "ablation.csv");
  result.json_path = join(cfg.output_dir, "ablation.json");
  {
    std::ofstream out(result.csv_path);
    out << "label,value,mean_accuracy,ci95_halfwidth,status,detail\n";
    for (const auto& arm : result.arms) {
      out << csv_quote(arm.label) << ',' << value_label(arm.value) << ','
          << format_f64(arm.mean_accuracy) << ',' << format_f64(arm.ci95_halfwidth) << ','
          << (arm.ok ? "ok" : "failed") << ',' << csv_quote(arm.error) << '\n';
    }
  }
  log_write(cfg, result.csv_path);
  json j;
  j["axis"] = ablation_axis_name(axis);
  j["tool_version"] = kVersion;
  j["rows"] = json::array();
  for (const auto& arm : result.arms) {
    json row;
    row["label"] = arm.label;
    row["value"] = arm.value;
    row["mean_accuracy"] = arm.mean_accuracy;
    row["ci95_halfwidth"] = arm.ci95_halfwidth;
    row["status"] = arm.ok ? "ok" : "failed";
    row["detail"] = arm.error;
    j["rows"].push_back(std::move(row));
  }
  {
    std::ofstream out(result.json_path);
    out << j.dump(2) << '\n';
  }
  log_write(cfg, result.json_path);
  record_digest(cfg, "ablation_digest", sha256_file_hex(result.json_path));
  return result;
}

}  // namespace metadm::pipe
