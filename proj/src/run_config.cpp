#include "metadm/run_config.hpp"

#include <set>
#include <sstream>

#include "metadm/digest.hpp"
#include "metadm/errors.hpp"

namespace metadm {

namespace {

std::vector<int> parse_shape(const std::string& text) {
  std::vector<int> shape;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(part, &used);
      if (used != part.size() || v < 1) throw std::invalid_argument(part);
      shape.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("bad image_shape component '" + part + "'");
    }
  }
  if (shape.size() != 3) {
    throw ConfigError("image_shape must be three comma-separated sizes, got '" + text + "'");
  }
  return shape;
}

std::string shape_to_string(const std::vector<int>& shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out;
}

int get_checked_int(const Config& c, const std::string& sec, const std::string& key,
                    long long fallback, long long lo, long long hi) {
  const long long v = c.get_int(sec, key, fallback);
  if (v < lo || v > hi) {
    throw ConfigError(sec + "." + key + " must lie in [" + std::to_string(lo) + ", " +
                      std::to_string(hi) + "], got " + std::to_string(v));
  }
  return static_cast<int>(v);
}

// The key inventory doubles as the typo check for --set.
const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "run.seed",
      "run.output_dir",
      "dataset.dir",
      "dataset.name",
      "dataset.n_classes",
      "dataset.images_per_class",
      "dataset.image_shape",
      "dataset.split_train",
      "dataset.split_val",
      "dataset.split_test",
      "dataset.size_min",
      "dataset.size_max",
      "dataset.jitter",
      "dataset.noise",
      "diffusion.timesteps",
      "diffusion.beta_min",
      "diffusion.beta_max",
      "diffusion.epochs",
      "diffusion.batch_size",
      "diffusion.lr",
      "diffusion.checkpoint",
      "metadm.good_strength",
      "metadm.bad_strength",
      "metadm.strategy",
      "metadm.bad_per_class",
      "metadm.augment",
      "metadm.sharpen",
      "metadm.augmented_dir",
      "fsl.n_way",
      "fsl.k_shot",
      "fsl.n_query_train",
      "fsl.n_query_eval",
      "fsl.episodes_train",
      "fsl.episodes_eval",
      "fsl.lr",
      "fsl.lambda",
      "fsl.val_every",
      "fsl.val_episodes",
      "fsl.good_as_queries",
      "fsl.checkpoint",
  };
  return keys;
}

}  // namespace

RunConfig run_config_from(const Config& c) {
  for (const auto& [sec, kv] : c.sections()) {
    for (const auto& [key, value] : kv) {
      if (!known_keys().count(sec + "." + key)) {
        throw ConfigError("unknown config key '" + sec + "." + key + "'");
      }
    }
  }

  RunConfig rc;
  rc.seed = c.get_u64("run", "seed", 0);
  rc.output_dir = c.get_str("run", "output_dir", rc.output_dir);

  auto& ds = rc.dataset;
  ds.dir = c.get_str("dataset", "dir", "");
  ds.name = c.get_str("dataset", "name", ds.name);
  ds.n_classes = get_checked_int(c, "dataset", "n_classes", ds.n_classes, 3, 100000);
  ds.images_per_class =
      get_checked_int(c, "dataset", "images_per_class", ds.images_per_class, 1, 1000000);
  ds.image_shape = parse_shape(c.get_str("dataset", "image_shape", shape_to_string(ds.image_shape)));
  ds.split_train = get_checked_int(c, "dataset", "split_train", ds.split_train, 0, 100000);
  ds.split_val = get_checked_int(c, "dataset", "split_val", ds.split_val, 0, 100000);
  ds.split_test = get_checked_int(c, "dataset", "split_test", ds.split_test, 0, 100000);
  const int split_sum = ds.split_train + ds.split_val + ds.split_test;
  if (split_sum != 0 && split_sum != ds.n_classes) {
    throw ConfigError("dataset splits must sum to n_classes (" +
                      std::to_string(ds.n_classes) + "), got " + std::to_string(split_sum));
  }
  ds.size_min = static_cast<float>(c.get_f64("dataset", "size_min", ds.size_min));
  ds.size_max = static_cast<float>(c.get_f64("dataset", "size_max", ds.size_max));
  ds.jitter = static_cast<float>(c.get_f64("dataset", "jitter", ds.jitter));
  ds.noise = static_cast<float>(c.get_f64("dataset", "noise", ds.noise));

  auto& df = rc.diffusion;
  df.timesteps = get_checked_int(c, "diffusion", "timesteps", df.timesteps, 1, 1 << 20);
  df.beta_min = c.get_f64("diffusion", "beta_min", df.beta_min);
  df.beta_max = c.get_f64("diffusion", "beta_max", df.beta_max);
  df.epochs = get_checked_int(c, "diffusion", "epochs", df.epochs, 1, 1000000);
  df.batch_size = get_checked_int(c, "diffusion", "batch_size", df.batch_size, 1, 1 << 20);
  df.lr = static_cast<float>(c.get_f64("diffusion", "lr", df.lr));
  df.checkpoint = c.get_str("diffusion", "checkpoint", "");

  auto& md = rc.metadm;
  md.good_strength = static_cast<float>(c.get_f64("metadm", "good_strength", md.good_strength));
  md.bad_strength = static_cast<float>(c.get_f64("metadm", "bad_strength", md.bad_strength));
  md.strategy = dm::strategy_from_name(
      c.get_str("metadm", "strategy", dm::strategy_name(md.strategy)));
  md.bad_per_class = get_checked_int(c, "metadm", "bad_per_class", md.bad_per_class, 1, 1 << 20);
  md.augment = c.get_bool("metadm", "augment", md.augment);
  md.sharpen = c.get_bool("metadm", "sharpen", md.sharpen);
  md.augmented_dir = c.get_str("metadm", "augmented_dir", "");

  auto& fs = rc.fsl;
  fs.n_way = get_checked_int(c, "fsl", "n_way", fs.n_way, 1, 1 << 20);
  fs.k_shot = get_checked_int(c, "fsl", "k_shot", fs.k_shot, 1, 1 << 20);
  fs.n_query_train = get_checked_int(c, "fsl", "n_query_train", fs.n_query_train, 1, 1 << 20);
  fs.n_query_eval = get_checked_int(c, "fsl", "n_query_eval", fs.n_query_eval, 1, 1 << 20);
  fs.episodes_train = get_checked_int(c, "fsl", "episodes_train", fs.episodes_train, 1, 1 << 30);
  fs.episodes_eval = get_checked_int(c, "fsl", "episodes_eval", fs.episodes_eval, 2, 1 << 30);
  fs.lr = static_cast<float>(c.get_f64("fsl", "lr", fs.lr));
  fs.lambda_reg = static_cast<float>(c.get_f64("fsl", "lambda", fs.lambda_reg));
  fs.val_every = get_checked_int(c, "fsl", "val_every", fs.val_every, 0, 1 << 30);
  fs.val_episodes = get_checked_int(c, "fsl", "val_episodes", fs.val_episodes, 2, 1 << 30);
  fs.good_as_queries = c.get_bool("fsl", "good_as_queries", fs.good_as_queries);
  fs.checkpoint = c.get_str("fsl", "checkpoint", "");
  return rc;
}

Config run_config_to(const RunConfig& rc) {
  Config c;
  c.set("run", "seed", std::to_string(rc.seed));
  c.set("run", "output_dir", rc.output_dir);

  const auto& ds = rc.dataset;
  c.set("dataset", "dir", ds.dir);
  c.set("dataset", "name", ds.name);
  c.set("dataset", "n_classes", std::to_string(ds.n_classes));
  c.set("dataset", "images_per_class", std::to_string(ds.images_per_class));
  c.set("dataset", "image_shape", shape_to_string(ds.image_shape));
  c.set("dataset", "split_train", std::to_string(ds.split_train));
  c.set("dataset", "split_val", std::to_string(ds.split_val));
  c.set("dataset", "split_test", std::to_string(ds.split_test));
  c.set("dataset", "size_min", format_f32(ds.size_min));
  c.set("dataset", "size_max", format_f32(ds.size_max));
  c.set("dataset", "jitter", format_f32(ds.jitter));
  c.set("dataset", "noise", format_f32(ds.noise));

  const auto& df = rc.diffusion;
  c.set("diffusion", "timesteps", std::to_string(df.timesteps));
  c.set("diffusion", "beta_min", format_f64(df.beta_min));
  c.set("diffusion", "beta_max", format_f64(df.beta_max));
  c.set("diffusion", "epochs", std::to_string(df.epochs));
  c.set("diffusion", "batch_size", std::to_string(df.batch_size));
  c.set("diffusion", "lr", format_f32(df.lr));
  c.set("diffusion", "checkpoint", df.checkpoint);

  const auto& md = rc.metadm;
  c.set("metadm", "good_strength", format_f32(md.good_strength));
  c.set("metadm", "bad_strength", format_f32(md.bad_strength));
  c.set("metadm", "strategy", dm::strategy_name(md.strategy));
  c.set("metadm", "bad_per_class", std::to_string(md.bad_per_class));
  c.set("metadm", "augment", md.augment ? "true" : "false");
  c.set("metadm", "sharpen", md.sharpen ? "true" : "false");
  c.set("metadm", "augmented_dir", md.augmented_dir);

  const auto& fs = rc.fsl;
  c.set("fsl", "n_way", std::to_string(fs.n_way));
  c.set("fsl", "k_shot", std::to_string(fs.k_shot));
  c.set("fsl", "n_query_train", std::to_string(fs.n_query_train));
  c.set("fsl", "n_query_eval", std::to_string(fs.n_query_eval));
  c.set("fsl", "episodes_train", std::to_string(fs.episodes_train));
  c.set("fsl", "episodes_eval", std::to_string(fs.episodes_eval));
  c.set("fsl", "lr", format_f32(fs.lr));
  c.set("fsl", "lambda", format_f32(fs.lambda_reg));
  c.set("fsl", "val_every", std::to_string(fs.val_every));
  c.set("fsl", "val_episodes", std::to_string(fs.val_episodes));
  c.set("fsl", "good_as_queries", fs.good_as_queries ? "true" : "false");
  c.set("fsl", "checkpoint", fs.checkpoint);
  return c;
}

std::string run_config_digest(const RunConfig& rc) {
  return sha256_hex(run_config_to(rc).serialize());
}

data::SynthSpec synth_spec(const RunConfig& rc) {
  data::SynthSpec spec;
  spec.n_classes = rc.dataset.n_classes;
  spec.images_per_class = rc.dataset.images_per_class;
  spec.image_shape = rc.dataset.image_shape;
  spec.size_min = rc.dataset.size_min;
  spec.size_max = rc.dataset.size_max;
  spec.jitter = rc.dataset.jitter;
  spec.noise = rc.dataset.noise;
  spec.seed = rc.seed;
  spec.name = rc.dataset.name;
  spec.split_override = {rc.dataset.split_train, rc.dataset.split_val, rc.dataset.split_test};
  return spec;
}

dm::MetaDMConfig metadm_config(const RunConfig& rc, std::uint64_t stage_seed) {
  dm::MetaDMConfig cfg;
  cfg.good_strength = rc.metadm.good_strength;
  cfg.bad_strength = rc.metadm.bad_strength;
  cfg.strategy = rc.metadm.strategy;
  cfg.bad_per_class = rc.metadm.bad_per_class;
  cfg.augment_enabled = rc.metadm.augment;
  cfg.sharpen_enabled = rc.metadm.sharpen;
  cfg.seed = stage_seed;
  return cfg;
}

}  // namespace metadm
