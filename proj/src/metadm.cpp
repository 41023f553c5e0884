#include "metadm/metadm.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unordered_map>
#include <utility>

#include <nlohmann/json.hpp>

#include "metadm/digest.hpp"
#include "metadm/errors.hpp"
#include "metadm/rng.hpp"
#include "metadm/tensor_io.hpp"

namespace metadm::dm {

namespace {

using nlohmann::json;

// Domain-separation tags for the per-image generation streams.
constexpr std::uint64_t kGoodRole = 0;
constexpr std::uint64_t kBadRole = 1;
constexpr std::uint64_t kSubsampleRole = 2;

struct SplitView {
  std::vector<std::size_t> class_pos;  // positions in ds.classes, split order
  std::vector<int> offsets;            // global row of each class's first image
  int total = 0;
  int fake_base = 0;  // first index available for fake classes
};

SplitView view_split(const data::LoadedDataset& ds, data::Split split) {
  if (ds.image_shape.size() != 3) {
    throw ShapeError("augmentation needs a {channels,height,width} dataset shape");
  }
  SplitView v;
  int max_real = -1;
  for (std::size_t p = 0; p < ds.classes.size(); ++p) {
    max_real = std::max(max_real, ds.classes[p].id);
    if (ds.classes[p].split != split) continue;
    v.class_pos.push_back(p);
    v.offsets.push_back(v.total);
    v.total += static_cast<int>(ds.classes[p].images.size());
  }
  if (v.class_pos.empty()) {
    throw DataIntegrityError(std::string("split '") + data::split_name(split) +
                             "' holds no classes to augment");
  }
  v.fake_base = max_real + 1;
  return v;
}

int provenance_rank(Provenance p) {
  switch (p) {
    case Provenance::kOriginal: return 0;
    case Provenance::kGood: return 1;
    case Provenance::kBad: return 2;
  }
  return 3;
}

json config_to_json(const MetaDMConfig& cfg) {
  return json{{"good_strength", cfg.good_strength},
              {"bad_strength", cfg.bad_strength},
              {"strategy", strategy_name(cfg.strategy)},
              {"bad_per_class", cfg.bad_per_class},
              {"augment_enabled", cfg.augment_enabled},
              {"sharpen_enabled", cfg.sharpen_enabled},
              {"seed", cfg.seed}};
}

MetaDMConfig config_from_json(const json& j) {
  MetaDMConfig cfg;
  cfg.good_strength = j.at("good_strength").get<float>();
  cfg.bad_strength = j.at("bad_strength").get<float>();
  cfg.strategy = strategy_from_name(j.at("strategy").get<std::string>());
  cfg.bad_per_class = j.at("bad_per_class").get<int>();
  cfg.augment_enabled = j.at("augment_enabled").get<bool>();
  cfg.sharpen_enabled = j.at("sharpen_enabled").get<bool>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

std::string example_file_name(std::size_t row) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ex_%05zu.mdtf", row);
  return buf;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataIntegrityError("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace

const char* strategy_name(Strategy s) {
  return s == Strategy::kPerClassExtra ? "per-class-extra" : "single-extra";
}

Strategy strategy_from_name(const std::string& name) {
  if (name == "per-class-extra") return Strategy::kPerClassExtra;
  if (name == "single-extra") return Strategy::kSingleExtra;
  throw ConfigError("unknown sharpening strategy '" + name +
                    "' (expected per-class-extra or single-extra)");
}

const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::kOriginal: return "original";
    case Provenance::kGood: return "good";
    case Provenance::kBad: return "bad";
  }
  throw ConfigError("invalid provenance value");
}

Provenance provenance_from_name(const std::string& name) {
  if (name == "original") return Provenance::kOriginal;
  if (name == "good") return Provenance::kGood;
  if (name == "bad") return Provenance::kBad;
  throw ConfigError("unknown provenance '" + name + "'");
}

void validate_config(const MetaDMConfig& cfg) {
  if (!(cfg.good_strength >= 0.0f && cfg.good_strength <= 1.0f)) {
    throw ConfigError("good_strength must lie in [0,1]");
  }
  if (!(cfg.bad_strength >= 0.0f && cfg.bad_strength <= 1.0f)) {
    throw ConfigError("bad_strength must lie in [0,1]");
  }
  if (cfg.bad_per_class < 1) throw ConfigError("bad_per_class must be at least 1");
  if (!cfg.augment_enabled && !cfg.sharpen_enabled) {
    throw ConfigError("Meta-DM needs augmentation or sharpening enabled");
  }
}

std::vector<AugmentedExample> generate_good(const data::LoadedDataset& ds, data::Split split,
                                            diff::Denoiser& model,
                                            const diff::NoiseSchedule& schedule,
                                            const MetaDMConfig& cfg) {
  validate_config(cfg);
  if (!cfg.augment_enabled) throw ConfigError("augmentation is disabled by config");
  const SplitView v = view_split(ds, split);
  const std::uint64_t base = Rng::mix(cfg.seed, kGoodRole);

  std::vector<AugmentedExample> out;
  out.reserve(static_cast<std::size_t>(v.total));
  for (std::size_t k = 0; k < v.class_pos.size(); ++k) {
    const auto& cls = ds.classes[v.class_pos[k]];
    auto generated = diff::img2img_batch(model, cls.images, ds.image_shape, cfg.good_strength,
                                         base, schedule, v.offsets[k]);
    for (std::size_t i = 0; i < generated.size(); ++i) {
      out.push_back({std::move(generated[i]),
                     {cls.id, true},
                     Provenance::kGood,
                     v.offsets[k] + static_cast<int>(i)});
    }
  }
  return out;
}

std::vector<AugmentedExample> generate_bad_per_class(const data::LoadedDataset& ds,
                                                     data::Split split, diff::Denoiser& model,
                                                     const diff::NoiseSchedule& schedule,
                                                     const MetaDMConfig& cfg) {
  validate_config(cfg);
  if (!cfg.sharpen_enabled) throw ConfigError("sharpening is disabled by config");
  if (cfg.strategy != Strategy::kPerClassExtra) {
    throw ConfigError("generate_bad_per_class needs strategy per-class-extra");
  }
  const SplitView v = view_split(ds, split);
  const std::uint64_t base = Rng::mix(cfg.seed, kBadRole);

  std::vector<AugmentedExample> out;
  out.reserve(static_cast<std::size_t>(v.total));
  for (std::size_t k = 0; k < v.class_pos.size(); ++k) {
    const auto& cls = ds.classes[v.class_pos[k]];
    const int fake_index = v.fake_base + static_cast<int>(k);
    auto generated = diff::img2img_batch(model, cls.images, ds.image_shape, cfg.bad_strength,
                                         base, schedule, v.offsets[k]);
    for (std::size_t i = 0; i < generated.size(); ++i) {
      out.push_back({std::move(generated[i]),
                     {fake_index, false},
                     Provenance::kBad,
                     v.offsets[k] + static_cast<int>(i)});
    }
  }
  return out;
}

std::vector<AugmentedExample> generate_bad_single(const data::LoadedDataset& ds,
                                                  data::Split split, diff::Denoiser& model,
                                                  const diff::NoiseSchedule& schedule,
                                                  const MetaDMConfig& cfg) {
  validate_config(cfg);
  if (!cfg.sharpen_enabled) throw ConfigError("sharpening is disabled by config");
  if (cfg.strategy != Strategy::kSingleExtra) {
    throw ConfigError("generate_bad_single needs strategy single-extra");
  }
  const SplitView v = view_split(ds, split);
  const std::uint64_t base = Rng::mix(cfg.seed, kBadRole);
  const std::uint64_t pick_base = Rng::mix(cfg.seed, kSubsampleRole);

  std::vector<AugmentedExample> out;
  for (std::size_t k = 0; k < v.class_pos.size(); ++k) {
    const auto& cls = ds.classes[v.class_pos[k]];
    const int n = static_cast<int>(cls.images.size());
    if (n < cfg.bad_per_class) {
      throw DataIntegrityError("bad-sample subsampling needs " +
                               std::to_string(cfg.bad_per_class) + " images in class " +
                               std::to_string(cls.id) + ", found " + std::to_string(n));
    }
    Rng pick(Rng::mix(pick_base, static_cast<std::uint64_t>(k)));
    std::vector<int> chosen = pick.sample_without_replacement(n, cfg.bad_per_class);
    std::sort(chosen.begin(), chosen.end());
    for (int i : chosen) {
      const int source = v.offsets[k] + i;
      auto generated =
          diff::img2img_batch(model, {cls.images[static_cast<std::size_t>(i)]}, ds.image_shape,
                              cfg.bad_strength, base, schedule, source);
      out.push_back({std::move(generated[0]), {v.fake_base, false}, Provenance::kBad, source});
    }
  }
  return out;
}

AugmentedDataset build_augmented_dataset(const data::LoadedDataset& ds, data::Split split,
                                         diff::Denoiser& model,
                                         const diff::NoiseSchedule& schedule,
                                         const MetaDMConfig& cfg,
                                         const std::string& dataset_digest,
                                         const std::string& denoiser_digest) {
  validate_config(cfg);
  const SplitView v = view_split(ds, split);

  AugmentedDataset aug;
  aug.image_shape = ds.image_shape;
  aug.config = cfg;
  aug.dataset_digest = dataset_digest;
  aug.denoiser_digest = denoiser_digest;

  for (std::size_t k = 0; k < v.class_pos.size(); ++k) {
    const auto& cls = ds.classes[v.class_pos[k]];
    aug.real_classes.push_back(cls.id);
    for (const auto& img : cls.images) {
      aug.examples.push_back({img, {cls.id, true}, Provenance::kOriginal, -1});
    }
  }
  if (cfg.augment_enabled) {
    auto good = generate_good(ds, split, model, schedule, cfg);
    std::move(good.begin(), good.end(), std::back_inserter(aug.examples));
  }
  if (cfg.sharpen_enabled) {
    if (cfg.strategy == Strategy::kPerClassExtra) {
      for (std::size_t k = 0; k < v.class_pos.size(); ++k) {
        aug.fake_classes.push_back(
            {v.fake_base + static_cast<int>(k), ds.classes[v.class_pos[k]].id});
      }
      auto bad = generate_bad_per_class(ds, split, model, schedule, cfg);
      std::move(bad.begin(), bad.end(), std::back_inserter(aug.examples));
    } else {
      aug.fake_classes.push_back({v.fake_base, -1});
      auto bad = generate_bad_single(ds, split, model, schedule, cfg);
      std::move(bad.begin(), bad.end(), std::back_inserter(aug.examples));
    }
  }
  return aug;
}

void save_augmented(AugmentedDataset& aug, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");

  json manifest;
  manifest["kind"] = "metadm-augmented";
  manifest["image_shape"] = aug.image_shape;
  manifest["dataset_digest"] = aug.dataset_digest;
  manifest["denoiser_digest"] = aug.denoiser_digest;
  manifest["config"] = config_to_json(aug.config);
  manifest["real_classes"] = aug.real_classes;
  json fakes = json::array();
  for (const auto& fc : aug.fake_classes) {
    fakes.push_back({{"index", fc.index}, {"paired_real", fc.paired_real}});
  }
  manifest["fake_classes"] = fakes;

  json records = json::array();
  for (std::size_t row = 0; row < aug.examples.size(); ++row) {
    const auto& ex = aug.examples[row];
    const std::string rel = "images/" + example_file_name(row);
    const nn::Tensor t = nn::Tensor::from_data(aug.image_shape, ex.image);
    const std::vector<std::uint8_t> bytes = tensor_to_bytes(t);
    const std::string path = (fs::path(dir) / rel).string();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataIntegrityError("cannot write '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataIntegrityError("write to '" + path + "' failed");
    records.push_back({{"path", rel},
                       {"class_index", ex.id.index},
                       {"is_real", ex.id.is_real},
                       {"provenance", provenance_name(ex.provenance)},
                       {"source_index", ex.source_index},
                       {"sha256", sha256_hex(bytes.data(), bytes.size())}});
  }
  manifest["examples"] = records;

  aug.manifest_digest = sha256_hex(manifest.dump(2));
  manifest["digest"] = aug.manifest_digest;
  const std::string path = (fs::path(dir) / "manifest.json").string();
  std::ofstream out(path);
  if (!out) throw DataIntegrityError("cannot write '" + path + "'");
  out << manifest.dump(2) << "\n";
  if (!out) throw DataIntegrityError("write to '" + path + "' failed");
}

AugmentedDataset load_augmented(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream in(manifest_path);
  if (!in) throw DataIntegrityError("cannot open augmented manifest '" + manifest_path + "'");
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw DataIntegrityError("augmented manifest '" + manifest_path + "' is not valid JSON: " +
                             e.what());
  }

  AugmentedDataset aug;
  try {
    if (manifest.at("kind").get<std::string>() != "metadm-augmented") {
      throw DataIntegrityError("'" + manifest_path + "' is not an augmented-dataset manifest");
    }
    const std::string stored = manifest.at("digest").get<std::string>();
    json unhashed = manifest;
    unhashed.erase("digest");
    if (sha256_hex(unhashed.dump(2)) != stored) {
      throw DataIntegrityError("augmented manifest '" + manifest_path + "' digest mismatch");
    }
    aug.manifest_digest = stored;
    aug.image_shape = manifest.at("image_shape").get<std::vector<int>>();
    aug.dataset_digest = manifest.at("dataset_digest").get<std::string>();
    aug.denoiser_digest = manifest.at("denoiser_digest").get<std::string>();
    aug.config = config_from_json(manifest.at("config"));
    aug.real_classes = manifest.at("real_classes").get<std::vector<int>>();
    for (const auto& jf : manifest.at("fake_classes")) {
      aug.fake_classes.push_back(
          {jf.at("index").get<int>(), jf.at("paired_real").get<int>()});
    }

    const fs::path root = fs::path(manifest_path).parent_path();
    int n_originals = 0;
    int last_rank = 0;
    for (const auto& jr : manifest.at("examples")) {
      AugmentedExample ex;
      ex.id.index = jr.at("class_index").get<int>();
      ex.id.is_real = jr.at("is_real").get<bool>();
      ex.provenance = provenance_from_name(jr.at("provenance").get<std::string>());
      ex.source_index = jr.at("source_index").get<int>();
      const std::string rel = jr.at("path").get<std::string>();
      const std::string path = (root / rel).string();
      const std::vector<std::uint8_t> bytes = read_file_bytes(path);
      if (sha256_hex(bytes.data(), bytes.size()) != jr.at("sha256").get<std::string>()) {
        throw DataIntegrityError("image '" + rel + "' does not match its recorded hash");
      }
      const nn::Tensor t = tensor_from_bytes(bytes);
      if (t.shape() != aug.image_shape) {
        throw DataIntegrityError("image '" + rel + "' does not match the manifest shape");
      }
      ex.image = t.data();

      const int rank = provenance_rank(ex.provenance);
      if (rank < last_rank) {
        throw DataIntegrityError("augmented manifest rows must order original, good, bad");
      }
      last_rank = rank;
      if (ex.provenance == Provenance::kOriginal) {
        if (!ex.id.is_real || ex.source_index != -1) {
          throw DataIntegrityError("original row " + rel + " carries generated metadata");
        }
        ++n_originals;
      } else {
        if (ex.source_index < 0 || ex.source_index >= n_originals) {
          throw DataIntegrityError("generated row " + rel + " references source " +
                                   std::to_string(ex.source_index) + " outside the originals");
        }
        if ((ex.provenance == Provenance::kGood) != ex.id.is_real) {
          throw DataIntegrityError("generated row " + rel + " has an inconsistent label tag");
        }
      }
      aug.examples.push_back(std::move(ex));
    }
  } catch (const json::exception& e) {
    throw DataIntegrityError("augmented manifest '" + manifest_path + "' is malformed: " +
                             e.what());
  }
  return aug;
}

fsl::FewShotPool pool_from_split(const data::LoadedDataset& ds, data::Split split) {
  if (ds.image_shape.size() != 3) {
    throw ShapeError("episode pools need a {channels,height,width} dataset shape");
  }
  fsl::FewShotPool pool;
  pool.image_shape = ds.image_shape;
  for (const auto& cls : ds.classes) {
    if (cls.split != split) continue;
    fsl::PoolClass pc;
    pc.id = {cls.id, true};
    pc.images = cls.images;
    pool.classes.push_back(std::move(pc));
  }
  if (pool.classes.empty()) {
    throw DataIntegrityError(std::string("split '") + data::split_name(split) +
                             "' holds no classes");
  }
  return pool;
}

fsl::FewShotPool pool_from_augmented(const AugmentedDataset& aug, const PoolBuildOptions& opts) {
  fsl::FewShotPool pool;
  pool.image_shape = aug.image_shape;

  std::unordered_map<int, std::size_t> real_pos;
  for (int idx : aug.real_classes) {
    real_pos[idx] = pool.classes.size();
    fsl::PoolClass pc;
    pc.id = {idx, true};
    pool.classes.push_back(std::move(pc));
  }
  std::unordered_map<int, std::size_t> fake_pos;
  if (opts.include_bad) {
    for (const auto& fc : aug.fake_classes) {
      fake_pos[fc.index] = pool.classes.size();
      fsl::PoolClass pc;
      pc.id = {fc.index, false};
      pc.paired_real = fc.paired_real;
      pool.classes.push_back(std::move(pc));
    }
  }

  std::unordered_map<int, int> originals_per_class;
  for (const auto& ex : aug.examples) {
    switch (ex.provenance) {
      case Provenance::kOriginal: {
        const auto it = real_pos.find(ex.id.index);
        if (it == real_pos.end()) {
          throw DataIntegrityError("example references unknown real class " +
                                   std::to_string(ex.id.index));
        }
        pool.classes[it->second].images.push_back(ex.image);
        ++originals_per_class[ex.id.index];
        break;
      }
      case Provenance::kGood: {
        if (!opts.include_good) break;
        const auto it = real_pos.find(ex.id.index);
        if (it == real_pos.end()) {
          throw DataIntegrityError("example references unknown real class " +
                                   std::to_string(ex.id.index));
        }
        pool.classes[it->second].images.push_back(ex.image);
        break;
      }
      case Provenance::kBad: {
        if (!opts.include_bad) break;
        const auto it = fake_pos.find(ex.id.index);
        if (it == fake_pos.end()) {
          throw DataIntegrityError("example references unknown fake class " +
                                   std::to_string(ex.id.index));
        }
        pool.classes[it->second].images.push_back(ex.image);
        break;
      }
    }
  }
  if (opts.include_good && !opts.good_as_queries) {
    for (auto& pc : pool.classes) {
      if (pc.id.is_real) pc.query_eligible = originals_per_class[pc.id.index];
    }
  }
  if (opts.include_bad) {
    // Drop fake classes that received no rows (sharpening disabled upstream).
    std::vector<fsl::PoolClass> kept;
    for (auto& pc : pool.classes) {
      if (pc.id.is_real || !pc.images.empty()) kept.push_back(std::move(pc));
    }
    pool.classes = std::move(kept);
  }
  return pool;
}

}  // namespace metadm::dm
