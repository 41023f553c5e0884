#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metadm/dataset.hpp"
#include "metadm/diffusion.hpp"
#include "metadm/episodic.hpp"

namespace metadm::dm {

// How "bad" samples are labeled: one fake class per real class, or a single
// shared fake class fed by a small subsample of every class.
enum class Strategy { kPerClassExtra, kSingleExtra };

const char* strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

enum class Provenance { kOriginal, kGood, kBad };

const char* provenance_name(Provenance p);
Provenance provenance_from_name(const std::string& name);

struct MetaDMConfig {
  float good_strength = 0.05f;
  float bad_strength = 0.2f;
  Strategy strategy = Strategy::kSingleExtra;
  int bad_per_class = 5;  // single-extra subsample size per real class
  bool augment_enabled = true;
  bool sharpen_enabled = true;
  std::uint64_t seed = 0;
};

// Strengths must lie in [0,1], bad_per_class >= 1, and at least one of the
// two modules must be enabled.
void validate_config(const MetaDMConfig& cfg);

struct AugmentedExample {
  std::vector<float> image;  // flat CHW
  fsl::ClassId id;
  Provenance provenance = Provenance::kOriginal;
  // Row among the originals this was generated from; -1 on originals.
  int source_index = -1;
};

// Fake class indices continue after the highest real index in the dataset.
// paired_real names the real class a per-class-extra twin sharpens; -1 marks
// the shared single-extra class.
struct FakeClass {
  int index = 0;
  int paired_real = -1;
};

struct AugmentedDataset {
  std::vector<int> image_shape;
  std::vector<int> real_classes;  // real class indices, split order
  std::vector<FakeClass> fake_classes;
  // Originals first (class-major, image order), then good rows, then bad.
  std::vector<AugmentedExample> examples;
  MetaDMConfig config;
  std::string dataset_digest;
  std::string denoiser_digest;
  std::string manifest_digest;  // filled by save_augmented / load_augmented
};

// One generated image per original of the split at good_strength, keeping
// the source label. Image i draws from the stream mix(mix(seed,0), i) where
// i is its row among the originals, so outputs are order- and
// parallelism-independent.
std::vector<AugmentedExample> generate_good(const data::LoadedDataset& ds, data::Split split,
                                            diff::Denoiser& model,
                                            const diff::NoiseSchedule& schedule,
                                            const MetaDMConfig& cfg);

// One generated image per original at bad_strength, labeled with the fake
// twin of its source class. Streams mix(mix(seed,1), i).
std::vector<AugmentedExample> generate_bad_per_class(const data::LoadedDataset& ds,
                                                     data::Split split, diff::Denoiser& model,
                                                     const diff::NoiseSchedule& schedule,
                                                     const MetaDMConfig& cfg);

// Subsamples bad_per_class images per real class without replacement
// (per-class stream mix(mix(seed,2), class_position)), generates them at
// bad_strength into one shared fake class. A selected source keeps the same
// generation stream it would get under per-class-extra.
std::vector<AugmentedExample> generate_bad_single(const data::LoadedDataset& ds,
                                                  data::Split split, diff::Denoiser& model,
                                                  const diff::NoiseSchedule& schedule,
                                                  const MetaDMConfig& cfg);

// Originals plus whichever generated parts the config enables. The digests
// identify the inputs inside the manifest; they are not recomputed here.
AugmentedDataset build_augmented_dataset(const data::LoadedDataset& ds, data::Split split,
                                         diff::Denoiser& model,
                                         const diff::NoiseSchedule& schedule,
                                         const MetaDMConfig& cfg,
                                         const std::string& dataset_digest,
                                         const std::string& denoiser_digest);

// Writes <dir>/images/ex_#####.mdtf plus <dir>/manifest.json and fills
// aug.manifest_digest. The digest covers the whole manifest (config, input
// digests, per-file hashes), so rebuilding from identical inputs yields an
// identical digest.
void save_augmented(AugmentedDataset& aug, const std::string& dir);

// Verifies the manifest digest and every image hash before returning.
AugmentedDataset load_augmented(const std::string& manifest_path);

struct PoolBuildOptions {
  bool include_good = true;
  bool include_bad = true;
  // When false, good rows may serve as support but never as queries.
  bool good_as_queries = true;
};

// Real classes of one split as an episode pool, no pseudo-classes.
fsl::FewShotPool pool_from_split(const data::LoadedDataset& ds, data::Split split);

// Augmented training pool: good rows extend their real class, bad rows form
// pseudo-classes wired per their pairing.
fsl::FewShotPool pool_from_augmented(const AugmentedDataset& aug,
                                     const PoolBuildOptions& opts = {});

}  // namespace metadm::dm
