#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metadm/config.hpp"
#include "metadm/dataset.hpp"
#include "metadm/metadm.hpp"

namespace metadm {

// Sections of the run configuration. Every field has a default, and the
// fully resolved set is echoed into the output directory, so a run can be
// reproduced from its artifacts alone. Path fields left empty resolve to
// fixed locations under output_dir (see pipeline.hpp).

struct DatasetSection {
  std::string dir;  // empty: <output_dir>/dataset
  std::string name = "synth";
  int n_classes = 16;
  int images_per_class = 40;
  std::vector<int> image_shape = {3, 32, 32};
  // All zero selects the automatic 50/25/25 class split; otherwise the three
  // counts must sum to n_classes. The default leaves five test classes so
  // 5-way evaluation works out of the box.
  int split_train = 8;
  int split_val = 3;
  int split_test = 5;
  float size_min = 0.35f;
  float size_max = 0.60f;
  float jitter = 0.15f;
  float noise = 0.05f;
};

struct DiffusionSection {
  int timesteps = 200;
  // The classic 1e-4..0.02 ramp rescaled to 200 steps.
  double beta_min = 5e-4;
  double beta_max = 0.1;
  int epochs = 20;
  int batch_size = 16;
  float lr = 1e-3f;
  std::string checkpoint;  // empty: <output_dir>/denoiser.ckpt
};

struct MetaDmSection {
  float good_strength = 0.05f;
  float bad_strength = 0.2f;
  dm::Strategy strategy = dm::Strategy::kSingleExtra;
  int bad_per_class = 5;
  bool augment = true;
  bool sharpen = true;
  std::string augmented_dir;  // empty: <output_dir>/augmented
};

struct FslSection {
  int n_way = 5;
  int k_shot = 1;
  int n_query_train = 5;
  int n_query_eval = 15;
  int episodes_train = 300;
  int episodes_eval = 600;
  float lr = 1e-3f;
  float lambda_reg = 1e-4f;
  int val_every = 100;
  int val_episodes = 60;
  bool good_as_queries = true;
  std::string checkpoint;  // empty: <output_dir>/fsl.ckpt
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/out";
  DatasetSection dataset;
  DiffusionSection diffusion;
  MetaDmSection metadm;
  FslSection fsl;
};

// Strict mapping between RunConfig and the INI carrier: unknown sections or
// keys are rejected, so typos in --set fail loudly. run_config_to emits
// every key, giving the canonical resolved form.
RunConfig run_config_from(const Config& c);
Config run_config_to(const RunConfig& rc);

// sha256 over the canonical serialized config; stamped into reports.
std::string run_config_digest(const RunConfig& rc);

// Stage parameter builders. stage_seed is the per-stage derivation of
// rc.seed (see pipeline.hpp).
data::SynthSpec synth_spec(const RunConfig& rc);
dm::MetaDMConfig metadm_config(const RunConfig& rc, std::uint64_t stage_seed);

}  // namespace metadm
