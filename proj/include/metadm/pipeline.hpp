#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metadm/dataset.hpp"
#include "metadm/episodic.hpp"
#include "metadm/metadm.hpp"
#include "metadm/run_config.hpp"

namespace metadm::pipe {

// Stage seeds derive from the run seed as mix(seed, tag), so stages draw
// from disjoint streams while one config value pins the whole run. The
// synthetic dataset uses the run seed directly; its renderer mixes in class
// and image indices itself.
inline constexpr std::uint64_t kSeedDiffusionInit = 1;
inline constexpr std::uint64_t kSeedDiffusionTrain = 2;
inline constexpr std::uint64_t kSeedGenerate = 3;
inline constexpr std::uint64_t kSeedFslInit = 4;
inline constexpr std::uint64_t kSeedFslTrain = 5;
inline constexpr std::uint64_t kSeedEval = 6;

// Artifact locations. Empty path fields in the config resolve to fixed
// names under output_dir.
std::string dataset_dir(const RunConfig& cfg);
std::string dataset_manifest_path(const RunConfig& cfg);
std::string denoiser_checkpoint_path(const RunConfig& cfg);
std::string diffusion_loss_csv_path(const RunConfig& cfg);
std::string augmented_dir(const RunConfig& cfg);
std::string augmented_manifest_path(const RunConfig& cfg);
std::string fsl_checkpoint_path(const RunConfig& cfg);
std::string fsl_train_csv_path(const RunConfig& cfg);
std::string fsl_val_csv_path(const RunConfig& cfg);
std::string fsl_summary_path(const RunConfig& cfg);
// tag distinguishes repeat evaluations (say 1-shot vs 5-shot) in one
// output directory; empty means the plain file names.
std::string eval_report_path(const RunConfig& cfg, const std::string& tag = "");
std::string eval_csv_path(const RunConfig& cfg, const std::string& tag = "");
std::string resolved_config_path(const RunConfig& cfg);
std::string digests_path(const RunConfig& cfg);
std::string access_log_path(const RunConfig& cfg);

// Creates output_dir, writes the resolved config and stamps the config
// digest and tool version into digests.json. Every stage calls this first,
// so any output directory is self-describing.
void prepare_output(const RunConfig& cfg);

// Renders the synthetic dataset into dataset_dir(cfg).
data::DatasetManifest run_synth(const RunConfig& cfg);

// Trains the denoiser on the train split; writes the checkpoint and a
// per-epoch loss CSV. Returns the loss curve.
std::vector<double> run_train_diffusion(const RunConfig& cfg);

// Builds and saves the augmented dataset per the metadm section.
dm::AugmentedDataset run_generate(const RunConfig& cfg);

struct FslRunResult {
  fsl::FslTrainLog log;
  // False means the control path: no augmented manifest (and no denoiser
  // output) was read, only the plain dataset.
  bool used_augmented = false;
};

// Episodic training; with both metadm modules disabled this is the control
// arm and reads nothing but the dataset. Writes checkpoint, loss CSV, val
// CSV and a summary JSON.
FslRunResult run_train_fsl(const RunConfig& cfg);

// Evaluates the trained embedding on the test split's real classes.
fsl::EvalReport run_eval(const RunConfig& cfg, const std::string& tag = "");

enum class AblationAxis { kModules, kGoodStrength, kBadStrength, kBadCount };

const char* ablation_axis_name(AblationAxis axis);
AblationAxis ablation_axis_from_name(const std::string& name);

struct AblationArm {
  std::string label;
  double value = 0.0;  // axis value; arm ordinal on the modules axis
  bool ok = false;
  std::string error;
  double mean_accuracy = 0.0;
  double ci95_halfwidth = 0.0;
};

struct AblationResult {
  AblationAxis axis = AblationAxis::kModules;
  std::vector<AblationArm> arms;
  std::string csv_path;
  std::string json_path;
};

// Shares one dataset (and, where needed, one denoiser and one generation
// pass) across arms, then trains and evaluates each arm in its own
// subdirectory. A failing arm is recorded and the sweep continues. The
// modules axis ignores `values` and runs the four completeness arms.
AblationResult run_ablation(const RunConfig& cfg, AblationAxis axis,
                            const std::vector<double>& values);

}  // namespace metadm::pipe
