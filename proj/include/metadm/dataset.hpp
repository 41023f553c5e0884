#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metadm/tensor.hpp"

namespace metadm::data {

// Classes are split between train/val/test wholesale: a class contributes
// images to exactly one split, mirroring the standard few-shot protocol.
enum class Split { kTrain, kVal, kTest };

const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct ImageEntry {
  std::string path;  // relative to the manifest's directory
  std::string sha256;
};

struct ManifestClass {
  int id = 0;
  Split split = Split::kTrain;
  std::vector<ImageEntry> images;
};

struct DatasetManifest {
  std::string name;
  std::vector<int> image_shape;  // {channels, height, width}
  std::vector<ManifestClass> classes;
  std::string digest;    // hash over name, shape and the per-file hashes
  std::string root_dir;  // directory holding manifest.json; not serialized
};

struct SplitCounts {
  int train = 0;
  int val = 0;
  int test = 0;
};

// Class-level 50/25/25 split, rounded, with every split kept non-empty.
// Needs n_classes >= 3.
SplitCounts split_counts(int n_classes);

std::string manifest_digest(const DatasetManifest& m);

// Fills m.digest and m.root_dir, writes <dir>/manifest.json.
void save_manifest(DatasetManifest& m, const std::string& dir);
// Validates the digest, class uniqueness and that every image file exists.
// Image payloads are verified lazily, on load.
DatasetManifest load_manifest(const std::string& path);

// Verifies the recorded hash before decoding; returns a {C,H,W} tensor.
nn::Tensor load_image(const DatasetManifest& m, const ImageEntry& entry);

struct LoadedClass {
  int id = 0;
  Split split = Split::kTrain;
  std::vector<std::vector<float>> images;  // flat CHW, row-major
};

struct LoadedDataset {
  std::vector<int> image_shape;
  std::vector<LoadedClass> classes;

  std::size_t image_numel() const;
  int classes_in_split(Split s) const;
};

// Loads and hash-verifies every image up front. A 16x40 dataset of 3x32x32
// images is ~8 MB, so everything is kept resident.
LoadedDataset load_dataset(const DatasetManifest& m);

// Procedural dataset: 8 shape families crossed with hues, one (family, hue)
// pair per class, so any two classes differ in shape or color. Pixel values
// land in [-1,1]. Rendering is pure arithmetic (no libm transcendentals), so
// file bytes are reproducible across platforms.
struct SynthSpec {
  int n_classes = 16;
  int images_per_class = 40;
  std::vector<int> image_shape = {3, 32, 32};
  float size_min = 0.35f;  // shape radius, as a fraction of half min(H,W)
  float size_max = 0.60f;
  float jitter = 0.15f;  // center offset bound, as a fraction of min(H,W)
  float noise = 0.05f;   // uniform per-pixel noise amplitude
  std::uint64_t seed = 0;
  std::string name = "synth";
  // All zero means the automatic 50/25/25 split; otherwise the three counts
  // must be positive and sum to n_classes.
  SplitCounts split_override{};
};

// Renders every image deterministically from (seed, class, index) and writes
// the archive plus manifest.json under out_dir.
DatasetManifest synth_generate(const SynthSpec& spec, const std::string& out_dir);

// One image, rendered in isolation. Exposed for tests and inspection tools.
std::vector<float> synth_render(const SynthSpec& spec, int class_id, int index);

// Imports a directory-per-class folder of ordinary image files: each is
// decoded, bilinearly resized to the target shape and mapped to [-1,1], then
// stored in the same archive layout as synth_generate.
DatasetManifest ingest_folder(const std::string& src_dir, const std::string& out_dir,
                              const std::string& name, const std::vector<int>& image_shape,
                              SplitCounts split_override = {});

}  // namespace metadm::data
