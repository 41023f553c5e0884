#include "metadm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "json.hpp"
#include "metadm/digest.hpp"
#include "metadm/errors.hpp"
#include "metadm/rng.hpp"
#include "metadm/tensor_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace metadm::data {

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    default: return "test";
  }
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw DataIntegrityError("unknown split name '" + name + "'");
}

SplitCounts split_counts(int n_classes) {
  if (n_classes < 3) {
    throw ConfigError("need at least 3 classes to form train/val/test splits, got " +
                      std::to_string(n_classes));
  }
  SplitCounts c;
  c.train = std::max(1, static_cast<int>(std::lround(n_classes * 0.5)));
  c.val = std::max(1, static_cast<int>(std::lround(n_classes * 0.25)));
  c.test = n_classes - c.train - c.val;
  while (c.test < 1) {
    if (c.train > 1) {
      --c.train;
    } else {
      --c.val;
    }
    c.test = n_classes - c.train - c.val;
  }
  return c;
}

std::string manifest_digest(const DatasetManifest& m) {
  Sha256 h;
  h.update("dataset " + m.name + "\n");
  std::string shape = "shape";
  for (int d : m.image_shape) shape += " " + std::to_string(d);
  h.update(shape + "\n");
  for (const auto& cls : m.classes) {
    h.update("class " + std::to_string(cls.id) + " " + split_name(cls.split) + "\n");
    for (const auto& img : cls.images) h.update(img.path + " " + img.sha256 + "\n");
  }
  return h.hex();
}

void save_manifest(DatasetManifest& m, const std::string& dir) {
  m.digest = manifest_digest(m);
  m.root_dir = dir;
  json root;
  root["name"] = m.name;
  root["image_shape"] = m.image_shape;
  root["digest"] = m.digest;
  json classes = json::array();
  for (const auto& cls : m.classes) {
    json images = json::array();
    for (const auto& img : cls.images) {
      images.push_back({{"path", img.path}, {"sha256", img.sha256}});
    }
    classes.push_back({{"id", cls.id}, {"split", split_name(cls.split)}, {"images", images}});
  }
  root["classes"] = classes;
  const std::string path = (fs::path(dir) / "manifest.json").string();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataIntegrityError("cannot write '" + path + "'");
  out << root.dump(2) << "\n";
  if (!out) throw DataIntegrityError("write to '" + path + "' failed");
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataIntegrityError("cannot open manifest '" + path + "'");
  json root;
  try {
    in >> root;
  } catch (const json::exception& e) {
    throw DataIntegrityError("manifest '" + path + "' is not valid JSON: " + e.what());
  }

  DatasetManifest m;
  try {
    m.name = root.at("name").get<std::string>();
    m.image_shape = root.at("image_shape").get<std::vector<int>>();
    m.digest = root.at("digest").get<std::string>();
    for (const auto& jc : root.at("classes")) {
      ManifestClass cls;
      cls.id = jc.at("id").get<int>();
      cls.split = split_from_name(jc.at("split").get<std::string>());
      for (const auto& ji : jc.at("images")) {
        cls.images.push_back({ji.at("path").get<std::string>(), ji.at("sha256").get<std::string>()});
      }
      m.classes.push_back(std::move(cls));
    }
  } catch (const json::exception& e) {
    throw DataIntegrityError("manifest '" + path + "' is malformed: " + e.what());
  }
  m.root_dir = fs::path(path).parent_path().string();
  if (m.root_dir.empty()) m.root_dir = ".";

  if (m.image_shape.size() != 3 || m.image_shape[0] < 1 || m.image_shape[1] < 1 ||
      m.image_shape[2] < 1) {
    throw DataIntegrityError("manifest '" + path + "' declares an invalid image shape");
  }
  std::vector<int> seen_ids;
  for (const auto& cls : m.classes) {
    if (cls.id < 0) {
      throw DataIntegrityError("manifest '" + path + "' has a negative class id");
    }
    if (std::find(seen_ids.begin(), seen_ids.end(), cls.id) != seen_ids.end()) {
      throw DataIntegrityError("manifest '" + path + "' lists class " + std::to_string(cls.id) +
                               " more than once; class splits must be disjoint");
    }
    seen_ids.push_back(cls.id);
    if (cls.images.empty()) {
      throw DataIntegrityError("manifest '" + path + "' has class " + std::to_string(cls.id) +
                               " with no images");
    }
    for (const auto& img : cls.images) {
      if (!fs::exists(fs::path(m.root_dir) / img.path)) {
        throw DataIntegrityError("manifest '" + path + "' references missing file '" + img.path +
                                 "'");
      }
    }
  }
  const std::string want = manifest_digest(m);
  if (want != m.digest) {
    throw DataIntegrityError("manifest '" + path + "' digest mismatch: stored " + m.digest +
                             ", computed " + want);
  }
  return m;
}

nn::Tensor load_image(const DatasetManifest& m, const ImageEntry& entry) {
  const std::string full = (fs::path(m.root_dir) / entry.path).string();
  std::ifstream in(full, std::ios::binary);
  if (!in) throw DataIntegrityError("cannot open '" + full + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  const std::string got = sha256_hex(bytes.data(), bytes.size());
  if (got != entry.sha256) {
    throw DataIntegrityError("digest mismatch for '" + entry.path + "': expected " + entry.sha256 +
                             ", file hashes to " + got);
  }
  nn::Tensor t = tensor_from_bytes(bytes);
  if (t.shape() != m.image_shape) {
    throw DataIntegrityError("image '" + entry.path + "' does not match the manifest shape");
  }
  return t;
}

std::size_t LoadedDataset::image_numel() const {
  std::size_t n = 1;
  for (int d : image_shape) n *= static_cast<std::size_t>(d);
  return n;
}

int LoadedDataset::classes_in_split(Split s) const {
  int n = 0;
  for (const auto& cls : classes) n += cls.split == s ? 1 : 0;
  return n;
}

LoadedDataset load_dataset(const DatasetManifest& m) {
  LoadedDataset out;
  out.image_shape = m.image_shape;
  for (const auto& cls : m.classes) {
    LoadedClass lc;
    lc.id = cls.id;
    lc.split = cls.split;
    for (const auto& img : cls.images) lc.images.push_back(load_image(m, img).data());
    out.classes.push_back(std::move(lc));
  }
  return out;
}

namespace {

struct Rgb {
  double r = 0.0, g = 0.0, b = 0.0;
};

// Arithmetic-only HSV to RGB; h wraps, s and v in [0,1].
Rgb hsv_to_rgb(double h, double s, double v) {
  const double h6 = (h - std::floor(h)) * 6.0;
  const int i = static_cast<int>(h6);
  const double f = h6 - i;
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (i % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

double edge_side(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

// Foreground weight of the pixel at offset (dx, dy) from the shape center,
// for a shape of radius r. 0 is background, 1 foreground; the gradient
// family returns intermediate values.
double shape_blend(int family, double dx, double dy, double r) {
  const double d2 = dx * dx + dy * dy;
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (family) {
    case 0:  // disk
      return d2 <= r * r ? 1.0 : 0.0;
    case 1:  // square
      return std::max(ax, ay) <= 0.9 * r ? 1.0 : 0.0;
    case 2: {  // triangle, apex up
      const double s1 = edge_side(0.0, -r, -0.95 * r, 0.75 * r, dx, dy);
      const double s2 = edge_side(-0.95 * r, 0.75 * r, 0.95 * r, 0.75 * r, dx, dy);
      const double s3 = edge_side(0.95 * r, 0.75 * r, 0.0, -r, dx, dy);
      const bool inside = (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0);
      return inside ? 1.0 : 0.0;
    }
    case 3:  // cross
      return ((ax <= 0.32 * r && ay <= r) || (ay <= 0.32 * r && ax <= r)) ? 1.0 : 0.0;
    case 4:  // ring
      return (d2 >= 0.3 * r * r && d2 <= r * r) ? 1.0 : 0.0;
    case 5:  // horizontal bar
      return (ax <= r && ay <= 0.35 * r) ? 1.0 : 0.0;
    case 6: {  // 4x4 checker patch
      if (std::max(ax, ay) > 0.95 * r) return 0.0;
      const int ix = static_cast<int>(std::floor((dx + r) / (0.5 * r)));
      const int iy = static_cast<int>(std::floor((dy + r) / (0.5 * r)));
      return ((ix + iy) & 1) != 0 ? 1.0 : 0.0;
    }
    default:  // left-to-right gradient patch
      if (std::max(ax, ay) > r) return 0.0;
      return (dx + r) / (2.0 * r);
  }
}

void validate_image_shape(const std::vector<int>& shape) {
  if (shape.size() != 3 || shape[0] != 3 || shape[1] < 8 || shape[2] < 8) {
    std::string got;
    for (int d : shape) got += (got.empty() ? "" : "x") + std::to_string(d);
    throw ConfigError("image shape must be 3xHxW with H, W >= 8, got [" + got + "]");
  }
}

void validate_spec(const SynthSpec& spec) {
  if (spec.n_classes < 3) {
    throw ConfigError("n_classes must be at least 3 so every split gets a class, got " +
                      std::to_string(spec.n_classes));
  }
  if (spec.images_per_class < 1) {
    throw ConfigError("images_per_class must be positive, got " +
                      std::to_string(spec.images_per_class));
  }
  validate_image_shape(spec.image_shape);
  if (!(spec.size_min > 0.0f) || !(spec.size_max <= 1.0f) || spec.size_min > spec.size_max) {
    throw ConfigError("size range must satisfy 0 < size_min <= size_max <= 1");
  }
  if (spec.jitter < 0.0f || spec.noise < 0.0f) {
    throw ConfigError("jitter and noise must be non-negative");
  }
}

std::string class_dir_name(int id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "class_%04d", id);
  return buf;
}

std::string image_file_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%05d.mdtf", index);
  return buf;
}

Split split_for_class(int id, const SplitCounts& counts) {
  if (id < counts.train) return Split::kTrain;
  if (id < counts.train + counts.val) return Split::kVal;
  return Split::kTest;
}

SplitCounts resolve_split(int n_classes, const SplitCounts& override_counts) {
  if (override_counts.train == 0 && override_counts.val == 0 && override_counts.test == 0) {
    return split_counts(n_classes);
  }
  if (override_counts.train < 1 || override_counts.val < 1 || override_counts.test < 1 ||
      override_counts.train + override_counts.val + override_counts.test != n_classes) {
    throw ConfigError("split override " + std::to_string(override_counts.train) + "/" +
                      std::to_string(override_counts.val) + "/" +
                      std::to_string(override_counts.test) +
                      " must be positive and sum to n_classes (" + std::to_string(n_classes) +
                      ")");
  }
  return override_counts;
}

ImageEntry write_image(const std::string& out_dir, int class_id, int index, const nn::Tensor& t) {
  const std::string rel =
      (fs::path("images") / class_dir_name(class_id) / image_file_name(index)).string();
  const std::vector<std::uint8_t> bytes = tensor_to_bytes(t);
  const std::string full = (fs::path(out_dir) / rel).string();
  std::ofstream out(full, std::ios::binary);
  if (!out) throw DataIntegrityError("cannot write '" + full + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw DataIntegrityError("write to '" + full + "' failed");
  return {rel, sha256_hex(bytes.data(), bytes.size())};
}

}  // namespace

std::vector<float> synth_render(const SynthSpec& spec, int class_id, int index) {
  const int h = spec.image_shape[1], w = spec.image_shape[2];
  const double side = std::min(h, w);
  Rng rng(Rng::mix(Rng::mix(spec.seed, static_cast<std::uint64_t>(class_id)),
                   static_cast<std::uint64_t>(index)));

  const int family = class_id % 8;
  const double hue = 0.07 + 0.61803398874989485 * (class_id / 8);
  const Rgb fg = hsv_to_rgb(hue, 0.75, 0.95);
  const Rgb bg = hsv_to_rgb(hue + 0.5, 0.35, 0.20);

  const double r =
      (spec.size_min + rng.uniform() * (spec.size_max - spec.size_min)) * 0.5 * side;
  const double cx = 0.5 * w + (2.0 * rng.uniform() - 1.0) * spec.jitter * side;
  const double cy = 0.5 * h + (2.0 * rng.uniform() - 1.0) * spec.jitter * side;

  std::vector<float> out(static_cast<std::size_t>(3) * h * w);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double t = shape_blend(family, x + 0.5 - cx, y + 0.5 - cy, r);
      const double rgb[3] = {bg.r + t * (fg.r - bg.r), bg.g + t * (fg.g - bg.g),
                             bg.b + t * (fg.b - bg.b)};
      for (int c = 0; c < 3; ++c) {
        double v = rgb[c] * 2.0 - 1.0 + (2.0 * rng.uniform() - 1.0) * spec.noise;
        v = std::min(1.0, std::max(-1.0, v));
        out[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * w + x] =
            static_cast<float>(v);
      }
    }
  }
  return out;
}

DatasetManifest synth_generate(const SynthSpec& spec, const std::string& out_dir) {
  validate_spec(spec);
  const SplitCounts counts = resolve_split(spec.n_classes, spec.split_override);

  DatasetManifest m;
  m.name = spec.name;
  m.image_shape = spec.image_shape;
  for (int c = 0; c < spec.n_classes; ++c) {
    fs::create_directories(fs::path(out_dir) / "images" / class_dir_name(c));
    ManifestClass cls;
    cls.id = c;
    cls.split = split_for_class(c, counts);
    for (int i = 0; i < spec.images_per_class; ++i) {
      nn::Tensor t = nn::Tensor::from_data(spec.image_shape, synth_render(spec, c, i));
      cls.images.push_back(write_image(out_dir, c, i, t));
    }
    m.classes.push_back(std::move(cls));
  }
  save_manifest(m, out_dir);
  return m;
}

DatasetManifest ingest_folder(const std::string& src_dir, const std::string& out_dir,
                              const std::string& name, const std::vector<int>& image_shape,
                              SplitCounts split_override) {
  validate_image_shape(image_shape);
  if (!fs::is_directory(src_dir)) {
    throw ConfigError("ingestion source '" + src_dir + "' is not a directory");
  }
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(src_dir)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.size() < 3) {
    throw ConfigError("ingestion needs at least 3 class directories under '" + src_dir +
                      "', found " + std::to_string(class_dirs.size()));
  }

  const int h = image_shape[1], w = image_shape[2];
  const SplitCounts counts = resolve_split(static_cast<int>(class_dirs.size()), split_override);
  DatasetManifest m;
  m.name = name;
  m.image_shape = image_shape;
  for (std::size_t ci = 0; ci < class_dirs.size(); ++ci) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[ci])) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
      throw DataIntegrityError("class directory '" + class_dirs[ci].string() + "' has no images");
    }

    const int id = static_cast<int>(ci);
    fs::create_directories(fs::path(out_dir) / "images" / class_dir_name(id));
    ManifestClass cls;
    cls.id = id;
    cls.split = split_for_class(id, counts);
    for (std::size_t fi = 0; fi < files.size(); ++fi) {
      const cv::Mat raw = cv::imread(files[fi].string(), cv::IMREAD_COLOR);
      if (raw.empty()) {
        throw DataIntegrityError("cannot decode image '" + files[fi].string() + "'");
      }
      cv::Mat rgb;
      cv::cvtColor(raw, rgb, cv::COLOR_BGR2RGB);
      cv::Mat resized;
      cv::resize(rgb, resized, cv::Size(w, h), 0, 0, cv::INTER_LINEAR);

      std::vector<float> chw(static_cast<std::size_t>(3) * h * w);
      const std::size_t plane = static_cast<std::size_t>(h) * w;
      for (int y = 0; y < h; ++y) {
        const auto* row = resized.ptr<cv::Vec3b>(y);
        for (int x = 0; x < w; ++x) {
          for (int c = 0; c < 3; ++c) {
            chw[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * w + x] =
                static_cast<float>(row[x][c]) / 127.5f - 1.0f;
          }
        }
      }
      nn::Tensor t = nn::Tensor::from_data(image_shape, std::move(chw));
      cls.images.push_back(write_image(out_dir, id, static_cast<int>(fi), t));
    }
    m.classes.push_back(std::move(cls));
  }
  save_manifest(m, out_dir);
  return m;
}

}  // namespace metadm::data
