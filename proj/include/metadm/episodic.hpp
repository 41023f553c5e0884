#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "metadm/layers.hpp"
#include "metadm/rng.hpp"
#include "metadm/tensor.hpp"

namespace metadm::fsl {

// (index, is_real) is the class identity. Pseudo-classes built from generated
// samples carry is_real=false; they may serve as support ways but a sampled
// episode never queries them.
struct ClassId {
  int index = 0;
  bool is_real = true;
  friend bool operator==(const ClassId&, const ClassId&) = default;
};

// One class worth of flat CHW images. paired_real >= 0 marks a pseudo-class
// attached to that real class index; -1 on a pseudo-class means it joins
// every episode (the single-extra arrangement). query_eligible >= 0 restricts
// query draws to the first query_eligible images (-1 allows all); support may
// still use any image not drawn as a query.
struct PoolClass {
  ClassId id;
  int paired_real = -1;
  int query_eligible = -1;
  std::vector<std::vector<float>> images;
};

// Sampling universe for episodes: real classes plus optional pseudo-classes.
struct FewShotPool {
  std::vector<int> image_shape;  // {3,H,W}
  std::vector<PoolClass> classes;

  std::int64_t image_numel() const;
  int count_real() const;
};

// Position of an episode image inside its pool, for embedding caches.
struct ImageRef {
  int class_pos = 0;
  int image_pos = 0;
};

struct Episode {
  int n_way = 0;   // real ways; ways.size() includes attached pseudo-ways
  int k_shot = 0;
  std::vector<ClassId> ways;  // sampled real ways first, then pseudo-ways
  std::vector<std::pair<std::vector<float>, ClassId>> support;
  std::vector<std::pair<std::vector<float>, ClassId>> query;
  std::vector<ImageRef> support_refs;
  std::vector<ImageRef> query_refs;
};

// Uniformly picks n_way real classes (among those holding k_shot + n_query
// images and enough query-eligible ones) and disjoint support/query images
// per class, then attaches each eligible pseudo-class as an extra
// k_shot-sized support way: paired ones only when their real class was
// drawn, unpaired ones always.
Episode sample_episode(const FewShotPool& pool, int n_way, int k_shot, int n_query, Rng& rng);

// Four conv3x3-64 / norm / ReLU / pool-2x2 blocks, flattened. Input height
// and width must be divisible by 16. Inner convs are bias-free; the norms
// would cancel a bias exactly.
class Conv4 {
 public:
  static constexpr int kChannels = 64;

  explicit Conv4(Rng& rng, int in_channels = 3);
  Conv4(const Conv4&) = delete;
  Conv4& operator=(const Conv4&) = delete;
  Conv4(Conv4&&) = default;

  nn::Tensor forward(const nn::Tensor& x, bool training);
  static std::int64_t embed_dim(int height, int width);

  nn::Params& params() { return params_; }
  const nn::Params& params() const { return params_; }

 private:
  nn::Conv2d conv_[4];
  nn::BatchNorm2d bn_[4];
  nn::Params params_;
};

// In-graph support prototypes, one row per way in episode.ways order.
nn::Tensor episode_prototypes(const Episode& episode, Conv4& model, bool training);

// Eval-mode per-way mean embeddings in way order.
std::vector<std::pair<ClassId, std::vector<float>>> compute_prototypes(const Episode& episode,
                                                                       Conv4& model);

// Softmax over negative squared Euclidean distances, computed in double.
// One probability per prototype; sums to 1.
std::vector<double> classify_query(const std::vector<float>& query_image,
                                   const std::vector<int>& image_shape,
                                   const std::vector<std::pair<ClassId, std::vector<float>>>& protos,
                                   Conv4& model);

// Masked episodic loss: -(1/Q) sum_i m_i log p(label_i) + lambda * ||theta||^2
// with m_i = 1 only for real-class queries. Pseudo-ways still compete inside
// the softmax. Q counts every query row, masked or not.
nn::Tensor episode_loss(const Episode& episode, Conv4& model, float lambda_reg,
                        bool training = true);

struct EvalReport {
  int n_episodes = 0;
  int n_way = 0;
  int k_shot = 0;
  double mean_accuracy = 0.0;
  double ci95_halfwidth = 0.0;  // 1.96 * sample std / sqrt(n)
  std::uint64_t seed = 0;
  std::string config_digest;
  std::vector<double> per_episode_accuracies;
};

struct EvalOptions {
  int n_episodes = 600;
  int n_way = 5;
  int k_shot = 1;
  int n_query = 15;
  std::uint64_t seed = 0;
  // Pseudo-ways normally stay out of measurement episodes; flip to include
  // them as competing prototypes (queries stay real either way).
  bool include_fake_ways = false;
  std::string config_digest;
};

// Predicted way index per query row. The per-episode rng stream is handed in
// so stub predictors stay reproducible.
using Predictor = std::function<std::vector<int>(const Episode&, Rng&)>;

// Episode e draws from an rng seeded with mix(seed, e), so a parallel and a
// serial sweep aggregate identical reports.
EvalReport evaluate_with(const FewShotPool& pool, const Predictor& predict,
                         const EvalOptions& opts);

// Model-backed evaluation: embeds the whole pool once in eval mode (bitwise
// identical to per-episode embedding), then scores episodes in double
// precision. Distance argmax ties resolve to the lowest way index.
EvalReport evaluate(const FewShotPool& pool, Conv4& model, const EvalOptions& opts);

std::string eval_report_to_json(const EvalReport& report);
void save_eval_report(const std::string& path, const EvalReport& report);
// CSV of (episode_index, accuracy) rows.
void save_episode_csv(const std::string& path, const EvalReport& report);

struct FslTrainOptions {
  int episodes = 2000;
  int n_way = 5;
  int k_shot = 1;
  int n_query = 10;
  float lr = 1e-3f;
  float lambda_reg = 1e-4f;
  std::uint64_t seed = 0;
  int val_every = 250;    // 0 disables validation
  int val_episodes = 100;
};

struct FslTrainLog {
  std::vector<double> episode_losses;
  std::vector<std::pair<int, double>> val_curve;  // (episode index, accuracy)
  double best_val_accuracy = -1.0;
  // Training episodes that carried at least one pseudo-way; stays 0 when the
  // pool has no pseudo-classes, which is what a control run asserts.
  int episodes_with_fake_ways = 0;
};

// Episodic Adam training. When validation runs, the best-scoring parameters
// are restored into the model at the end; val episodes use as many ways as
// the validation pool supports, capped at n_way. Aborts on non-finite loss.
FslTrainLog train_fsl(Conv4& model, const FewShotPool& train_pool, const FewShotPool& val_pool,
                      const FslTrainOptions& opts);

}  // namespace metadm::fsl
