#include "metadm/episodic.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "metadm/errors.hpp"
#include "metadm/optim.hpp"

namespace metadm::fsl {

std::int64_t FewShotPool::image_numel() const {
  std::int64_t n = 1;
  for (int d : image_shape) n *= d;
  return n;
}

int FewShotPool::count_real() const {
  int n = 0;
  for (const auto& c : classes) n += c.id.is_real ? 1 : 0;
  return n;
}

namespace {

int way_index(const std::vector<ClassId>& ways, const ClassId& id, const char* where) {
  for (std::size_t w = 0; w < ways.size(); ++w) {
    if (ways[w] == id) return static_cast<int>(w);
  }
  throw ConfigError(std::string(where) + ": class not among episode ways");
}

nn::Tensor image_batch(const std::vector<std::pair<std::vector<float>, ClassId>>& items,
                       const std::vector<int>& image_shape) {
  const std::size_t numel = static_cast<std::size_t>(image_shape[0]) *
                            static_cast<std::size_t>(image_shape[1]) *
                            static_cast<std::size_t>(image_shape[2]);
  std::vector<float> data(items.size() * numel);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].first.size() != numel) {
      throw ShapeError("episode image does not match the pool image shape");
    }
    std::copy(items[i].first.begin(), items[i].first.end(),
              data.begin() + static_cast<std::ptrdiff_t>(i * numel));
  }
  return nn::Tensor::from_data({static_cast<int>(items.size()), image_shape[0], image_shape[1],
                                image_shape[2]},
                               std::move(data));
}

FewShotPool strip_pseudo(const FewShotPool& pool) {
  FewShotPool out;
  out.image_shape = pool.image_shape;
  for (const auto& c : pool.classes) {
    if (c.id.is_real) out.classes.push_back(c);
  }
  return out;
}

// Episodes carry flat images without the pool's shape, so batch shapes are
// recovered from the row size; only square 3-channel images round-trip.
std::vector<int> infer_shape(const std::vector<std::pair<std::vector<float>, ClassId>>& items) {
  if (items.empty()) throw ConfigError("episode has no samples to infer a shape from");
  const std::size_t numel = items[0].first.size();
  if (numel % 3 != 0) throw ShapeError("episode images must be 3-channel");
  const auto plane = static_cast<double>(numel) / 3.0;
  const int side = static_cast<int>(std::lround(std::sqrt(plane)));
  if (static_cast<std::size_t>(side) * static_cast<std::size_t>(side) * 3 != numel) {
    throw ShapeError("episode images must be square to infer their shape");
  }
  return {3, side, side};
}

bool has_pseudo(const FewShotPool& pool) {
  for (const auto& c : pool.classes) {
    if (!c.id.is_real) return true;
  }
  return false;
}

}  // namespace

Episode sample_episode(const FewShotPool& pool, int n_way, int k_shot, int n_query, Rng& rng) {
  if (n_way < 1 || k_shot < 1 || n_query < 1) {
    throw ConfigError("sample_episode: n_way, k_shot and n_query must be positive");
  }
  if (pool.image_shape.size() != 3) throw ConfigError("sample_episode: pool has no image shape");
  const int need = k_shot + n_query;

  std::vector<int> eligible;  // positions of real classes with enough images
  for (std::size_t p = 0; p < pool.classes.size(); ++p) {
    const auto& c = pool.classes[p];
    const bool enough_queries = c.query_eligible < 0 || c.query_eligible >= n_query;
    if (c.id.is_real && static_cast<int>(c.images.size()) >= need && enough_queries) {
      eligible.push_back(static_cast<int>(p));
    }
  }
  if (static_cast<int>(eligible.size()) < n_way) {
    throw DataIntegrityError("sample_episode: need " + std::to_string(n_way) +
                             " real classes with at least " + std::to_string(need) +
                             " images, found " + std::to_string(eligible.size()));
  }

  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;

  const std::vector<int> picks = rng.sample_without_replacement(
      static_cast<int>(eligible.size()), n_way);
  std::vector<int> real_positions;
  for (int pick : picks) real_positions.push_back(eligible[static_cast<std::size_t>(pick)]);
  for (int pos : real_positions) ep.ways.push_back(pool.classes[static_cast<std::size_t>(pos)].id);

  for (int pos : real_positions) {
    const auto& cls = pool.classes[static_cast<std::size_t>(pos)];
    std::vector<int> sup_idx, qry_idx;
    if (cls.query_eligible < 0) {
      const std::vector<int> idx =
          rng.sample_without_replacement(static_cast<int>(cls.images.size()), need);
      sup_idx.assign(idx.begin(), idx.begin() + k_shot);
      qry_idx.assign(idx.begin() + k_shot, idx.end());
    } else {
      // Queries come from the eligible prefix, support from whatever is left.
      qry_idx = rng.sample_without_replacement(cls.query_eligible, n_query);
      std::vector<char> taken(cls.images.size(), 0);
      for (int i : qry_idx) taken[static_cast<std::size_t>(i)] = 1;
      std::vector<int> rest;
      for (std::size_t i = 0; i < cls.images.size(); ++i) {
        if (!taken[i]) rest.push_back(static_cast<int>(i));
      }
      for (int r : rng.sample_without_replacement(static_cast<int>(rest.size()), k_shot)) {
        sup_idx.push_back(rest[static_cast<std::size_t>(r)]);
      }
    }
    for (int i : sup_idx) {
      ep.support.emplace_back(cls.images[static_cast<std::size_t>(i)], cls.id);
      ep.support_refs.push_back({pos, i});
    }
    for (int i : qry_idx) {
      ep.query.emplace_back(cls.images[static_cast<std::size_t>(i)], cls.id);
      ep.query_refs.push_back({pos, i});
    }
  }

  // Pseudo-ways join as extra support in pool order: paired ones follow their
  // drawn real class, unpaired ones every episode.
  for (std::size_t p = 0; p < pool.classes.size(); ++p) {
    const auto& cls = pool.classes[p];
    if (cls.id.is_real) continue;
    if (cls.paired_real >= 0) {
      bool drawn = false;
      for (int pos : real_positions) {
        if (pool.classes[static_cast<std::size_t>(pos)].id.index == cls.paired_real) {
          drawn = true;
          break;
        }
      }
      if (!drawn) continue;
    }
    if (static_cast<int>(cls.images.size()) < k_shot) {
      throw DataIntegrityError("sample_episode: pseudo-class " + std::to_string(cls.id.index) +
                               " holds " + std::to_string(cls.images.size()) +
                               " images, need " + std::to_string(k_shot));
    }
    const std::vector<int> idx =
        rng.sample_without_replacement(static_cast<int>(cls.images.size()), k_shot);
    ep.ways.push_back(cls.id);
    for (int i : idx) {
      ep.support.emplace_back(cls.images[static_cast<std::size_t>(i)], cls.id);
      ep.support_refs.push_back({static_cast<int>(p), i});
    }
  }
  return ep;
}

Conv4::Conv4(Rng& rng, int in_channels) {
  int in = in_channels;
  for (int b = 0; b < 4; ++b) {
    conv_[b] = nn::Conv2d(in, kChannels, 3, 1, 1, false, rng);
    bn_[b] = nn::BatchNorm2d(kChannels);
    in = kChannels;
  }
  for (int b = 0; b < 4; ++b) {
    const std::string prefix = "block" + std::to_string(b + 1);
    conv_[b].register_into(params_, prefix + ".conv");
    bn_[b].register_into(params_, prefix + ".bn");
  }
}

std::int64_t Conv4::embed_dim(int height, int width) {
  return static_cast<std::int64_t>(kChannels) * (height / 16) * (width / 16);
}

nn::Tensor Conv4::forward(const nn::Tensor& x, bool training) {
  if (x.ndim() != 4) throw ShapeError("Conv4 expects a [B,C,H,W] batch");
  if (x.dim(2) % 16 != 0 || x.dim(3) % 16 != 0) {
    throw ShapeError("Conv4 needs height and width divisible by 16, got " +
                     std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)));
  }
  nn::Tensor h = x;
  for (int b = 0; b < 4; ++b) {
    h = nn::maxpool2x2(nn::relu(bn_[b].forward(conv_[b].forward(h), training)));
  }
  return nn::flatten(h);
}

nn::Tensor episode_prototypes(const Episode& episode, Conv4& model, bool training) {
  if (episode.support.empty()) throw ConfigError("episode has no support samples");
  const std::vector<int> shape = infer_shape(episode.support);
  std::vector<int> group_of(episode.support.size());
  for (std::size_t s = 0; s < episode.support.size(); ++s) {
    group_of[s] = way_index(episode.ways, episode.support[s].second, "episode_prototypes");
  }
  const nn::Tensor emb = model.forward(image_batch(episode.support, shape), training);
  return nn::class_means(emb, group_of, static_cast<int>(episode.ways.size()));
}

std::vector<std::pair<ClassId, std::vector<float>>> compute_prototypes(const Episode& episode,
                                                                       Conv4& model) {
  nn::NoGradGuard ng;
  const nn::Tensor protos = episode_prototypes(episode, model, false);
  const auto dim = static_cast<std::size_t>(protos.dim(1));
  std::vector<std::pair<ClassId, std::vector<float>>> out;
  for (std::size_t w = 0; w < episode.ways.size(); ++w) {
    out.emplace_back(episode.ways[w],
                     std::vector<float>(protos.data().begin() + static_cast<std::ptrdiff_t>(w * dim),
                                        protos.data().begin() +
                                            static_cast<std::ptrdiff_t>((w + 1) * dim)));
  }
  return out;
}

std::vector<double> classify_query(const std::vector<float>& query_image,
                                   const std::vector<int>& image_shape,
                                   const std::vector<std::pair<ClassId, std::vector<float>>>& protos,
                                   Conv4& model) {
  if (protos.empty()) throw ConfigError("classify_query: no prototypes");
  nn::NoGradGuard ng;
  std::vector<float> data = query_image;
  const nn::Tensor emb = model.forward(
      nn::Tensor::from_data({1, image_shape[0], image_shape[1], image_shape[2]}, std::move(data)),
      false);
  const auto dim = static_cast<std::size_t>(emb.dim(1));
  std::vector<double> logits(protos.size());
  for (std::size_t k = 0; k < protos.size(); ++k) {
    if (protos[k].second.size() != dim) {
      throw ShapeError("classify_query: prototype dimension mismatch");
    }
    double d2 = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      const double diff = static_cast<double>(emb.data()[d]) - protos[k].second[d];
      d2 += diff * diff;
    }
    logits[k] = -d2;
  }
  const double m = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  std::vector<double> probs(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) {
    probs[k] = std::exp(logits[k] - m);
    total += probs[k];
  }
  for (auto& p : probs) p /= total;
  return probs;
}

nn::Tensor episode_loss(const Episode& episode, Conv4& model, float lambda_reg, bool training) {
  if (lambda_reg < 0.0f) throw ConfigError("episode_loss: lambda must be non-negative");
  if (episode.support.empty()) throw ConfigError("episode has no support samples");
  if (episode.query.empty()) throw ConfigError("episode has no query samples");
  const std::vector<int> shape = infer_shape(episode.support);

  std::vector<int> group_of(episode.support.size());
  for (std::size_t s = 0; s < episode.support.size(); ++s) {
    group_of[s] = way_index(episode.ways, episode.support[s].second, "episode_loss");
  }
  std::vector<int> labels(episode.query.size());
  std::vector<float> mask(episode.query.size());
  for (std::size_t q = 0; q < episode.query.size(); ++q) {
    labels[q] = way_index(episode.ways, episode.query[q].second, "episode_loss");
    mask[q] = episode.query[q].second.is_real ? 1.0f : 0.0f;
  }

  const nn::Tensor support_emb = model.forward(image_batch(episode.support, shape), training);
  const nn::Tensor query_emb = model.forward(image_batch(episode.query, shape), training);
  const nn::Tensor protos =
      nn::class_means(support_emb, group_of, static_cast<int>(episode.ways.size()));
  const nn::Tensor logits = nn::neg_sqdist(query_emb, protos);
  return nn::add(nn::masked_nll(logits, labels, mask),
                 nn::l2_penalty(model.params().trainable(), lambda_reg));
}

namespace {

void validate_eval_options(const EvalOptions& opts) {
  if (opts.n_episodes < 2) throw ConfigError("evaluation needs at least 2 episodes");
  if (opts.n_way < 1 || opts.k_shot < 1 || opts.n_query < 1) {
    throw ConfigError("evaluation needs positive n_way, k_shot and n_query");
  }
}

EvalReport aggregate(std::vector<double> accuracies, const EvalOptions& opts) {
  EvalReport r;
  r.n_episodes = opts.n_episodes;
  r.n_way = opts.n_way;
  r.k_shot = opts.k_shot;
  r.seed = opts.seed;
  r.config_digest = opts.config_digest;
  double total = 0.0;
  for (double a : accuracies) total += a;
  r.mean_accuracy = total / static_cast<double>(accuracies.size());
  double ss = 0.0;
  for (double a : accuracies) ss += (a - r.mean_accuracy) * (a - r.mean_accuracy);
  const double sample_std = std::sqrt(ss / static_cast<double>(accuracies.size() - 1));
  r.ci95_halfwidth = 1.96 * sample_std / std::sqrt(static_cast<double>(accuracies.size()));
  r.per_episode_accuracies = std::move(accuracies);
  return r;
}

}  // namespace

EvalReport evaluate_with(const FewShotPool& pool, const Predictor& predict,
                         const EvalOptions& opts) {
  validate_eval_options(opts);
  const FewShotPool* use = &pool;
  FewShotPool stripped;
  if (!opts.include_fake_ways && has_pseudo(pool)) {
    stripped = strip_pseudo(pool);
    use = &stripped;
  }
  std::vector<double> accuracies(static_cast<std::size_t>(opts.n_episodes), 0.0);
  for (int e = 0; e < opts.n_episodes; ++e) {
    Rng rng(Rng::mix(opts.seed, static_cast<std::uint64_t>(e)));
    const Episode ep = sample_episode(*use, opts.n_way, opts.k_shot, opts.n_query, rng);
    const std::vector<int> preds = predict(ep, rng);
    if (preds.size() != ep.query.size()) {
      throw ConfigError("predictor returned a wrong number of predictions");
    }
    int correct = 0;
    for (std::size_t q = 0; q < ep.query.size(); ++q) {
      const int truth = way_index(ep.ways, ep.query[q].second, "evaluate");
      if (preds[q] == truth) ++correct;
    }
    accuracies[static_cast<std::size_t>(e)] =
        static_cast<double>(correct) / static_cast<double>(ep.query.size());
  }
  return aggregate(std::move(accuracies), opts);
}

EvalReport evaluate(const FewShotPool& pool, Conv4& model, const EvalOptions& opts) {
  validate_eval_options(opts);
  FewShotPool work = (!opts.include_fake_ways && has_pseudo(pool)) ? strip_pseudo(pool) : pool;

  // Embed every pool image once; eval-mode forwards are batch-invariant, so
  // the cache is bitwise identical to embedding inside each episode.
  nn::NoGradGuard ng;
  const auto numel = static_cast<std::size_t>(work.image_numel());
  std::vector<std::vector<std::vector<float>>> cache(work.classes.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t c = 0; c < work.classes.size(); ++c) {
    const auto& images = work.classes[c].images;
    cache[c].resize(images.size());
    for (std::size_t lo = 0; lo < images.size(); lo += kChunk) {
      const std::size_t n = std::min(kChunk, images.size() - lo);
      std::vector<float> data(n * numel);
      for (std::size_t i = 0; i < n; ++i) {
        std::copy(images[lo + i].begin(), images[lo + i].end(),
                  data.begin() + static_cast<std::ptrdiff_t>(i * numel));
      }
      const nn::Tensor emb = model.forward(
          nn::Tensor::from_data({static_cast<int>(n), work.image_shape[0], work.image_shape[1],
                                 work.image_shape[2]},
                                std::move(data)),
          false);
      const auto dim = static_cast<std::size_t>(emb.dim(1));
      for (std::size_t i = 0; i < n; ++i) {
        cache[c][lo + i].assign(emb.data().begin() + static_cast<std::ptrdiff_t>(i * dim),
                                emb.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * dim));
      }
    }
  }

  const Predictor predict = [&](const Episode& ep, Rng&) {
    const std::size_t n_ways = ep.ways.size();
    const std::size_t dim = cache.empty() || cache[0].empty() ? 0 : cache[0][0].size();
    std::vector<std::vector<double>> protos(n_ways, std::vector<double>(dim, 0.0));
    std::vector<int> counts(n_ways, 0);
    for (std::size_t s = 0; s < ep.support.size(); ++s) {
      const int w = way_index(ep.ways, ep.support[s].second, "evaluate");
      const auto& e = cache[static_cast<std::size_t>(ep.support_refs[s].class_pos)]
                           [static_cast<std::size_t>(ep.support_refs[s].image_pos)];
      for (std::size_t d = 0; d < dim; ++d) protos[static_cast<std::size_t>(w)][d] += e[d];
      ++counts[static_cast<std::size_t>(w)];
    }
    for (std::size_t w = 0; w < n_ways; ++w) {
      for (std::size_t d = 0; d < dim; ++d) protos[w][d] /= counts[w];
    }
    std::vector<int> preds(ep.query.size());
    for (std::size_t q = 0; q < ep.query.size(); ++q) {
      const auto& e = cache[static_cast<std::size_t>(ep.query_refs[q].class_pos)]
                           [static_cast<std::size_t>(ep.query_refs[q].image_pos)];
      double best = -std::numeric_limits<double>::infinity();
      int best_w = 0;
      for (std::size_t w = 0; w < n_ways; ++w) {
        double d2 = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
          const double diff = e[d] - protos[w][d];
          d2 += diff * diff;
        }
        // Strictly greater keeps distance ties on the lowest way index.
        if (-d2 > best) {
          best = -d2;
          best_w = static_cast<int>(w);
        }
      }
      preds[q] = best_w;
    }
    return preds;
  };

  EvalOptions inner = opts;
  inner.include_fake_ways = true;  // work is already filtered; skip re-filtering
  EvalReport report = evaluate_with(work, predict, inner);
  return report;
}

std::string eval_report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["n_episodes"] = report.n_episodes;
  j["n_way"] = report.n_way;
  j["k_shot"] = report.k_shot;
  j["mean_accuracy"] = report.mean_accuracy;
  j["ci95_halfwidth"] = report.ci95_halfwidth;
  j["seed"] = report.seed;
  j["config_digest"] = report.config_digest;
  return j.dump(2) + "\n";
}

void save_eval_report(const std::string& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataIntegrityError("cannot open '" + path + "' for writing");
  out << eval_report_to_json(report);
  out.flush();
  if (!out) throw DataIntegrityError("write to '" + path + "' failed");
}

void save_episode_csv(const std::string& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataIntegrityError("cannot open '" + path + "' for writing");
  out << "episode_index,accuracy\n";
  std::ostringstream line;
  for (std::size_t e = 0; e < report.per_episode_accuracies.size(); ++e) {
    line.str("");
    line << e << ',' << report.per_episode_accuracies[e] << '\n';
    out << line.str();
  }
  out.flush();
  if (!out) throw DataIntegrityError("write to '" + path + "' failed");
}

FslTrainLog train_fsl(Conv4& model, const FewShotPool& train_pool, const FewShotPool& val_pool,
                      const FslTrainOptions& opts) {
  if (opts.episodes < 1) throw ConfigError("train_fsl: episodes must be positive");
  if (opts.n_way < 1 || opts.k_shot < 1 || opts.n_query < 1) {
    throw ConfigError("train_fsl: n_way, k_shot and n_query must be positive");
  }
  if (!(opts.lr > 0.0f)) throw ConfigError("train_fsl: lr must be positive");
  if (opts.lambda_reg < 0.0f) throw ConfigError("train_fsl: lambda must be non-negative");

  // Validation runs with as many ways as the val split supports (capped at
  // n_way); fewer than 2 usable classes disables it.
  int val_ways = 0;
  if (opts.val_every > 0) {
    int eligible = 0;
    for (const auto& c : val_pool.classes) {
      if (c.id.is_real &&
          static_cast<int>(c.images.size()) >= opts.k_shot + opts.n_query) {
        ++eligible;
      }
    }
    val_ways = std::min(opts.n_way, eligible);
    if (val_ways < 2) val_ways = 0;
  }

  Rng rng(opts.seed);
  nn::Adam optim(opts.lr);
  FslTrainLog log;
  log.episode_losses.reserve(static_cast<std::size_t>(opts.episodes));
  std::vector<std::vector<float>> best_data;

  auto run_val = [&](int episode_idx) {
    EvalOptions vo;
    vo.n_episodes = opts.val_episodes;
    vo.n_way = val_ways;
    vo.k_shot = opts.k_shot;
    vo.n_query = opts.n_query;
    vo.seed = Rng::mix(opts.seed ^ 0x76616cULL, static_cast<std::uint64_t>(episode_idx));
    const EvalReport r = evaluate(val_pool, model, vo);
    log.val_curve.emplace_back(episode_idx, r.mean_accuracy);
    if (r.mean_accuracy > log.best_val_accuracy) {
      log.best_val_accuracy = r.mean_accuracy;
      best_data.clear();
      for (const auto& [name, t] : model.params().entries()) best_data.push_back(t.data());
    }
  };

  for (int e = 0; e < opts.episodes; ++e) {
    const Episode ep = sample_episode(train_pool, opts.n_way, opts.k_shot, opts.n_query, rng);
    if (static_cast<int>(ep.ways.size()) > ep.n_way) ++log.episodes_with_fake_ways;
    model.params().zero_grad();
    nn::Tensor loss = episode_loss(ep, model, opts.lambda_reg, true);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw NumericError("episodic training diverged: loss became non-finite at episode " +
                         std::to_string(e));
    }
    loss.backward();
    optim.step(model.params());
    log.episode_losses.push_back(value);
    if (val_ways > 0 && ((e + 1) % opts.val_every == 0 || e + 1 == opts.episodes)) {
      run_val(e + 1);
    }
  }

  if (!best_data.empty()) {
    std::size_t k = 0;
    for (auto& [name, t] : model.params().entries()) t.data() = best_data[k++];
  }
  return log;
}

}  // namespace metadm::fsl
