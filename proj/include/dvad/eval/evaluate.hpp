#pragma once

#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "dvad/audio/dataset.hpp"
#include "dvad/eval/metrics.hpp"
#include "dvad/model/model.hpp"
#include "dvad/spectrogram_set.hpp"

namespace dvad {

struct EvalResult {
  double auc = 0.0;
  double f1 = 0.0;
  std::size_t n = 0;
};

/// sigmoid(logit) per sample, eval mode, no tape.
template <typename T>
std::vector<double> predict_scores(Model<T>& model, const SpectrogramSet& data, std::size_t batch = 64) {
  NoGradScope<T> no_grad;
  std::vector<double> scores;
  scores.reserve(data.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    idx.resize(std::min(batch, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto logits = model.logits(data.batch<T>(idx), Mode::kEval);
    for (T z : logits.data()) scores.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(z))));
  }
  return scores;
}

inline std::vector<int> labels_of(const SpectrogramSet& data) {
  std::vector<int> y;
  y.reserve(data.size());
  for (float v : data.labels) y.push_back(v > 0.5f ? 1 : 0);
  return y;
}

template <typename T>
EvalResult evaluate(Model<T>& model, const SpectrogramSet& data, double threshold = 0.5) {
  if (data.empty()) throw DataError("evaluate: empty split");
  const auto scores = predict_scores(model, data);
  const auto labels = labels_of(data);
  return {auc_score(scores, labels), f1_score(threshold_scores(scores, threshold), labels), data.size()};
}

struct PlaybackResult {
  std::map<int, double> f1;  // distance in m -> F1
  double mean_f1 = 0.0;
};

/// Groups must cover exactly the four playback distances.
template <typename T>
PlaybackResult evaluate_playback(Model<T>& model, const std::map<int, SpectrogramSet>& groups, double threshold = 0.5) {
  PlaybackResult r;
  for (int d : audio::kPlaybackDistances) {
    const auto it = groups.find(d);
    if (it == groups.end() || it->second.empty()) {
      throw DataError("playback set has no clips at " + std::to_string(d) + " m");
    }
    const auto scores = predict_scores(model, it->second);
    r.f1[d] = f1_score(threshold_scores(scores, threshold), labels_of(it->second));
    r.mean_f1 += r.f1[d] / static_cast<double>(audio::kPlaybackDistances.size());
  }
  return r;
}

inline std::map<int, SpectrogramSet> load_playback_groups(const audio::DatasetManifest& m,
                                                          const std::filesystem::path& dir, bool use_cache = false) {
  std::map<int, SpectrogramSet> groups;
  for (int d : audio::kPlaybackDistances) {
    auto set = audio::load_spectrograms(
        m, dir, [d](const audio::ClipRecord& r) { return r.distance_m && *r.distance_m == d; }, use_cache);
    if (set.empty()) throw DataError("playback manifest has no clips at " + std::to_string(d) + " m");
    groups.emplace(d, std::move(set));
  }
  return groups;
}

}  // namespace dvad
