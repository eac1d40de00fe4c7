#include "adshard/synthetic.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "adshard/errors.hpp"

namespace adshard {

BigramSource BigramSource::make(int V, int P, std::uint64_t seed) {
  if (V < 2 || P < 1) throw ConfigError("bigram source needs V >= 2 and P >= 1");
  BigramSource src;
  src.V = V;
  src.P = P;
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + 1);
  src.successor.resize(V);
  std::iota(src.successor.begin(), src.successor.end(), 0);
  std::shuffle(src.successor.begin(), src.successor.end(), rng);
  std::normal_distribution<double> normal;
  for (int v = 0; v < V; ++v) {
    Vec e(P);
    for (int j = 0; j < P; ++j) e(j) = normal(rng);
    src.embedding.push_back(e);
  }
  return src;
}

SyntheticTask BigramSource::sample(int T, LossKind loss, std::uint64_t sequence_seed) const {
  if (T < 1) throw ConfigError("sequence length must be >= 1");
  std::mt19937_64 rng(sequence_seed);
  std::uniform_int_distribution<int> any(0, V - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  SyntheticTask task;
  task.ids.push_back(any(rng));
  for (int t = 1; t <= T; ++t) {
    const int prev = task.ids.back();
    task.ids.push_back(coin(rng) < follow ? successor[prev] : any(rng));
  }
  for (int t = 0; t < T; ++t) task.inputs.push_back(embedding[task.ids[t]]);
  if (loss == LossKind::cross_entropy) {
    task.loss = LossSpec::cross_entropy(std::vector<int>(task.ids.begin() + 1, task.ids.end()));
  } else {
    std::vector<Vec> targets;
    for (int t = 1; t <= T; ++t) targets.push_back(Vec::Unit(V, task.ids[t]));
    task.loss = LossSpec::mse(std::move(targets));
  }
  return task;
}

}  // namespace adshard
