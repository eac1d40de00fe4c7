#pragma once

// Seeded next-token task with a planted bigram rule.

#include <cstdint>
#include <vector>

#include "adshard/model.hpp"

namespace adshard {

struct SyntheticTask {
  std::vector<int> ids;      // T + 1 token ids
  std::vector<Vec> inputs;   // embedding of ids[0..T-1]
  LossSpec loss;             // next token; one-hot vectors for mse
};

struct BigramSource {
  int V = 2;
  int P = 1;
  std::vector<int> successor;  // planted next token
  std::vector<Vec> embedding;  // V fixed P-vectors
  double follow = 0.9;         // probability of taking the planted successor

  static BigramSource make(int V, int P, std::uint64_t seed);
  SyntheticTask sample(int T, LossKind loss, std::uint64_t sequence_seed) const;
};

}  // namespace adshard
