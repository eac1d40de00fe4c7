#pragma once

// Gradient oracles that share no code path with the adjoint engine: central
// finite differences over every parameter and a reverse-mode tape.

#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "adshard/grad_vector.hpp"
#include "adshard/model.hpp"
#include "adshard/tape.hpp"

namespace adshard {

struct FdConfig {
  double epsilon = 1e-5;  // step is epsilon * max(1, |theta_j|)
  int threads = 1;

  void validate() const;
};

/// Central differences of `f` around `x`. A non-finite value at a perturbed
/// point throws NumericError naming the coordinate (Location::tau holds j).
std::vector<double> central_difference(const std::function<double(std::span<const double>)>& f,
                                       std::span<const double> x, const FdConfig& cfg = {});

GradVector finite_difference_gradient(const StackParams& params, std::span<const Vec> tokens,
                                      const LossSpec& loss, const FdConfig& cfg = {});

GradVector tape_gradient(const StackParams& params, std::span<const Vec> tokens,
                         const LossSpec& loss, bool detach_layer_inputs,
                         std::size_t max_scalars = std::numeric_limits<std::size_t>::max());

struct Tolerance {
  double rtol = 1e-5;
  double atol = 1e-8;  // coordinates with |a - b| <= atol pass regardless of rtol
};

struct BlockError {
  std::string name;
  double max_rel = 0.0;
  double mean_rel = 0.0;
  double max_abs = 0.0;
  std::size_t failures = 0;
};

struct GradientComparison {
  std::vector<BlockError> blocks;
  double max_rel = 0.0;
  std::size_t failures = 0;
  bool passed() const { return failures == 0; }
  std::string report() const;
  /// First failing block name, empty when everything passed.
  std::string first_failure() const;
};

/// rel_j = |a_j - b_j| / max(|a_j|, |b_j|), zero when both are zero.
GradientComparison compare_gradients(const GradVector& a, const GradVector& b,
                                     const ModelDims& dims, SsmKind kind, Tolerance tol);

}  // namespace adshard
