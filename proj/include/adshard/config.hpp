#pragma once

// Run configuration: key=value file plus command-line overrides.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "adshard/model.hpp"

namespace adshard {

enum class Mode { train, gradcheck, distcheck, cost, curves };
std::string_view to_string(Mode mode);
Mode parse_mode(std::string_view text);

enum class GradientSource { adjoint, tape_detached, tape_full };
std::string_view to_string(GradientSource src);
GradientSource parse_gradient_source(std::string_view text);

struct RunConfig {
  Mode mode = Mode::train;
  ModelDims dims{2, 4, 8, 8, 16, 1};
  SsmVariant variant{SsmKind::diagonal, Activation::tanh};  // identity heads diverge under SGD here
  LossKind loss = LossKind::cross_entropy;
  std::optional<int> tbar;  // unset means T
  std::vector<int> upsilon{1};
  int workers = 1;
  std::uint64_t seed = 7;
  double lr = 0.01;
  int steps = 200;
  int sequences = 4;  // synthetic training set size
  bool deterministic = true;
  std::string out = "out";
  std::string preset;  // gradcheck: k1, k3, saturation; empty runs all three
  std::string h0 = "zero";
  GradientSource gradient = GradientSource::adjoint;
  int instances = 7;  // per device, speedup model
  std::vector<int> curve_lengths{8, 16, 24, 32, 40, 48, 56, 64};
  std::size_t tape_limit = 50'000'000;
  double init_scale = 0.5;

  int effective_tbar() const { return tbar.value_or(dims.T); }
  /// Throws ConfigError naming the first bad field.
  void validate() const;
};

/// Applies one key=value setting. Unknown keys throw ConfigError.
void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value);

/// Reads `key = value` lines; '#' starts a comment.
void load_config_file(RunConfig& cfg, const std::string& path);

std::vector<int> parse_int_list(std::string_view text);
bool parse_on_off(std::string_view text);

std::string describe(const RunConfig& cfg);

}  // namespace adshard
