#pragma once

#include <span>
#include <string>
#include <vector>

#include "adshard/model.hpp"

namespace adshard {

/// One named contiguous range of the concatenated parameter vector.
struct BlockInfo {
  std::string name;  // "A1".."AK", "B1".., "C1".., "Omega"
  std::size_t offset = 0;
  std::size_t size = 0;
  int rows = 0;  // weight (or Omega) shape; bias follows the weight for heads
  int cols = 0;
};

/// Concatenation order: every A head (k = 1..K), then every B head, every C
/// head, then Omega. Inside a head block the row-major weight precedes the bias.
std::vector<BlockInfo> parameter_layout(const ModelDims& dims, SsmKind kind);

/// Gradient in the same shape as StackParams' trainable parts.
struct GradVector {
  std::vector<LayerParams> layers;  // per-layer gradient blocks
  Mat omega;

  static GradVector zeros_like(const StackParams& params);
  static GradVector zeros(const ModelDims& dims, SsmKind kind);

  GradVector& operator+=(const GradVector& other);
  bool operator==(const GradVector& other) const;

  std::vector<double> flatten() const;
  std::size_t size() const;
};

std::vector<double> flatten(const StackParams& params);
/// Overwrites every trainable entry of `params` from a flat vector in layout order.
void assign_flat(StackParams& params, std::span<const double> flat);
GradVector unflatten_gradient(const ModelDims& dims, SsmKind kind, std::span<const double> flat);

/// params -= lr * grad
void sgd_step(StackParams& params, const GradVector& grad, double lr);

}  // namespace adshard
