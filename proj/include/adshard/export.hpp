#pragma once

// Binary dumps for cross-implementation diffing, plus small text writers.

#include <string>
#include <vector>

#include "adshard/grad_vector.hpp"
#include "adshard/model.hpp"

namespace adshard {

/// "ADSTRACE" magic, int64 header (K N P V T), then A, C, h, y_hat, y,
/// cotangent in (k, t) order as little-endian float64.
void write_trace_binary(const std::string& path, const ForwardTrace& trace);

/// Flat little-endian float64 gradient in layout order, and a JSON sidecar
/// at `path + ".json"` mapping block names to offsets and sizes.
void write_gradient(const std::string& path, const GradVector& grad, const ModelDims& dims,
                    SsmKind kind);
std::vector<double> read_gradient_binary(const std::string& path);

void write_text(const std::string& path, const std::string& text);

}  // namespace adshard
