#pragma once

// VJP counts, stored-number counts and per-VJP memory/FLOP costs, plus the
// throughput arithmetic for a given accelerator.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "adshard/model.hpp"

namespace adshard {

inline constexpr int kFp16Bytes = 2;

struct VjpCounts {
  std::int64_t T = 0;
  std::int64_t tbar = 0;  // after clamping
  bool clamped = false;   // requested tbar exceeded T
  std::int64_t full_per_AB = 0;
  std::int64_t full_C = 0;
  /// Tasks actually issued by the windowed engine: sum_t min(t, tbar).
  std::int64_t truncated_per_AB = 0;
  /// tbar*T + tbar*(tbar-1)/2, capped at full_per_AB when tbar == T.
  std::int64_t printed_truncated_per_AB = 0;
  std::int64_t truncated_C = 0;

  double reduction() const;          // 1 - truncated/full
  double printed_reduction() const;  // same with the printed formula
};

/// Throws ConfigError for T < 1 or tbar < 1; tbar > T is clamped (see `clamped`).
VjpCounts vjp_count(std::int64_t T, std::int64_t tbar);

struct StorageCount {
  std::int64_t trace_only = 0;   // TK(2N+P) + TP
  std::int64_t with_params = 0;  // T(2NK+PK+P) + 3N(P+1)
};

StorageCount trace_storage_count(std::int64_t T, std::int64_t K, std::int64_t N, std::int64_t P);

/// Scalars held by a ForwardTrace, grouped by tensor. `counted()` sums the
/// tensors the closed-form count covers: A, h (t >= 1), layer inputs, cotangents.
struct TraceEnumeration {
  std::int64_t A = 0;
  std::int64_t h = 0;
  std::int64_t layer_inputs = 0;
  std::int64_t cotangent = 0;
  std::int64_t C = 0;  // retained but outside the closed form

  std::int64_t counted() const { return A + h + layer_inputs + cotangent; }
};

TraceEnumeration enumerate_trace_storage(const ForwardTrace& trace);

struct ThetaSize {
  std::int64_t full = 0;     // |theta|
  std::int64_t largest = 0;  // |theta|*, biggest parameter tensor
};

/// Our head definition: |theta| = out*P + out, |theta|* = out*P.
ThetaSize head_theta_size(Network net, SsmKind kind, int N, int P);

struct VjpCost {
  std::int64_t memory_numbers = 0;
  std::int64_t memory_bytes = 0;  // FP16
  std::int64_t flops = 0;
};

/// Per-network cost of one VJP. Sizes default to head_theta_size.
std::array<VjpCost, 3> per_vjp_cost(SsmKind kind, std::int64_t N, std::int64_t P,
                                    std::int64_t bs,
                                    std::optional<std::array<ThetaSize, 3>> theta = {});

/// bs(7NP + 3N): the averaged per-VJP figure that folds in an NP adjoint state.
std::int64_t averaged_vjp_flops(std::int64_t N, std::int64_t P, std::int64_t bs);

struct GpuSpec {
  double mem_bandwidth = 3.35e12;  // bytes/s
  double flops_per_sec = 1979e12;  // FP16
  double memory_bytes = 80e9;
  int mig_instances = 7;

  static GpuSpec h100() { return {}; }
  void validate() const;
};

// Published reference figures for P=128, N=225, bs=8. Labeled inputs, not targets.
inline constexpr double kReferenceVjpBytes = 0.6e6;
inline constexpr double kReferenceVjpFlops = 1798144.0;

struct Throughput {
  double bandwidth_bound_vjps_per_sec = 0.0;
  double compute_bound_vjps_per_sec = 0.0;
  std::int64_t resident_batches = 0;  // floor(memory / bytes per vjp)
};

Throughput throughput_estimate(const GpuSpec& gpu, double bytes_per_vjp, double flops_per_vjp);

struct CostReport {
  ModelDims dims;
  SsmKind kind = SsmKind::diagonal;
  VjpCounts counts;
  StorageCount storage;
  std::array<VjpCost, 3> per_vjp;
  std::int64_t averaged_vjp_flops = 0;
  /// K * (truncated A/B tasks * (A + B flops) + C tasks * C flops), table FLOPs.
  std::int64_t total_vjp_flops = 0;
  /// K * truncated A/B tasks * NP, one adjoint state per A/B pair.
  std::int64_t adjoint_state_flops = 0;
  /// Modeled forward cost over the whole stack and sequence.
  std::int64_t forward_flops = 0;

  std::string table() const;
};

CostReport build_cost_report(const ModelDims& dims, SsmKind kind, std::int64_t tbar);

struct MemoryCurveRow {
  int context_length = 0;
  std::int64_t adjoint_numbers = 0;
  std::optional<std::int64_t> tape_numbers;  // empty: tape overflowed (censored)
};

/// Adjoint count is trace+params; tape count is the saved non-leaf scalars of
/// the full backprop tape. Overflow past `tape_limit` is recorded, not thrown.
std::vector<MemoryCurveRow> adjoint_vs_backprop_memory_curve(const ModelDims& base,
                                                             SsmVariant variant,
                                                             const std::vector<int>& lengths,
                                                             std::uint64_t seed,
                                                             std::size_t tape_limit);

std::string memory_curve_csv(const std::vector<MemoryCurveRow>& rows, std::size_t tape_limit);
std::string vjp_count_csv(const std::vector<VjpCounts>& rows);

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace adshard
