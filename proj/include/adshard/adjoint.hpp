#pragma once

// Adjoint-sharded gradients: adjoint states, VJP task construction, analytic
// head VJPs and the (optionally truncated) gradient assembly.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "adshard/grad_vector.hpp"
#include "adshard/model.hpp"

namespace adshard {

/// Read access to the stored tensors of one layer k. Implementations may
/// restrict which indices are reachable (the simulated devices do).
class LayerInputs {
 public:
  virtual ~LayerInputs() = default;
  /// A_k^first .. A_k^last, contiguous, inclusive.
  virtual std::span<const Vec> A_range(int first, int last) const = 0;
  virtual const Mat& C(int t) const = 0;
  /// h_k^t for t = 0..T
  virtual const Vec& h(int t) const = 0;
  /// Normalized layer input y_hat_{k-1}^t.
  virtual const Vec& input(int t) const = 0;
  /// dl(o^t)/dy_K^t
  virtual const Vec& cotangent(int t) const = 0;
};

/// LayerInputs over an in-core ForwardTrace.
class TraceLayer final : public LayerInputs {
 public:
  TraceLayer(const ForwardTrace& trace, int k);

  std::span<const Vec> A_range(int first, int last) const override;
  const Mat& C(int t) const override { return trace_.C(k_, t); }
  const Vec& h(int t) const override { return trace_.h(k_, t); }
  const Vec& input(int t) const override { return trace_.y_hat(k_ - 1, t); }
  const Vec& cotangent(int t) const override { return trace_.cotangent(t); }

 private:
  const ForwardTrace& trace_;
  int k_;
};

/// Adjoint states lambda_k^{t,tau} for tau in [tau_min, t] and the cumulative
/// products zeta_tau = A^t A^{t-1} ... A^{tau+1} they are built from.
struct AdjointBatch {
  int t = 0;
  int k = 0;
  int tau_min = 0;
  std::vector<Mat> lambda;  // P x N, indexed tau - tau_min
  std::vector<Mat> zeta;    // N x N (unstructured), N x 1 (diagonal), 1 x 1 (scalar)

  const Mat& lambda_at(int tau) const;
  const Mat& zeta_at(int tau) const;
  int window() const { return t - tau_min + 1; }
};

/// First state index inside the truncation window of output t.
inline int window_start(int t, int tbar) { return std::max(1, t + 1 - tbar); }

/// `a_window[j]` holds A^{a_first + j}; it must cover max(2, t+2-tbar)..t.
AdjointBatch compute_adjoint_states(SsmKind kind, int t, int k, int tbar, const Mat& c_t,
                                    std::span<const Vec> a_window, int a_first);
AdjointBatch compute_adjoint_states(SsmKind kind, int t, int k, int tbar,
                                    const LayerInputs& layer);

/// lambda * A for the variant's representation of A.
Mat right_multiply_transition(SsmKind kind, const Mat& lambda, const Vec& a);

struct VjpTask {
  int t = 0;
  int k = 0;
  int i = 0;
  Network kind = Network::C;
  Vec cotangent;  // flattened like the head's output
};

/// One C task (i = t), then an A and a B task per i in the window, ascending.
std::vector<VjpTask> build_cotangents(SsmKind kind, const LayerInputs& layer,
                                      const AdjointBatch& batch);

/// Analytic VJP of an affine+activation head wrt its parameters.
HeadParams vjp(const HeadParams& head, Activation act, const Vec& input, const Vec& cotangent);

/// Per-network, per-layer VJP counters. Safe to share between threads.
class VjpCounter {
 public:
  explicit VjpCounter(int K);

  void record(Network net, int k);
  std::uint64_t count(Network net, int k) const;
  std::uint64_t total(Network net) const;
  std::uint64_t total() const;
  int layers() const { return K_; }

 private:
  int K_;
  std::unique_ptr<std::atomic<std::uint64_t>[]> counts_;
};

struct ExecutionOptions {
  /// Fixed (k, t, i) merge order; otherwise per-worker partials merge in arrival order.
  bool deterministic = true;
  int workers = 1;
};

/// All VJPs of output token t for layer k, summed in task order.
LayerParams layer_step_vjps(const LayerParams& params, SsmVariant variant,
                            const LayerInputs& layer, int t, int k, int tbar,
                            VjpCounter* counter = nullptr);

/// Sum over t = 1..T of layer_step_vjps for one layer.
LayerParams layer_gradient(const LayerParams& params, SsmVariant variant, const LayerInputs& layer,
                           int k, int T, int tbar, const ExecutionOptions& exec = {},
                           VjpCounter* counter = nullptr);

struct AdjointOptions {
  std::optional<int> tbar;  // unset: exact gradient (tbar = T)
  ExecutionOptions exec;
  VjpCounter* counter = nullptr;
};

/// dL/dtheta from independent VJPs plus the Omega gradient.
GradVector adjoint_gradient(const StackParams& params, const ForwardTrace& trace,
                            const AdjointOptions& options = {});

struct IdentityCheck {
  bool passed = false;
  double max_deviation = 0.0;
};

/// Compares the analytic vjp_C of (dl_dy outer h) against the explicit sum of
/// (dl_dy outer h) times the materialized Jacobian slices dC_ij/dtheta.
IdentityCheck outer_product_identity_check(const Vec& dl_dy, const Vec& h, const HeadParams& head_c,
                                           const Vec& input, Activation act,
                                           double tolerance = 1e-12);

}  // namespace adshard
