#include "adshard/adjoint.hpp"

#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

namespace adshard {
namespace {

Vec outer_flat(const Vec& left, const Vec& right) {
  Vec out(left.size() * right.size());
  Eigen::Index pos = 0;
  for (Eigen::Index r = 0; r < left.size(); ++r)
    for (Eigen::Index c = 0; c < right.size(); ++c) out(pos++) = left(r) * right(c);
  return out;
}

LayerParams zero_like(const LayerParams& params) {
  LayerParams out;
  for (Network net : {Network::A, Network::B, Network::C}) {
    const HeadParams& head = params.head(net);
    out.head(net) = HeadParams::zeros(static_cast<int>(head.weight.rows()),
                                      static_cast<int>(head.weight.cols()));
  }
  return out;
}

Mat identity_zeta(SsmKind kind, Eigen::Index n) {
  switch (kind) {
    case SsmKind::unstructured: return Mat::Identity(n, n);
    case SsmKind::diagonal: return Mat::Ones(n, 1);
    case SsmKind::scalar: return Mat::Ones(1, 1);
  }
  return {};
}

// zeta * A, where zeta has the variant's representation.
Mat extend_product(SsmKind kind, const Mat& zeta, const Vec& a) {
  switch (kind) {
    case SsmKind::unstructured: {
      const auto n = zeta.rows();
      return zeta * Eigen::Map<const RowMajorMat>(a.data(), n, n);
    }
    case SsmKind::diagonal: return zeta.cwiseProduct(a);
    case SsmKind::scalar: return zeta * a(0);
  }
  return zeta;
}

// C * zeta
Mat apply_zeta(SsmKind kind, const Mat& c, const Mat& zeta) {
  switch (kind) {
    case SsmKind::unstructured: return c * zeta;
    case SsmKind::diagonal: return c * zeta.col(0).asDiagonal();
    case SsmKind::scalar: return c * zeta(0, 0);
  }
  return c;
}

}  // namespace

TraceLayer::TraceLayer(const ForwardTrace& trace, int k) : trace_(trace), k_(k) {
  if (k < 1 || k > trace.dims.K)
    throw IndexError("trace has no layer " + std::to_string(k));
}

std::span<const Vec> TraceLayer::A_range(int first, int last) const {
  const auto& row = trace_.A_[k_ - 1];
  if (first < 1 || last > static_cast<int>(row.size()) || first > last + 1)
    throw IndexError("trace has no A range " + std::to_string(first) + ".." +
                     std::to_string(last) + " for k=" + std::to_string(k_));
  return std::span<const Vec>(row).subspan(first - 1, last - first + 1);
}

const Mat& AdjointBatch::lambda_at(int tau) const {
  if (tau < tau_min || tau > t) throw IndexError("tau outside the adjoint window");
  return lambda[tau - tau_min];
}

const Mat& AdjointBatch::zeta_at(int tau) const {
  if (tau < tau_min || tau > t) throw IndexError("tau outside the adjoint window");
  return zeta[tau - tau_min];
}

Mat right_multiply_transition(SsmKind kind, const Mat& lambda, const Vec& a) {
  switch (kind) {
    case SsmKind::unstructured: {
      const auto n = lambda.cols();
      return lambda * Eigen::Map<const RowMajorMat>(a.data(), n, n);
    }
    case SsmKind::diagonal: return lambda * a.asDiagonal();
    case SsmKind::scalar: return lambda * a(0);
  }
  return lambda;
}

AdjointBatch compute_adjoint_states(SsmKind kind, int t, int k, int tbar, const Mat& c_t,
                                    std::span<const Vec> a_window, int a_first) {
  if (tbar < 1) throw ConfigError("truncation length must be >= 1");
  if (t < 1) throw IndexError("token index must be >= 1");
  AdjointBatch batch;
  batch.t = t;
  batch.k = k;
  batch.tau_min = window_start(t, tbar);
  const int needed_first = batch.tau_min + 1;
  if (needed_first <= t) {
    const int a_last = a_first + static_cast<int>(a_window.size()) - 1;
    if (a_first > needed_first || a_last < t)
      throw IndexError("A window " + std::to_string(a_first) + ".." + std::to_string(a_last) +
                       " does not cover " + std::to_string(needed_first) + ".." +
                       std::to_string(t) + " for (t=" + std::to_string(t) +
                       ", k=" + std::to_string(k) + ")");
  }

  const int window = batch.window();
  batch.zeta.resize(window);
  batch.lambda.resize(window);
  batch.zeta[window - 1] = identity_zeta(kind, c_t.cols());
  for (int tau = t - 1; tau >= batch.tau_min; --tau) {
    const Vec& a_next = a_window[tau + 1 - a_first];
    Mat product = extend_product(kind, batch.zeta[tau + 1 - batch.tau_min], a_next);
    if (!product.allFinite())
      throw NumericError("non-finite adjoint product", Location{.t = t, .k = k, .tau = tau});
    batch.zeta[tau - batch.tau_min] = std::move(product);
  }
  for (int j = 0; j < window; ++j) batch.lambda[j] = apply_zeta(kind, c_t, batch.zeta[j]);
  return batch;
}

AdjointBatch compute_adjoint_states(SsmKind kind, int t, int k, int tbar,
                                    const LayerInputs& layer) {
  const int first = window_start(t, tbar) + 1;
  if (first > t) return compute_adjoint_states(kind, t, k, tbar, layer.C(t), {}, t);
  return compute_adjoint_states(kind, t, k, tbar, layer.C(t), layer.A_range(first, t), first);
}

std::vector<VjpTask> build_cotangents(SsmKind kind, const LayerInputs& layer,
                                      const AdjointBatch& batch) {
  const int t = batch.t;
  const Vec& dl = layer.cotangent(t);
  std::vector<VjpTask> tasks;
  tasks.reserve(1 + 2 * batch.window());
  tasks.push_back({t, batch.k, t, Network::C, outer_flat(dl, layer.h(t))});
  for (int i = batch.tau_min; i <= t; ++i) {
    // dl/dy_K^t contracted with lambda first: an N-vector.
    const Vec g = batch.lambda_at(i).transpose() * dl;
    const Vec& h_prev = layer.h(i - 1);
    Vec a_cot;
    switch (kind) {
      case SsmKind::unstructured: a_cot = outer_flat(g, h_prev); break;
      case SsmKind::diagonal: a_cot = g.cwiseProduct(h_prev); break;
      case SsmKind::scalar: a_cot = Vec::Constant(1, g.dot(h_prev)); break;
    }
    tasks.push_back({t, batch.k, i, Network::A, std::move(a_cot)});
    tasks.push_back({t, batch.k, i, Network::B, outer_flat(g, layer.input(i))});
  }
  return tasks;
}

HeadParams vjp(const HeadParams& head, Activation act, const Vec& input, const Vec& cotangent) {
  if (cotangent.size() != head.weight.rows() || input.size() != head.weight.cols())
    throw ShapeError("vjp: cotangent " + std::to_string(cotangent.size()) + " / input " +
                     std::to_string(input.size()) + " do not match head " +
                     std::to_string(head.weight.rows()) + "x" +
                     std::to_string(head.weight.cols()));
  Vec g = cotangent;
  if (act != Activation::identity) {
    const Vec u = head.weight * input + head.bias;
    for (Eigen::Index r = 0; r < g.size(); ++r) g(r) *= activate_derivative(act, u(r));
  }
  return HeadParams{g * input.transpose(), g};
}

VjpCounter::VjpCounter(int K)
    : K_(K), counts_(std::make_unique<std::atomic<std::uint64_t>[]>(3 * static_cast<std::size_t>(K))) {
  for (int j = 0; j < 3 * K; ++j) counts_[j].store(0);
}

void VjpCounter::record(Network net, int k) {
  counts_[static_cast<int>(net) * K_ + (k - 1)].fetch_add(1, std::memory_order_relaxed);
}

std::uint64_t VjpCounter::count(Network net, int k) const {
  return counts_[static_cast<int>(net) * K_ + (k - 1)].load();
}

std::uint64_t VjpCounter::total(Network net) const {
  std::uint64_t sum = 0;
  for (int k = 1; k <= K_; ++k) sum += count(net, k);
  return sum;
}

std::uint64_t VjpCounter::total() const {
  return total(Network::A) + total(Network::B) + total(Network::C);
}

LayerParams layer_step_vjps(const LayerParams& params, SsmVariant variant,
                            const LayerInputs& layer, int t, int k, int tbar,
                            VjpCounter* counter) {
  const AdjointBatch batch = compute_adjoint_states(variant.kind, t, k, tbar, layer);
  LayerParams xi = zero_like(params);
  for (const VjpTask& task : build_cotangents(variant.kind, layer, batch)) {
    const Vec& input = layer.input(task.kind == Network::C ? t : task.i);
    xi.head(task.kind) += vjp(params.head(task.kind), variant.head_activation, input, task.cotangent);
    if (counter != nullptr) counter->record(task.kind, k);
  }
  return xi;
}

LayerParams layer_gradient(const LayerParams& params, SsmVariant variant, const LayerInputs& layer,
                           int k, int T, int tbar, const ExecutionOptions& exec,
                           VjpCounter* counter) {
  LayerParams grad = zero_like(params);
  const int workers = std::clamp(exec.workers, 1, T);
  if (workers == 1) {
    for (int t = 1; t <= T; ++t) grad += layer_step_vjps(params, variant, layer, t, k, tbar, counter);
    return grad;
  }

  std::vector<std::exception_ptr> errors(workers);
  if (exec.deterministic) {
    // Every per-token contribution is kept and merged in t order afterwards,
    // which reproduces the single-worker summation exactly.
    std::vector<LayerParams> per_token(T);
    {
      std::vector<std::jthread> pool;
      for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          try {
            for (int t = 1 + w; t <= T; t += workers)
              per_token[t - 1] = layer_step_vjps(params, variant, layer, t, k, tbar, counter);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
    }
    for (auto& err : errors)
      if (err) std::rethrow_exception(err);
    for (const LayerParams& xi : per_token) grad += xi;
    return grad;
  }

  std::mutex merge_mutex;
  std::vector<LayerParams> arrivals;
  {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          LayerParams partial = zero_like(params);
          for (int t = 1 + w; t <= T; t += workers)
            partial += layer_step_vjps(params, variant, layer, t, k, tbar, counter);
          std::lock_guard lock(merge_mutex);
          arrivals.push_back(std::move(partial));
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);
  for (const LayerParams& partial : arrivals) grad += partial;
  return grad;
}

GradVector adjoint_gradient(const StackParams& params, const ForwardTrace& trace,
                            const AdjointOptions& options) {
  const ModelDims& d = params.dims;
  if (!(trace.dims == d)) throw ShapeError("trace dimensions do not match the parameters");
  const int tbar = options.tbar.value_or(d.T);
  if (tbar < 1) throw ConfigError("truncation length must be >= 1");
  GradVector grad = GradVector::zeros_like(params);
  for (int k = 1; k <= d.K; ++k) {
    TraceLayer layer(trace, k);
    grad.layers[k - 1] = layer_gradient(params.layers[k - 1], params.variant, layer, k, d.T, tbar,
                                        options.exec, options.counter);
  }
  grad.omega = omega_gradient(trace);
  return grad;
}

IdentityCheck outer_product_identity_check(const Vec& dl_dy, const Vec& h, const HeadParams& head_c,
                                           const Vec& input, Activation act, double tolerance) {
  const Eigen::Index P = dl_dy.size();
  const Eigen::Index N = h.size();
  const Eigen::Index out = head_c.weight.rows();
  const Eigen::Index in = head_c.weight.cols();
  if (out != P * N || input.size() != in) throw ShapeError("identity check: inconsistent shapes");

  const HeadParams analytic = vjp(head_c, act, input, outer_flat(dl_dy, h));

  // Materialize dC/dtheta column by column with a unit tangent on one
  // parameter entry at a time.
  const Vec u = head_c.weight * input + head_c.bias;
  Vec slope(out);
  for (Eigen::Index r = 0; r < out; ++r) slope(r) = activate_derivative(act, u(r));
  const Eigen::Index n_params = out * in + out;
  Mat jacobian(out, n_params);
  for (Eigen::Index m = 0; m < n_params; ++m) {
    Mat d_weight = Mat::Zero(out, in);
    Vec d_bias = Vec::Zero(out);
    if (m < out * in)
      d_weight(m / in, m % in) = 1.0;
    else
      d_bias(m - out * in) = 1.0;
    jacobian.col(m) = slope.cwiseProduct(d_weight * input + d_bias);
  }

  IdentityCheck result;
  for (Eigen::Index m = 0; m < n_params; ++m) {
    double explicit_sum = 0.0;
    for (Eigen::Index i = 0; i < P; ++i)
      for (Eigen::Index j = 0; j < N; ++j)
        explicit_sum += dl_dy(i) * h(j) * jacobian(i * N + j, m);
    const double vjp_value =
        m < out * in ? analytic.weight(m / in, m % in) : analytic.bias(m - out * in);
    result.max_deviation = std::max(result.max_deviation, std::abs(explicit_sum - vjp_value));
  }
  result.passed = result.max_deviation <= tolerance;
  return result;
}

}  // namespace adshard
