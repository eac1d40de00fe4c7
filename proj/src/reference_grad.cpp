#include "adshard/reference_grad.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "adshard/errors.hpp"

namespace adshard {

void FdConfig::validate() const {
  if (!(epsilon > 0.0)) throw ConfigError("finite-difference epsilon must be positive");
  if (threads < 1) throw ConfigError("finite-difference threads must be >= 1");
}

namespace {

// Runs body(j, x_scratch) for every coordinate, striped over threads.
template <typename Body>
void for_each_coordinate(std::size_t n, std::span<const double> x, int threads, Body&& body) {
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(n)));
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&](int w) {
    std::vector<double> scratch(x.begin(), x.end());
    try {
      for (std::size_t j = w; j < n; j += workers) body(j, scratch);
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(run, w);
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

std::vector<double> central_difference(const std::function<double(std::span<const double>)>& f,
                                       std::span<const double> x, const FdConfig& cfg) {
  cfg.validate();
  std::vector<double> grad(x.size(), 0.0);
  for_each_coordinate(x.size(), x, cfg.threads, [&](std::size_t j, std::vector<double>& xs) {
    const double step = cfg.epsilon * std::max(1.0, std::abs(x[j]));
    auto eval = [&](double value) {
      xs[j] = value;
      double out = 0.0;
      try {
        out = f(xs);
      } catch (const NumericError& e) {
        throw NumericError("non-finite loss perturbing coordinate " + std::to_string(j) + ": " +
                               e.what(),
                           {});
      }
      if (!std::isfinite(out))
        throw NumericError("non-finite loss perturbing coordinate " + std::to_string(j), {});
      return out;
    };
    const double plus = eval(x[j] + step);
    const double minus = eval(x[j] - step);
    xs[j] = x[j];
    // (x + s) - (x - s) need not be exactly 2s in floating point
    grad[j] = (plus - minus) / ((x[j] + step) - (x[j] - step));
  });
  return grad;
}

GradVector finite_difference_gradient(const StackParams& params, std::span<const Vec> tokens,
                                      const LossSpec& loss, const FdConfig& cfg) {
  params.validate();
  const std::vector<double> theta = flatten(params);
  auto f = [&](std::span<const double> flat) {
    StackParams probe = params;
    assign_flat(probe, flat);
    return stack_loss(probe, tokens, loss);
  };
  const std::vector<double> grad = central_difference(f, theta, cfg);
  return unflatten_gradient(params.dims, params.variant.kind, grad);
}

GradVector tape_gradient(const StackParams& params, std::span<const Vec> tokens,
                         const LossSpec& loss, bool detach_layer_inputs, std::size_t max_scalars) {
  ModelTape mt = build_model_tape(params, tokens, loss, detach_layer_inputs, max_scalars);
  mt.tape.backward(mt.loss);

  GradVector grad = GradVector::zeros_like(params);
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    int j = 0;
    for (Network net : {Network::A, Network::B, Network::C}) {
      HeadParams& g = grad.layers[k].head(net);
      const auto& gw = mt.tape.grad(mt.heads[k][j].weight);
      const auto& gb = mt.tape.grad(mt.heads[k][j].bias);
      for (Eigen::Index r = 0; r < g.weight.rows(); ++r)
        for (Eigen::Index c = 0; c < g.weight.cols(); ++c)
          g.weight(r, c) = gw[r * g.weight.cols() + c];
      for (Eigen::Index r = 0; r < g.bias.size(); ++r) g.bias(r) = gb[r];
      ++j;
    }
  }
  const auto& go = mt.tape.grad(mt.omega);
  for (Eigen::Index r = 0; r < grad.omega.rows(); ++r)
    for (Eigen::Index c = 0; c < grad.omega.cols(); ++c)
      grad.omega(r, c) = go[r * grad.omega.cols() + c];
  return grad;
}

GradientComparison compare_gradients(const GradVector& a, const GradVector& b,
                                     const ModelDims& dims, SsmKind kind, Tolerance tol) {
  const std::vector<double> fa = a.flatten();
  const std::vector<double> fb = b.flatten();
  if (fa.size() != fb.size()) throw ShapeError("compared gradients differ in size");
  GradientComparison cmp;
  for (const BlockInfo& block : parameter_layout(dims, kind)) {
    if (block.offset + block.size > fa.size()) throw ShapeError("layout exceeds gradient size");
    BlockError err{block.name};
    double sum = 0.0;
    for (std::size_t j = block.offset; j < block.offset + block.size; ++j) {
      const double diff = std::abs(fa[j] - fb[j]);
      const double scale = std::max(std::abs(fa[j]), std::abs(fb[j]));
      const double rel = scale > 0.0 ? diff / scale : 0.0;
      if (std::isnan(diff) || (rel > tol.rtol && diff > tol.atol)) ++err.failures;
      err.max_rel = std::max(err.max_rel, rel);
      err.max_abs = std::max(err.max_abs, diff);
      sum += rel;
    }
    err.mean_rel = block.size ? sum / static_cast<double>(block.size) : 0.0;
    cmp.max_rel = std::max(cmp.max_rel, err.max_rel);
    cmp.failures += err.failures;
    cmp.blocks.push_back(err);
  }
  return cmp;
}

std::string GradientComparison::report() const {
  std::ostringstream out;
  out << std::left << std::setw(8) << "block" << std::setw(14) << "max_rel" << std::setw(14)
      << "mean_rel" << std::setw(14) << "max_abs" << "fail\n";
  out << std::scientific << std::setprecision(3);
  for (const BlockError& b : blocks)
    out << std::setw(8) << b.name << std::setw(14) << b.max_rel << std::setw(14) << b.mean_rel
        << std::setw(14) << b.max_abs << b.failures << "\n";
  return out.str();
}

std::string GradientComparison::first_failure() const {
  for (const BlockError& b : blocks)
    if (b.failures) return b.name;
  return {};
}

}  // namespace adshard
