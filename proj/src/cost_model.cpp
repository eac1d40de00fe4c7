#include "adshard/cost_model.hpp"

#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

#include "adshard/errors.hpp"
#include "adshard/tape.hpp"

namespace adshard {

double VjpCounts::reduction() const {
  return full_per_AB ? 1.0 - static_cast<double>(truncated_per_AB) / full_per_AB : 0.0;
}

double VjpCounts::printed_reduction() const {
  return full_per_AB ? 1.0 - static_cast<double>(printed_truncated_per_AB) / full_per_AB : 0.0;
}

VjpCounts vjp_count(std::int64_t T, std::int64_t tbar) {
  if (T < 1) throw ConfigError("vjp_count: T must be >= 1");
  if (tbar < 1) throw ConfigError("vjp_count: Tbar must be >= 1");
  VjpCounts c;
  c.T = T;
  c.clamped = tbar > T;
  c.tbar = std::min(tbar, T);
  c.full_per_AB = (1 + T) * T / 2;
  c.full_C = T;
  c.truncated_C = T;
  const std::int64_t tb = c.tbar;
  c.truncated_per_AB = tb * T - tb * (tb - 1) / 2;
  c.printed_truncated_per_AB = tb == T ? c.full_per_AB : tb * T + tb * (tb - 1) / 2;
  return c;
}

StorageCount trace_storage_count(std::int64_t T, std::int64_t K, std::int64_t N, std::int64_t P) {
  if (T < 1 || K < 1 || N < 1 || P < 1) throw ConfigError("trace_storage_count: dims must be positive");
  return {T * K * (2 * N + P) + T * P, T * (2 * N * K + P * K + P) + 3 * N * (P + 1)};
}

TraceEnumeration enumerate_trace_storage(const ForwardTrace& trace) {
  const ModelDims& d = trace.dims;
  TraceEnumeration e;
  for (int k = 1; k <= d.K; ++k) {
    for (int t = 1; t <= d.T; ++t) {
      e.A += trace.A(k, t).size();
      e.h += trace.h(k, t).size();
      e.layer_inputs += trace.y_hat(k - 1, t).size();
      e.C += trace.C(k, t).size();
    }
  }
  for (int t = 1; t <= d.T; ++t) e.cotangent += trace.cotangent(t).size();
  return e;
}

ThetaSize head_theta_size(Network net, SsmKind kind, int N, int P) {
  const std::int64_t out = head_output_size(net, kind, N, P);
  return {out * P + out, out * P};
}

std::array<VjpCost, 3> per_vjp_cost(SsmKind kind, std::int64_t N, std::int64_t P,
                                    std::int64_t bs,
                                    std::optional<std::array<ThetaSize, 3>> theta) {
  if (N < 1 || P < 1 || bs < 0) throw ConfigError("per_vjp_cost: bad dimensions");
  const std::array<ThetaSize, 3> th = theta.value_or(std::array<ThetaSize, 3>{
      head_theta_size(Network::A, kind, N, P), head_theta_size(Network::B, kind, N, P),
      head_theta_size(Network::C, kind, N, P)});

  // output elements and FLOPs per sample, by network
  std::array<std::int64_t, 3> out{};
  std::array<std::int64_t, 3> flops{};
  switch (kind) {
    case SsmKind::unstructured:
      out = {N * N, N * P, N * P};
      flops = {N * N * (2 * P + 1), N * P * (2 * P + 1), N * P * (2 * P + 1)};
      break;
    case SsmKind::diagonal:
      out = {N, N, N};
      flops = {N * (2 * P + 1), N * (2 * P + 1), N * (2 * P + 1)};
      break;
    case SsmKind::scalar:
      out = {1, N, N};
      flops = {2 * P + 1, N * (2 * P + 1), N * (2 * P + 1)};
      break;
  }
  std::array<VjpCost, 3> cost{};
  for (int j = 0; j < 3; ++j) {
    cost[j].memory_numbers = bs * (out[j] + th[j].largest) + th[j].full;
    cost[j].memory_bytes = cost[j].memory_numbers * kFp16Bytes;
    cost[j].flops = bs * flops[j];
  }
  return cost;
}

std::int64_t averaged_vjp_flops(std::int64_t N, std::int64_t P, std::int64_t bs) {
  return bs * (7 * N * P + 3 * N);
}

void GpuSpec::validate() const {
  if (!(mem_bandwidth > 0 && flops_per_sec > 0 && memory_bytes > 0 && mig_instances > 0))
    throw ConfigError("GPU spec values must be positive");
}

Throughput throughput_estimate(const GpuSpec& gpu, double bytes_per_vjp, double flops_per_vjp) {
  gpu.validate();
  if (!(bytes_per_vjp > 0 && flops_per_vjp > 0)) throw ConfigError("per-vjp cost must be positive");
  return {gpu.mem_bandwidth / bytes_per_vjp, gpu.flops_per_sec / flops_per_vjp,
          static_cast<std::int64_t>(std::floor(gpu.memory_bytes / bytes_per_vjp))};
}

CostReport build_cost_report(const ModelDims& dims, SsmKind kind, std::int64_t tbar) {
  dims.validate();
  CostReport r;
  r.dims = dims;
  r.kind = kind;
  r.counts = vjp_count(dims.T, tbar);
  r.storage = trace_storage_count(dims.T, dims.K, dims.N, dims.P);
  r.per_vjp = per_vjp_cost(kind, dims.N, dims.P, dims.bs);
  r.averaged_vjp_flops = averaged_vjp_flops(dims.N, dims.P, dims.bs);
  const std::int64_t K = dims.K;
  const std::int64_t N = dims.N;
  const std::int64_t P = dims.P;
  r.total_vjp_flops = K * (r.counts.truncated_per_AB * (r.per_vjp[0].flops + r.per_vjp[1].flops) +
                           r.counts.truncated_C * r.per_vjp[2].flops);
  r.adjoint_state_flops = K * r.counts.truncated_per_AB * N * P * dims.bs;
  const std::int64_t a_out = head_output_size(Network::A, kind, dims.N, dims.P);
  const std::int64_t transition = kind == SsmKind::unstructured ? 2 * N * N : N;
  // heads, transition, Bx + add, Cx, residual add
  const std::int64_t per_step = 2 * P * (a_out + 2 * N * P) + transition + 2 * N * P + N + 2 * N * P + P;
  r.forward_flops = dims.bs * dims.T * K * per_step;
  return r;
}

std::string CostReport::table() const {
  std::ostringstream out;
  out << "dims: K=" << dims.K << " N=" << dims.N << " P=" << dims.P << " T=" << dims.T
      << " bs=" << dims.bs << " variant=" << to_string(kind) << "\n";
  out << "Tbar=" << counts.tbar << (counts.clamped ? " (clamped to T)" : "") << "\n\n";
  out << "vjps per A/B network, full:              " << counts.full_per_AB << "\n";
  out << "vjps per A/B network, truncated formula: " << counts.printed_truncated_per_AB << "  ("
      << std::fixed << std::setprecision(1) << 100.0 * counts.printed_reduction()
      << "% reduction)\n";
  out << "vjps per A/B network, windowed tasks:    " << counts.truncated_per_AB << "  ("
      << 100.0 * counts.reduction() << "% reduction)\n";
  out << "vjps per C network:                      " << counts.truncated_C << "\n\n";
  out << "stored numbers, trace only:   " << storage.trace_only << "\n";
  out << "stored numbers, trace+params: " << storage.with_params << "\n\n";
  out << std::left << std::setw(8) << "network" << std::setw(16) << "memory_numbers"
      << std::setw(16) << "memory_bytes" << "flops\n";
  const char* names[] = {"A", "B", "C"};
  for (int j = 0; j < 3; ++j)
    out << std::setw(8) << names[j] << std::setw(16) << per_vjp[j].memory_numbers << std::setw(16)
        << per_vjp[j].memory_bytes << per_vjp[j].flops << "\n";
  out << "\naveraged vjp flops bs(7NP+3N): " << averaged_vjp_flops << "\n";
  out << "total vjp flops:               " << total_vjp_flops << "\n";
  out << "adjoint state flops:           " << adjoint_state_flops << "\n";
  out << "forward flops:                 " << forward_flops << "\n";
  return out.str();
}

std::vector<MemoryCurveRow> adjoint_vs_backprop_memory_curve(const ModelDims& base,
                                                             SsmVariant variant,
                                                             const std::vector<int>& lengths,
                                                             std::uint64_t seed,
                                                             std::size_t tape_limit) {
  std::vector<MemoryCurveRow> rows;
  for (int T : lengths) {
    ModelDims d = base;
    d.T = T;
    d.validate();
    const StackParams params = StackParams::random(d, variant, seed);
    std::mt19937_64 rng(seed ^ static_cast<std::uint64_t>(T));
    std::normal_distribution<double> normal;
    std::vector<Vec> tokens;
    std::vector<int> targets;
    for (int t = 0; t < T; ++t) {
      Vec x(d.P);
      for (int j = 0; j < d.P; ++j) x(j) = normal(rng);
      tokens.push_back(x);
      targets.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(d.V)));
    }
    MemoryCurveRow row;
    row.context_length = T;
    row.adjoint_numbers = trace_storage_count(T, d.K, d.N, d.P).with_params;
    try {
      ModelTape mt = build_model_tape(params, tokens, LossSpec::cross_entropy(targets), false,
                                      tape_limit);
      row.tape_numbers = static_cast<std::int64_t>(tape_memory_count(mt.tape).scalars);
    } catch (const TapeOverflow&) {
      row.tape_numbers.reset();
    }
    rows.push_back(row);
  }
  return rows;
}

std::string memory_curve_csv(const std::vector<MemoryCurveRow>& rows, std::size_t tape_limit) {
  std::ostringstream out;
  out << "context_length,adjoint_numbers,tape_numbers\n";
  for (const auto& r : rows) {
    out << r.context_length << "," << r.adjoint_numbers << ",";
    if (r.tape_numbers)
      out << *r.tape_numbers;
    else
      out << ">" << tape_limit;  // censored
    out << "\n";
  }
  return out.str();
}

std::string vjp_count_csv(const std::vector<VjpCounts>& rows) {
  std::ostringstream out;
  out << "T,Tbar,full_vjps,truncated_vjps\n";
  for (const auto& c : rows)
    out << c.T << "," << c.tbar << "," << c.full_per_AB << "," << c.truncated_per_AB << "\n";
  return out.str();
}

LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ShapeError("fit_line needs two or more points");
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
  }
  const double mx = sx / n;
  const double my = sy / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  LinearFit fit;
  fit.slope = sxx > 0 ? sxy / sxx : 0.0;
  fit.intercept = my - fit.slope * mx;
  fit.r2 = syy > 0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  return fit;
}

}  // namespace adshard
