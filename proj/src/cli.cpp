#include "adshard/cli.hpp"

#include <cmath>
#include <filesystem>
#include <iomanip>
#include <sstream>

#include "adshard/adjoint.hpp"
#include "adshard/cost_model.hpp"
#include "adshard/distributed.hpp"
#include "adshard/export.hpp"
#include "adshard/synthetic.hpp"

namespace adshard {
namespace {

constexpr Tolerance kFdTolerance{1e-5, 1e-8};
constexpr Tolerance kDetachedTolerance{1e-10, 1e-13};

std::string path_in(const RunConfig& cfg, const std::string& name) {
  return (std::filesystem::path(cfg.out) / name).string();
}

ExecutionOptions exec_of(const RunConfig& cfg) { return {cfg.deterministic, cfg.workers}; }

struct Problem {
  StackParams params;
  std::vector<Vec> tokens;
  LossSpec loss;
};

Problem make_problem(const ModelDims& dims, SsmVariant variant, LossKind loss, std::uint64_t seed,
                     double scale = 0.5) {
  const BigramSource src = BigramSource::make(dims.V, dims.P, seed);
  SyntheticTask task = src.sample(dims.T, loss, seed + 1);
  return {StackParams::random(dims, variant, seed, scale), std::move(task.inputs),
          std::move(task.loss)};
}

double mean_loss(const StackParams& params, const std::vector<SyntheticTask>& data) {
  double sum = 0.0;
  for (const auto& task : data) sum += stack_loss(params, task.inputs, task.loss);
  return sum / static_cast<double>(data.size());
}

}  // namespace

// ---- train ---------------------------------------------------------------

TrainResult train(const RunConfig& cfg) {
  cfg.validate();
  const ModelDims& d = cfg.dims;
  const BigramSource src = BigramSource::make(d.V, d.P, cfg.seed);
  std::vector<SyntheticTask> data;
  for (int s = 0; s < cfg.sequences; ++s)
    data.push_back(src.sample(d.T, cfg.loss, cfg.seed * 1000 + static_cast<std::uint64_t>(s) + 1));

  TrainResult result;
  result.params = StackParams::random(d, cfg.variant, cfg.seed, cfg.init_scale);
  result.initial_eval = mean_loss(result.params, data);
  const ShardPlan plan = plan_shards(d.K, cfg.upsilon.front());
  const ExecutionOptions exec = exec_of(cfg);

  for (int step = 1; step <= cfg.steps; ++step) {
    const SyntheticTask& task = data[(step - 1) % data.size()];
    double loss = 0.0;
    GradVector grad;
    try {
      if (cfg.gradient == GradientSource::adjoint) {
        const DistributedForward fwd = distributed_forward(plan, result.params, task.inputs, task.loss,
                                                           nullptr, step);
        loss = fwd.loss;
        if (!std::isfinite(loss)) throw TrainingDiverged(step);
        grad = distributed_adjoint_gradient(fwd, cfg.effective_tbar(), exec).grad;
      } else {
        loss = stack_loss(result.params, task.inputs, task.loss);
        if (!std::isfinite(loss)) throw TrainingDiverged(step);
        grad = tape_gradient(result.params, task.inputs, task.loss,
                             cfg.gradient == GradientSource::tape_detached);
      }
    } catch (const NumericError& e) {
      throw TrainingDiverged(step, e.what());
    }
    result.step_losses.push_back(loss);
    sgd_step(result.params, grad, cfg.lr);
  }
  result.final_eval = mean_loss(result.params, data);
  if (!std::isfinite(result.final_eval)) throw TrainingDiverged(cfg.steps);
  return result;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  TrainResult r;
  try {
    r = train(cfg);
  } catch (const NumericError& e) {
    out << "training failed: " << e.what() << "\n";
    return 3;
  } catch (const TrainingDiverged& e) {
    out << "training failed: " << e.what() << "\n";
    return 3;
  }
  std::ostringstream csv;
  csv << "step,loss\n" << std::setprecision(17);
  for (std::size_t s = 0; s < r.step_losses.size(); ++s) csv << s + 1 << "," << r.step_losses[s] << "\n";
  write_text(path_in(cfg, "train_log.csv"), csv.str());
  write_gradient(path_in(cfg, "final_params.bin"),
                 GradVector{r.params.layers, r.params.omega}, cfg.dims, cfg.variant.kind);

  out << describe(cfg) << " gradient=" << to_string(cfg.gradient) << "\n";
  out << std::setprecision(10);
  for (std::size_t s = 0; s < r.step_losses.size(); ++s)
    if (s == 0 || (s + 1) % 20 == 0 || s + 1 == r.step_losses.size())
      out << "step " << s + 1 << " loss " << r.step_losses[s] << "\n";
  out << "mean loss over training set: initial " << r.initial_eval << " final " << r.final_eval
      << "\n";
  return 0;
}

// ---- gradcheck -------------------------------------------------------------

GradcheckCase run_gradcheck_preset(const std::string& name, std::uint64_t seed, int workers) {
  GradcheckCase c;
  c.name = name;
  std::ostringstream rep;
  const ExecutionOptions exec{true, workers};
  if (name == "k1") {
    const ModelDims dims{1, 3, 2, 4, 8, 1};
    Problem p = make_problem(dims, {SsmKind::diagonal, Activation::identity}, LossKind::mse, seed);
    const ForwardTrace trace = stack_forward(p.params, p.tokens, p.loss);
    const GradVector adj = adjoint_gradient(p.params, trace, {std::nullopt, exec, nullptr});
    const GradVector fd = finite_difference_gradient(p.params, p.tokens, p.loss, {1e-5, workers});
    const GradientComparison cmp = compare_gradients(adj, fd, dims, SsmKind::diagonal, kFdTolerance);
    rep << "adjoint vs finite differences (rtol 1e-5, atol 1e-8)\n" << cmp.report();
    c.passed = cmp.passed();
    if (!c.passed) rep << "FAILED block " << cmp.first_failure() << "\n";
  } else if (name == "k3") {
    const ModelDims dims{3, 4, 3, 5, 8, 1};
    const SsmVariant variant{SsmKind::diagonal, Activation::sigmoid};
    Problem p = make_problem(dims, variant, LossKind::cross_entropy, seed);
    const ForwardTrace trace = stack_forward(p.params, p.tokens, p.loss);
    const GradVector adj = adjoint_gradient(p.params, trace, {std::nullopt, exec, nullptr});
    const GradVector detached = tape_gradient(p.params, p.tokens, p.loss, true);
    const GradientComparison a =
        compare_gradients(adj, detached, dims, variant.kind, kDetachedTolerance);
    rep << "adjoint vs detached tape (rtol 1e-10, atol 1e-13)\n" << a.report();
    const GradVector full = tape_gradient(p.params, p.tokens, p.loss, false);
    const GradVector fd = finite_difference_gradient(p.params, p.tokens, p.loss, {1e-5, workers});
    const GradientComparison b = compare_gradients(full, fd, dims, variant.kind, kFdTolerance);
    rep << "full tape vs finite differences (rtol 1e-5, atol 1e-8)\n" << b.report();
    const GradientComparison gap = compare_gradients(adj, full, dims, variant.kind, {0.0, 0.0});
    rep << "adjoint vs full tape, informational: max relative gap " << std::scientific
        << gap.max_rel << "\n";
    c.passed = a.passed() && b.passed();
    if (!a.passed()) rep << "FAILED block " << a.first_failure() << " (adjoint vs detached)\n";
    if (!b.passed()) rep << "FAILED block " << b.first_failure() << " (full tape vs fd)\n";
  } else if (name == "saturation") {
    const ModelDims dims{2, 3, 3, 4, 6, 1};
    const SsmVariant variant{SsmKind::unstructured, Activation::tanh};
    Problem p = make_problem(dims, variant, LossKind::cross_entropy, seed, 0.3);
    const ForwardTrace trace = stack_forward(p.params, p.tokens, p.loss);
    const GradVector exact = adjoint_gradient(p.params, trace, {std::nullopt, exec, nullptr});
    bool same = true;
    for (int tbar : {dims.T, dims.T + 1, 2 * dims.T}) {
      const bool eq = adjoint_gradient(p.params, trace, {tbar, exec, nullptr}) == exact;
      rep << "Tbar=" << tbar << " bitwise equal to untruncated: " << (eq ? "yes" : "no") << "\n";
      same = same && eq;
    }
    c.passed = same;
  } else {
    throw ConfigError("unknown gradcheck preset '" + name + "' (k1, k3, saturation)");
  }
  c.report = rep.str();
  return c;
}

int cmd_gradcheck(const RunConfig& cfg, std::ostream& out) {
  std::vector<std::string> names{"k1", "k3", "saturation"};
  if (!cfg.preset.empty()) names = {cfg.preset};
  bool all = true;
  std::string text;
  for (const auto& name : names) {
    const GradcheckCase c = run_gradcheck_preset(name, cfg.seed, cfg.workers);
    text += "[" + c.name + "] " + (c.passed ? "PASS" : "FAIL") + "\n" + c.report + "\n";
    all = all && c.passed;
  }
  out << text;
  write_text(path_in(cfg, "gradcheck.txt"), text);
  return all ? 0 : 1;
}

// ---- distcheck -------------------------------------------------------------

int cmd_distcheck(const RunConfig& cfg, std::ostream& out) {
  const ModelDims& d = cfg.dims;
  Problem p = make_problem(d, cfg.variant, cfg.loss, cfg.seed, cfg.init_scale);
  const ForwardTrace single = stack_forward(p.params, p.tokens, p.loss);
  const GradVector reference =
      adjoint_gradient(p.params, single, {cfg.effective_tbar(), exec_of(cfg), nullptr});

  bool ok = true;
  std::ostringstream rep;
  rep << describe(cfg) << "\n";
  for (int upsilon : cfg.upsilon) {
    const ShardPlan plan = plan_shards(d.K, upsilon);
    MessageLog log;
    const DistributedForward fwd = distributed_forward(plan, p.params, p.tokens, p.loss, &log);
    std::string why;
    const bool trace_ok = shards_match_trace(fwd, single, &why);
    const DistributedGradient g =
        distributed_adjoint_gradient(fwd, cfg.effective_tbar(), exec_of(cfg), nullptr, &log);
    bool grad_ok = false;
    double max_rel = 0.0;
    if (cfg.deterministic) {
      grad_ok = g.grad == reference;
    } else {
      const GradientComparison cmp =
          compare_gradients(g.grad, reference, d, cfg.variant.kind, {1e-12, 0.0});
      grad_ok = cmp.passed();
      max_rel = cmp.max_rel;
    }
    std::string proto_why;
    const bool proto_ok = log.protocol_ok(upsilon, &proto_why);
    rep << "upsilon=" << upsilon << " trace " << (trace_ok ? "matches" : "DIFFERS: " + why)
        << "; gradient " << (grad_ok ? "matches" : "DIFFERS")
        << (cfg.deterministic ? " (bitwise)" : " (<= 1e-12 relative)");
    if (!cfg.deterministic) rep << " max_rel=" << std::scientific << max_rel << std::defaultfloat;
    rep << "; locality violations " << g.locality_violations << "; tensor reads " << g.tensor_reads
        << "; protocol " << (proto_ok ? "ok" : "BROKEN: " + proto_why) << "\n";
    ok = ok && trace_ok && grad_ok && proto_ok && g.locality_violations == 0;
    const std::string suffix = "_u" + std::to_string(upsilon);
    write_text(path_in(cfg, "messages" + suffix + ".log"), log.text());
    write_text(path_in(cfg, "device_memory" + suffix + ".csv"),
               device_memory_csv(device_memory_report(fwd)));
    write_gradient(path_in(cfg, "gradient" + suffix + ".bin"), g.grad, d, cfg.variant.kind);
  }
  rep << (ok ? "verdict: identical gradients\n" : "verdict: MISMATCH\n");
  out << rep.str();
  write_text(path_in(cfg, "distcheck.txt"), rep.str());
  write_trace_binary(path_in(cfg, "trace.bin"), single);
  return ok ? 0 : 1;
}

// ---- cost ------------------------------------------------------------------

int cmd_cost(const RunConfig& cfg, std::ostream& out) {
  const int tbar_req = cfg.effective_tbar();
  const CostReport report = build_cost_report(cfg.dims, cfg.variant.kind, tbar_req);
  std::ostringstream rep;
  if (report.counts.clamped)
    rep << "warning: Tbar=" << tbar_req << " exceeds T=" << cfg.dims.T << ", clamped to T\n";
  rep << report.table() << "\n";

  const GpuSpec gpu = GpuSpec::h100();
  const VjpCost& a = report.per_vjp[0];
  const Throughput own = throughput_estimate(gpu, static_cast<double>(a.memory_bytes),
                                             static_cast<double>(a.flops));
  const Throughput ref = throughput_estimate(gpu, kReferenceVjpBytes, kReferenceVjpFlops);
  rep << std::setprecision(6);
  rep << "H100, A-network vjp from the table row: bandwidth-bound " << own.bandwidth_bound_vjps_per_sec
      << "/s, compute-bound " << own.compute_bound_vjps_per_sec << "/s, resident "
      << own.resident_batches << "\n";
  rep << "H100, reference 0.6MB / 1798144 FLOPs: bandwidth-bound "
      << ref.bandwidth_bound_vjps_per_sec << "/s, compute-bound " << ref.compute_bound_vjps_per_sec
      << "/s, resident " << ref.resident_batches << "\n\n";

  const double per_instance = gpu.flops_per_sec / gpu.mig_instances;
  rep << "upsilon,instances,parallelism,gradient_seconds,serial_gradient_seconds,forward_seconds\n";
  for (int upsilon : cfg.upsilon) {
    const ShardPlan plan = plan_shards(cfg.dims.K, upsilon);
    const SpeedupEstimate s = simulate_speedup(plan, report, cfg.instances, per_instance);
    rep << upsilon << "," << cfg.instances << "," << s.parallelism << "," << s.gradient_seconds
        << "," << s.serial_gradient_seconds << "," << s.forward_seconds << "\n";
  }
  out << rep.str();
  write_text(path_in(cfg, "cost_report.txt"), rep.str());

  std::vector<VjpCounts> rows;
  for (int T : cfg.curve_lengths) rows.push_back(vjp_count(T, std::min(tbar_req, T)));
  write_text(path_in(cfg, "vjp_counts.csv"), vjp_count_csv(rows));
  return 0;
}

// ---- curves ----------------------------------------------------------------

int cmd_curves(const RunConfig& cfg, std::ostream& out) {
  std::vector<int> lengths = cfg.curve_lengths;
  for (std::size_t i = 1; i < lengths.size(); ++i)
    if (lengths[i] <= lengths[i - 1]) throw ConfigError("curve lengths must be strictly increasing");
  const auto rows =
      adjoint_vs_backprop_memory_curve(cfg.dims, cfg.variant, lengths, cfg.seed, cfg.tape_limit);
  write_text(path_in(cfg, "memory_curve.csv"), memory_curve_csv(rows, cfg.tape_limit));

  std::vector<VjpCounts> counts;
  for (int T : lengths) counts.push_back(vjp_count(T, std::min(cfg.effective_tbar(), T)));
  write_text(path_in(cfg, "vjp_counts.csv"), vjp_count_csv(counts));

  std::vector<double> x, ya, yt;
  for (const auto& r : rows)
    if (r.tape_numbers) {
      x.push_back(r.context_length);
      ya.push_back(static_cast<double>(r.adjoint_numbers));
      yt.push_back(static_cast<double>(*r.tape_numbers));
    }
  out << memory_curve_csv(rows, cfg.tape_limit);
  if (x.size() >= 2) {
    const LinearFit fa = fit_line(x, ya);
    const LinearFit ft = fit_line(x, yt);
    out << "slope adjoint " << fa.slope << ", slope tape " << ft.slope << "\n";
  }
  return 0;
}

int run(const RunConfig& cfg, std::ostream& out) {
  cfg.validate();
  std::filesystem::create_directories(cfg.out);
  switch (cfg.mode) {
    case Mode::train: return cmd_train(cfg, out);
    case Mode::gradcheck: return cmd_gradcheck(cfg, out);
    case Mode::distcheck: return cmd_distcheck(cfg, out);
    case Mode::cost: return cmd_cost(cfg, out);
    case Mode::curves: return cmd_curves(cfg, out);
  }
  return 2;
}

}  // namespace adshard
