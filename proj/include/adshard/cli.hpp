#pragma once

// Mode implementations behind the adshard command line. Each returns the
// process exit code and writes its report to `out` and to files in cfg.out.

#include <ostream>
#include <string>
#include <vector>

#include "adshard/config.hpp"
#include "adshard/grad_vector.hpp"
#include "adshard/reference_grad.hpp"

namespace adshard {

/// Thrown when a training step produces a non-finite loss.
class TrainingDiverged : public std::runtime_error {
 public:
  explicit TrainingDiverged(int step, const std::string& detail = {})
      : std::runtime_error("loss diverged (non-finite) at step " + std::to_string(step) +
                           (detail.empty() ? "" : ": " + detail)),
        step_(step) {}
  int step() const noexcept { return step_; }

 private:
  int step_;
};

struct TrainResult {
  std::vector<double> step_losses;  // loss of the sequence used at each step, before the update
  double initial_eval = 0.0;        // mean loss over the training sequences
  double final_eval = 0.0;
  StackParams params;
};

TrainResult train(const RunConfig& cfg);

struct GradcheckCase {
  std::string name;
  bool passed = false;
  std::string report;
};

/// Presets: "k1" (adjoint vs finite differences), "k3" (adjoint vs detached tape,
/// full tape vs finite differences), "saturation" (Tbar = T bitwise).
GradcheckCase run_gradcheck_preset(const std::string& name, std::uint64_t seed, int workers);

int cmd_train(const RunConfig& cfg, std::ostream& out);
int cmd_gradcheck(const RunConfig& cfg, std::ostream& out);
int cmd_distcheck(const RunConfig& cfg, std::ostream& out);
int cmd_cost(const RunConfig& cfg, std::ostream& out);
int cmd_curves(const RunConfig& cfg, std::ostream& out);

/// Validates cfg, creates cfg.out and dispatches on cfg.mode.
int run(const RunConfig& cfg, std::ostream& out);

}  // namespace adshard
