#pragma once

// Simulated multi-device execution: pipelined forward with typed messages,
// per-device gradient phase restricted to locally placed tensors.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "adshard/adjoint.hpp"
#include "adshard/cost_model.hpp"
#include "adshard/grad_vector.hpp"
#include "adshard/model.hpp"

namespace adshard {

/// One tensor family placed on a device: indices k in [k_first, k_last], t in [t_first, t_last].
struct PlacementRange {
  std::string tensor;  // "dl/dy_K", "h", "C", "y_hat", "A", "theta", "gradient"
  int k_first = 0;
  int k_last = 0;
  int t_first = 0;
  int t_last = 0;
};

struct ShardPlan {
  int K = 0;
  int upsilon = 0;
  int per_device = 0;  // K / upsilon

  int first_layer(int device) const { return (device - 1) * per_device + 1; }
  int last_layer(int device) const { return device * per_device; }
  int device_of(int k) const;
  bool hosts(int device, int k) const { return k >= first_layer(device) && k <= last_layer(device); }
  /// Placement ranges of `device` for sequence length T.
  std::vector<PlacementRange> placement(int device, int T) const;
};

/// Throws ConfigError unless upsilon >= 1 and upsilon divides K.
ShardPlan plan_shards(int K, int upsilon);

enum class MsgKind { BoundaryActivations, CotangentBroadcast, Done };
std::string_view to_string(MsgKind kind);

inline constexpr int kAllDevices = -1;
inline constexpr int kCoordinator = 0;

struct DeviceMsg {
  MsgKind kind = MsgKind::Done;
  int source = 0;
  int destination = 0;  // kAllDevices for the broadcast
  int sequence = 0;     // 0 for messages outside a sequence
  int layer = 0;        // BoundaryActivations: index of the residual stream sent
  std::vector<Vec> y;
  std::vector<Vec> y_hat;
  std::vector<Vec> cotangent;
};

/// Thread-safe, append-only record of every message sent.
class MessageLog {
 public:
  void record(const DeviceMsg& msg);
  std::vector<std::string> lines() const;
  std::string text() const;
  /// Every sequence's messages read (BoundaryActivations){upsilon-1} CotangentBroadcast.
  bool protocol_ok(int upsilon, std::string* why = nullptr) const;
  std::size_t count(MsgKind kind) const;

 private:
  struct Entry {
    MsgKind kind;
    int source;
    int destination;
    int sequence;
  };
  mutable std::mutex mutex_;
  std::vector<Entry> entries_;
};

/// Blocking FIFO between devices. A closed channel throws ProtocolError on receive.
class Channel {
 public:
  void send(DeviceMsg msg);
  DeviceMsg receive();
  void close();

 private:
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<DeviceMsg> queue_;
  bool closed_ = false;
};

/// Everything a device keeps after the forward pass. Indices are global (k, t).
struct DeviceShard {
  int device = 0;
  int k_first = 0;
  int k_last = 0;
  ModelDims dims;
  SsmVariant variant;
  std::vector<LayerParams> params;            // hosted layers
  std::vector<std::vector<Vec>> A;            // [k-k_first][t-2], t = 2..T
  std::vector<std::vector<Mat>> C;            // [k-k_first][t-1]
  std::vector<std::vector<Vec>> h;            // [k-k_first][t-1], t = 1..T
  std::vector<std::vector<Vec>> y_hat;        // [k-k_first][t-1], input of layer k
  std::vector<std::vector<Vec>> y;            // [k-k_first][t-1], forward residual stream
  std::vector<Vec> cotangent;                 // [t-1]
  // last device only
  Mat omega;
  std::vector<Vec> logits;
  std::vector<Vec> dl_do;
  double loss = 0.0;

  bool hosts(int k) const { return k >= k_first && k <= k_last; }
};

struct DistributedForward {
  ShardPlan plan;
  std::vector<DeviceShard> shards;  // index device-1
  double loss = 0.0;
};

/// Runs one sequence through the device pipeline. Messages go to `log` when given.
DistributedForward distributed_forward(const ShardPlan& plan, const StackParams& params,
                                       std::span<const Vec> tokens, const LossSpec& loss,
                                       MessageLog* log = nullptr, int sequence = 1);

/// Device-local view of layer k. Any read outside the shard's placement bumps
/// `violations` and throws LocalityError.
class DeviceLayer final : public LayerInputs {
 public:
  DeviceLayer(const DeviceShard& shard, int k, std::atomic<std::uint64_t>* reads,
              std::atomic<std::uint64_t>* violations);

  std::span<const Vec> A_range(int first, int last) const override;
  const Mat& C(int t) const override;
  const Vec& h(int t) const override;
  const Vec& input(int t) const override;
  const Vec& cotangent(int t) const override;

 private:
  [[noreturn]] void violate(const std::string& tensor) const;
  void check_t(const char* name, int t, int lo) const;

  const DeviceShard& shard_;
  int k_;
  int row_;
  Vec h0_;
  std::atomic<std::uint64_t>* reads_;
  std::atomic<std::uint64_t>* violations_;
};

struct DistributedGradient {
  GradVector grad;
  std::uint64_t tensor_reads = 0;
  std::uint64_t locality_violations = 0;
};

/// Each device computes its hosted blocks (and Omega on the last device) in
/// its own thread; assembly is concatenation by layer.
DistributedGradient distributed_adjoint_gradient(const DistributedForward& forward, int tbar,
                                                 const ExecutionOptions& exec = {},
                                                 VjpCounter* counter = nullptr,
                                                 MessageLog* log = nullptr);

/// Compares the shard union against a single-device trace, bitwise, skipping A^1.
bool shards_match_trace(const DistributedForward& forward, const ForwardTrace& trace,
                        std::string* why = nullptr);

struct DeviceMemory {
  int device = 0;
  std::int64_t A = 0, C = 0, h = 0, y_hat = 0, cotangent = 0;
  std::int64_t params = 0, gradient = 0;
  std::int64_t omega = 0;  // Omega, y_K, logits and its gradient, last device only

  std::int64_t trace() const { return A + C + h + y_hat + cotangent; }
  std::int64_t total() const { return trace() + params + gradient + omega; }
};

std::vector<DeviceMemory> device_memory_report(const DistributedForward& forward);
std::string device_memory_csv(const std::vector<DeviceMemory>& rows);

struct SpeedupEstimate {
  int parallelism = 0;  // devices * instances
  double gradient_seconds = 0.0;
  double serial_gradient_seconds = 0.0;
  double forward_seconds = 0.0;  // pipeline stages run one after another
};

SpeedupEstimate simulate_speedup(const ShardPlan& plan, const CostReport& cost,
                                 int instances_per_device, double flops_per_instance);

}  // namespace adshard
