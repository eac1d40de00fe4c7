#include "adshard/distributed.hpp"

#include <exception>
#include <optional>
#include <sstream>
#include <thread>

#include "adshard/errors.hpp"

namespace adshard {

ShardPlan plan_shards(int K, int upsilon) {
  if (K < 1) throw ConfigError("K must be >= 1, got " + std::to_string(K));
  if (upsilon < 1) throw ConfigError("device count must be >= 1, got " + std::to_string(upsilon));
  if (K % upsilon != 0)
    throw ConfigError("device count " + std::to_string(upsilon) + " does not divide K=" +
                      std::to_string(K));
  return ShardPlan{K, upsilon, K / upsilon};
}

int ShardPlan::device_of(int k) const {
  if (k < 1 || k > K) throw IndexError("no layer " + std::to_string(k));
  return (k - 1) / per_device + 1;
}

std::vector<PlacementRange> ShardPlan::placement(int device, int T) const {
  if (device < 1 || device > upsilon) throw IndexError("no device " + std::to_string(device));
  const int lo = first_layer(device);
  const int hi = last_layer(device);
  return {
      {"dl/dy_K", 0, 0, 1, T},
      {"h", lo, hi, 1, T},
      {"C", lo, hi, 1, T},
      {"y_hat", lo - 1, hi - 1, 1, T},
      {"A", lo, hi, 2, T},
      {"theta", lo, hi, 0, 0},
      {"gradient", lo, hi, 0, 0},
  };
}

std::string_view to_string(MsgKind kind) {
  switch (kind) {
    case MsgKind::BoundaryActivations: return "BoundaryActivations";
    case MsgKind::CotangentBroadcast: return "CotangentBroadcast";
    case MsgKind::Done: return "Done";
  }
  return "?";
}

// ---- message log -------------------------------------------------------

void MessageLog::record(const DeviceMsg& msg) {
  std::lock_guard lock(mutex_);
  entries_.push_back({msg.kind, msg.source, msg.destination, msg.sequence});
}

std::vector<std::string> MessageLog::lines() const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> out;
  for (const Entry& e : entries_) {
    std::ostringstream line;
    line << "seq=";
    if (e.sequence)
      line << e.sequence;
    else
      line << "-";
    line << " " << to_string(e.kind) << " " << e.source << "->";
    if (e.destination == kAllDevices)
      line << "all";
    else if (e.destination == kCoordinator)
      line << "coordinator";
    else
      line << e.destination;
    out.push_back(line.str());
  }
  return out;
}

std::string MessageLog::text() const {
  std::string out;
  for (const auto& line : lines()) out += line + "\n";
  return out;
}

std::size_t MessageLog::count(MsgKind kind) const {
  std::lock_guard lock(mutex_);
  std::size_t n = 0;
  for (const Entry& e : entries_) n += e.kind == kind;
  return n;
}

bool MessageLog::protocol_ok(int upsilon, std::string* why) const {
  std::lock_guard lock(mutex_);
  auto fail = [&](const std::string& msg) {
    if (why) *why = msg;
    return false;
  };
  // Group by sequence, keeping send order within each.
  std::vector<int> order;
  std::vector<std::vector<Entry>> groups;
  for (const Entry& e : entries_) {
    if (e.sequence == 0) continue;
    std::size_t g = 0;
    while (g < order.size() && order[g] != e.sequence) ++g;
    if (g == order.size()) {
      order.push_back(e.sequence);
      groups.emplace_back();
    }
    groups[g].push_back(e);
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& seq = groups[g];
    const std::string tag = "sequence " + std::to_string(order[g]) + ": ";
    if (static_cast<int>(seq.size()) != upsilon)
      return fail(tag + "expected " + std::to_string(upsilon) + " messages, saw " +
                  std::to_string(seq.size()));
    for (int i = 0; i < upsilon - 1; ++i) {
      const Entry& e = seq[i];
      if (e.kind != MsgKind::BoundaryActivations || e.source != i + 1 || e.destination != i + 2)
        return fail(tag + "message " + std::to_string(i + 1) + " is not BoundaryActivations " +
                    std::to_string(i + 1) + "->" + std::to_string(i + 2));
    }
    const Entry& last = seq.back();
    if (last.kind != MsgKind::CotangentBroadcast || last.source != upsilon)
      return fail(tag + "last message is not a CotangentBroadcast from the last device");
  }
  return true;
}

// ---- channel -----------------------------------------------------------

void Channel::send(DeviceMsg msg) {
  {
    std::lock_guard lock(mutex_);
    if (closed_) throw ProtocolError("send on a closed channel");
    queue_.push_back(std::move(msg));
  }
  cv_.notify_one();
}

DeviceMsg Channel::receive() {
  std::unique_lock lock(mutex_);
  cv_.wait(lock, [&] { return closed_ || !queue_.empty(); });
  if (queue_.empty()) throw ProtocolError("channel closed while waiting for a message");
  DeviceMsg msg = std::move(queue_.front());
  queue_.pop_front();
  return msg;
}

void Channel::close() {
  {
    std::lock_guard lock(mutex_);
    closed_ = true;
  }
  cv_.notify_all();
}

// ---- forward -----------------------------------------------------------

namespace {

// Runs fn(device) on one thread per device. The first failure closes every
// channel so blocked peers wake up, and is rethrown after the join.
template <typename Fn>
void run_devices(int upsilon, std::vector<std::unique_ptr<Channel>>& channels, Fn&& fn) {
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> devices;
    for (int d = 1; d <= upsilon; ++d) {
    devices.emplace_back([&, d] {
      try {
        fn(d);
      } catch (...) {
        {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
        for (auto& ch : channels) ch->close();
      }
    });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

DeviceMsg expect(Channel& inbox, MsgKind kind, int source, int sequence, int device) {
  DeviceMsg msg = inbox.receive();
  if (msg.kind != kind || msg.source != source || msg.sequence != sequence)
    throw ProtocolError("device " + std::to_string(device) + " expected " +
                      std::string(to_string(kind)) + " from " + std::to_string(source) +
                      " (sequence " + std::to_string(sequence) + "), got " +
                      std::string(to_string(msg.kind)) + " from " + std::to_string(msg.source) +
                      " (sequence " + std::to_string(msg.sequence) + ")");
  return msg;
}

void device_forward(DeviceShard& shard, const ShardPlan& plan, std::span<const Vec> tokens,
                  const LossSpec& loss, std::vector<std::unique_ptr<Channel>>& inbox,
                  MessageLog* log, int sequence) {
  const ModelDims& d = shard.dims;
  const int me = shard.device;
  std::vector<Vec> y_prev;
  std::vector<Vec> y_hat_prev;
  if (me == 1) {
    for (const Vec& x : tokens) {
    if (x.size() != d.P) throw ShapeError("tokens must be P-vectors");
    y_prev.push_back(x);
    y_hat_prev.push_back(normalize(x));
    }
  } else {
    DeviceMsg msg = expect(*inbox[me], MsgKind::BoundaryActivations, me - 1, sequence, me);
    if (msg.layer != shard.k_first - 1)
    throw ProtocolError("device " + std::to_string(me) + " received boundary of layer " +
                        std::to_string(msg.layer) + ", expected " +
                        std::to_string(shard.k_first - 1));
    y_prev = std::move(msg.y);
    y_hat_prev = std::move(msg.y_hat);
  }

  const Vec h0 = Vec::Zero(d.N);
  for (int k = shard.k_first; k <= shard.k_last; ++k) {
    const int row = k - shard.k_first;
    LayerForward layer;
    try {
    layer = ssm_layer_forward(shard.params[row], shard.variant, d.N, y_hat_prev, h0, k);
    } catch (const NumericError& e) {
    Location where = e.where();
    where.device = me;
    throw NumericError(std::string("non-finite forward value [") + e.what() + "]", where);
    }
    std::vector<Vec> y_k;
    y_k.reserve(d.T);
    for (int t = 1; t <= d.T; ++t) y_k.push_back(y_prev[t - 1] + layer.y_tilde[t - 1]);
    shard.y_hat.push_back(std::move(y_hat_prev));
    shard.A.emplace_back(std::make_move_iterator(layer.A.begin() + 1),
                       std::make_move_iterator(layer.A.end()));
    shard.C.push_back(std::move(layer.C));
    shard.h.emplace_back(std::make_move_iterator(layer.h.begin() + 1),
                       std::make_move_iterator(layer.h.end()));
    y_hat_prev.clear();
    if (k < d.K)
    for (const Vec& y : y_k) y_hat_prev.push_back(normalize(y));
    shard.y.push_back(y_k);
    y_prev = std::move(y_k);
  }

  if (me < plan.upsilon) {
    DeviceMsg out;
    out.kind = MsgKind::BoundaryActivations;
    out.source = me;
    out.destination = me + 1;
    out.sequence = sequence;
    out.layer = shard.k_last;
    out.y = std::move(y_prev);
    out.y_hat = std::move(y_hat_prev);
    if (log) log->record(out);
    inbox[me + 1]->send(std::move(out));
    DeviceMsg bc = expect(*inbox[me], MsgKind::CotangentBroadcast, plan.upsilon, sequence, me);
    shard.cotangent = std::move(bc.cotangent);
    return;
  }

  HeadOutput head = apply_language_head(shard.omega, y_prev, loss);
  shard.logits = std::move(head.logits);
  shard.dl_do = std::move(head.dl_do);
  shard.cotangent = head.cotangent;
  shard.loss = head.loss;
  DeviceMsg bc;
  bc.kind = MsgKind::CotangentBroadcast;
  bc.source = me;
  bc.destination = kAllDevices;
  bc.sequence = sequence;
  bc.cotangent = std::move(head.cotangent);
  if (log) log->record(bc);
  for (int other = 1; other < plan.upsilon; ++other) inbox[other]->send(bc);
}

}  // namespace

DistributedForward distributed_forward(const ShardPlan& plan, const StackParams& params,
                                     std::span<const Vec> tokens, const LossSpec& loss,
                                     MessageLog* log, int sequence) {
  params.validate();
  const ModelDims& d = params.dims;
  if (plan.K != d.K) throw ConfigError("shard plan K does not match the model");
  if (static_cast<int>(tokens.size()) != d.T)
    throw ShapeError("expected " + std::to_string(d.T) + " tokens, got " +
                   std::to_string(tokens.size()));
  if (sequence < 1) throw ConfigError("sequence ids start at 1");
  loss.validate(d.T, d.V);

  DistributedForward out;
  out.plan = plan;
  out.shards.resize(plan.upsilon);
  for (int dev = 1; dev <= plan.upsilon; ++dev) {
    DeviceShard& s = out.shards[dev - 1];
    s.device = dev;
    s.k_first = plan.first_layer(dev);
    s.k_last = plan.last_layer(dev);
    s.dims = d;
    s.variant = params.variant;
    s.params.assign(params.layers.begin() + (s.k_first - 1), params.layers.begin() + s.k_last);
    if (dev == plan.upsilon) s.omega = params.omega;
  }

  std::vector<std::unique_ptr<Channel>> inbox;
  for (int dev = 0; dev <= plan.upsilon; ++dev) inbox.push_back(std::make_unique<Channel>());
  run_devices(plan.upsilon, inbox, [&](int dev) {
    device_forward(out.shards[dev - 1], plan, tokens, loss, inbox, log, sequence);
  });
  out.loss = out.shards.back().loss;
  return out;
}

// ---- device-local layer view -------------------------------------------

DeviceLayer::DeviceLayer(const DeviceShard& shard, int k, std::atomic<std::uint64_t>* reads,
                         std::atomic<std::uint64_t>* violations)
    : shard_(shard), k_(k), row_(k - shard.k_first), h0_(Vec::Zero(shard.dims.N)),
      reads_(reads), violations_(violations) {
  if (!shard.hosts(k)) violate("layer " + std::to_string(k));
}

void DeviceLayer::violate(const std::string& tensor) const {
  if (violations_) violations_->fetch_add(1, std::memory_order_relaxed);
  throw LocalityError(tensor, shard_.device);
}

void DeviceLayer::check_t(const char* name, int t, int lo) const {
  if (t < lo || t > shard_.dims.T)
    violate(std::string(name) + "_" + std::to_string(k_) + "^" + std::to_string(t));
  if (reads_) reads_->fetch_add(1, std::memory_order_relaxed);
}

std::span<const Vec> DeviceLayer::A_range(int first, int last) const {
  if (first == last + 1) return {};
  check_t("A", first, 2);
  check_t("A", last, 2);
  if (first > last) throw IndexError("reversed A range");
  return std::span<const Vec>(shard_.A[row_]).subspan(first - 2, last - first + 1);
}

const Mat& DeviceLayer::C(int t) const {
  check_t("C", t, 1);
  return shard_.C[row_][t - 1];
}

const Vec& DeviceLayer::h(int t) const {
  // h^0 is the fixed zero initial state, not a stored tensor
  if (t == 0) return h0_;
  check_t("h", t, 1);
  return shard_.h[row_][t - 1];
}

const Vec& DeviceLayer::input(int t) const {
  check_t("y_hat", t, 1);
  return shard_.y_hat[row_][t - 1];
}

const Vec& DeviceLayer::cotangent(int t) const {
  check_t("dl/dy_K", t, 1);
  if (shard_.cotangent.size() != static_cast<std::size_t>(shard_.dims.T))
    violate("dl/dy_K (not received)");
  return shard_.cotangent[t - 1];
}

// ---- gradient phase ----------------------------------------------------

DistributedGradient distributed_adjoint_gradient(const DistributedForward& forward, int tbar,
                                                 const ExecutionOptions& exec,
                                                 VjpCounter* counter, MessageLog* log) {
  if (forward.shards.empty()) throw ConfigError("no device shards");
  const ModelDims& d = forward.shards.front().dims;
  if (tbar < 1) throw ConfigError("truncation length must be >= 1");
  const int upsilon = forward.plan.upsilon;

  std::atomic<std::uint64_t> reads{0};
  std::atomic<std::uint64_t> violations{0};
  std::vector<std::vector<LayerParams>> blocks(upsilon);
  Mat omega_grad;

  std::vector<std::unique_ptr<Channel>> channels;
  channels.push_back(std::make_unique<Channel>());  // coordinator inbox
  Channel& coordinator = *channels.front();
  run_devices(upsilon, channels, [&](int dev) {
    const DeviceShard& shard = forward.shards[dev - 1];
    for (int k = shard.k_first; k <= shard.k_last; ++k) {
      DeviceLayer layer(shard, k, &reads, &violations);
      blocks[dev - 1].push_back(layer_gradient(shard.params[k - shard.k_first], shard.variant,
                                               layer, k, d.T, tbar, exec, counter));
    }
    if (dev == upsilon) {
      const std::vector<Vec>& y_last = shard.y.back();
      Mat g = Mat::Zero(d.V, d.P);
      for (int t = 1; t <= d.T; ++t) g += shard.dl_do[t - 1] * y_last[t - 1].transpose();
      omega_grad = std::move(g);
    }
    DeviceMsg done;
    done.kind = MsgKind::Done;
    done.source = dev;
    done.destination = kCoordinator;
    coordinator.send(std::move(done));
  });

  // arrival order is scheduling noise; log in device order
  std::vector<std::optional<DeviceMsg>> arrived(upsilon + 1);
  for (int i = 0; i < upsilon; ++i) {
    DeviceMsg msg = coordinator.receive();
    if (msg.kind != MsgKind::Done || msg.source < 1 || msg.source > upsilon || arrived[msg.source])
      throw ProtocolError("unexpected message at the coordinator");
    arrived[msg.source] = std::move(msg);
  }
  if (log)
    for (int dev = 1; dev <= upsilon; ++dev) log->record(*arrived[dev]);

  DistributedGradient out;
  out.grad.layers.reserve(d.K);
  for (auto& block : blocks)
    for (auto& layer : block) out.grad.layers.push_back(std::move(layer));
  out.grad.omega = std::move(omega_grad);
  out.tensor_reads = reads.load();
  out.locality_violations = violations.load();
  return out;
}

// ---- checks and reports ------------------------------------------------

namespace {

template <typename T>
bool same(const T& a, const T& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

}  // namespace

bool shards_match_trace(const DistributedForward& forward, const ForwardTrace& trace,
                        std::string* why) {
  auto fail = [&](const std::string& what) {
    if (why) *why = what;
    return false;
  };
  const ModelDims& d = trace.dims;
  for (const DeviceShard& s : forward.shards) {
    if (!(s.dims == d)) return fail("dims differ on device " + std::to_string(s.device));
    for (int k = s.k_first; k <= s.k_last; ++k) {
      const int row = k - s.k_first;
      for (int t = 1; t <= d.T; ++t) {
        const std::string at = "(k=" + std::to_string(k) + ", t=" + std::to_string(t) + ")";
        if (t >= 2 && !same(s.A[row][t - 2], trace.A(k, t))) return fail("A differs at " + at);
        if (!same(s.C[row][t - 1], trace.C(k, t))) return fail("C differs at " + at);
        if (!same(s.h[row][t - 1], trace.h(k, t))) return fail("h differs at " + at);
        if (!same(s.y_hat[row][t - 1], trace.y_hat(k - 1, t))) return fail("y_hat differs at " + at);
        if (!same(s.y[row][t - 1], trace.y(k, t))) return fail("y differs at " + at);
      }
    }
    for (int t = 1; t <= d.T; ++t)
      if (!same(s.cotangent.at(t - 1), trace.cotangent(t)))
        return fail("cotangent differs on device " + std::to_string(s.device));
  }
  const DeviceShard& last = forward.shards.back();
  for (int t = 1; t <= d.T; ++t) {
    if (!same(last.logits.at(t - 1), trace.logits(t))) return fail("logits differ");
    if (!same(last.dl_do.at(t - 1), trace.dl_do(t))) return fail("dl/do differs");
  }
  if (forward.loss != trace.loss) return fail("loss differs");
  return true;
}

std::vector<DeviceMemory> device_memory_report(const DistributedForward& forward) {
  std::vector<DeviceMemory> rows;
  for (const DeviceShard& s : forward.shards) {
    DeviceMemory m;
    m.device = s.device;
    for (std::size_t r = 0; r < s.A.size(); ++r) {
      for (const Vec& v : s.A[r]) m.A += v.size();
      for (const Mat& c : s.C[r]) m.C += c.size();
      for (const Vec& v : s.h[r]) m.h += v.size();
      for (const Vec& v : s.y_hat[r]) m.y_hat += v.size();
    }
    for (const Vec& v : s.cotangent) m.cotangent += v.size();
    for (const LayerParams& p : s.params) m.params += p.a.size() + p.b.size() + p.c.size();
    m.gradient = m.params;
    if (s.device == forward.plan.upsilon) {
      m.omega = 2 * s.omega.size();  // Omega and its gradient
      for (const Vec& v : s.y.back()) m.omega += v.size();
      for (const Vec& v : s.dl_do) m.omega += v.size();
    }
    rows.push_back(m);
  }
  return rows;
}

std::string device_memory_csv(const std::vector<DeviceMemory>& rows) {
  std::ostringstream out;
  out << "device,A,C,h,y_hat,cotangent,params,gradient,omega,trace_total,total\n";
  for (const DeviceMemory& m : rows)
    out << m.device << "," << m.A << "," << m.C << "," << m.h << "," << m.y_hat << ","
        << m.cotangent << "," << m.params << "," << m.gradient << "," << m.omega << ","
        << m.trace() << "," << m.total() << "\n";
  return out.str();
}

SpeedupEstimate simulate_speedup(const ShardPlan& plan, const CostReport& cost,
                                 int instances_per_device, double flops_per_instance) {
  if (instances_per_device < 1) throw ConfigError("instances per device must be >= 1");
  if (!(flops_per_instance > 0)) throw ConfigError("per-instance FLOP rate must be positive");
  SpeedupEstimate e;
  e.parallelism = plan.upsilon * instances_per_device;
  const double work = static_cast<double>(cost.total_vjp_flops + cost.adjoint_state_flops);
  e.serial_gradient_seconds = work / flops_per_instance;
  e.gradient_seconds = work / (e.parallelism * flops_per_instance);
  e.forward_seconds = static_cast<double>(cost.forward_flops) / flops_per_instance;
  return e;
}

}  // namespace adshard
