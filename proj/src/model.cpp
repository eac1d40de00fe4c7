#include "adshard/model.hpp"

#include <cmath>
#include <random>
#include <sstream>

namespace adshard {

std::string Location::describe() const {
  std::ostringstream out;
  out << "(";
  const char* sep = "";
  auto field = [&](const char* name, int value) {
    if (value != 0) {
      out << sep << name << "=" << value;
      sep = ", ";
    }
  };
  field("device", device);
  field("t", t);
  field("k", k);
  field("tau", tau);
  out << ")";
  return out.str();
}

std::string_view to_string(SsmKind kind) {
  switch (kind) {
    case SsmKind::unstructured: return "unstructured";
    case SsmKind::diagonal: return "diagonal";
    case SsmKind::scalar: return "scalar";
  }
  return "?";
}

std::string_view to_string(Activation act) {
  switch (act) {
    case Activation::identity: return "identity";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

std::string_view to_string(Network net) {
  switch (net) {
    case Network::A: return "A";
    case Network::B: return "B";
    case Network::C: return "C";
  }
  return "?";
}

std::string_view to_string(LossKind kind) {
  return kind == LossKind::cross_entropy ? "cross_entropy" : "mse";
}

SsmKind parse_ssm_kind(std::string_view text) {
  if (text == "unstructured") return SsmKind::unstructured;
  if (text == "diagonal") return SsmKind::diagonal;
  if (text == "scalar") return SsmKind::scalar;
  throw ConfigError("unknown SSM variant '" + std::string(text) + "'");
}

Activation parse_activation(std::string_view text) {
  if (text == "identity") return Activation::identity;
  if (text == "sigmoid") return Activation::sigmoid;
  if (text == "tanh") return Activation::tanh;
  throw ConfigError("unknown head activation '" + std::string(text) + "'");
}

LossKind parse_loss_kind(std::string_view text) {
  if (text == "cross_entropy" || text == "ce") return LossKind::cross_entropy;
  if (text == "mse") return LossKind::mse;
  throw ConfigError("unknown loss '" + std::string(text) + "'");
}

void ModelDims::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(what);
  };
  require(K >= 1, "K must be >= 1");
  require(N >= 1, "N must be >= 1");
  require(P >= 1, "P must be >= 1");
  require(V >= 2, "V must be >= 2");
  require(T >= 1, "T must be >= 1");
  require(bs >= 1, "bs must be >= 1");
}

int head_output_size(Network net, SsmKind kind, int N, int P) {
  switch (net) {
    case Network::A:
      switch (kind) {
        case SsmKind::unstructured: return N * N;
        case SsmKind::diagonal: return N;
        case SsmKind::scalar: return 1;
      }
      break;
    case Network::B:
    case Network::C:
      return N * P;
  }
  return 0;
}

HeadParams HeadParams::zeros(int out, int in) {
  return HeadParams{Mat::Zero(out, in), Vec::Zero(out)};
}

HeadParams& HeadParams::operator+=(const HeadParams& other) {
  weight += other.weight;
  bias += other.bias;
  return *this;
}

bool HeadParams::operator==(const HeadParams& other) const {
  return weight.rows() == other.weight.rows() && weight.cols() == other.weight.cols() &&
         bias.size() == other.bias.size() && (weight.array() == other.weight.array()).all() &&
         (bias.array() == other.bias.array()).all();
}

HeadParams& LayerParams::head(Network net) {
  switch (net) {
    case Network::A: return a;
    case Network::B: return b;
    case Network::C: return c;
  }
  return a;
}

const HeadParams& LayerParams::head(Network net) const {
  return const_cast<LayerParams&>(*this).head(net);
}

LayerParams& LayerParams::operator+=(const LayerParams& other) {
  a += other.a;
  b += other.b;
  c += other.c;
  return *this;
}

StackParams StackParams::zeros(const ModelDims& dims, SsmVariant variant) {
  dims.validate();
  StackParams params;
  params.dims = dims;
  params.variant = variant;
  params.layers.reserve(dims.K);
  for (int k = 0; k < dims.K; ++k) {
    LayerParams layer;
    layer.a = HeadParams::zeros(head_output_size(Network::A, variant.kind, dims.N, dims.P), dims.P);
    layer.b = HeadParams::zeros(head_output_size(Network::B, variant.kind, dims.N, dims.P), dims.P);
    layer.c = HeadParams::zeros(head_output_size(Network::C, variant.kind, dims.N, dims.P), dims.P);
    params.layers.push_back(std::move(layer));
  }
  params.omega = Mat::Zero(dims.V, dims.P);
  return params;
}

StackParams StackParams::random(const ModelDims& dims, SsmVariant variant, std::uint64_t seed,
                                double scale) {
  StackParams params = zeros(dims, variant);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double w_std = scale / std::sqrt(static_cast<double>(dims.P));
  auto fill = [&](HeadParams& head) {
    for (Eigen::Index r = 0; r < head.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < head.weight.cols(); ++c) head.weight(r, c) = w_std * normal(rng);
    for (Eigen::Index r = 0; r < head.bias.size(); ++r) head.bias(r) = scale * normal(rng);
  };
  for (auto& layer : params.layers) {
    fill(layer.a);
    fill(layer.b);
    fill(layer.c);
  }
  for (Eigen::Index r = 0; r < params.omega.rows(); ++r)
    for (Eigen::Index c = 0; c < params.omega.cols(); ++c) params.omega(r, c) = w_std * normal(rng);
  return params;
}

void StackParams::validate() const {
  dims.validate();
  if (static_cast<int>(layers.size()) != dims.K)
    throw ShapeError("expected " + std::to_string(dims.K) + " layer triples, got " +
                     std::to_string(layers.size()));
  for (std::size_t k = 0; k < layers.size(); ++k) {
    for (Network net : {Network::A, Network::B, Network::C}) {
      const HeadParams& head = layers[k].head(net);
      const int out = head_output_size(net, variant.kind, dims.N, dims.P);
      if (head.weight.rows() != out || head.weight.cols() != dims.P || head.bias.size() != out)
        throw ShapeError("head " + std::string(to_string(net)) + std::to_string(k + 1) +
                         " has the wrong shape");
      if (!head.weight.allFinite() || !head.bias.allFinite())
        throw NumericError("non-finite parameter in head " + std::string(to_string(net)),
                           Location{.k = static_cast<int>(k) + 1});
    }
  }
  if (omega.rows() != dims.V || omega.cols() != dims.P) throw ShapeError("Omega must be V x P");
  if (!omega.allFinite()) throw NumericError("non-finite entry in Omega", {});
}

double activate(Activation act, double u) {
  switch (act) {
    case Activation::identity: return u;
    case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-u));
    case Activation::tanh: return std::tanh(u);
  }
  return u;
}

double activate_derivative(Activation act, double u) {
  switch (act) {
    case Activation::identity: return 1.0;
    case Activation::sigmoid: {
      const double s = 1.0 / (1.0 + std::exp(-u));
      return s * (1.0 - s);
    }
    case Activation::tanh: {
      const double th = std::tanh(u);
      return 1.0 - th * th;
    }
  }
  return 1.0;
}

Vec head_eval(const HeadParams& params, const Vec& x, Activation act, Location where) {
  if (params.weight.cols() != x.size() || params.weight.rows() != params.bias.size())
    throw ShapeError("head_eval: weight " + std::to_string(params.weight.rows()) + "x" +
                     std::to_string(params.weight.cols()) + ", bias " +
                     std::to_string(params.bias.size()) + ", input " + std::to_string(x.size()));
  Vec out = params.weight * x + params.bias;
  if (act != Activation::identity) out = out.unaryExpr([act](double u) { return activate(act, u); });
  if (!out.allFinite()) throw NumericError("non-finite head output", where);
  return out;
}

Vec apply_transition(SsmKind kind, const Vec& a, const Vec& h) {
  switch (kind) {
    case SsmKind::unstructured: {
      const auto n = h.size();
      return Eigen::Map<const RowMajorMat>(a.data(), n, n) * h;
    }
    case SsmKind::diagonal: return a.cwiseProduct(h);
    case SsmKind::scalar: return a(0) * h;
  }
  return h;
}

Mat reshape_rows(const Vec& flat, int rows, int cols) {
  if (flat.size() != static_cast<Eigen::Index>(rows) * cols)
    throw ShapeError("reshape: size " + std::to_string(flat.size()) + " is not " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  return Eigen::Map<const RowMajorMat>(flat.data(), rows, cols);
}

LayerForward ssm_layer_forward(const LayerParams& params, SsmVariant variant, int N,
                               std::span<const Vec> inputs, const Vec& h0, int layer_index) {
  if (h0.size() != N) throw ShapeError("h0 must have length N");
  const int T = static_cast<int>(inputs.size());
  const int P = static_cast<int>(params.a.weight.cols());
  LayerForward out;
  out.A.reserve(T);
  out.B.reserve(T);
  out.C.reserve(T);
  out.h.reserve(T + 1);
  out.y_tilde.reserve(T);
  out.h.push_back(h0);
  for (int t = 1; t <= T; ++t) {
    const Vec& x = inputs[t - 1];
    if (x.size() != P) throw ShapeError("layer input must have length P");
    const Location where{.t = t, .k = layer_index};
    Vec a = head_eval(params.a, x, variant.head_activation, where);
    Mat b = reshape_rows(head_eval(params.b, x, variant.head_activation, where), N, P);
    Mat c = reshape_rows(head_eval(params.c, x, variant.head_activation, where), P, N);
    Vec h = apply_transition(variant.kind, a, out.h.back()) + b * x;
    if (!h.allFinite()) throw NumericError("non-finite hidden state", where);
    out.y_tilde.push_back(c * h);
    out.A.push_back(std::move(a));
    out.B.push_back(std::move(b));
    out.C.push_back(std::move(c));
    out.h.push_back(std::move(h));
  }
  return out;
}

Vec normalize(const Vec& v, double eps) {
  const double mean_sq = v.squaredNorm() / static_cast<double>(v.size());
  return v / std::sqrt(mean_sq + eps);
}

LossSpec LossSpec::cross_entropy(std::vector<int> targets) {
  LossSpec spec;
  spec.kind = LossKind::cross_entropy;
  spec.token_targets = std::move(targets);
  return spec;
}

LossSpec LossSpec::mse(std::vector<Vec> targets) {
  LossSpec spec;
  spec.kind = LossKind::mse;
  spec.vector_targets = std::move(targets);
  return spec;
}

int LossSpec::length() const {
  return static_cast<int>(kind == LossKind::cross_entropy ? token_targets.size()
                                                          : vector_targets.size());
}

void LossSpec::validate(int T, int V) const {
  if (length() != T)
    throw ShapeError("loss targets have length " + std::to_string(length()) + ", expected " +
                     std::to_string(T));
  if (kind == LossKind::cross_entropy) {
    for (int target : token_targets)
      if (target < 0 || target >= V)
        throw ShapeError("token target " + std::to_string(target) + " outside vocabulary");
  } else {
    for (const Vec& target : vector_targets)
      if (target.size() != V) throw ShapeError("mse targets must be V-vectors");
  }
}

LossValue evaluate_loss(const LossSpec& loss, const Vec& logits, int t) {
  LossValue out;
  if (loss.kind == LossKind::cross_entropy) {
    const int target = loss.token_targets[t - 1];
    const double max_logit = logits.maxCoeff();
    Vec shifted = (logits.array() - max_logit).exp();
    const double denom = shifted.sum();
    out.value = std::log(denom) + max_logit - logits(target);
    out.dl_do = shifted / denom;
    out.dl_do(target) -= 1.0;
  } else {
    const Vec diff = logits - loss.vector_targets[t - 1];
    const double scale = 1.0 / static_cast<double>(logits.size());
    out.value = diff.squaredNorm() * scale;
    out.dl_do = 2.0 * scale * diff;
  }
  if (!std::isfinite(out.value)) throw NumericError("non-finite loss", Location{.t = t});
  return out;
}

namespace {

template <typename T>
const T& at(const std::vector<std::vector<T>>& store, int outer, int inner, const char* name,
            int k, int t) {
  if (outer < 0 || outer >= static_cast<int>(store.size()) || inner < 0 ||
      inner >= static_cast<int>(store[outer].size()))
    throw IndexError(std::string("trace has no ") + name + " at k=" + std::to_string(k) +
                     ", t=" + std::to_string(t));
  return store[outer][inner];
}

const Vec& at(const std::vector<Vec>& store, int index, const char* name, int t) {
  if (index < 0 || index >= static_cast<int>(store.size()))
    throw IndexError(std::string("trace has no ") + name + " at t=" + std::to_string(t));
  return store[index];
}

template <typename M>
bool same(const M& x, const M& y) {
  return x.rows() == y.rows() && x.cols() == y.cols() && (x.array() == y.array()).all();
}

template <typename M>
bool same(const std::vector<M>& x, const std::vector<M>& y) {
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!same(x[i], y[i])) return false;
  return true;
}

template <typename M>
bool same(const std::vector<std::vector<M>>& x, const std::vector<std::vector<M>>& y) {
  if (x.size() != y.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!same(x[i], y[i])) return false;
  return true;
}

}  // namespace

const Vec& ForwardTrace::A(int k, int t) const { return at(A_, k - 1, t - 1, "A", k, t); }
const Mat& ForwardTrace::C(int k, int t) const { return at(C_, k - 1, t - 1, "C", k, t); }
const Vec& ForwardTrace::h(int k, int t) const { return at(h_, k - 1, t, "h", k, t); }
const Vec& ForwardTrace::y_hat(int k, int t) const {
  return at(y_hat_, k, t - 1, "y_hat", k, t);
}
const Vec& ForwardTrace::y(int k, int t) const { return at(y_, k, t - 1, "y", k, t); }
const Vec& ForwardTrace::cotangent(int t) const { return at(cotangent_, t - 1, "cotangent", t); }
const Vec& ForwardTrace::dl_do(int t) const { return at(dl_do_, t - 1, "dl/do", t); }
const Vec& ForwardTrace::logits(int t) const { return at(logits_, t - 1, "logits", t); }

bool ForwardTrace::operator==(const ForwardTrace& other) const {
  return dims == other.dims && variant.kind == other.variant.kind &&
         variant.head_activation == other.variant.head_activation && same(A_, other.A_) &&
         same(C_, other.C_) && same(h_, other.h_) && same(y_hat_, other.y_hat_) &&
         same(y_, other.y_) && same(cotangent_, other.cotangent_) &&
         same(dl_do_, other.dl_do_) && same(logits_, other.logits_) && loss == other.loss;
}

HeadOutput apply_language_head(const Mat& omega, std::span<const Vec> y_last, const LossSpec& loss) {
  HeadOutput out;
  const int T = static_cast<int>(y_last.size());
  out.logits.reserve(T);
  out.dl_do.reserve(T);
  out.cotangent.reserve(T);
  for (int t = 1; t <= T; ++t) {
    Vec o = omega * y_last[t - 1];
    LossValue lv = evaluate_loss(loss, o, t);
    out.loss += lv.value;
    out.cotangent.push_back(omega.transpose() * lv.dl_do);
    out.dl_do.push_back(std::move(lv.dl_do));
    out.logits.push_back(std::move(o));
  }
  if (!std::isfinite(out.loss)) throw NumericError("non-finite total loss", {});
  return out;
}

ForwardTrace stack_forward(const StackParams& params, std::span<const Vec> tokens,
                           const LossSpec& loss) {
  params.validate();
  const ModelDims& d = params.dims;
  if (static_cast<int>(tokens.size()) != d.T)
    throw ShapeError("expected " + std::to_string(d.T) + " tokens, got " +
                     std::to_string(tokens.size()));
  loss.validate(d.T, d.V);

  ForwardTrace trace;
  trace.dims = d;
  trace.variant = params.variant;
  trace.y_.resize(d.K + 1);
  trace.y_hat_.resize(d.K);
  for (const Vec& x : tokens) {
    if (x.size() != d.P) throw ShapeError("tokens must be P-vectors");
    trace.y_[0].push_back(x);
    trace.y_hat_[0].push_back(normalize(x));
  }
  const Vec h0 = Vec::Zero(d.N);
  for (int k = 1; k <= d.K; ++k) {
    LayerForward layer =
        ssm_layer_forward(params.layers[k - 1], params.variant, d.N, trace.y_hat_[k - 1], h0, k);
    std::vector<Vec>& y_k = trace.y_[k];
    y_k.reserve(d.T);
    for (int t = 1; t <= d.T; ++t) y_k.push_back(trace.y_[k - 1][t - 1] + layer.y_tilde[t - 1]);
    if (k < d.K) {
      trace.y_hat_[k].reserve(d.T);
      for (const Vec& y : y_k) trace.y_hat_[k].push_back(normalize(y));
    }
    trace.A_.push_back(std::move(layer.A));
    trace.C_.push_back(std::move(layer.C));
    trace.h_.push_back(std::move(layer.h));
  }
  HeadOutput head = apply_language_head(params.omega, trace.y_[d.K], loss);
  trace.logits_ = std::move(head.logits);
  trace.dl_do_ = std::move(head.dl_do);
  trace.cotangent_ = std::move(head.cotangent);
  trace.loss = head.loss;
  return trace;
}

double stack_loss(const StackParams& params, std::span<const Vec> tokens, const LossSpec& loss) {
  return stack_forward(params, tokens, loss).loss;
}

Mat omega_gradient(const ForwardTrace& trace) {
  const ModelDims& d = trace.dims;
  Mat grad = Mat::Zero(d.V, d.P);
  for (int t = 1; t <= d.T; ++t) grad += trace.dl_do(t) * trace.y(d.K, t).transpose();
  return grad;
}

}  // namespace adshard
