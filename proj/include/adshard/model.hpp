#pragma once

// Stacked SSM residual model: heads, layer recurrence, RMS normalization,
// language head and the loss cotangents that seed gradient computation.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "adshard/errors.hpp"

namespace adshard {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using RowMajorMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kNormEpsilon = 1e-6;

enum class SsmKind { unstructured, diagonal, scalar };
enum class Activation { identity, sigmoid, tanh };
enum class Network { A, B, C };

std::string_view to_string(SsmKind kind);
std::string_view to_string(Activation act);
std::string_view to_string(Network net);
SsmKind parse_ssm_kind(std::string_view text);
Activation parse_activation(std::string_view text);

struct SsmVariant {
  SsmKind kind = SsmKind::diagonal;
  Activation head_activation = Activation::identity;
};

struct ModelDims {
  int K = 1;   // layers
  int N = 1;   // hidden state
  int P = 1;   // token embedding
  int V = 2;   // vocabulary
  int T = 1;   // sequence length
  int bs = 1;  // batch size

  void validate() const;
  bool operator==(const ModelDims&) const = default;
};

/// Number of outputs of head `net`: A -> N*N / N / 1, B -> N*P, C -> P*N.
int head_output_size(Network net, SsmKind kind, int N, int P);

/// Single affine layer followed by an elementwise activation.
struct HeadParams {
  Mat weight;  // out x P
  Vec bias;    // out

  static HeadParams zeros(int out, int in);
  Eigen::Index size() const { return weight.size() + bias.size(); }
  HeadParams& operator+=(const HeadParams& other);
  bool operator==(const HeadParams& other) const;
};

struct LayerParams {
  HeadParams a;
  HeadParams b;
  HeadParams c;

  HeadParams& head(Network net);
  const HeadParams& head(Network net) const;
  LayerParams& operator+=(const LayerParams& other);
  bool operator==(const LayerParams& other) const = default;
};

struct StackParams {
  ModelDims dims;
  SsmVariant variant;
  std::vector<LayerParams> layers;  // K triples
  Mat omega;                        // V x P

  static StackParams zeros(const ModelDims& dims, SsmVariant variant);
  /// Gaussian initialization, std `scale / sqrt(P)` for weights, `scale` for biases.
  static StackParams random(const ModelDims& dims, SsmVariant variant, std::uint64_t seed,
                            double scale = 0.5);

  void validate() const;
};

double activate(Activation act, double u);
double activate_derivative(Activation act, double u);

/// activation(weight * x + bias). `where` tags numeric errors.
Vec head_eval(const HeadParams& params, const Vec& x, Activation act, Location where = {});

/// h' = A h for the variant's A representation (flattened head output).
Vec apply_transition(SsmKind kind, const Vec& a, const Vec& h);
/// Row-major reshape of a flattened head output.
Mat reshape_rows(const Vec& flat, int rows, int cols);

struct LayerForward {
  std::vector<Vec> A;        // t = 1..T, raw head output
  std::vector<Mat> B;        // N x P
  std::vector<Mat> C;        // P x N
  std::vector<Vec> h;        // t = 0..T
  std::vector<Vec> y_tilde;  // t = 1..T
};

/// The five SSM steps for one layer. `layer_index` is 1-based and only tags errors.
LayerForward ssm_layer_forward(const LayerParams& params, SsmVariant variant, int N,
                               std::span<const Vec> inputs, const Vec& h0, int layer_index = 0);

/// RMS normalization without learnable gain.
Vec normalize(const Vec& v, double eps = kNormEpsilon);

enum class LossKind { cross_entropy, mse };
std::string_view to_string(LossKind kind);
LossKind parse_loss_kind(std::string_view text);

struct LossSpec {
  LossKind kind = LossKind::cross_entropy;
  std::vector<int> token_targets;   // cross_entropy: one token index per t
  std::vector<Vec> vector_targets;  // mse: one V-vector per t

  static LossSpec cross_entropy(std::vector<int> targets);
  static LossSpec mse(std::vector<Vec> targets);
  int length() const;
  void validate(int T, int V) const;
};

struct LossValue {
  double value = 0.0;
  Vec dl_do;  // V
};

/// Per-token loss and its gradient wrt the logits. mse uses ||o - target||^2 / V.
LossValue evaluate_loss(const LossSpec& loss, const Vec& logits, int t);

/// Everything the forward pass retains. Indices follow the model: t in 1..T,
/// k in 1..K, with h at t = 0 and the residual stream / normalized inputs at k = 0.
struct ForwardTrace {
  ModelDims dims;
  SsmVariant variant;
  std::vector<std::vector<Vec>> A_;       // [k-1][t-1]
  std::vector<std::vector<Mat>> C_;       // [k-1][t-1]
  std::vector<std::vector<Vec>> h_;       // [k-1][t]
  std::vector<std::vector<Vec>> y_hat_;   // [k][t-1], k = 0..K-1
  std::vector<std::vector<Vec>> y_;       // [k][t-1], k = 0..K
  std::vector<Vec> cotangent_;            // [t-1], dl/dy_K^t
  std::vector<Vec> dl_do_;                // [t-1]
  std::vector<Vec> logits_;               // [t-1]
  double loss = 0.0;

  const Vec& A(int k, int t) const;
  const Mat& C(int k, int t) const;
  const Vec& h(int k, int t) const;
  const Vec& y_hat(int k, int t) const;
  const Vec& y(int k, int t) const;
  const Vec& cotangent(int t) const;
  const Vec& dl_do(int t) const;
  const Vec& logits(int t) const;

  bool operator==(const ForwardTrace& other) const;
};

struct HeadOutput {
  std::vector<Vec> logits;
  std::vector<Vec> dl_do;
  std::vector<Vec> cotangent;
  double loss = 0.0;
};

/// o^t = Omega y_K^t, per-token losses summed over t, cotangents Omega^T dl/do^t.
HeadOutput apply_language_head(const Mat& omega, std::span<const Vec> y_last, const LossSpec& loss);

ForwardTrace stack_forward(const StackParams& params, std::span<const Vec> tokens,
                           const LossSpec& loss);

/// Loss only; used by the finite-difference oracle.
double stack_loss(const StackParams& params, std::span<const Vec> tokens, const LossSpec& loss);

/// sum_t (dl/do^t) (y_K^t)^T
Mat omega_gradient(const ForwardTrace& trace);

}  // namespace adshard
