#pragma once

// Minimal reverse-mode tape for the SSM residual model family. Vector-valued
// nodes, hand-written adjoints, no general autodiff.

#include <array>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "adshard/model.hpp"

namespace adshard {

enum class TapeOp {
  leaf,        // parameter, token or constant
  matvec,      // M x, M row-major rows x cols
  add,         // a + b
  mul,         // a * b elementwise
  scale,       // s * v, s a one-element node
  activation,  // phi(x) elementwise
  rms_norm,    // x / sqrt(mean(x^2) + eps)
  detach,      // identity forward, no gradient backward
  loss,        // per-token loss of a logit vector
};

struct TapeNode {
  TapeOp op = TapeOp::leaf;
  int lhs = -1;
  int rhs = -1;
  int rows = 0;  // matvec only
  int cols = 0;
  Activation act = Activation::identity;
  LossKind loss_kind = LossKind::cross_entropy;
  int target = -1;            // cross-entropy token
  std::vector<double> aux;    // mse target
  std::vector<double> value;  // saved forward output
  std::vector<double> grad;
};

struct TapeMemory {
  std::size_t nodes = 0;         // all nodes including leaves
  std::size_t scalars = 0;       // saved values of non-leaf nodes
  std::size_t leaf_scalars = 0;  // parameters, tokens and constants
};

class Tape {
 public:
  /// `max_scalars` bounds the saved non-leaf scalars; exceeding it throws TapeOverflow.
  explicit Tape(std::size_t max_scalars = std::numeric_limits<std::size_t>::max());

  int leaf(std::vector<double> value);
  int leaf(const Vec& value);
  int matvec(int matrix, int rows, int cols, int x);
  int add(int a, int b);
  int mul(int a, int b);
  int scale(int s, int v);
  int activation(Activation act, int x);
  int rms_norm(int x, double eps = kNormEpsilon);
  int detach(int x);
  int cross_entropy(int logits, int target);
  int mse(int logits, std::vector<double> target);

  /// Seeds d(root)/d(root) = 1 (root must be scalar) and sweeps every node once in reverse.
  void backward(int root);

  const std::vector<double>& value(int node) const { return nodes_.at(node).value; }
  const std::vector<double>& grad(int node) const { return nodes_.at(node).grad; }
  const TapeNode& node(int id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  TapeMemory memory() const;

 private:
  int push(TapeNode node);
  const std::vector<double>& val(int id) const { return nodes_[id].value; }

  std::vector<TapeNode> nodes_;
  std::size_t max_scalars_;
  std::size_t saved_scalars_ = 0;
};

/// Forward pass of the whole stack recorded on a tape.
struct ModelTape {
  Tape tape;
  struct HeadLeaves {
    int weight = -1;
    int bias = -1;
  };
  std::vector<std::array<HeadLeaves, 3>> heads;  // [k-1][A,B,C]
  int omega = -1;
  int loss = -1;
};

/// With `detach_layer_inputs`, the normalized input of every layer k >= 2 is
/// detached, so layer k's parameters see its input as a constant.
ModelTape build_model_tape(const StackParams& params, std::span<const Vec> tokens,
                           const LossSpec& loss, bool detach_layer_inputs,
                           std::size_t max_scalars = std::numeric_limits<std::size_t>::max());

TapeMemory tape_memory_count(const Tape& tape);

}  // namespace adshard
