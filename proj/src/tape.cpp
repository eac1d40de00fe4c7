#include "adshard/tape.hpp"

#include <algorithm>
#include <cmath>

#include "adshard/errors.hpp"

namespace adshard {
namespace {

// Kept separate from the model's activation helpers so the tape stays an
// independent oracle.
double phi(Activation act, double u) {
  switch (act) {
    case Activation::identity: return u;
    case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-u));
    case Activation::tanh: return std::tanh(u);
  }
  return u;
}

double phi_prime(Activation act, double u) {
  switch (act) {
    case Activation::identity: return 1.0;
    case Activation::sigmoid: {
      const double s = 1.0 / (1.0 + std::exp(-u));
      return s * (1.0 - s);
    }
    case Activation::tanh: {
      const double c = std::cosh(u);
      return 1.0 / (c * c);
    }
  }
  return 1.0;
}

void require_same_size(const std::vector<double>& a, const std::vector<double>& b,
                       const char* op) {
  if (a.size() != b.size()) throw ShapeError(std::string("tape ") + op + ": size mismatch");
}

}  // namespace

Tape::Tape(std::size_t max_scalars) : max_scalars_(max_scalars) {}

int Tape::push(TapeNode node) {
  if (node.op != TapeOp::leaf) {
    saved_scalars_ += node.value.size();
    if (saved_scalars_ > max_scalars_) throw TapeOverflow(nodes_.size() + 1, saved_scalars_);
  }
  node.grad.assign(node.value.size(), 0.0);
  nodes_.push_back(std::move(node));
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::leaf(std::vector<double> value) {
  TapeNode node;
  node.value = std::move(value);
  return push(std::move(node));
}

int Tape::leaf(const Vec& value) {
  return leaf(std::vector<double>(value.data(), value.data() + value.size()));
}

int Tape::matvec(int matrix, int rows, int cols, int x) {
  const auto& m = val(matrix);
  const auto& v = val(x);
  if (m.size() != static_cast<std::size_t>(rows) * cols || v.size() != static_cast<std::size_t>(cols))
    throw ShapeError("tape matvec: size mismatch");
  TapeNode node;
  node.op = TapeOp::matvec;
  node.lhs = matrix;
  node.rhs = x;
  node.rows = rows;
  node.cols = cols;
  node.value.assign(rows, 0.0);
  for (int r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int c = 0; c < cols; ++c) acc += m[r * cols + c] * v[c];
    node.value[r] = acc;
  }
  return push(std::move(node));
}

int Tape::add(int a, int b) {
  require_same_size(val(a), val(b), "add");
  TapeNode node;
  node.op = TapeOp::add;
  node.lhs = a;
  node.rhs = b;
  node.value = val(a);
  for (std::size_t j = 0; j < node.value.size(); ++j) node.value[j] += val(b)[j];
  return push(std::move(node));
}

int Tape::mul(int a, int b) {
  require_same_size(val(a), val(b), "mul");
  TapeNode node;
  node.op = TapeOp::mul;
  node.lhs = a;
  node.rhs = b;
  node.value = val(a);
  for (std::size_t j = 0; j < node.value.size(); ++j) node.value[j] *= val(b)[j];
  return push(std::move(node));
}

int Tape::scale(int s, int v) {
  if (val(s).size() != 1) throw ShapeError("tape scale: scalar node expected");
  TapeNode node;
  node.op = TapeOp::scale;
  node.lhs = s;
  node.rhs = v;
  node.value = val(v);
  for (double& x : node.value) x *= val(s)[0];
  return push(std::move(node));
}

int Tape::activation(Activation act, int x) {
  TapeNode node;
  node.op = TapeOp::activation;
  node.lhs = x;
  node.act = act;
  node.value = val(x);
  for (double& u : node.value) u = phi(act, u);
  return push(std::move(node));
}

int Tape::rms_norm(int x, double eps) {
  const auto& in = val(x);
  double mean_sq = 0.0;
  for (double v : in) mean_sq += v * v;
  mean_sq /= static_cast<double>(in.size());
  const double r = std::sqrt(mean_sq + eps);
  TapeNode node;
  node.op = TapeOp::rms_norm;
  node.lhs = x;
  node.aux = {eps};
  node.value = in;
  for (double& v : node.value) v /= r;
  return push(std::move(node));
}

int Tape::detach(int x) {
  TapeNode node;
  node.op = TapeOp::detach;
  node.lhs = x;
  node.value = val(x);
  return push(std::move(node));
}

int Tape::cross_entropy(int logits, int target) {
  const auto& o = val(logits);
  if (target < 0 || target >= static_cast<int>(o.size()))
    throw ShapeError("tape cross_entropy: target outside vocabulary");
  const double m = *std::max_element(o.begin(), o.end());
  double denom = 0.0;
  for (double v : o) denom += std::exp(v - m);
  TapeNode node;
  node.op = TapeOp::loss;
  node.lhs = logits;
  node.loss_kind = LossKind::cross_entropy;
  node.target = target;
  node.value = {std::log(denom) + m - o[target]};
  return push(std::move(node));
}

int Tape::mse(int logits, std::vector<double> target) {
  const auto& o = val(logits);
  require_same_size(o, target, "mse");
  double acc = 0.0;
  for (std::size_t j = 0; j < o.size(); ++j) acc += (o[j] - target[j]) * (o[j] - target[j]);
  TapeNode node;
  node.op = TapeOp::loss;
  node.lhs = logits;
  node.loss_kind = LossKind::mse;
  node.aux = std::move(target);
  node.value = {acc / static_cast<double>(o.size())};
  return push(std::move(node));
}

void Tape::backward(int root) {
  if (nodes_.at(root).value.size() != 1) throw ShapeError("tape backward: root must be scalar");
  for (auto& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
  nodes_[root].grad[0] = 1.0;
  for (int id = root; id >= 0; --id) {
    TapeNode& n = nodes_[id];
    const std::vector<double>& g = n.grad;
    switch (n.op) {
      case TapeOp::leaf:
      case TapeOp::detach:
        break;
      case TapeOp::matvec: {
        const auto& m = nodes_[n.lhs].value;
        const auto& x = nodes_[n.rhs].value;
        auto& gm = nodes_[n.lhs].grad;
        auto& gx = nodes_[n.rhs].grad;
        for (int r = 0; r < n.rows; ++r)
          for (int c = 0; c < n.cols; ++c) {
            gm[r * n.cols + c] += g[r] * x[c];
            gx[c] += m[r * n.cols + c] * g[r];
          }
        break;
      }
      case TapeOp::add: {
        auto& ga = nodes_[n.lhs].grad;
        for (std::size_t j = 0; j < g.size(); ++j) ga[j] += g[j];
        auto& gb = nodes_[n.rhs].grad;
        for (std::size_t j = 0; j < g.size(); ++j) gb[j] += g[j];
        break;
      }
      case TapeOp::mul: {
        const auto& a = nodes_[n.lhs].value;
        const auto& b = nodes_[n.rhs].value;
        for (std::size_t j = 0; j < g.size(); ++j) {
          nodes_[n.lhs].grad[j] += g[j] * b[j];
          nodes_[n.rhs].grad[j] += g[j] * a[j];
        }
        break;
      }
      case TapeOp::scale: {
        const double s = nodes_[n.lhs].value[0];
        const auto& v = nodes_[n.rhs].value;
        double gs = 0.0;
        for (std::size_t j = 0; j < g.size(); ++j) {
          gs += g[j] * v[j];
          nodes_[n.rhs].grad[j] += s * g[j];
        }
        nodes_[n.lhs].grad[0] += gs;
        break;
      }
      case TapeOp::activation: {
        const auto& u = nodes_[n.lhs].value;
        for (std::size_t j = 0; j < g.size(); ++j)
          nodes_[n.lhs].grad[j] += g[j] * phi_prime(n.act, u[j]);
        break;
      }
      case TapeOp::rms_norm: {
        const auto& x = nodes_[n.lhs].value;
        const double dim = static_cast<double>(x.size());
        double mean_sq = 0.0;
        for (double v : x) mean_sq += v * v;
        mean_sq /= dim;
        const double r = std::sqrt(mean_sq + n.aux[0]);
        double gx_dot = 0.0;
        for (std::size_t j = 0; j < x.size(); ++j) gx_dot += g[j] * x[j];
        for (std::size_t j = 0; j < x.size(); ++j)
          nodes_[n.lhs].grad[j] += g[j] / r - x[j] * gx_dot / (dim * r * r * r);
        break;
      }
      case TapeOp::loss: {
        const auto& o = nodes_[n.lhs].value;
        auto& go = nodes_[n.lhs].grad;
        if (n.loss_kind == LossKind::cross_entropy) {
          const double m = *std::max_element(o.begin(), o.end());
          double denom = 0.0;
          for (double v : o) denom += std::exp(v - m);
          for (std::size_t j = 0; j < o.size(); ++j) go[j] += g[0] * std::exp(o[j] - m) / denom;
          go[n.target] -= g[0];
        } else {
          const double dim = static_cast<double>(o.size());
          for (std::size_t j = 0; j < o.size(); ++j) go[j] += g[0] * 2.0 * (o[j] - n.aux[j]) / dim;
        }
        break;
      }
    }
  }
}

TapeMemory Tape::memory() const {
  TapeMemory mem;
  mem.nodes = nodes_.size();
  for (const auto& n : nodes_) {
    if (n.op == TapeOp::leaf)
      mem.leaf_scalars += n.value.size();
    else
      mem.scalars += n.value.size();
  }
  return mem;
}

TapeMemory tape_memory_count(const Tape& tape) { return tape.memory(); }

namespace {

std::vector<double> row_major(const Mat& m) {
  std::vector<double> out;
  out.reserve(m.size());
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out.push_back(m(r, c));
  return out;
}

}  // namespace

ModelTape build_model_tape(const StackParams& params, std::span<const Vec> tokens,
                           const LossSpec& loss, bool detach_layer_inputs,
                           std::size_t max_scalars) {
  params.validate();
  const ModelDims& d = params.dims;
  if (static_cast<int>(tokens.size()) != d.T) throw ShapeError("token count does not match T");
  loss.validate(d.T, d.V);

  ModelTape mt{Tape(max_scalars), {}, -1, -1};
  Tape& tape = mt.tape;
  const Activation act = params.variant.head_activation;
  const SsmKind kind = params.variant.kind;

  for (const LayerParams& layer : params.layers) {
    std::array<ModelTape::HeadLeaves, 3> leaves;
    int j = 0;
    for (Network net : {Network::A, Network::B, Network::C}) {
      const HeadParams& head = layer.head(net);
      leaves[j].weight = tape.leaf(row_major(head.weight));
      leaves[j].bias = tape.leaf(head.bias);
      ++j;
    }
    mt.heads.push_back(leaves);
  }
  mt.omega = tape.leaf(row_major(params.omega));

  auto head = [&](const ModelTape::HeadLeaves& h, int out, int x) {
    int pre = tape.add(tape.matvec(h.weight, out, d.P, x), h.bias);
    return act == Activation::identity ? pre : tape.activation(act, pre);
  };

  std::vector<int> stream;  // y_{k}^t
  std::vector<int> normed;  // y_hat_{k}^t
  for (const Vec& x : tokens) {
    const int leaf = tape.leaf(x);
    stream.push_back(leaf);
    normed.push_back(tape.rms_norm(leaf));
  }

  const int out_a = head_output_size(Network::A, kind, d.N, d.P);
  const int out_bc = d.N * d.P;
  for (int k = 1; k <= d.K; ++k) {
    const auto& leaves = mt.heads[k - 1];
    int h_prev = tape.leaf(std::vector<double>(d.N, 0.0));
    for (int t = 0; t < d.T; ++t) {
      int z = normed[t];
      if (detach_layer_inputs && k > 1) z = tape.detach(z);
      const int a = head(leaves[0], out_a, z);
      const int b = head(leaves[1], out_bc, z);
      const int c = head(leaves[2], out_bc, z);
      int transition = -1;
      switch (kind) {
        case SsmKind::unstructured: transition = tape.matvec(a, d.N, d.N, h_prev); break;
        case SsmKind::diagonal: transition = tape.mul(a, h_prev); break;
        case SsmKind::scalar: transition = tape.scale(a, h_prev); break;
      }
      const int h = tape.add(transition, tape.matvec(b, d.N, d.P, z));
      const int y_tilde = tape.matvec(c, d.P, d.N, h);
      stream[t] = tape.add(stream[t], y_tilde);
      if (k < d.K) normed[t] = tape.rms_norm(stream[t]);
      h_prev = h;
    }
  }

  int total = -1;
  for (int t = 0; t < d.T; ++t) {
    const int o = tape.matvec(mt.omega, d.V, d.P, stream[t]);
    int lt = -1;
    if (loss.kind == LossKind::cross_entropy) {
      lt = tape.cross_entropy(o, loss.token_targets[t]);
    } else {
      const Vec& target = loss.vector_targets[t];
      lt = tape.mse(o, std::vector<double>(target.data(), target.data() + target.size()));
    }
    total = total < 0 ? lt : tape.add(total, lt);
  }
  mt.loss = total;
  return mt;
}

}  // namespace adshard
