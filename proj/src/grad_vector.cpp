#include "adshard/grad_vector.hpp"

namespace adshard {
namespace {

// Visits heads in concatenation order, then Omega.
template <typename Layers, typename Omega, typename HeadFn, typename OmegaFn>
void visit_blocks(Layers& layers, Omega& omega, HeadFn&& on_head, OmegaFn&& on_omega) {
  for (Network net : {Network::A, Network::B, Network::C})
    for (std::size_t k = 0; k < layers.size(); ++k) on_head(net, k, layers[k].head(net));
  on_omega(omega);
}

void write_head(const HeadParams& head, std::vector<double>& out) {
  for (Eigen::Index r = 0; r < head.weight.rows(); ++r)
    for (Eigen::Index c = 0; c < head.weight.cols(); ++c) out.push_back(head.weight(r, c));
  for (Eigen::Index r = 0; r < head.bias.size(); ++r) out.push_back(head.bias(r));
}

void write_matrix(const Mat& m, std::vector<double>& out) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out.push_back(m(r, c));
}

void read_head(HeadParams& head, std::span<const double> flat, std::size_t& pos) {
  for (Eigen::Index r = 0; r < head.weight.rows(); ++r)
    for (Eigen::Index c = 0; c < head.weight.cols(); ++c) head.weight(r, c) = flat[pos++];
  for (Eigen::Index r = 0; r < head.bias.size(); ++r) head.bias(r) = flat[pos++];
}

void read_matrix(Mat& m, std::span<const double> flat, std::size_t& pos) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = flat[pos++];
}

template <typename Layers>
std::vector<double> flatten_blocks(const Layers& layers, const Mat& omega) {
  std::vector<double> out;
  visit_blocks(
      layers, omega, [&](Network, std::size_t, const HeadParams& head) { write_head(head, out); },
      [&](const Mat& m) { write_matrix(m, out); });
  return out;
}

}  // namespace

std::vector<BlockInfo> parameter_layout(const ModelDims& dims, SsmKind kind) {
  std::vector<BlockInfo> blocks;
  std::size_t offset = 0;
  for (Network net : {Network::A, Network::B, Network::C}) {
    const int out = head_output_size(net, kind, dims.N, dims.P);
    for (int k = 1; k <= dims.K; ++k) {
      const std::size_t size = static_cast<std::size_t>(out) * dims.P + out;
      blocks.push_back({std::string(to_string(net)) + std::to_string(k), offset, size, out, dims.P});
      offset += size;
    }
  }
  const std::size_t omega_size = static_cast<std::size_t>(dims.V) * dims.P;
  blocks.push_back({"Omega", offset, omega_size, dims.V, dims.P});
  return blocks;
}

GradVector GradVector::zeros(const ModelDims& dims, SsmKind kind) {
  StackParams shape = StackParams::zeros(dims, SsmVariant{kind, Activation::identity});
  return GradVector{std::move(shape.layers), std::move(shape.omega)};
}

GradVector GradVector::zeros_like(const StackParams& params) {
  return zeros(params.dims, params.variant.kind);
}

GradVector& GradVector::operator+=(const GradVector& other) {
  if (layers.size() != other.layers.size()) throw ShapeError("GradVector layer count mismatch");
  for (std::size_t k = 0; k < layers.size(); ++k) layers[k] += other.layers[k];
  omega += other.omega;
  return *this;
}

bool GradVector::operator==(const GradVector& other) const {
  return layers == other.layers && omega.rows() == other.omega.rows() &&
         omega.cols() == other.omega.cols() && (omega.array() == other.omega.array()).all();
}

std::vector<double> GradVector::flatten() const { return flatten_blocks(layers, omega); }

std::size_t GradVector::size() const {
  std::size_t total = static_cast<std::size_t>(omega.size());
  for (const auto& layer : layers) total += layer.a.size() + layer.b.size() + layer.c.size();
  return total;
}

std::vector<double> flatten(const StackParams& params) {
  return flatten_blocks(params.layers, params.omega);
}

void assign_flat(StackParams& params, std::span<const double> flat) {
  std::size_t pos = 0;
  visit_blocks(
      params.layers, params.omega,
      [&](Network, std::size_t, HeadParams& head) { read_head(head, flat, pos); },
      [&](Mat& m) { read_matrix(m, flat, pos); });
  if (pos != flat.size()) throw ShapeError("flat parameter vector has the wrong length");
}

GradVector unflatten_gradient(const ModelDims& dims, SsmKind kind, std::span<const double> flat) {
  GradVector grad = GradVector::zeros(dims, kind);
  std::size_t pos = 0;
  visit_blocks(
      grad.layers, grad.omega,
      [&](Network, std::size_t, HeadParams& head) { read_head(head, flat, pos); },
      [&](Mat& m) { read_matrix(m, flat, pos); });
  if (pos != flat.size()) throw ShapeError("flat gradient vector has the wrong length");
  return grad;
}

void sgd_step(StackParams& params, const GradVector& grad, double lr) {
  if (grad.layers.size() != params.layers.size()) throw ShapeError("gradient/params mismatch");
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    for (Network net : {Network::A, Network::B, Network::C}) {
      HeadParams& p = params.layers[k].head(net);
      const HeadParams& g = grad.layers[k].head(net);
      p.weight -= lr * g.weight;
      p.bias -= lr * g.bias;
    }
  }
  params.omega -= lr * grad.omega;
}

}  // namespace adshard
