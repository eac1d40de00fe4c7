#include "adshard/export.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "adshard/errors.hpp"

namespace adshard {
namespace {

static_assert(std::endian::native == std::endian::little, "export assumes a little-endian host");

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  return out;
}

void put(std::ofstream& out, double v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

void put(std::ofstream& out, const Vec& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) put(out, v(i));
}

void put_rows(std::ofstream& out, const Mat& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) put(out, m(r, c));
}

}  // namespace

void write_trace_binary(const std::string& path, const ForwardTrace& trace) {
  std::ofstream out = open_out(path);
  out.write("ADSTRACE", 8);
  const ModelDims& d = trace.dims;
  for (std::int64_t v : {std::int64_t{d.K}, std::int64_t{d.N}, std::int64_t{d.P},
                         std::int64_t{d.V}, std::int64_t{d.T}})
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
  for (int k = 1; k <= d.K; ++k)
    for (int t = 1; t <= d.T; ++t) put(out, trace.A(k, t));
  for (int k = 1; k <= d.K; ++k)
    for (int t = 1; t <= d.T; ++t) put_rows(out, trace.C(k, t));
  for (int k = 1; k <= d.K; ++k)
    for (int t = 0; t <= d.T; ++t) put(out, trace.h(k, t));
  for (int k = 0; k < d.K; ++k)
    for (int t = 1; t <= d.T; ++t) put(out, trace.y_hat(k, t));
  for (int k = 0; k <= d.K; ++k)
    for (int t = 1; t <= d.T; ++t) put(out, trace.y(k, t));
  for (int t = 1; t <= d.T; ++t) put(out, trace.cotangent(t));
}

void write_gradient(const std::string& path, const GradVector& grad, const ModelDims& dims,
                    SsmKind kind) {
  const std::vector<double> flat = grad.flatten();
  {
    std::ofstream out = open_out(path);
    out.write(reinterpret_cast<const char*>(flat.data()),
              static_cast<std::streamsize>(flat.size() * sizeof(double)));
  }
  nlohmann::json side;
  side["dtype"] = "float64-le";
  side["length"] = flat.size();
  side["variant"] = std::string(to_string(kind));
  side["dims"] = {{"K", dims.K}, {"N", dims.N}, {"P", dims.P}, {"V", dims.V}};
  nlohmann::json blocks = nlohmann::json::array();
  for (const BlockInfo& b : parameter_layout(dims, kind))
    blocks.push_back(
        {{"name", b.name}, {"offset", b.offset}, {"size", b.size}, {"rows", b.rows}, {"cols", b.cols}});
  side["blocks"] = blocks;
  write_text(path + ".json", side.dump(2) + "\n");
}

std::vector<double> read_gradient_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw ConfigError("cannot read " + path);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes % sizeof(double)) throw ShapeError(path + " is not a float64 array");
  std::vector<double> out(bytes / sizeof(double));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << text;
}

}  // namespace adshard
