#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace adshard {

/// Where in the (t, k, tau) grid a failure happened. Zero means "not applicable".
struct Location {
  int t = 0;
  int k = 0;
  int tau = 0;
  int device = 0;

  std::string describe() const;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, Location where)
      : std::runtime_error(what + " at " + where.describe()), where_(where) {}

  const Location& where() const noexcept { return where_; }

 private:
  Location where_;
};

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when the gradient phase of a simulated device reads a tensor that
/// the shard plan did not place on it.
class LocalityError : public std::logic_error {
 public:
  LocalityError(const std::string& tensor, int device)
      : std::logic_error("locality violation: device " + std::to_string(device) +
                         " read non-local tensor " + tensor),
        tensor_(tensor),
        device_(device) {}

  const std::string& tensor() const noexcept { return tensor_; }
  int device() const noexcept { return device_; }

 private:
  std::string tensor_;
  int device_;
};

class TapeOverflow : public std::runtime_error {
 public:
  TapeOverflow(std::size_t nodes, std::size_t scalars)
      : std::runtime_error("tape overflow after " + std::to_string(nodes) + " nodes (" +
                           std::to_string(scalars) + " stored scalars)"),
        nodes_(nodes),
        scalars_(scalars) {}

  std::size_t nodes() const noexcept { return nodes_; }
  std::size_t scalars() const noexcept { return scalars_; }

 private:
  std::size_t nodes_;
  std::size_t scalars_;
};

}  // namespace adshard
