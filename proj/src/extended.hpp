#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

// Plain-typed entry point into the long double build of the core. Used by
// the gradient checker to re-evaluate finite differences that 64-bit
// rounding cannot resolve.
namespace kinfuse_ext {

struct PlainExample {
  std::vector<int> ids;
  std::vector<std::string> lemmas_a;
  std::vector<std::string> lemmas_b;
  std::vector<double> indicators;  ///< m×n, row-major
  int label = 0;
};

class ExtendedLoss {
 public:
  ExtendedLoss(const std::string& checkpoint, const std::vector<PlainExample>& batch,
               std::optional<std::uint64_t> dropout_seed);
  ~ExtendedLoss();
  ExtendedLoss(const ExtendedLoss&) = delete;
  ExtendedLoss& operator=(const ExtendedLoss&) = delete;

  /// (f(θ + eps) − f(θ − eps)) / (2·eps) for one entry of parameter `id`.
  long double central_difference(std::size_t id, std::size_t index, double eps);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace kinfuse_ext
