#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "natstream/tensor.hpp"

namespace natstream {

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

// First and second moment buffers, parallel to the parameter list the state
// was first used with. Serialized alongside checkpoints so training can
// resume bit-exactly.
struct AdamState {
  int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// One bias-corrected Adam update over `params` using their current grad
// buffers. Initializes the state lazily; throws if a parameter has no grad
// buffer, if the state does not match the parameter list, or if any
// gradient entry is non-finite (the error names the parameter).
void adam_step(const std::vector<NamedTensor>& params, AdamState& state, double lr,
               const AdamConfig& cfg = {});

}  // namespace natstream
