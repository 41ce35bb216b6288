#pragma once

#include <string>
#include <utility>
#include <vector>

#include "natstream/config.hpp"
#include "natstream/model.hpp"
#include "natstream/tensor.hpp"

namespace natstream {

// On-disk container: magic "NSTB0001", a flat key=value text header, then
// named float64 tensors, all little-endian. Used for model checkpoints and
// optimizer state.
struct TensorBundle {
  ConfigMap header;
  std::vector<std::pair<std::string, Tensor>> tensors;  // order preserved
};

void save_bundle(const std::string& path, const TensorBundle& bundle);
TensorBundle load_bundle(const std::string& path);

// ModelConfig <-> flat keys (optionally under a dotted prefix such as
// "model."). from_map throws on missing keys.
void model_config_to_map(const ModelConfig& cfg, ConfigMap& out, const std::string& prefix = "");
ModelConfig model_config_from_map(const ConfigMap& map, const std::string& prefix = "");

// Copies bundle tensors into the parameter list by position, validating
// every name and shape; throws naming the first mismatch and the path.
// Shared by every checkpoint kind.
void fill_params_from_bundle(const TensorBundle& bundle, const std::string& path,
                             const std::vector<NamedTensor>& params);

// Model checkpoints carry kind=chunked_ctc plus the full config; load
// validates the kind and every tensor name and shape.
void save_model(const std::string& path, ModelParams& params);
ModelParams load_model(const std::string& path);
// Reads only the kind= field of any bundle (used to route CLI checkpoints).
std::string checkpoint_kind(const std::string& path);

}  // namespace natstream
