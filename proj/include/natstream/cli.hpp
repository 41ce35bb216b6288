#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "natstream/chunk_plan.hpp"
#include "natstream/config.hpp"
#include "natstream/stream.hpp"
#include "natstream/train.hpp"

namespace natstream::cli {

// The experiment config file schema: model.* keys (architecture and default
// policy) plus train.* keys (curriculum stage, optimization, and the policy
// cycle). Every key is optional and defaults to the struct defaults; unknown
// keys and malformed values are errors naming the key.
struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
};
void experiment_to_map(const ExperimentConfig& cfg, ConfigMap& out);
ExperimentConfig experiment_from_map(const ConfigMap& map);

// Policy specs used in train.policies and documentation: "offline" or
// "<chunk_ms>:<extra_frames_ms>:<lookahead_chunks>".
Policy policy_from_spec(const std::string& spec);
std::string policy_to_spec(const Policy& policy);

// Reads one instance log per line, skipping blank lines; parse failures
// rethrow with the file path and line number.
std::vector<InstanceLog> read_logs_file(const std::string& path);

// The command surface behind the natstream binary (gen-data, train,
// simulate, evaluate, bench). `args` excludes the program name. Reports and
// progress go to `out`, warnings and errors to `err`; returns the process
// exit code (failures print "error: ..." and return 1).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace natstream::cli
