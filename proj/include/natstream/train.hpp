#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "natstream/adam.hpp"
#include "natstream/data.hpp"
#include "natstream/model.hpp"
#include "natstream/rng.hpp"

namespace natstream {

// Two-stage curriculum: CTC pretraining on both streams, then n-gram match
// finetuning. Glancing (input substitution from the best alignment) applies
// in both stages, with linearly annealed ratios.
enum class TrainStage { ctc_pretrain, gram_match };

TrainStage stage_from_string(const std::string& name);
std::string stage_to_string(TrainStage stage);

struct TrainConfig {
  TrainStage stage = TrainStage::ctc_pretrain;
  int steps = 1000;
  int batch_frames = 2000;  // source-frame budget per batch (always >= 1 utterance)
  double peak_lr = 5e-4;
  int warmup_steps = 400;
  double text_ratio_start = 0.5, text_ratio_end = 0.3;
  double unit_ratio_start = 0.3, unit_ratio_end = 0.1;
  int anneal_steps = 10000;
  double label_eps = 0.01;  // CTC-stage label smoothing
  uint64_t seed = 1;
  int checkpoint_every = 0;  // 0 = only after the final step
  int log_every = 10;
  // Cycled per step (step s uses policies[(s-1) % size]); empty = the model
  // config's default policy. Mixing policies trains one checkpoint that can
  // be evaluated at several latency settings.
  std::vector<Policy> policies;

  void validate() const;
};

struct Schedule {
  double lr;
  double text_ratio;
  double unit_ratio;
};

// lr warms up linearly to peak at warmup_steps, then decays as
// peak*sqrt(warmup/step); glancing ratios move linearly from start to end
// over anneal_steps and then hold. step is 1-based.
Schedule schedule(int step, const TrainConfig& cfg);

// Whether the target can be aligned into lattice_len positions: the CTC
// requirement lattice_len >= |target| + (consecutive duplicate pairs).
bool alignable(int lattice_len, const std::vector<int>& target);

// Best-alignment glancing: substitutes ceil(ratio * lattice rows) distinct
// positions, sampled uniformly, with the best alignment's symbol there
// (blank positions substitute the blank embedding). Unalignable targets give
// an empty plan; callers count those via alignable().
GlancePlan glance(const Tensor& lattice, const std::vector<int>& target, double ratio, Rng& rng);

// Row-wise mixture (1-eps)*p + eps*uniform in log space, used before the
// CTC DP during pretraining. eps = 0 returns the lattice unchanged.
Tensor smoothed_lattice(const Tensor& lattice, double eps);

struct StepStats {
  int step = 0;
  double loss = 0.0;       // batch mean
  double text_loss = 0.0;  // batch mean, per-stream
  double unit_loss = 0.0;
  double lr = 0.0;
  double text_ratio = 0.0;
  double unit_ratio = 0.0;
  int utterances = 0;
  int glance_skips = 0;  // streams skipped because the target was unalignable
  Policy policy;
};

Policy policy_for_step(const TrainConfig& cfg, const ModelConfig& model_cfg, int step);

// One optimizer step over a batch: per utterance, a no-grad glancing pass
// then a gradient pass; gradients accumulate across utterances in batch
// order and one Adam update is applied. Throws on non-finite losses, naming
// the utterance.
StepStats train_step(ModelParams& model, AdamState& adam, const std::vector<const Utterance*>& batch,
                     const TrainConfig& cfg, int step);

// Deterministic batching: a seeded shuffle per epoch, then greedy packing
// under the frame budget.
class BatchPlanner {
 public:
  BatchPlanner(const std::vector<Utterance>& dataset, int batch_frames, uint64_t seed);
  std::vector<int> next();
  void skip(int64_t batches);  // fast-forward when resuming

 private:
  void reshuffle();
  std::vector<int> frame_counts_;
  int batch_frames_;
  uint64_t seed_;
  int64_t epoch_ = -1;
  size_t cursor_ = 0;
  std::vector<int> order_;
};

// Optimizer + progress sidecar stored next to a checkpoint.
void save_train_state(const std::string& path, const AdamState& adam,
                      const std::vector<NamedTensor>& params, int64_t next_step);
struct TrainState {
  AdamState adam;
  int64_t next_step = 1;
};
TrainState load_train_state(const std::string& path, const std::vector<NamedTensor>& params);

struct TrainResult {
  int steps_done = 0;
  StepStats last;
  int total_glance_skips = 0;
};

// Runs cfg.steps optimizer steps (resuming from start_step when a state is
// provided), logging `step=... loss=...` lines and writing periodic
// checkpoints (checkpoint_path + ".state" holds the optimizer sidecar).
TrainResult run_training(ModelParams& model, const std::vector<Utterance>& dataset,
                         const TrainConfig& cfg, const std::string& checkpoint_path,
                         std::ostream* log, const TrainState* resume = nullptr);

}  // namespace natstream
