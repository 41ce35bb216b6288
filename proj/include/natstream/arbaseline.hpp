#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "natstream/adam.hpp"
#include "natstream/chunk_plan.hpp"
#include "natstream/data.hpp"
#include "natstream/model.hpp"
#include "natstream/rng.hpp"
#include "natstream/stream.hpp"
#include "natstream/tensor.hpp"

namespace natstream {

// Wait-k-stride-n policy for the autoregressive baseline: read k chunks of
// chunk_ms, then alternate emitting stride_tokens unit tokens and reading one
// more chunk; once the source is exhausted, decode to end-of-sequence.
struct ARPolicy {
  int chunk_ms = 320;
  int wait_chunks = 2;    // k >= 1
  int stride_tokens = 3;  // n >= 1
};

// Autoregressive speech-to-unit baseline: the same chunked encoder frontend
// as the main model, plus a causal unit decoder trained with cross-entropy.
// The output vocabulary appends one end-of-sequence symbol (id unit_vocab);
// the decoder input starts from that same symbol.
struct ARModel {
  ModelConfig cfg;

  Tensor conv1_w, conv1_b;
  Tensor conv2_w, conv2_b;
  std::vector<LayerParams> encoder;
  Tensor enc_ln_g, enc_ln_b;

  Tensor unit_embed;  // [unit_vocab+1, model_dim]
  Tensor dec_pos;     // [max_positions, model_dim]
  std::vector<LayerParams> decoder;  // ling_layers + ac_layers deep, cross-attending
  Tensor dec_ln_g, dec_ln_b;
  Tensor proj_w, proj_b;  // [model_dim, unit_vocab+1]

  int eos() const { return cfg.unit_vocab; }
  int dec_layers() const { return cfg.ling_layers + cfg.ac_layers; }
  static ARModel init(const ModelConfig& cfg, Rng& rng);
  std::vector<NamedTensor> named_params();
};

// Chunked encoder forward over raw frames (conv frontend, sinusoidal
// positions, chunk-masked layers, final norm).
Tensor ar_encode(const ARModel& model, const Tensor& frames, const ChunkPlan& plan,
                 bool training = false, Rng* rng = nullptr);

// Teacher-forced next-symbol log-probabilities: row t predicts target t of
// units + end-of-sequence, conditioned on the preceding targets. Shape
// [len(units)+1, unit_vocab+1]. The decoder sees the full encoder output.
Tensor ar_log_probs(const ARModel& model, const Tensor& enc_states,
                    const std::vector<int>& units, bool training = false, Rng* rng = nullptr);

// Mean cross-entropy per target position (units + end-of-sequence), as a
// scalar graph tensor.
Tensor ar_utterance_loss(const ARModel& model, const Utterance& utt, bool training = false,
                         Rng* rng = nullptr);

struct ARTrainConfig {
  int steps = 500;
  int batch_frames = 2000;
  double peak_lr = 5e-4;
  int warmup_steps = 100;
  uint64_t seed = 1;
  int log_every = 10;
  void validate() const;
};

// One accumulated-gradient update over the batch; returns the mean loss.
// Throws on non-finite loss, naming the step and the utterance.
double ar_train_step(ARModel& model, AdamState& adam, const std::vector<const Utterance*>& batch,
                     const ARTrainConfig& cfg, int step);

struct ARTrainResult {
  int steps_run = 0;
  double final_loss = 0.0;
};
ARTrainResult run_ar_training(ARModel& model, const std::vector<Utterance>& dataset,
                              const ARTrainConfig& cfg, std::ostream* log = nullptr);

void save_ar_model(const std::string& path, ARModel& model);
ARModel load_ar_model(const std::string& path);

// Greedy unit decoding after the whole source is encoded. Each emitted token
// costs one decoder forward pass over the full prefix; the pass producing
// end-of-sequence is also counted. max_units caps generation (default: 1.5x
// the unit lattice length the main model would decode for this input).
struct ARGenerateResult {
  std::vector<int> units;
  int passes = 0;
  bool truncated = false;  // cap reached before end-of-sequence
};
ARGenerateResult ar_generate(const ARModel& model, const Tensor& frames, int max_units = -1);

// Wait-k-stride-n simulation. Token j (1-based) is stamped
// src = min(src_ms, chunk_ms * (k + ceil(j/n) - 1)); each emission burst is
// one entry of chunk_compute_ms, and wall stamps follow the clock mode the
// same way the non-autoregressive engine's do.
struct ARSimulateResult {
  InstanceLog log;
  bool truncated = false;
};
ARSimulateResult ar_simulate(const Utterance& utt, const ARModel& model, const ARPolicy& policy,
                             const ClockSpec& clock = {});

// Offline decoding comparison on a corpus: wall time and decoder forward
// passes per utterance for the non-autoregressive model (always one pass)
// against the autoregressive baseline (one pass per token).
struct BenchUtterance {
  std::string id;
  int nar_units = 0;
  int ar_units = 0;
  double nar_ms = 0.0;
  double ar_ms = 0.0;
  int nar_passes = 1;
  int ar_passes = 0;
  bool ar_truncated = false;
};
struct BenchReport {
  std::vector<BenchUtterance> utterances;
  double mean_ratio = 0.0;  // mean over utterances of ar_ms / nar_ms
  double total_nar_ms = 0.0;
  double total_ar_ms = 0.0;
};
BenchReport run_bench(const std::vector<Utterance>& corpus, const ModelParams& nar,
                      const ARModel& ar);
std::string bench_report_text(const BenchReport& report);
std::string bench_report_csv(const BenchReport& report);

}  // namespace natstream
