#pragma once

#include <memory>
#include <string>
#include <vector>

#include "natstream/chunk_plan.hpp"
#include "natstream/data.hpp"
#include "natstream/model.hpp"
#include "natstream/tensor.hpp"

namespace natstream {

enum class Stream { text, unit };

struct EmissionEvent {
  Stream stream;
  int token = 0;
  int chunk = 0;
  int src_ms = 0;       // source audio consumed when the token appeared
  double wall_ms = 0.0; // src_ms plus cumulative compute under the clock mode
};

// One simulated utterance; serializes to a single JSON line. This is the
// contract between `simulate` and `evaluate`.
struct InstanceLog {
  std::string id;
  int src_ms = 0;
  Policy policy;
  std::vector<int> ref_text;
  std::vector<int> ref_units;
  std::vector<EmissionEvent> events;
  std::vector<double> chunk_compute_ms;

  std::vector<int> tokens(Stream stream) const;
};

std::string instance_log_to_json(const InstanceLog& log);
InstanceLog instance_log_from_json(const std::string& line);

// Wall-clock handling: nca forces compute time to zero everywhere (wall
// stamps and the chunk_compute_ms log), making nca runs fully deterministic;
// ca stamps and logs measured per-chunk compute; injected stamps and logs a
// fixed per-chunk amount (deterministic computation-aware tests).
struct ClockSpec {
  enum class Mode { nca, ca, injected };
  Mode mode = Mode::nca;
  double injected_ms = 0.0;
};
ClockSpec parse_clock(const std::string& text);  // "nca" | "ca" | "injected:<ms>"

// reference recomputes the encoder over the received prefix at every chunk
// boundary; incremental caches per-layer states and only computes new
// positions. Both freeze decoded chunks and must emit identical tokens.
enum class EngineKind { reference, incremental };

// Incremental removal of blanks and repeats. The previous-symbol state
// advances over every position, including blanks, and starts at blank.
struct CollapseState {
  int last;
  explicit CollapseState(int blank) : last(blank) {}
};
std::vector<int> online_collapse(CollapseState& state, const std::vector<int>& symbols, int blank);

// Chunk-by-chunk decoding session over one utterance. Push full chunks of
// policy.chunk_ms (the final chunk may be shorter), then finalize to flush
// chunks whose boundary exceeds the source duration.
class StreamSession {
 public:
  StreamSession(const ModelParams& model, const Policy& policy, const ClockSpec& clock = {},
                EngineKind engine = EngineKind::reference);
  ~StreamSession();

  std::vector<EmissionEvent> push_chunk(const Tensor& frames);
  std::vector<EmissionEvent> finalize();

  int src_ms_received() const;
  bool finalized() const { return finalized_; }
  const std::vector<int>& text_tokens() const { return text_tokens_; }
  const std::vector<int>& unit_tokens() const { return unit_tokens_; }
  const std::vector<double>& chunk_compute_ms() const { return chunk_compute_ms_; }

 private:
  struct ChunkOutput {
    std::vector<int> text_symbols;  // uncollapsed row argmaxes
    std::vector<int> unit_symbols;
  };
  struct IncrementalCache;

  int nominal_boundary_ms(int chunk) const;
  void decode_ready(bool at_end, std::vector<EmissionEvent>& out);
  ChunkOutput decode_chunk(int chunk, bool at_end);
  ChunkOutput decode_reference(int chunk, bool at_end);
  ChunkOutput decode_incremental(int chunk, bool at_end);

  const ModelParams& model_;
  Policy policy_;
  ClockSpec clock_;
  EngineKind engine_;
  std::vector<double> frame_data_;
  int num_frames_ = 0;
  bool partial_chunk_seen_ = false;
  bool finalized_ = false;
  int next_chunk_ = 0;
  double clock_compute_ms_ = 0.0;  // cumulative, per the clock mode
  std::vector<double> chunk_compute_ms_;
  CollapseState text_state_;
  CollapseState unit_state_;
  std::vector<int> text_tokens_;
  std::vector<int> unit_tokens_;
  std::unique_ptr<IncrementalCache> cache_;
};

InstanceLog simulate(const Utterance& utt, const ModelParams& model, const Policy& policy,
                     const ClockSpec& clock = {}, EngineKind engine = EngineKind::reference);

struct OfflineOutput {
  std::vector<int> text;
  std::vector<int> units;
};
// Single-chunk bidirectional decode (the offline mode of the same model).
OfflineOutput offline_translate(const Utterance& utt, const ModelParams& model);

// Unit playback: each chunk's units play as one contiguous segment of
// unit_ms per token, starting at max(emission time, previous segment end).
struct PlaybackSegment {
  int chunk = 0;
  double emit_ms = 0.0;
  double start_ms = 0.0;
  double end_ms = 0.0;
  int units = 0;
};
struct PlaybackSchedule {
  std::vector<PlaybackSegment> segments;
  int discontinuity_count = 0;       // gaps between two non-empty chunks
  double discontinuity_total_ms = 0.0;
};
PlaybackSchedule playback_schedule(const InstanceLog& log, bool computation_aware,
                                   double unit_ms = 20.0);

}  // namespace natstream
