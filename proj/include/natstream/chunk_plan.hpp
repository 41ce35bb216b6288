#pragma once

#include <vector>

#include "natstream/tensor.hpp"

namespace natstream {

// Architecture hyperparameters. The chunk/lookahead fields double as the
// default inference policy; operations that vary the policy at run time take
// an explicit Policy instead.
struct ModelConfig {
  int frame_ms = 10;        // duration of one input frame
  int chunk_ms = 320;       // streaming chunk size
  int lookahead_ms = 0;     // encoder lookahead beyond the chunk boundary
  int lookahead_chunks = 0; // decoder waits this many extra encoder chunks
  int r_down = 2;           // encoder positions pooled per linguistic position
  int r_up = 6;             // acoustic positions copied per linguistic position
  int feat_dim = 16;        // input feature dimension
  int model_dim = 64;
  int heads = 4;
  int enc_layers = 4;
  int ling_layers = 3;
  int ac_layers = 3;
  int ffn_mult = 4;
  int text_vocab = 20;      // real text tokens; blank is appended internally
  int unit_vocab = 40;      // real unit tokens; blank is appended internally
  int max_positions = 512;  // learned position table rows (linguistic level)
  double dropout = 0.1;

  int conv_stride_total() const { return 4; }  // two causal conv layers, stride 2 each
  // Validates the architecture fields and the default policy; throws
  // std::runtime_error naming the violated constraint.
  void validate() const;
};

// Streaming policy: how much audio each chunk waits for.
struct Policy {
  int chunk_ms = 320;
  int lookahead_ms = 0;
  int lookahead_chunks = 0;
  bool offline = false;

  static Policy from_config(const ModelConfig& cfg) {
    return Policy{cfg.chunk_ms, cfg.lookahead_ms, cfg.lookahead_chunks, false};
  }
};

// Position-to-chunk bookkeeping for one utterance at every level of the
// model, plus the nominal reading boundary of each chunk.
struct ChunkPlan {
  Policy policy;
  int num_frames = 0;
  int src_ms = 0;
  int num_chunks = 0;
  int enc_lookahead = 0;  // first-attention-layer extra positions, lookahead_ms/(frame_ms*4)

  std::vector<int> frame_chunk;  // input frame index -> chunk
  std::vector<int> enc_chunk;    // encoder position -> chunk
  std::vector<int> ling_chunk;   // linguistic position -> chunk
  std::vector<int> ac_chunk;     // acoustic position -> chunk
  // boundary_ms[i]: source audio (ms) that must have arrived before chunk i
  // decodes; min(src_ms, (i + lookahead_chunks + 1)*chunk_ms + lookahead_ms)
  // for 0-based i, so chunk 0 with k=2, T_s=320, T_a=0 decodes at 960 ms.
  std::vector<int> boundary_ms;

  int enc_len() const { return static_cast<int>(enc_chunk.size()); }
  int ling_len() const { return static_cast<int>(ling_chunk.size()); }
  int ac_len() const { return static_cast<int>(ac_chunk.size()); }
  // Number of positions of each chunk at the given level.
  static std::vector<int> counts(const std::vector<int>& pos_chunk, int num_chunks);
};

ChunkPlan build_chunk_plan(int num_frames, const ModelConfig& cfg, const Policy& policy);
inline ChunkPlan build_chunk_plan(int num_frames, const ModelConfig& cfg) {
  return build_chunk_plan(num_frames, cfg, Policy::from_config(cfg));
}

// 0/1 attention masks (no grad). Row = query position, column = key position.
// Encoder self-attention: keys in chunks <= own chunk (bidirectional within
// the chunk); the first attention layer additionally sees enc_lookahead
// positions past the own-chunk boundary.
Tensor encoder_self_mask(const ChunkPlan& plan, bool first_layer);
// Decoder self-attention at either decoder level: keys in chunks <= own.
Tensor chunk_self_mask(const std::vector<int>& pos_chunk);
// Decoder cross-attention: query in chunk i sees encoder chunks <= i + k.
Tensor chunk_cross_mask(const std::vector<int>& query_chunk, const std::vector<int>& key_chunk,
                        int lookahead_chunks);

}  // namespace natstream
