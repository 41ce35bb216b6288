#include "natstream/chunk_plan.hpp"

#include <stdexcept>
#include <string>

namespace natstream {

namespace {

int ceil_div(int a, int b) { return (a + b - 1) / b; }

void check_policy(const ModelConfig& cfg, const Policy& policy) {
  const int enc_step = cfg.frame_ms * cfg.conv_stride_total();
  if (policy.chunk_ms <= 0 || policy.chunk_ms % (enc_step * cfg.r_down) != 0) {
    throw std::runtime_error(
        "chunk_ms must be a positive multiple of frame_ms*conv_stride*r_down = " +
        std::to_string(enc_step * cfg.r_down) + ", got " + std::to_string(policy.chunk_ms));
  }
  if (policy.lookahead_ms < 0 || policy.lookahead_ms % enc_step != 0) {
    throw std::runtime_error(
        "lookahead_ms must be a non-negative multiple of frame_ms*conv_stride = " +
        std::to_string(enc_step) + ", got " + std::to_string(policy.lookahead_ms));
  }
  if (policy.lookahead_chunks < 0) {
    throw std::runtime_error("lookahead_chunks must be non-negative, got " +
                             std::to_string(policy.lookahead_chunks));
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (frame_ms <= 0) throw std::runtime_error("frame_ms must be positive");
  if (r_down <= 0 || r_up <= 0) throw std::runtime_error("r_down and r_up must be positive");
  if (feat_dim <= 0) throw std::runtime_error("feat_dim must be positive");
  if (model_dim <= 0 || heads <= 0 || model_dim % heads != 0) {
    throw std::runtime_error("model_dim must be a positive multiple of heads, got model_dim=" +
                             std::to_string(model_dim) + " heads=" + std::to_string(heads));
  }
  if (enc_layers <= 0 || ling_layers <= 0 || ac_layers <= 0) {
    throw std::runtime_error("layer counts must be positive");
  }
  if (ffn_mult <= 0) throw std::runtime_error("ffn_mult must be positive");
  if (text_vocab <= 0 || unit_vocab <= 0) throw std::runtime_error("vocab sizes must be positive");
  if (max_positions <= 0) throw std::runtime_error("max_positions must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw std::runtime_error("dropout must be in [0,1)");
  check_policy(*this, Policy::from_config(*this));
}

std::vector<int> ChunkPlan::counts(const std::vector<int>& pos_chunk, int num_chunks) {
  std::vector<int> out(static_cast<size_t>(num_chunks), 0);
  for (int c : pos_chunk) out[static_cast<size_t>(c)] += 1;
  return out;
}

ChunkPlan build_chunk_plan(int num_frames, const ModelConfig& cfg, const Policy& policy) {
  if (num_frames <= 0) throw std::runtime_error("build_chunk_plan: num_frames must be positive");
  check_policy(cfg, policy);

  ChunkPlan plan;
  plan.policy = policy;
  plan.num_frames = num_frames;
  plan.src_ms = num_frames * cfg.frame_ms;

  // Offline decoding is the one-chunk degenerate case: every mask row allows
  // every position and the single chunk reads the full utterance.
  const int frames_per_chunk =
      policy.offline ? num_frames : policy.chunk_ms / cfg.frame_ms;
  plan.num_chunks = ceil_div(num_frames, frames_per_chunk);
  plan.enc_lookahead =
      policy.offline ? 0 : policy.lookahead_ms / (cfg.frame_ms * cfg.conv_stride_total());

  plan.frame_chunk.resize(static_cast<size_t>(num_frames));
  for (int t = 0; t < num_frames; ++t) plan.frame_chunk[static_cast<size_t>(t)] = t / frames_per_chunk;

  // Two stride-2 causal convs: ceil(ceil(F/2)/2) == ceil(F/4) positions, and
  // encoder position q depends only on frames <= conv_stride*q, so q belongs
  // to the chunk of frame conv_stride*q, i.e. floor(q / (frames_per_chunk/4)).
  const int enc_len = ceil_div(ceil_div(num_frames, 2), 2);
  const int enc_per_chunk = ceil_div(frames_per_chunk, cfg.conv_stride_total());
  plan.enc_chunk.resize(static_cast<size_t>(enc_len));
  for (int q = 0; q < enc_len; ++q) plan.enc_chunk[static_cast<size_t>(q)] = q / enc_per_chunk;

  // Linguistic: groups of r_down encoder positions within each chunk; a
  // partial final chunk yields ceil(enc_in_chunk / r_down) positions.
  std::vector<int> enc_counts = ChunkPlan::counts(plan.enc_chunk, plan.num_chunks);
  for (int c = 0; c < plan.num_chunks; ++c) {
    const int lc = ceil_div(enc_counts[static_cast<size_t>(c)], cfg.r_down);
    for (int j = 0; j < lc; ++j) plan.ling_chunk.push_back(c);
  }
  for (int c : plan.ling_chunk) {
    for (int j = 0; j < cfg.r_up; ++j) plan.ac_chunk.push_back(c);
  }

  plan.boundary_ms.resize(static_cast<size_t>(plan.num_chunks));
  for (int i = 0; i < plan.num_chunks; ++i) {
    const long long nominal =
        policy.offline ? plan.src_ms
                       : static_cast<long long>(i + policy.lookahead_chunks + 1) * policy.chunk_ms +
                             policy.lookahead_ms;
    plan.boundary_ms[static_cast<size_t>(i)] =
        static_cast<int>(std::min<long long>(nominal, plan.src_ms));
  }
  return plan;
}

namespace {

Tensor build_mask(size_t rows, size_t cols) {
  NoGradGuard guard;
  return Tensor::zeros({static_cast<int>(rows), static_cast<int>(cols)},
                       /*requires_grad=*/false);
}

}  // namespace

Tensor encoder_self_mask(const ChunkPlan& plan, bool first_layer) {
  const size_t n = static_cast<size_t>(plan.enc_len());
  // Last encoder position of each chunk, for the first-layer lookahead window.
  std::vector<int> chunk_end(static_cast<size_t>(plan.num_chunks), 0);
  for (int q = 0; q < plan.enc_len(); ++q) {
    chunk_end[static_cast<size_t>(plan.enc_chunk[static_cast<size_t>(q)])] = q;
  }
  Tensor mask = build_mask(n, n);
  for (size_t q = 0; q < n; ++q) {
    const int cq = plan.enc_chunk[q];
    const int limit = first_layer
                          ? chunk_end[static_cast<size_t>(cq)] + plan.enc_lookahead
                          : -1;
    for (size_t j = 0; j < n; ++j) {
      const bool same_or_past = plan.enc_chunk[j] <= cq;
      const bool lookahead = first_layer && static_cast<int>(j) <= limit;
      if (same_or_past || lookahead) (*mask.data)[q * n + j] = 1.0;
    }
  }
  return mask;
}

Tensor chunk_self_mask(const std::vector<int>& pos_chunk) {
  const size_t n = pos_chunk.size();
  Tensor mask = build_mask(n, n);
  for (size_t q = 0; q < n; ++q) {
    for (size_t j = 0; j < n; ++j) {
      if (pos_chunk[j] <= pos_chunk[q]) (*mask.data)[q * n + j] = 1.0;
    }
  }
  return mask;
}

Tensor chunk_cross_mask(const std::vector<int>& query_chunk, const std::vector<int>& key_chunk,
                        int lookahead_chunks) {
  const size_t rows = query_chunk.size();
  const size_t cols = key_chunk.size();
  Tensor mask = build_mask(rows, cols);
  for (size_t q = 0; q < rows; ++q) {
    const int limit = query_chunk[q] + lookahead_chunks;
    for (size_t j = 0; j < cols; ++j) {
      if (key_chunk[j] <= limit) (*mask.data)[q * cols + j] = 1.0;
    }
  }
  return mask;
}

}  // namespace natstream
