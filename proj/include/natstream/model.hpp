#pragma once

#include <string>
#include <vector>

#include "natstream/adam.hpp"
#include "natstream/chunk_plan.hpp"
#include "natstream/rng.hpp"
#include "natstream/tensor.hpp"

namespace natstream {

// One multi-head attention block: query/key/value/output projections.
struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

// One pre-norm Transformer layer. Decoder layers additionally carry a
// cross-attention block (has_cross); encoder layers leave it empty.
struct LayerParams {
  Tensor ln1_g, ln1_b;
  AttentionParams self_attn;
  bool has_cross = false;
  Tensor lnc_g, lnc_b;
  AttentionParams cross_attn;
  Tensor ln2_g, ln2_b;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct ModelParams {
  ModelConfig cfg;

  // Frontend: two stride-2 causal convolutions (kernel 3), ReLU after each.
  Tensor conv1_w, conv1_b;  // feat_dim -> model_dim
  Tensor conv2_w, conv2_b;  // model_dim -> model_dim

  std::vector<LayerParams> encoder, linguistic, acoustic;
  Tensor enc_ln_g, enc_ln_b;    // final norms of each stack (pre-norm design)
  Tensor ling_ln_g, ling_ln_b;
  Tensor ac_ln_g, ac_ln_b;

  // Learned absolute positions for the decoders; the acoustic table is
  // separate and r_up times longer because positions are counted after the
  // r_up-fold copy. The encoder uses fixed sinusoidal encodings.
  Tensor ling_pos;  // [max_positions, model_dim]
  Tensor ac_pos;    // [max_positions * r_up, model_dim]

  // Output projections; column text_vocab / unit_vocab is the blank, sharing
  // the projection with real tokens.
  Tensor text_proj_w, text_proj_b;  // [model_dim, text_vocab+1]
  Tensor unit_proj_w, unit_proj_b;  // [model_dim, unit_vocab+1]

  // Embeddings used to substitute decoder inputs at glanced positions.
  Tensor text_embed;  // [text_vocab+1, model_dim]
  Tensor unit_embed;  // [unit_vocab+1, model_dim]

  static ModelParams init(const ModelConfig& cfg, Rng& rng);
  // Every trainable tensor with a stable dotted name, in a fixed order (the
  // checkpoint and optimizer orders).
  std::vector<NamedTensor> named_params();
};

// Replaces decoder input rows at the given positions with token embeddings
// (before positional encodings are added).
struct GlancePlan {
  std::vector<int> positions;
  std::vector<int> symbols;
  bool empty() const { return positions.empty(); }
};

struct ForwardOptions {
  bool training = false;     // enables dropout when rng is set
  Rng* rng = nullptr;
  const GlancePlan* text_glance = nullptr;  // linguistic decoder inputs
  const GlancePlan* unit_glance = nullptr;  // acoustic decoder inputs
};

struct ForwardResult {
  Tensor encoder_states;  // [enc_len, model_dim], after the final encoder norm
  Tensor ling_states;     // [ling_len, model_dim], after the final norm; feeds the acoustic stack
  Tensor text_lattice;    // [ling_len, text_vocab+1], log-probabilities per row
  Tensor unit_lattice;    // [ac_len, unit_vocab+1], log-probabilities per row
};

// Parameter construction and checkpoint naming, shared with the
// autoregressive baseline model.
Tensor init_normal_param(Shape shape, Rng& rng);  // N(0, 0.02^2), trainable
Tensor init_const_param(Shape shape, double value);
LayerParams init_layer_params(const ModelConfig& cfg, bool has_cross, Rng& rng);
void append_layer_entries(std::vector<NamedTensor>& out, const std::string& prefix,
                          LayerParams& layer);

// Fixed sinusoidal position encodings, rows [offset, offset+len).
Tensor sinusoidal_positions(int len, int dim, int offset = 0);

// Multi-head attention with separate query and key/value inputs. mask is
// [rows(q), rows(kv)] with 0/1 entries, or an undefined tensor for no mask.
Tensor multi_head_attention(const AttentionParams& p, int heads, const Tensor& q_in,
                            const Tensor& kv_in, const Tensor& mask);

// One pre-norm layer: x + attn(ln(x)) [+ cross] + ffn(ln(x)). cross_kv and
// cross_mask are ignored unless layer.has_cross.
Tensor apply_layer(const LayerParams& layer, int heads, const Tensor& x, const Tensor& self_mask,
                   const Tensor& cross_kv, const Tensor& cross_mask, double dropout, Rng* rng);

// Frontend + encoder stack. Returns the [enc_len, model_dim] states after the
// final encoder norm.
Tensor encode(const ModelParams& params, const Tensor& frames, const ChunkPlan& plan,
              const ForwardOptions& opts);

// Mean-pools encoder states in groups of r_down within each chunk.
Tensor downsample(const ModelParams& params, const Tensor& encoder_states, const ChunkPlan& plan);

// Linguistic decoder: pooled encoder states (with optional glance
// substitution, then learned positions) through the linguistic stack.
// Returns {ling_states, text_lattice}.
struct LinguisticResult {
  Tensor states;
  Tensor lattice;
};
LinguisticResult linguistic_forward(const ModelParams& params, const Tensor& pooled,
                                    const Tensor& encoder_states, const ChunkPlan& plan,
                                    const ForwardOptions& opts);

// Acoustic decoder: linguistic states copied r_up times (glance substitution,
// then the separate learned positions) through the acoustic stack; returns
// the unit lattice.
Tensor acoustic_forward(const ModelParams& params, const Tensor& ling_states,
                        const Tensor& encoder_states, const ChunkPlan& plan,
                        const ForwardOptions& opts);

ForwardResult forward(const ModelParams& params, const Tensor& frames, const ChunkPlan& plan,
                      const ForwardOptions& opts = {});

}  // namespace natstream
