#include "natstream/model.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "natstream/ops.hpp"

namespace natstream {

namespace {

constexpr double kInitStd = 0.02;

AttentionParams init_attention(int dim, Rng& rng);

}  // namespace

Tensor init_normal_param(Shape shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
  for (double& v : *t.data) v = kInitStd * rng.normal();
  return t;
}

Tensor init_const_param(Shape shape, double value) {
  return Tensor::full(std::move(shape), value, /*requires_grad=*/true);
}

namespace {

AttentionParams init_attention(int dim, Rng& rng) {
  AttentionParams p;
  p.wq = init_normal_param({dim, dim}, rng);
  p.bq = init_const_param({dim}, 0.0);
  p.wk = init_normal_param({dim, dim}, rng);
  p.bk = init_const_param({dim}, 0.0);
  p.wv = init_normal_param({dim, dim}, rng);
  p.bv = init_const_param({dim}, 0.0);
  p.wo = init_normal_param({dim, dim}, rng);
  p.bo = init_const_param({dim}, 0.0);
  return p;
}

}  // namespace

LayerParams init_layer_params(const ModelConfig& cfg, bool has_cross, Rng& rng) {
  LayerParams layer;
  const int d = cfg.model_dim;
  layer.ln1_g = init_const_param({d}, 1.0);
  layer.ln1_b = init_const_param({d}, 0.0);
  layer.self_attn = init_attention(d, rng);
  layer.has_cross = has_cross;
  if (has_cross) {
    layer.lnc_g = init_const_param({d}, 1.0);
    layer.lnc_b = init_const_param({d}, 0.0);
    layer.cross_attn = init_attention(d, rng);
  }
  layer.ln2_g = init_const_param({d}, 1.0);
  layer.ln2_b = init_const_param({d}, 0.0);
  layer.ffn_w1 = init_normal_param({d, cfg.ffn_mult * d}, rng);
  layer.ffn_b1 = init_const_param({cfg.ffn_mult * d}, 0.0);
  layer.ffn_w2 = init_normal_param({cfg.ffn_mult * d, d}, rng);
  layer.ffn_b2 = init_const_param({d}, 0.0);
  return layer;
}

namespace {

void add_attention_entries(std::vector<NamedTensor>& out, const std::string& prefix,
                           AttentionParams& p) {
  out.push_back({prefix + ".wq", &p.wq});
  out.push_back({prefix + ".bq", &p.bq});
  out.push_back({prefix + ".wk", &p.wk});
  out.push_back({prefix + ".bk", &p.bk});
  out.push_back({prefix + ".wv", &p.wv});
  out.push_back({prefix + ".bv", &p.bv});
  out.push_back({prefix + ".wo", &p.wo});
  out.push_back({prefix + ".bo", &p.bo});
}

}  // namespace

void append_layer_entries(std::vector<NamedTensor>& out, const std::string& prefix,
                          LayerParams& layer) {
  out.push_back({prefix + ".ln1.g", &layer.ln1_g});
  out.push_back({prefix + ".ln1.b", &layer.ln1_b});
  add_attention_entries(out, prefix + ".self", layer.self_attn);
  if (layer.has_cross) {
    out.push_back({prefix + ".lnc.g", &layer.lnc_g});
    out.push_back({prefix + ".lnc.b", &layer.lnc_b});
    add_attention_entries(out, prefix + ".cross", layer.cross_attn);
  }
  out.push_back({prefix + ".ln2.g", &layer.ln2_g});
  out.push_back({prefix + ".ln2.b", &layer.ln2_b});
  out.push_back({prefix + ".ffn.w1", &layer.ffn_w1});
  out.push_back({prefix + ".ffn.b1", &layer.ffn_b1});
  out.push_back({prefix + ".ffn.w2", &layer.ffn_w2});
  out.push_back({prefix + ".ffn.b2", &layer.ffn_b2});
}

namespace {

double dropout_rate(const ModelParams& params, const ForwardOptions& opts) {
  return (opts.training && opts.rng != nullptr) ? params.cfg.dropout : 0.0;
}

Tensor glanced(const Tensor& x, const Tensor& table, const GlancePlan* plan) {
  if (plan == nullptr || plan->empty()) return x;
  if (plan->positions.size() != plan->symbols.size()) {
    throw std::runtime_error("glance plan has " + std::to_string(plan->positions.size()) +
                             " positions but " + std::to_string(plan->symbols.size()) +
                             " symbols");
  }
  return ops::replace_rows(x, plan->positions, ops::embedding(table, plan->symbols));
}

Tensor learned_positions(const Tensor& table, int len, const char* which) {
  if (len > table.rows()) {
    throw std::runtime_error(std::string(which) + " position table has " +
                             std::to_string(table.rows()) + " rows but the sequence needs " +
                             std::to_string(len));
  }
  return ops::slice_rows(table, 0, len);
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelParams p;
  p.cfg = cfg;
  const int d = cfg.model_dim;
  p.conv1_w = init_normal_param({3 * cfg.feat_dim, d}, rng);
  p.conv1_b = init_const_param({d}, 0.0);
  p.conv2_w = init_normal_param({3 * d, d}, rng);
  p.conv2_b = init_const_param({d}, 0.0);
  for (int i = 0; i < cfg.enc_layers; ++i) p.encoder.push_back(init_layer_params(cfg, false, rng));
  for (int i = 0; i < cfg.ling_layers; ++i) p.linguistic.push_back(init_layer_params(cfg, true, rng));
  for (int i = 0; i < cfg.ac_layers; ++i) p.acoustic.push_back(init_layer_params(cfg, true, rng));
  p.enc_ln_g = init_const_param({d}, 1.0);
  p.enc_ln_b = init_const_param({d}, 0.0);
  p.ling_ln_g = init_const_param({d}, 1.0);
  p.ling_ln_b = init_const_param({d}, 0.0);
  p.ac_ln_g = init_const_param({d}, 1.0);
  p.ac_ln_b = init_const_param({d}, 0.0);
  p.ling_pos = init_normal_param({cfg.max_positions, d}, rng);
  p.ac_pos = init_normal_param({cfg.max_positions * cfg.r_up, d}, rng);
  p.text_proj_w = init_normal_param({d, cfg.text_vocab + 1}, rng);
  p.text_proj_b = init_const_param({cfg.text_vocab + 1}, 0.0);
  p.unit_proj_w = init_normal_param({d, cfg.unit_vocab + 1}, rng);
  p.unit_proj_b = init_const_param({cfg.unit_vocab + 1}, 0.0);
  p.text_embed = init_normal_param({cfg.text_vocab + 1, d}, rng);
  p.unit_embed = init_normal_param({cfg.unit_vocab + 1, d}, rng);
  return p;
}

std::vector<NamedTensor> ModelParams::named_params() {
  std::vector<NamedTensor> out;
  out.push_back({"conv1.w", &conv1_w});
  out.push_back({"conv1.b", &conv1_b});
  out.push_back({"conv2.w", &conv2_w});
  out.push_back({"conv2.b", &conv2_b});
  for (size_t i = 0; i < encoder.size(); ++i) {
    append_layer_entries(out, "encoder." + std::to_string(i), encoder[i]);
  }
  for (size_t i = 0; i < linguistic.size(); ++i) {
    append_layer_entries(out, "linguistic." + std::to_string(i), linguistic[i]);
  }
  for (size_t i = 0; i < acoustic.size(); ++i) {
    append_layer_entries(out, "acoustic." + std::to_string(i), acoustic[i]);
  }
  out.push_back({"enc_ln.g", &enc_ln_g});
  out.push_back({"enc_ln.b", &enc_ln_b});
  out.push_back({"ling_ln.g", &ling_ln_g});
  out.push_back({"ling_ln.b", &ling_ln_b});
  out.push_back({"ac_ln.g", &ac_ln_g});
  out.push_back({"ac_ln.b", &ac_ln_b});
  out.push_back({"ling_pos", &ling_pos});
  out.push_back({"ac_pos", &ac_pos});
  out.push_back({"text_proj.w", &text_proj_w});
  out.push_back({"text_proj.b", &text_proj_b});
  out.push_back({"unit_proj.w", &unit_proj_w});
  out.push_back({"unit_proj.b", &unit_proj_b});
  out.push_back({"text_embed", &text_embed});
  out.push_back({"unit_embed", &unit_embed});
  return out;
}

Tensor sinusoidal_positions(int len, int dim, int offset) {
  NoGradGuard guard;
  Tensor pe = Tensor::zeros({len, dim});
  for (int pos = 0; pos < len; ++pos) {
    for (int col = 0; col < dim; ++col) {
      const int pair = col / 2;
      const double angle =
          (pos + offset) / std::pow(10000.0, (2.0 * pair) / dim);
      (*pe.data)[static_cast<size_t>(pos) * dim + col] =
          (col % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

Tensor multi_head_attention(const AttentionParams& p, int heads, const Tensor& q_in,
                            const Tensor& kv_in, const Tensor& mask) {
  const int d = q_in.cols();
  if (d % heads != 0) {
    throw std::runtime_error("multi_head_attention: dim " + std::to_string(d) +
                             " not divisible by " + std::to_string(heads) + " heads");
  }
  const int dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor q = ops::add(ops::matmul(q_in, p.wq), p.bq);
  Tensor k = ops::add(ops::matmul(kv_in, p.wk), p.bk);
  Tensor v = ops::add(ops::matmul(kv_in, p.wv), p.bv);
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = ops::slice_cols(q, h * dh, dh);
    Tensor kh = ops::slice_cols(k, h * dh, dh);
    Tensor vh = ops::slice_cols(v, h * dh, dh);
    Tensor scores = ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_sqrt);
    Tensor probs = ops::masked_softmax(scores, mask);
    head_outs.push_back(ops::matmul(probs, vh));
  }
  return ops::add(ops::matmul(ops::concat_cols(head_outs), p.wo), p.bo);
}

Tensor apply_layer(const LayerParams& layer, int heads, const Tensor& x, const Tensor& self_mask,
                   const Tensor& cross_kv, const Tensor& cross_mask, double dropout, Rng* rng) {
  Tensor h = ops::layer_norm(x, layer.ln1_g, layer.ln1_b);
  h = multi_head_attention(layer.self_attn, heads, h, h, self_mask);
  Tensor out = ops::add(x, ops::dropout(h, dropout, rng));
  if (layer.has_cross) {
    Tensor c = ops::layer_norm(out, layer.lnc_g, layer.lnc_b);
    c = multi_head_attention(layer.cross_attn, heads, c, cross_kv, cross_mask);
    out = ops::add(out, ops::dropout(c, dropout, rng));
  }
  Tensor f = ops::layer_norm(out, layer.ln2_g, layer.ln2_b);
  f = ops::relu(ops::add(ops::matmul(f, layer.ffn_w1), layer.ffn_b1));
  f = ops::add(ops::matmul(f, layer.ffn_w2), layer.ffn_b2);
  return ops::add(out, ops::dropout(f, dropout, rng));
}

Tensor encode(const ModelParams& params, const Tensor& frames, const ChunkPlan& plan,
              const ForwardOptions& opts) {
  const ModelConfig& cfg = params.cfg;
  if (frames.ndim() != 2 || frames.rows() != plan.num_frames || frames.cols() != cfg.feat_dim) {
    throw std::runtime_error("encode: frames shape " + shape_str(frames.shape) +
                             " does not match plan frames " + std::to_string(plan.num_frames) +
                             " x feat_dim " + std::to_string(cfg.feat_dim));
  }
  const double rate = dropout_rate(params, opts);
  Tensor h = ops::relu(ops::causal_conv1d(frames, params.conv1_w, params.conv1_b, 2));
  h = ops::relu(ops::causal_conv1d(h, params.conv2_w, params.conv2_b, 2));
  if (h.rows() != plan.enc_len()) {
    throw std::runtime_error("encode: conv produced " + std::to_string(h.rows()) +
                             " positions, plan expects " + std::to_string(plan.enc_len()));
  }
  h = ops::add(h, sinusoidal_positions(plan.enc_len(), cfg.model_dim));
  h = ops::dropout(h, rate, opts.rng);
  Tensor first_mask = encoder_self_mask(plan, /*first_layer=*/true);
  Tensor rest_mask = encoder_self_mask(plan, /*first_layer=*/false);
  for (size_t i = 0; i < params.encoder.size(); ++i) {
    h = apply_layer(params.encoder[i], cfg.heads, h, i == 0 ? first_mask : rest_mask, Tensor{},
                    Tensor{}, rate, opts.rng);
  }
  return ops::layer_norm(h, params.enc_ln_g, params.enc_ln_b);
}

Tensor downsample(const ModelParams& params, const Tensor& encoder_states, const ChunkPlan& plan) {
  if (encoder_states.rows() != plan.enc_len()) {
    throw std::runtime_error("downsample: got " + std::to_string(encoder_states.rows()) +
                             " encoder states, plan expects " + std::to_string(plan.enc_len()));
  }
  std::vector<int> enc_counts = ChunkPlan::counts(plan.enc_chunk, plan.num_chunks);
  std::vector<Tensor> parts;
  parts.reserve(static_cast<size_t>(plan.num_chunks));
  int offset = 0;
  for (int c = 0; c < plan.num_chunks; ++c) {
    const int cnt = enc_counts[static_cast<size_t>(c)];
    parts.push_back(ops::mean_pool(ops::slice_rows(encoder_states, offset, cnt), params.cfg.r_down));
    offset += cnt;
  }
  Tensor pooled = ops::concat_rows(parts);
  if (pooled.rows() != plan.ling_len()) {
    throw std::runtime_error("downsample: produced " + std::to_string(pooled.rows()) +
                             " rows, plan expects " + std::to_string(plan.ling_len()));
  }
  return pooled;
}

LinguisticResult linguistic_forward(const ModelParams& params, const Tensor& pooled,
                                    const Tensor& encoder_states, const ChunkPlan& plan,
                                    const ForwardOptions& opts) {
  const ModelConfig& cfg = params.cfg;
  if (pooled.rows() != plan.ling_len()) {
    throw std::runtime_error("linguistic_forward: got " + std::to_string(pooled.rows()) +
                             " pooled rows, plan expects " + std::to_string(plan.ling_len()));
  }
  const double rate = dropout_rate(params, opts);
  Tensor x = glanced(pooled, params.text_embed, opts.text_glance);
  x = ops::add(x, learned_positions(params.ling_pos, plan.ling_len(), "linguistic"));
  x = ops::dropout(x, rate, opts.rng);
  Tensor self_mask = chunk_self_mask(plan.ling_chunk);
  Tensor cross_mask =
      chunk_cross_mask(plan.ling_chunk, plan.enc_chunk, plan.policy.lookahead_chunks);
  for (const LayerParams& layer : params.linguistic) {
    x = apply_layer(layer, cfg.heads, x, self_mask, encoder_states, cross_mask, rate, opts.rng);
  }
  LinguisticResult result;
  result.states = ops::layer_norm(x, params.ling_ln_g, params.ling_ln_b);
  result.lattice =
      ops::log_softmax(ops::add(ops::matmul(result.states, params.text_proj_w), params.text_proj_b));
  return result;
}

Tensor acoustic_forward(const ModelParams& params, const Tensor& ling_states,
                        const Tensor& encoder_states, const ChunkPlan& plan,
                        const ForwardOptions& opts) {
  const ModelConfig& cfg = params.cfg;
  if (ling_states.rows() != plan.ling_len()) {
    throw std::runtime_error("acoustic_forward: got " + std::to_string(ling_states.rows()) +
                             " linguistic states, plan expects " + std::to_string(plan.ling_len()));
  }
  const double rate = dropout_rate(params, opts);
  Tensor x = ops::repeat_rows(ling_states, cfg.r_up);
  x = glanced(x, params.unit_embed, opts.unit_glance);
  // Positions are counted after the r_up-fold copy, from a table separate
  // from the linguistic one, so the copies of one state are distinguishable.
  x = ops::add(x, learned_positions(params.ac_pos, plan.ac_len(), "acoustic"));
  x = ops::dropout(x, rate, opts.rng);
  Tensor self_mask = chunk_self_mask(plan.ac_chunk);
  Tensor cross_mask = chunk_cross_mask(plan.ac_chunk, plan.enc_chunk, plan.policy.lookahead_chunks);
  for (const LayerParams& layer : params.acoustic) {
    x = apply_layer(layer, cfg.heads, x, self_mask, encoder_states, cross_mask, rate, opts.rng);
  }
  Tensor states = ops::layer_norm(x, params.ac_ln_g, params.ac_ln_b);
  return ops::log_softmax(ops::add(ops::matmul(states, params.unit_proj_w), params.unit_proj_b));
}

ForwardResult forward(const ModelParams& params, const Tensor& frames, const ChunkPlan& plan,
                      const ForwardOptions& opts) {
  ForwardResult result;
  result.encoder_states = encode(params, frames, plan, opts);
  Tensor pooled = downsample(params, result.encoder_states, plan);
  LinguisticResult ling = linguistic_forward(params, pooled, result.encoder_states, plan, opts);
  result.ling_states = ling.states;
  result.text_lattice = ling.lattice;
  result.unit_lattice =
      acoustic_forward(params, result.ling_states, result.encoder_states, plan, opts);
  return result;
}

}  // namespace natstream
