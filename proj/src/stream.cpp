#include "natstream/stream.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

#include "json.hpp"
#include "natstream/ops.hpp"

namespace natstream {

namespace {

using ordered_json = nlohmann::ordered_json;

int ceil_div(int a, int b) { return (a + b - 1) / b; }

int argmax_row(const Tensor& lattice, int row) {
  int best = 0;
  for (int c = 1; c < lattice.cols(); ++c) {
    if (lattice.at(row, c) > lattice.at(row, best)) best = c;
  }
  return best;
}

std::vector<int> argmax_rows(const Tensor& lattice, int row_begin, int count) {
  std::vector<int> out;
  out.reserve(static_cast<size_t>(count));
  for (int r = 0; r < count; ++r) out.push_back(argmax_row(lattice, row_begin + r));
  return out;
}

Tensor append_rows(const Tensor& store, const Tensor& rows) {
  return store.defined() ? ops::concat_rows(store, rows) : rows;
}

// Inference-time pre-norm layer where the query rows are a suffix of the key
// rows (the frozen prefix is passed separately through keys_all).
Tensor stream_layer(const LayerParams& layer, int heads, const Tensor& x_new,
                    const Tensor& keys_all, const Tensor& self_mask, const Tensor& cross_kv,
                    const Tensor& cross_mask) {
  Tensor q = ops::layer_norm(x_new, layer.ln1_g, layer.ln1_b);
  Tensor kv = ops::layer_norm(keys_all, layer.ln1_g, layer.ln1_b);
  Tensor out = ops::add(x_new, multi_head_attention(layer.self_attn, heads, q, kv, self_mask));
  if (layer.has_cross) {
    Tensor c = ops::layer_norm(out, layer.lnc_g, layer.lnc_b);
    out = ops::add(out, multi_head_attention(layer.cross_attn, heads, c, cross_kv, cross_mask));
  }
  Tensor f = ops::layer_norm(out, layer.ln2_g, layer.ln2_b);
  f = ops::relu(ops::add(ops::matmul(f, layer.ffn_w1), layer.ffn_b1));
  f = ops::add(ops::matmul(f, layer.ffn_w2), layer.ffn_b2);
  return ops::add(out, f);
}

std::string stream_name(Stream s) { return s == Stream::text ? "text" : "unit"; }

Stream stream_from_name(const std::string& name) {
  if (name == "text") return Stream::text;
  if (name == "unit") return Stream::unit;
  throw std::runtime_error("unknown stream name '" + name + "'");
}

}  // namespace

std::vector<int> InstanceLog::tokens(Stream stream) const {
  std::vector<int> out;
  for (const EmissionEvent& e : events) {
    if (e.stream == stream) out.push_back(e.token);
  }
  return out;
}

std::string instance_log_to_json(const InstanceLog& log) {
  ordered_json j;
  j["id"] = log.id;
  j["src_ms"] = log.src_ms;
  j["policy"] = {{"t_s", log.policy.chunk_ms},
                 {"t_a", log.policy.lookahead_ms},
                 {"k", log.policy.lookahead_chunks},
                 {"offline", log.policy.offline}};
  j["refs"] = {{"text", log.ref_text}, {"units", log.ref_units}};
  j["events"] = ordered_json::array();
  for (const EmissionEvent& e : log.events) {
    j["events"].push_back({{"stream", stream_name(e.stream)},
                           {"token", e.token},
                           {"chunk", e.chunk},
                           {"src_ms", e.src_ms},
                           {"wall_ms", e.wall_ms}});
  }
  j["chunk_compute_ms"] = log.chunk_compute_ms;
  return j.dump();
}

InstanceLog instance_log_from_json(const std::string& line) {
  try {
    ordered_json j = ordered_json::parse(line);
    InstanceLog log;
    log.id = j.at("id").get<std::string>();
    log.src_ms = j.at("src_ms").get<int>();
    const auto& p = j.at("policy");
    log.policy.chunk_ms = p.at("t_s").get<int>();
    log.policy.lookahead_ms = p.at("t_a").get<int>();
    log.policy.lookahead_chunks = p.at("k").get<int>();
    log.policy.offline = p.at("offline").get<bool>();
    log.ref_text = j.at("refs").at("text").get<std::vector<int>>();
    log.ref_units = j.at("refs").at("units").get<std::vector<int>>();
    for (const auto& ev : j.at("events")) {
      EmissionEvent e;
      e.stream = stream_from_name(ev.at("stream").get<std::string>());
      e.token = ev.at("token").get<int>();
      e.chunk = ev.at("chunk").get<int>();
      e.src_ms = ev.at("src_ms").get<int>();
      e.wall_ms = ev.at("wall_ms").get<double>();
      log.events.push_back(e);
    }
    log.chunk_compute_ms = j.at("chunk_compute_ms").get<std::vector<double>>();
    return log;
  } catch (const ordered_json::exception& e) {
    throw std::runtime_error(std::string("instance log parse failed: ") + e.what());
  }
}

ClockSpec parse_clock(const std::string& text) {
  ClockSpec clock;
  if (text == "nca") {
    clock.mode = ClockSpec::Mode::nca;
  } else if (text == "ca") {
    clock.mode = ClockSpec::Mode::ca;
  } else if (text.rfind("injected:", 0) == 0) {
    clock.mode = ClockSpec::Mode::injected;
    try {
      clock.injected_ms = std::stod(text.substr(9));
    } catch (const std::exception&) {
      throw std::runtime_error("bad injected clock value in '" + text + "'");
    }
    if (clock.injected_ms < 0) throw std::runtime_error("injected compute must be >= 0");
  } else {
    throw std::runtime_error("unknown clock mode '" + text +
                             "', expected nca, ca, or injected:<ms>");
  }
  return clock;
}

std::vector<int> online_collapse(CollapseState& state, const std::vector<int>& symbols,
                                 int blank) {
  std::vector<int> out;
  for (int s : symbols) {
    if (s != blank && s != state.last) out.push_back(s);
    state.last = s;
  }
  return out;
}

// Per-layer frozen inputs for the incremental engine. enc_inputs[l-1] feeds
// encoder layer l (layer 0 reads the recomputed conv frontend directly);
// ling_inputs[l] / ac_inputs[l] feed decoder layer l.
struct StreamSession::IncrementalCache {
  std::vector<Tensor> enc_inputs;
  Tensor enc_final;
  int frozen_enc = 0;
  std::vector<Tensor> ling_inputs;
  int frozen_ling = 0;
  std::vector<Tensor> ac_inputs;
};

StreamSession::StreamSession(const ModelParams& model, const Policy& policy,
                             const ClockSpec& clock, EngineKind engine)
    : model_(model),
      policy_(policy),
      clock_(clock),
      engine_(engine),
      text_state_(model.cfg.text_vocab),
      unit_state_(model.cfg.unit_vocab) {
  if (policy.offline) {
    // Offline ignores the chunk granularity; normalize it so plan validation
    // sees values consistent with the model.
    policy_.chunk_ms = model.cfg.chunk_ms;
    policy_.lookahead_ms = model.cfg.lookahead_ms;
    policy_.lookahead_chunks = model.cfg.lookahead_chunks;
  } else {
    // Validates the chunk/lookahead granularity against the model config.
    ModelConfig probe = model.cfg;
    probe.chunk_ms = policy.chunk_ms;
    probe.lookahead_ms = policy.lookahead_ms;
    probe.lookahead_chunks = policy.lookahead_chunks;
    probe.validate();
  }
  cache_ = std::make_unique<IncrementalCache>();
  cache_->enc_inputs.resize(static_cast<size_t>(std::max(0, model.cfg.enc_layers - 1)));
  cache_->ling_inputs.resize(static_cast<size_t>(model.cfg.ling_layers));
  cache_->ac_inputs.resize(static_cast<size_t>(model.cfg.ac_layers));
}

StreamSession::~StreamSession() = default;

int StreamSession::src_ms_received() const { return num_frames_ * model_.cfg.frame_ms; }

int StreamSession::nominal_boundary_ms(int chunk) const {
  return (chunk + policy_.lookahead_chunks + 1) * policy_.chunk_ms + policy_.lookahead_ms;
}

std::vector<EmissionEvent> StreamSession::push_chunk(const Tensor& frames) {
  if (finalized_) throw std::runtime_error("push_chunk after finalize");
  if (partial_chunk_seen_) {
    throw std::runtime_error("push_chunk after a partial chunk (only the final chunk may be short)");
  }
  if (!frames.defined() || frames.ndim() != 2 || frames.cols() != model_.cfg.feat_dim ||
      frames.rows() < 1) {
    throw std::runtime_error("push_chunk: expected [frames, " +
                             std::to_string(model_.cfg.feat_dim) + "] with at least one row");
  }
  const int frames_per_chunk = policy_.offline ? frames.rows() : policy_.chunk_ms / model_.cfg.frame_ms;
  if (!policy_.offline) {
    if (frames.rows() > frames_per_chunk) {
      throw std::runtime_error("push_chunk: got " + std::to_string(frames.rows()) +
                               " frames, chunk holds " + std::to_string(frames_per_chunk));
    }
    if (frames.rows() < frames_per_chunk) partial_chunk_seen_ = true;
  }
  frame_data_.insert(frame_data_.end(), frames.data->begin(), frames.data->end());
  num_frames_ += frames.rows();

  std::vector<EmissionEvent> events;
  if (!policy_.offline) decode_ready(/*at_end=*/false, events);
  return events;
}

std::vector<EmissionEvent> StreamSession::finalize() {
  if (finalized_) throw std::runtime_error("finalize called twice");
  if (num_frames_ == 0) throw std::runtime_error("finalize with no frames");
  std::vector<EmissionEvent> events;
  decode_ready(/*at_end=*/true, events);
  finalized_ = true;
  return events;
}

void StreamSession::decode_ready(bool at_end, std::vector<EmissionEvent>& out) {
  const int frames_per_chunk =
      policy_.offline ? num_frames_ : policy_.chunk_ms / model_.cfg.frame_ms;
  const int total_chunks = ceil_div(num_frames_, frames_per_chunk);
  while (next_chunk_ < total_chunks) {
    const int chunk = next_chunk_;
    const int nominal = policy_.offline ? src_ms_received() : nominal_boundary_ms(chunk);
    if (!at_end && nominal > src_ms_received()) break;
    const int src_stamp = std::min(nominal, src_ms_received());

    const auto begin = std::chrono::steady_clock::now();
    ChunkOutput decoded = decode_chunk(chunk, at_end);
    const double measured =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - begin)
            .count();

    // nca forces compute time to zero everywhere (stamps and the log), so
    // nca runs are fully deterministic; ca records measured time; injected
    // substitutes a fixed per-chunk cost.
    double logged = 0.0;
    double clock_add = 0.0;
    switch (clock_.mode) {
      case ClockSpec::Mode::nca: break;
      case ClockSpec::Mode::ca:
        clock_add = measured;
        logged = measured;
        break;
      case ClockSpec::Mode::injected:
        clock_add = clock_.injected_ms;
        logged = clock_.injected_ms;
        break;
    }
    clock_compute_ms_ += clock_add;
    chunk_compute_ms_.push_back(logged);
    const double wall = src_stamp + clock_compute_ms_;

    for (int tok : online_collapse(text_state_, decoded.text_symbols, model_.cfg.text_vocab)) {
      text_tokens_.push_back(tok);
      out.push_back({Stream::text, tok, chunk, src_stamp, wall});
    }
    for (int tok : online_collapse(unit_state_, decoded.unit_symbols, model_.cfg.unit_vocab)) {
      unit_tokens_.push_back(tok);
      out.push_back({Stream::unit, tok, chunk, src_stamp, wall});
    }
    ++next_chunk_;
  }
}

StreamSession::ChunkOutput StreamSession::decode_chunk(int chunk, bool at_end) {
  NoGradGuard no_grad;
  if (engine_ == EngineKind::reference || policy_.offline) {
    return decode_reference(chunk, at_end);
  }
  return decode_incremental(chunk, at_end);
}

StreamSession::ChunkOutput StreamSession::decode_reference(int chunk, bool at_end) {
  (void)at_end;
  Tensor prefix = Tensor::from({num_frames_, model_.cfg.feat_dim}, frame_data_);
  ChunkPlan plan = build_chunk_plan(num_frames_, model_.cfg, policy_);
  ForwardResult fwd = forward(model_, prefix, plan, {});
  ChunkOutput out;
  int ling_begin = 0, ling_count = 0, ac_begin = 0, ac_count = 0;
  for (size_t p = 0; p < plan.ling_chunk.size(); ++p) {
    if (plan.ling_chunk[p] < chunk) ++ling_begin;
    if (plan.ling_chunk[p] == chunk) ++ling_count;
  }
  for (size_t p = 0; p < plan.ac_chunk.size(); ++p) {
    if (plan.ac_chunk[p] < chunk) ++ac_begin;
    if (plan.ac_chunk[p] == chunk) ++ac_count;
  }
  out.text_symbols = argmax_rows(fwd.text_lattice, ling_begin, ling_count);
  out.unit_symbols = argmax_rows(fwd.unit_lattice, ac_begin, ac_count);
  return out;
}

StreamSession::ChunkOutput StreamSession::decode_incremental(int chunk, bool at_end) {
  const ModelConfig& cfg = model_.cfg;
  IncrementalCache& c = *cache_;
  const int enc_per_chunk = policy_.chunk_ms / (cfg.frame_ms * cfg.conv_stride_total());
  const int lookahead = policy_.lookahead_ms / (cfg.frame_ms * cfg.conv_stride_total());
  const int k = policy_.lookahead_chunks;

  // Conv frontend over the whole received prefix: causal and cheap, so rows
  // are recomputed rather than cached; they are bitwise stable as the prefix
  // grows.
  Tensor prefix = Tensor::from({num_frames_, cfg.feat_dim}, frame_data_);
  Tensor stage0 = ops::relu(ops::causal_conv1d(prefix, model_.conv1_w, model_.conv1_b, 2));
  stage0 = ops::relu(ops::causal_conv1d(stage0, model_.conv2_w, model_.conv2_b, 2));
  stage0 = ops::add(stage0, sinusoidal_positions(stage0.rows(), cfg.model_dim));
  const int n0 = stage0.rows();

  // Extend the frozen encoder region through the last chunk this decode may
  // read (own chunk + k, or everything at the end of source).
  const int enc_hi = at_end ? n0 : std::min(n0, (chunk + k + 1) * enc_per_chunk);
  if (enc_hi > c.frozen_enc) {
    const int new_begin = c.frozen_enc;
    const int new_count = enc_hi - new_begin;
    Tensor x = ops::slice_rows(stage0, new_begin, new_count);
    for (int l = 0; l < cfg.enc_layers; ++l) {
      Tensor keys;
      int key_len = 0;
      if (l == 0) {
        keys = stage0;
        key_len = n0;
      } else {
        c.enc_inputs[static_cast<size_t>(l - 1)] =
            append_rows(c.enc_inputs[static_cast<size_t>(l - 1)], x);
        keys = c.enc_inputs[static_cast<size_t>(l - 1)];
        key_len = keys.rows();
      }
      Tensor mask = Tensor::zeros({new_count, key_len});
      for (int r = 0; r < new_count; ++r) {
        const int q_chunk = (new_begin + r) / enc_per_chunk;
        const int la_limit = (q_chunk + 1) * enc_per_chunk - 1 + lookahead;
        for (int j = 0; j < key_len; ++j) {
          const bool same_or_past = j / enc_per_chunk <= q_chunk;
          const bool ahead = l == 0 && j <= la_limit;
          if (same_or_past || ahead) (*mask.data)[static_cast<size_t>(r) * key_len + j] = 1.0;
        }
      }
      x = stream_layer(model_.encoder[static_cast<size_t>(l)], cfg.heads, x, keys, mask, Tensor{},
                       Tensor{});
    }
    c.enc_final = append_rows(c.enc_final, ops::layer_norm(x, model_.enc_ln_g, model_.enc_ln_b));
    c.frozen_enc = enc_hi;
  }

  // Linguistic rows of this chunk. The cached keys are exactly the allowed
  // self-attention set (chunks <= own), so no mask is needed; likewise the
  // cross keys are clipped to chunks <= own + k.
  const int estart = chunk * enc_per_chunk;
  const int ecount = std::min((chunk + 1) * enc_per_chunk, c.frozen_enc) - estart;
  if (ecount <= 0) throw std::runtime_error("decode_incremental: encoder rows missing");
  Tensor pooled = ops::mean_pool(ops::slice_rows(c.enc_final, estart, ecount), cfg.r_down);
  const int ling_begin = c.frozen_ling;
  const int ling_count = pooled.rows();
  Tensor cross_kv =
      ops::slice_rows(c.enc_final, 0, std::min((chunk + k + 1) * enc_per_chunk, c.frozen_enc));

  Tensor x = ops::add(pooled, ops::slice_rows(model_.ling_pos, ling_begin, ling_count));
  for (int l = 0; l < cfg.ling_layers; ++l) {
    c.ling_inputs[static_cast<size_t>(l)] = append_rows(c.ling_inputs[static_cast<size_t>(l)], x);
    x = stream_layer(model_.linguistic[static_cast<size_t>(l)], cfg.heads, x,
                     c.ling_inputs[static_cast<size_t>(l)], Tensor{}, cross_kv, Tensor{});
  }
  Tensor ling_states = ops::layer_norm(x, model_.ling_ln_g, model_.ling_ln_b);
  Tensor text_lattice = ops::log_softmax(
      ops::add(ops::matmul(ling_states, model_.text_proj_w), model_.text_proj_b));
  c.frozen_ling += ling_count;

  // Acoustic rows: r_up copies of the linguistic states, with the separate
  // position table indexed by global acoustic position.
  Tensor ac_x = ops::repeat_rows(ling_states, cfg.r_up);
  ac_x = ops::add(ac_x, ops::slice_rows(model_.ac_pos, cfg.r_up * ling_begin,
                                        cfg.r_up * ling_count));
  for (int l = 0; l < cfg.ac_layers; ++l) {
    c.ac_inputs[static_cast<size_t>(l)] = append_rows(c.ac_inputs[static_cast<size_t>(l)], ac_x);
    ac_x = stream_layer(model_.acoustic[static_cast<size_t>(l)], cfg.heads, ac_x,
                        c.ac_inputs[static_cast<size_t>(l)], Tensor{}, cross_kv, Tensor{});
  }
  Tensor ac_states = ops::layer_norm(ac_x, model_.ac_ln_g, model_.ac_ln_b);
  Tensor unit_lattice =
      ops::log_softmax(ops::add(ops::matmul(ac_states, model_.unit_proj_w), model_.unit_proj_b));

  ChunkOutput out;
  out.text_symbols = argmax_rows(text_lattice, 0, text_lattice.rows());
  out.unit_symbols = argmax_rows(unit_lattice, 0, unit_lattice.rows());
  return out;
}

InstanceLog simulate(const Utterance& utt, const ModelParams& model, const Policy& policy,
                     const ClockSpec& clock, EngineKind engine) {
  StreamSession session(model, policy, clock, engine);
  InstanceLog log;
  log.id = utt.id;
  log.src_ms = utt.frames.rows() * model.cfg.frame_ms;
  log.policy = policy;
  log.ref_text = utt.text;
  log.ref_units = utt.units;

  if (policy.offline) {
    for (EmissionEvent& e : session.push_chunk(utt.frames)) log.events.push_back(e);
  } else {
    const int frames_per_chunk = policy.chunk_ms / model.cfg.frame_ms;
    for (int begin = 0; begin < utt.frames.rows(); begin += frames_per_chunk) {
      const int count = std::min(frames_per_chunk, utt.frames.rows() - begin);
      Tensor piece = ops::slice_rows(utt.frames, begin, count);
      for (EmissionEvent& e : session.push_chunk(piece)) log.events.push_back(e);
    }
  }
  for (EmissionEvent& e : session.finalize()) log.events.push_back(e);
  log.chunk_compute_ms = session.chunk_compute_ms();
  return log;
}

OfflineOutput offline_translate(const Utterance& utt, const ModelParams& model) {
  Policy policy = Policy::from_config(model.cfg);
  policy.offline = true;
  InstanceLog log = simulate(utt, model, policy);
  return {log.tokens(Stream::text), log.tokens(Stream::unit)};
}

PlaybackSchedule playback_schedule(const InstanceLog& log, bool computation_aware,
                                   double unit_ms) {
  PlaybackSchedule schedule;
  // Group unit events by chunk (events arrive chunk-ordered).
  struct Group {
    int chunk;
    double emit;
    int units;
  };
  std::vector<Group> groups;
  for (const EmissionEvent& e : log.events) {
    if (e.stream != Stream::unit) continue;
    const double stamp = computation_aware ? e.wall_ms : static_cast<double>(e.src_ms);
    if (!groups.empty() && groups.back().chunk == e.chunk) {
      groups.back().units += 1;
    } else {
      groups.push_back({e.chunk, stamp, 1});
    }
  }
  double prev_end = 0.0;
  bool first = true;
  for (const Group& g : groups) {
    PlaybackSegment seg;
    seg.chunk = g.chunk;
    seg.emit_ms = g.emit;
    seg.start_ms = first ? g.emit : std::max(g.emit, prev_end);
    seg.end_ms = seg.start_ms + unit_ms * g.units;
    seg.units = g.units;
    if (!first) {
      const double gap = std::max(0.0, g.emit - prev_end);
      if (gap > 0.0) {
        schedule.discontinuity_count += 1;
        schedule.discontinuity_total_ms += gap;
      }
    }
    prev_end = seg.end_ms;
    first = false;
    schedule.segments.push_back(seg);
  }
  return schedule;
}

}  // namespace natstream
