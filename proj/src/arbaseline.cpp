#include "natstream/arbaseline.hpp"

#include <chrono>
#include <cmath>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "natstream/checkpoint.hpp"
#include "natstream/ops.hpp"
#include "natstream/train.hpp"

namespace natstream {

namespace {

const std::string kARKind = "ar_unit";

int ceil_div(int a, int b) { return (a + b - 1) / b; }

Tensor causal_mask(int len) {
  Tensor mask = Tensor::zeros({len, len});
  for (int q = 0; q < len; ++q) {
    for (int j = 0; j <= q; ++j) (*mask.data)[static_cast<size_t>(q) * len + j] = 1.0;
  }
  return mask;
}

int argmax_last_row(const Tensor& log_probs) {
  const int r = log_probs.rows() - 1;
  int best = 0;
  for (int c = 1; c < log_probs.cols(); ++c) {
    if (log_probs.at(r, c) > log_probs.at(r, best)) best = c;
  }
  return best;
}

void check_ar_policy(const ARPolicy& policy, const ModelConfig& cfg) {
  if (policy.wait_chunks < 1) {
    throw std::runtime_error("wait_chunks must be >= 1, got " +
                             std::to_string(policy.wait_chunks));
  }
  if (policy.stride_tokens < 1) {
    throw std::runtime_error("stride_tokens must be >= 1, got " +
                             std::to_string(policy.stride_tokens));
  }
  ModelConfig probe = cfg;
  probe.chunk_ms = policy.chunk_ms;
  probe.lookahead_ms = 0;
  probe.lookahead_chunks = 0;
  probe.validate();
}

double wall_ms_since(const std::chrono::steady_clock::time_point& begin) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - begin)
      .count();
}

}  // namespace

void ARTrainConfig::validate() const {
  if (steps < 1) throw std::runtime_error("steps must be >= 1");
  if (batch_frames < 1) throw std::runtime_error("batch_frames must be >= 1");
  if (peak_lr <= 0.0) throw std::runtime_error("peak_lr must be positive");
  if (warmup_steps < 1) throw std::runtime_error("warmup_steps must be >= 1");
}

ARModel ARModel::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ARModel m;
  m.cfg = cfg;
  const int d = cfg.model_dim;
  m.conv1_w = init_normal_param({3 * cfg.feat_dim, d}, rng);
  m.conv1_b = init_const_param({d}, 0.0);
  m.conv2_w = init_normal_param({3 * d, d}, rng);
  m.conv2_b = init_const_param({d}, 0.0);
  for (int i = 0; i < cfg.enc_layers; ++i) m.encoder.push_back(init_layer_params(cfg, false, rng));
  m.enc_ln_g = init_const_param({d}, 1.0);
  m.enc_ln_b = init_const_param({d}, 0.0);
  m.unit_embed = init_normal_param({cfg.unit_vocab + 1, d}, rng);
  m.dec_pos = init_normal_param({cfg.max_positions, d}, rng);
  for (int i = 0; i < m.dec_layers(); ++i) m.decoder.push_back(init_layer_params(cfg, true, rng));
  m.dec_ln_g = init_const_param({d}, 1.0);
  m.dec_ln_b = init_const_param({d}, 0.0);
  m.proj_w = init_normal_param({d, cfg.unit_vocab + 1}, rng);
  m.proj_b = init_const_param({cfg.unit_vocab + 1}, 0.0);
  return m;
}

std::vector<NamedTensor> ARModel::named_params() {
  std::vector<NamedTensor> out;
  out.push_back({"conv1.w", &conv1_w});
  out.push_back({"conv1.b", &conv1_b});
  out.push_back({"conv2.w", &conv2_w});
  out.push_back({"conv2.b", &conv2_b});
  for (size_t i = 0; i < encoder.size(); ++i) {
    append_layer_entries(out, "encoder." + std::to_string(i), encoder[i]);
  }
  out.push_back({"enc_ln.g", &enc_ln_g});
  out.push_back({"enc_ln.b", &enc_ln_b});
  out.push_back({"unit_embed", &unit_embed});
  out.push_back({"dec_pos", &dec_pos});
  for (size_t i = 0; i < decoder.size(); ++i) {
    append_layer_entries(out, "decoder." + std::to_string(i), decoder[i]);
  }
  out.push_back({"dec_ln.g", &dec_ln_g});
  out.push_back({"dec_ln.b", &dec_ln_b});
  out.push_back({"proj.w", &proj_w});
  out.push_back({"proj.b", &proj_b});
  return out;
}

Tensor ar_encode(const ARModel& model, const Tensor& frames, const ChunkPlan& plan, bool training,
                 Rng* rng) {
  const ModelConfig& cfg = model.cfg;
  if (frames.ndim() != 2 || frames.rows() != plan.num_frames || frames.cols() != cfg.feat_dim) {
    throw std::runtime_error("ar_encode: frames shape " + shape_str(frames.shape) +
                             " does not match plan frames " + std::to_string(plan.num_frames) +
                             " x feat_dim " + std::to_string(cfg.feat_dim));
  }
  const double rate = (training && rng != nullptr) ? cfg.dropout : 0.0;
  Tensor h = ops::relu(ops::causal_conv1d(frames, model.conv1_w, model.conv1_b, 2));
  h = ops::relu(ops::causal_conv1d(h, model.conv2_w, model.conv2_b, 2));
  h = ops::add(h, sinusoidal_positions(plan.enc_len(), cfg.model_dim));
  h = ops::dropout(h, rate, rng);
  Tensor first_mask = encoder_self_mask(plan, /*first_layer=*/true);
  Tensor rest_mask = encoder_self_mask(plan, /*first_layer=*/false);
  for (size_t i = 0; i < model.encoder.size(); ++i) {
    h = apply_layer(model.encoder[i], cfg.heads, h, i == 0 ? first_mask : rest_mask, Tensor{},
                    Tensor{}, rate, rng);
  }
  return ops::layer_norm(h, model.enc_ln_g, model.enc_ln_b);
}

Tensor ar_log_probs(const ARModel& model, const Tensor& enc_states, const std::vector<int>& units,
                    bool training, Rng* rng) {
  const ModelConfig& cfg = model.cfg;
  const double rate = (training && rng != nullptr) ? cfg.dropout : 0.0;
  std::vector<int> ids;
  ids.reserve(units.size() + 1);
  ids.push_back(model.eos());  // start symbol doubles as end-of-sequence
  for (int u : units) ids.push_back(u);
  const int len = static_cast<int>(ids.size());
  if (len > model.dec_pos.rows()) {
    throw std::runtime_error("decoder position table has " + std::to_string(model.dec_pos.rows()) +
                             " rows but the sequence needs " + std::to_string(len));
  }
  Tensor x = ops::add(ops::embedding(model.unit_embed, ids), ops::slice_rows(model.dec_pos, 0, len));
  x = ops::dropout(x, rate, rng);
  Tensor mask = causal_mask(len);
  for (const LayerParams& layer : model.decoder) {
    x = apply_layer(layer, cfg.heads, x, mask, enc_states, Tensor{}, rate, rng);
  }
  x = ops::layer_norm(x, model.dec_ln_g, model.dec_ln_b);
  return ops::log_softmax(ops::add(ops::matmul(x, model.proj_w), model.proj_b));
}

Tensor ar_utterance_loss(const ARModel& model, const Utterance& utt, bool training, Rng* rng) {
  ChunkPlan plan = build_chunk_plan(utt.frames.rows(), model.cfg);
  Tensor enc = ar_encode(model, utt.frames, plan, training, rng);
  Tensor log_probs = ar_log_probs(model, enc, utt.units, training, rng);
  std::vector<int> targets = utt.units;
  targets.push_back(model.eos());
  const int cols = log_probs.cols();
  std::vector<int64_t> flat;
  flat.reserve(targets.size());
  for (size_t t = 0; t < targets.size(); ++t) {
    if (targets[t] < 0 || targets[t] >= cols) {
      throw std::runtime_error("unit id " + std::to_string(targets[t]) + " outside vocabulary of " +
                               std::to_string(model.cfg.unit_vocab));
    }
    flat.push_back(static_cast<int64_t>(t) * cols + targets[t]);
  }
  Tensor picked = ops::gather_entries(log_probs, flat);
  return ops::scale(ops::sum_all(picked), -1.0 / static_cast<double>(targets.size()));
}

double ar_train_step(ARModel& model, AdamState& adam, const std::vector<const Utterance*>& batch,
                     const ARTrainConfig& cfg, int step) {
  if (batch.empty()) throw std::runtime_error("ar train step " + std::to_string(step) + ": empty batch");
  std::vector<NamedTensor> params = model.named_params();
  for (const NamedTensor& entry : params) {
    if (entry.tensor->grad) {
      std::fill(entry.tensor->grad->begin(), entry.tensor->grad->end(), 0.0);
    }
  }
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double mean_loss = 0.0;
  for (size_t i = 0; i < batch.size(); ++i) {
    const Utterance& utt = *batch[i];
    Rng rng = Rng(cfg.seed).fork(static_cast<uint64_t>(step)).fork(i);
    Tensor loss = ar_utterance_loss(model, utt, /*training=*/true, &rng);
    if (!std::isfinite(loss.value())) {
      throw std::runtime_error("ar train step " + std::to_string(step) +
                               ": non-finite loss on '" + utt.id + "'");
    }
    mean_loss += loss.value() * inv_n;
    backward_accumulate(ops::scale(loss, inv_n));
  }
  const double lr = step <= cfg.warmup_steps
                        ? cfg.peak_lr * step / cfg.warmup_steps
                        : cfg.peak_lr * std::sqrt(static_cast<double>(cfg.warmup_steps) / step);
  adam_step(params, adam, lr);
  return mean_loss;
}

ARTrainResult run_ar_training(ARModel& model, const std::vector<Utterance>& dataset,
                              const ARTrainConfig& cfg, std::ostream* log) {
  cfg.validate();
  BatchPlanner planner(dataset, cfg.batch_frames, cfg.seed);
  AdamState adam;
  ARTrainResult result;
  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<const Utterance*> batch;
    for (int idx : planner.next()) batch.push_back(&dataset[static_cast<size_t>(idx)]);
    const double loss = ar_train_step(model, adam, batch, cfg, step);
    result.steps_run = step;
    result.final_loss = loss;
    if (log != nullptr && (step % cfg.log_every == 0 || step == cfg.steps)) {
      (*log) << "ar step=" << step << " loss=" << loss << " utts=" << batch.size() << "\n";
      log->flush();
    }
  }
  return result;
}

void save_ar_model(const std::string& path, ARModel& model) {
  TensorBundle bundle;
  bundle.header.set("kind", kARKind);
  model_config_to_map(model.cfg, bundle.header);
  for (const NamedTensor& entry : model.named_params()) {
    bundle.tensors.emplace_back(entry.name, *entry.tensor);
  }
  save_bundle(path, bundle);
}

ARModel load_ar_model(const std::string& path) {
  TensorBundle bundle = load_bundle(path);
  const std::string kind = bundle.header.get_string("kind");
  if (kind != kARKind) {
    throw std::runtime_error("checkpoint " + path + " has kind '" + kind + "', expected '" +
                             kARKind + "'");
  }
  ModelConfig cfg = model_config_from_map(bundle.header);
  Rng rng(0);  // shapes only; every value is overwritten below
  ARModel model = ARModel::init(cfg, rng);
  fill_params_from_bundle(bundle, path, model.named_params());
  return model;
}

ARGenerateResult ar_generate(const ARModel& model, const Tensor& frames, int max_units) {
  NoGradGuard no_grad;
  ChunkPlan plan = build_chunk_plan(frames.rows(), model.cfg);
  // The decoder cannot condition on a prefix longer than its position table
  // (end-of-sequence start symbol plus max_positions - 1 tokens).
  int cap = max_units >= 0 ? max_units : (3 * plan.ac_len()) / 2;
  cap = std::min(cap, model.cfg.max_positions - 1);
  Tensor enc = ar_encode(model, frames, plan);
  ARGenerateResult result;
  while (true) {
    result.passes += 1;
    Tensor log_probs = ar_log_probs(model, enc, result.units);
    const int next = argmax_last_row(log_probs);
    if (next == model.eos()) break;
    result.units.push_back(next);
    if (static_cast<int>(result.units.size()) >= cap) {
      result.truncated = true;
      break;
    }
  }
  return result;
}

ARSimulateResult ar_simulate(const Utterance& utt, const ARModel& model, const ARPolicy& policy,
                             const ClockSpec& clock) {
  NoGradGuard no_grad;
  const ModelConfig& cfg = model.cfg;
  check_ar_policy(policy, cfg);
  const int frames_per_chunk = policy.chunk_ms / cfg.frame_ms;
  const int total_frames = utt.frames.rows();
  const int total_chunks = ceil_div(total_frames, frames_per_chunk);
  const int src_ms = total_frames * cfg.frame_ms;
  const int k = policy.wait_chunks;
  const int n = policy.stride_tokens;
  const int cap = std::min((3 * build_chunk_plan(total_frames, cfg).ac_len()) / 2,
                           cfg.max_positions - 1);

  ARSimulateResult result;
  InstanceLog& log = result.log;
  log.id = utt.id;
  log.src_ms = src_ms;
  log.policy = Policy{policy.chunk_ms, 0, policy.wait_chunks, false};
  log.ref_text = utt.text;
  log.ref_units = utt.units;

  std::vector<int> emitted;
  double clock_compute_ms = 0.0;
  bool done = false;
  for (int burst = 1; !done; ++burst) {
    const int chunks_read = std::min(total_chunks, k + burst - 1);
    const bool exhausted = chunks_read == total_chunks;
    const int src_stamp = std::min(src_ms, policy.chunk_ms * (k + burst - 1));

    const auto begin = std::chrono::steady_clock::now();
    const int prefix_frames = std::min(total_frames, chunks_read * frames_per_chunk);
    Tensor prefix = ops::slice_rows(utt.frames, 0, prefix_frames);
    ChunkPlan plan = build_chunk_plan(prefix_frames, cfg, Policy{policy.chunk_ms, 0, 0, false});
    Tensor enc = ar_encode(model, prefix, plan);

    std::vector<int> burst_tokens;
    const int quota = exhausted ? cap - static_cast<int>(emitted.size()) : n;
    for (int t = 0; t < quota; ++t) {
      Tensor log_probs = ar_log_probs(model, enc, emitted);
      const int next = argmax_last_row(log_probs);
      if (next == model.eos()) {
        done = true;
        break;
      }
      emitted.push_back(next);
      burst_tokens.push_back(next);
      if (static_cast<int>(emitted.size()) >= cap) {
        result.truncated = true;
        done = true;
        break;
      }
    }
    if (exhausted) done = true;
    const double measured = wall_ms_since(begin);

    double logged = 0.0;  // nca forces compute time to zero, as in StreamSession
    double clock_add = 0.0;
    switch (clock.mode) {
      case ClockSpec::Mode::nca: break;
      case ClockSpec::Mode::ca:
        clock_add = measured;
        logged = measured;
        break;
      case ClockSpec::Mode::injected:
        clock_add = clock.injected_ms;
        logged = clock.injected_ms;
        break;
    }
    clock_compute_ms += clock_add;
    log.chunk_compute_ms.push_back(logged);
    const double wall = src_stamp + clock_compute_ms;
    for (int tok : burst_tokens) {
      log.events.push_back({Stream::unit, tok, burst - 1, src_stamp, wall});
    }
  }
  return result;
}

BenchReport run_bench(const std::vector<Utterance>& corpus, const ModelParams& nar,
                      const ARModel& ar) {
  BenchReport report;
  double ratio_sum = 0.0;
  for (const Utterance& utt : corpus) {
    BenchUtterance row;
    row.id = utt.id;

    auto begin = std::chrono::steady_clock::now();
    OfflineOutput nar_out = offline_translate(utt, nar);
    row.nar_ms = wall_ms_since(begin);
    row.nar_units = static_cast<int>(nar_out.units.size());
    row.nar_passes = 1;  // the whole unit lattice decodes in one forward

    begin = std::chrono::steady_clock::now();
    ARGenerateResult ar_out = ar_generate(ar, utt.frames);
    row.ar_ms = wall_ms_since(begin);
    row.ar_units = static_cast<int>(ar_out.units.size());
    row.ar_passes = ar_out.passes;
    row.ar_truncated = ar_out.truncated;

    ratio_sum += row.ar_ms / row.nar_ms;
    report.total_nar_ms += row.nar_ms;
    report.total_ar_ms += row.ar_ms;
    report.utterances.push_back(row);
  }
  if (!report.utterances.empty()) {
    report.mean_ratio = ratio_sum / static_cast<double>(report.utterances.size());
  }
  return report;
}

std::string bench_report_text(const BenchReport& report) {
  std::ostringstream out;
  out << "offline decoding benchmark\n";
  out << "utterances: " << report.utterances.size() << "\n";
  out << "total nar ms: " << report.total_nar_ms << "\n";
  out << "total ar ms: " << report.total_ar_ms << "\n";
  out << "mean wall-time ratio (ar/nar): " << report.mean_ratio << "\n";
  int truncated = 0;
  for (const BenchUtterance& row : report.utterances) truncated += row.ar_truncated ? 1 : 0;
  out << "ar truncated utterances: " << truncated << "\n";
  return out.str();
}

std::string bench_report_csv(const BenchReport& report) {
  std::ostringstream out;
  out << "id,nar_units,ar_units,nar_ms,ar_ms,nar_passes,ar_passes,ar_truncated\n";
  for (const BenchUtterance& row : report.utterances) {
    out << row.id << ',' << row.nar_units << ',' << row.ar_units << ',' << row.nar_ms << ','
        << row.ar_ms << ',' << row.nar_passes << ',' << row.ar_passes << ','
        << (row.ar_truncated ? 1 : 0) << "\n";
  }
  return out.str();
}

}  // namespace natstream
