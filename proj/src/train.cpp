#include "natstream/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "natstream/checkpoint.hpp"
#include "natstream/chunk_plan.hpp"
#include "natstream/ctc.hpp"
#include "natstream/ops.hpp"

namespace natstream {

namespace {

std::string policy_str(const Policy& p) {
  if (p.offline) return "offline";
  return std::to_string(p.chunk_ms) + "/" + std::to_string(p.lookahead_ms) + "/" +
         std::to_string(p.lookahead_chunks);
}

void zero_grads(const std::vector<NamedTensor>& params) {
  for (const NamedTensor& entry : params) {
    if (entry.tensor->grad == nullptr) {
      throw std::runtime_error("parameter '" + entry.name + "' has no grad buffer");
    }
    std::fill(entry.tensor->grad->begin(), entry.tensor->grad->end(), 0.0);
  }
}

// Per-utterance stream losses for one stage; the glance counters and rngs
// are owned by train_step.
struct UtteranceLoss {
  Tensor total;  // scalar
  double text = 0.0;
  double unit = 0.0;
};

UtteranceLoss stage_loss(const ForwardResult& out, const Utterance& utt, const TrainConfig& cfg) {
  UtteranceLoss loss;
  if (cfg.stage == TrainStage::ctc_pretrain) {
    // -log p(target) per target token, each lattice row smoothed toward the
    // uniform distribution first. Targets that cannot align at this lattice
    // length are skipped; the glance pass already counted them.
    std::vector<Tensor> parts;
    if (alignable(out.text_lattice.rows(), utt.text)) {
      Tensor lat = smoothed_lattice(out.text_lattice, cfg.label_eps);
      Tensor nll = ops::scale(ops::neg(ctc::ctc_log_likelihood(lat, utt.text, lat.cols() - 1)),
                              1.0 / static_cast<double>(utt.text.size()));
      loss.text = nll.value();
      parts.push_back(nll);
    }
    if (alignable(out.unit_lattice.rows(), utt.units)) {
      Tensor lat = smoothed_lattice(out.unit_lattice, cfg.label_eps);
      Tensor nll = ops::scale(ops::neg(ctc::ctc_log_likelihood(lat, utt.units, lat.cols() - 1)),
                              1.0 / static_cast<double>(utt.units.size()));
      loss.unit = nll.value();
      parts.push_back(nll);
    }
    if (parts.empty()) {
      loss.total = Tensor::zeros({1});
    } else if (parts.size() == 1) {
      loss.total = parts[0];
    } else {
      loss.total = ops::add(parts[0], parts[1]);
    }
  } else {
    Tensor text = ctc::gram_match_loss(out.text_lattice, utt.text, out.text_lattice.cols() - 1);
    Tensor unit = ctc::gram_match_loss(out.unit_lattice, utt.units, out.unit_lattice.cols() - 1);
    loss.text = text.value();
    loss.unit = unit.value();
    loss.total = ops::add(text, unit);
  }
  return loss;
}

}  // namespace

TrainStage stage_from_string(const std::string& name) {
  if (name == "ctc_pretrain") return TrainStage::ctc_pretrain;
  if (name == "gram_match") return TrainStage::gram_match;
  throw std::runtime_error("unknown training stage '" + name +
                           "', expected ctc_pretrain or gram_match");
}

std::string stage_to_string(TrainStage stage) {
  return stage == TrainStage::ctc_pretrain ? "ctc_pretrain" : "gram_match";
}

void TrainConfig::validate() const {
  if (steps < 1) throw std::runtime_error("train steps must be >= 1");
  if (batch_frames < 1) throw std::runtime_error("batch_frames must be >= 1");
  if (peak_lr <= 0.0) throw std::runtime_error("peak_lr must be positive");
  if (warmup_steps < 1 || warmup_steps > steps) {
    throw std::runtime_error("warmup_steps must be in [1, steps], got " +
                             std::to_string(warmup_steps) + " with steps=" +
                             std::to_string(steps));
  }
  for (double r : {text_ratio_start, text_ratio_end, unit_ratio_start, unit_ratio_end}) {
    if (r < 0.0 || r > 1.0) throw std::runtime_error("glancing ratios must be in [0,1]");
  }
  if (anneal_steps < 0) throw std::runtime_error("anneal_steps must be non-negative");
  if (label_eps < 0.0 || label_eps >= 1.0) throw std::runtime_error("label_eps must be in [0,1)");
  if (checkpoint_every < 0 || log_every < 1) {
    throw std::runtime_error("checkpoint_every must be >= 0 and log_every >= 1");
  }
}

Schedule schedule(int step, const TrainConfig& cfg) {
  if (step < 1) throw std::runtime_error("schedule: step must be >= 1");
  Schedule s;
  if (step <= cfg.warmup_steps) {
    s.lr = cfg.peak_lr * static_cast<double>(step) / cfg.warmup_steps;
  } else {
    s.lr = cfg.peak_lr * std::sqrt(static_cast<double>(cfg.warmup_steps) / step);
  }
  const double t = cfg.anneal_steps <= 0
                       ? 1.0
                       : std::min(1.0, static_cast<double>(step) / cfg.anneal_steps);
  s.text_ratio = cfg.text_ratio_start + (cfg.text_ratio_end - cfg.text_ratio_start) * t;
  s.unit_ratio = cfg.unit_ratio_start + (cfg.unit_ratio_end - cfg.unit_ratio_start) * t;
  return s;
}

bool alignable(int lattice_len, const std::vector<int>& target) {
  if (target.empty()) return false;
  int needed = static_cast<int>(target.size());
  for (size_t j = 1; j < target.size(); ++j) {
    if (target[j] == target[j - 1]) ++needed;
  }
  return lattice_len >= needed;
}

GlancePlan glance(const Tensor& lattice, const std::vector<int>& target, double ratio, Rng& rng) {
  GlancePlan plan;
  const int len = lattice.rows();
  if (!alignable(len, target)) return plan;
  const int count = static_cast<int>(std::ceil(ratio * len));
  if (count <= 0) return plan;
  std::vector<int> a_star = ctc::best_alignment(lattice, target, lattice.cols() - 1);
  // Partial Fisher-Yates: the first `count` entries are a uniform sample
  // without replacement.
  std::vector<int> positions(static_cast<size_t>(len));
  std::iota(positions.begin(), positions.end(), 0);
  const int take = std::min(count, len);
  for (int i = 0; i < take; ++i) {
    const int j = i + rng.uniform_int(len - i);
    std::swap(positions[static_cast<size_t>(i)], positions[static_cast<size_t>(j)]);
  }
  plan.positions.assign(positions.begin(), positions.begin() + take);
  for (int pos : plan.positions) plan.symbols.push_back(a_star[static_cast<size_t>(pos)]);
  return plan;
}

Tensor smoothed_lattice(const Tensor& lattice, double eps) {
  if (eps == 0.0) return lattice;
  const double uniform = std::log(eps / lattice.cols());
  Tensor floor = Tensor::full(lattice.shape, uniform);
  return ops::logaddexp(ops::add_const(lattice, std::log1p(-eps)), floor);
}

Policy policy_for_step(const TrainConfig& cfg, const ModelConfig& model_cfg, int step) {
  if (cfg.policies.empty()) return Policy::from_config(model_cfg);
  return cfg.policies[static_cast<size_t>((step - 1) % cfg.policies.size())];
}

StepStats train_step(ModelParams& model, AdamState& adam,
                     const std::vector<const Utterance*>& batch, const TrainConfig& cfg,
                     int step) {
  if (batch.empty()) throw std::runtime_error("train_step: empty batch");
  const Schedule sched = schedule(step, cfg);
  const Policy policy = policy_for_step(cfg, model.cfg, step);
  std::vector<NamedTensor> params = model.named_params();
  zero_grads(params);

  StepStats stats;
  stats.step = step;
  stats.lr = sched.lr;
  stats.text_ratio = sched.text_ratio;
  stats.unit_ratio = sched.unit_ratio;
  stats.utterances = static_cast<int>(batch.size());
  stats.policy = policy;

  const double inv_n = 1.0 / static_cast<double>(batch.size());
  Rng step_rng = Rng(cfg.seed).fork(static_cast<uint64_t>(step));
  for (size_t idx = 0; idx < batch.size(); ++idx) {
    const Utterance& utt = *batch[idx];
    ChunkPlan plan = build_chunk_plan(utt.frames.rows(), model.cfg, policy);
    Rng utt_rng = step_rng.fork(idx);

    // Pass 1 (no grad, no dropout): lattices for the glancing alignments.
    GlancePlan text_glance, unit_glance;
    {
      NoGradGuard no_grad;
      ForwardResult probe = forward(model, utt.frames, plan);
      if (alignable(probe.text_lattice.rows(), utt.text)) {
        text_glance = glance(probe.text_lattice, utt.text, sched.text_ratio, utt_rng);
      } else {
        ++stats.glance_skips;
      }
      if (alignable(probe.unit_lattice.rows(), utt.units)) {
        unit_glance = glance(probe.unit_lattice, utt.units, sched.unit_ratio, utt_rng);
      } else {
        ++stats.glance_skips;
      }
    }

    // Pass 2 (with grad): substituted inputs, dropout, stage loss.
    ForwardOptions opts;
    opts.training = true;
    opts.rng = &utt_rng;
    opts.text_glance = &text_glance;
    opts.unit_glance = &unit_glance;
    ForwardResult out = forward(model, utt.frames, plan, opts);
    UtteranceLoss loss = stage_loss(out, utt, cfg);
    const double value = loss.total.value();
    if (!std::isfinite(value)) {
      throw std::runtime_error("train step " + std::to_string(step) + ": non-finite loss on '" +
                               utt.id + "'");
    }
    stats.loss += value * inv_n;
    stats.text_loss += loss.text * inv_n;
    stats.unit_loss += loss.unit * inv_n;
    // Gradients of this utterance's graph add onto the parameter grads; the
    // graph itself is freed before the next utterance.
    backward_accumulate(ops::scale(loss.total, inv_n));
  }

  adam_step(params, adam, sched.lr);
  return stats;
}

BatchPlanner::BatchPlanner(const std::vector<Utterance>& dataset, int batch_frames, uint64_t seed)
    : batch_frames_(batch_frames), seed_(seed) {
  if (dataset.empty()) throw std::runtime_error("BatchPlanner: empty dataset");
  frame_counts_.reserve(dataset.size());
  for (const Utterance& utt : dataset) frame_counts_.push_back(utt.frames.rows());
  reshuffle();
}

void BatchPlanner::reshuffle() {
  ++epoch_;
  cursor_ = 0;
  order_.resize(frame_counts_.size());
  std::iota(order_.begin(), order_.end(), 0);
  Rng rng = Rng(seed_).fork(0xba7c8).fork(static_cast<uint64_t>(epoch_));
  for (size_t i = order_.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(rng.uniform_int(static_cast<int>(i)));
    std::swap(order_[i - 1], order_[j]);
  }
}

std::vector<int> BatchPlanner::next() {
  std::vector<int> batch;
  int used = 0;
  while (true) {
    if (cursor_ >= order_.size()) {
      if (!batch.empty()) break;
      reshuffle();
    }
    const int idx = order_[cursor_];
    const int frames = frame_counts_[static_cast<size_t>(idx)];
    if (!batch.empty() && used + frames > batch_frames_) break;
    batch.push_back(idx);
    used += frames;
    ++cursor_;
    if (used >= batch_frames_) break;
  }
  return batch;
}

void BatchPlanner::skip(int64_t batches) {
  for (int64_t i = 0; i < batches; ++i) next();
}

void save_train_state(const std::string& path, const AdamState& adam,
                      const std::vector<NamedTensor>& params, int64_t next_step) {
  if (adam.m.size() != params.size() && !adam.m.empty()) {
    throw std::runtime_error("save_train_state: optimizer state does not match parameters");
  }
  TensorBundle bundle;
  bundle.header.set("kind", "train_state");
  bundle.header.set_int("next_step", next_step);
  bundle.header.set_int("adam_step", adam.step);
  for (size_t i = 0; i < adam.m.size(); ++i) {
    Tensor m = Tensor::from(params[i].tensor->shape, adam.m[i]);
    Tensor v = Tensor::from(params[i].tensor->shape, adam.v[i]);
    bundle.tensors.emplace_back("adam.m." + params[i].name, std::move(m));
    bundle.tensors.emplace_back("adam.v." + params[i].name, std::move(v));
  }
  save_bundle(path, bundle);
}

TrainState load_train_state(const std::string& path, const std::vector<NamedTensor>& params) {
  TensorBundle bundle = load_bundle(path);
  if (bundle.header.get_string("kind") != "train_state") {
    throw std::runtime_error(path + " is not a training state bundle");
  }
  TrainState state;
  state.next_step = bundle.header.get_int("next_step");
  state.adam.step = bundle.header.get_int("adam_step");
  if (bundle.tensors.size() != params.size() * 2) {
    throw std::runtime_error("train state " + path + " has " +
                             std::to_string(bundle.tensors.size()) + " tensors, expected " +
                             std::to_string(params.size() * 2));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& [m_name, m] = bundle.tensors[2 * i];
    const auto& [v_name, v] = bundle.tensors[2 * i + 1];
    if (m_name != "adam.m." + params[i].name || v_name != "adam.v." + params[i].name) {
      throw std::runtime_error("train state " + path + " tensor order mismatch at '" + m_name +
                               "'");
    }
    if (m.shape != params[i].tensor->shape || v.shape != params[i].tensor->shape) {
      throw std::runtime_error("train state tensor '" + m_name + "' has shape " +
                               shape_str(m.shape) + ", expected " +
                               shape_str(params[i].tensor->shape));
    }
    state.adam.m.push_back(*m.data);
    state.adam.v.push_back(*v.data);
  }
  return state;
}

TrainResult run_training(ModelParams& model, const std::vector<Utterance>& dataset,
                         const TrainConfig& cfg, const std::string& checkpoint_path,
                         std::ostream* log, const TrainState* resume) {
  cfg.validate();
  BatchPlanner planner(dataset, cfg.batch_frames, cfg.seed);
  AdamState adam;
  int start_step = 1;
  if (resume != nullptr) {
    adam = resume->adam;
    start_step = static_cast<int>(resume->next_step);
    planner.skip(start_step - 1);
  }

  TrainResult result;
  std::vector<const Utterance*> batch;
  for (int step = start_step; step <= cfg.steps; ++step) {
    batch.clear();
    for (int idx : planner.next()) batch.push_back(&dataset[static_cast<size_t>(idx)]);
    StepStats stats = train_step(model, adam, batch, cfg, step);
    result.last = stats;
    result.total_glance_skips += stats.glance_skips;
    ++result.steps_done;
    if (log != nullptr && (step % cfg.log_every == 0 || step == cfg.steps || step == start_step)) {
      (*log) << "step=" << stats.step << " stage=" << stage_to_string(cfg.stage)
             << " policy=" << policy_str(stats.policy) << " loss=" << stats.loss
             << " text_loss=" << stats.text_loss << " unit_loss=" << stats.unit_loss
             << " lr=" << stats.lr << " text_ratio=" << stats.text_ratio
             << " unit_ratio=" << stats.unit_ratio << " utts=" << stats.utterances
             << " glance_skips=" << stats.glance_skips << "\n";
      log->flush();
    }
    const bool periodic = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
    if (!checkpoint_path.empty() && (periodic || step == cfg.steps)) {
      save_model(checkpoint_path, model);
      save_train_state(checkpoint_path + ".state", adam, model.named_params(), step + 1);
    }
  }
  return result;
}

}  // namespace natstream
