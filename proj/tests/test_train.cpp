#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "natstream/checkpoint.hpp"
#include "natstream/ctc.hpp"
#include "natstream/model.hpp"
#include "natstream/ops.hpp"
#include "natstream/rng.hpp"
#include "natstream/train.hpp"
#include "test_util.hpp"

using namespace natstream;
using test_util::message_contains;
using test_util::random_tensor;

namespace {

ModelConfig toy_model_config() {
  ModelConfig cfg;
  cfg.frame_ms = 10;
  cfg.chunk_ms = 80;
  cfg.r_down = 2;
  cfg.r_up = 2;
  cfg.feat_dim = 8;
  cfg.model_dim = 16;
  cfg.heads = 2;
  cfg.enc_layers = 2;
  cfg.ling_layers = 1;
  cfg.ac_layers = 1;
  cfg.ffn_mult = 2;
  cfg.text_vocab = 5;
  cfg.unit_vocab = 10;
  cfg.max_positions = 64;
  cfg.dropout = 0.1;
  return cfg;
}

// Learnable mapping: each text token owns a fixed frame pattern (16 frames)
// and the two units (2t, 2t+1).
std::vector<Utterance> toy_dataset(int n, const ModelConfig& cfg, uint64_t seed) {
  Rng code_rng(seed);
  std::vector<std::vector<double>> codebook;
  for (int t = 0; t < cfg.text_vocab; ++t) {
    std::vector<double> pattern(static_cast<size_t>(cfg.feat_dim));
    for (double& v : pattern) v = code_rng.normal();
    codebook.push_back(pattern);
  }
  std::vector<Utterance> data;
  Rng rng = code_rng.fork(1);
  for (int i = 0; i < n; ++i) {
    Utterance utt;
    utt.id = "toy-" + std::to_string(i);
    const int len = 4 + rng.uniform_int(3);
    for (int j = 0; j < len; ++j) {
      const int tok = rng.uniform_int(cfg.text_vocab);
      utt.text.push_back(tok);
      utt.units.push_back(2 * tok);
      utt.units.push_back(2 * tok + 1);
    }
    const int frames_per_token = 16;
    utt.frames = Tensor::zeros({len * frames_per_token, cfg.feat_dim});
    for (int j = 0; j < len; ++j) {
      const auto& pattern = codebook[static_cast<size_t>(utt.text[static_cast<size_t>(j)])];
      for (int f = 0; f < frames_per_token; ++f) {
        for (int c = 0; c < cfg.feat_dim; ++c) {
          (*utt.frames.data)[static_cast<size_t>(j * frames_per_token + f) * cfg.feat_dim + c] =
              pattern[static_cast<size_t>(c)] + 0.05 * rng.normal();
        }
      }
    }
    data.push_back(std::move(utt));
  }
  return data;
}

bool params_bitwise_equal(ModelParams& a, ModelParams& b) {
  auto na = a.named_params();
  auto nb = b.named_params();
  if (na.size() != nb.size()) return false;
  for (size_t i = 0; i < na.size(); ++i) {
    if (*na[i].tensor->data != *nb[i].tensor->data) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("schedule: linear warmup then inverse-sqrt decay") {
  TrainConfig cfg;
  cfg.peak_lr = 1e-3;
  cfg.warmup_steps = 100;
  cfg.steps = 1000;
  cfg.anneal_steps = 400;
  CHECK(schedule(100, cfg).lr == doctest::Approx(1e-3));
  CHECK(schedule(1, cfg).lr == doctest::Approx(1e-5));
  CHECK(schedule(50, cfg).lr == doctest::Approx(5e-4));
  CHECK(schedule(200, cfg).lr == doctest::Approx(1e-3 * std::sqrt(0.5)));
  CHECK(schedule(400, cfg).lr == doctest::Approx(5e-4));

  // Ratios: text 0.5 -> 0.3, unit 0.3 -> 0.1 by default.
  Schedule mid = schedule(200, cfg);
  CHECK(mid.text_ratio == doctest::Approx(0.4));
  CHECK(mid.unit_ratio == doctest::Approx(0.2));
  Schedule done = schedule(400, cfg);
  CHECK(done.text_ratio == doctest::Approx(0.3));
  CHECK(done.unit_ratio == doctest::Approx(0.1));
  CHECK(schedule(4000, cfg).text_ratio == doctest::Approx(0.3));
  CHECK(message_contains([&] { schedule(0, cfg); }, "step"));

  TrainConfig bad = cfg;
  bad.warmup_steps = 2000;  // > steps
  CHECK(message_contains([&] { bad.validate(); }, "warmup"));
  bad = cfg;
  bad.text_ratio_start = 1.5;
  CHECK(message_contains([&] { bad.validate(); }, "ratio"));
}

TEST_CASE("alignable: duplicate-aware length requirement") {
  CHECK(alignable(2, {0, 1}));
  CHECK_FALSE(alignable(1, {0, 1}));
  CHECK(alignable(3, {2, 2}));
  CHECK_FALSE(alignable(2, {2, 2}));
  CHECK_FALSE(alignable(5, {}));
}

TEST_CASE("glance: sample counts, symbols from the best alignment") {
  Rng rng(42);
  // Peaked lattice so the best alignment is stable: target [0,1] over 4 rows.
  Tensor lat = ops::log_softmax(Tensor::from(
      {4, 3}, {4.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 4.0}, false));
  std::vector<int> target = {0, 1};
  std::vector<int> a_star = ctc::best_alignment(lat, target, 2);

  GlancePlan half = glance(lat, target, 0.5, rng);
  CHECK(half.positions.size() == 2);  // ceil(0.5 * 4)
  std::set<int> distinct(half.positions.begin(), half.positions.end());
  CHECK(distinct.size() == 2);
  for (size_t i = 0; i < half.positions.size(); ++i) {
    CHECK(half.symbols[i] == a_star[static_cast<size_t>(half.positions[i])]);
  }

  Rng rng2(43);
  CHECK(glance(lat, target, 0.0, rng2).positions.empty());
  GlancePlan full = glance(lat, target, 1.0, rng2);
  CHECK(full.positions.size() == 4);

  // ceil(0.3 * 4) = 2.
  Rng rng3(44);
  CHECK(glance(lat, target, 0.3, rng3).positions.size() == 2);

  // Unalignable: 4 rows cannot hold 5 tokens.
  Rng rng4(45);
  CHECK(glance(lat, {0, 1, 0, 1, 0}, 0.5, rng4).positions.empty());

  // Same seed, same plan.
  Rng a(7), b(7);
  GlancePlan pa = glance(lat, target, 0.5, a);
  GlancePlan pb = glance(lat, target, 0.5, b);
  CHECK(pa.positions == pb.positions);
  CHECK(pa.symbols == pb.symbols);
}

TEST_CASE("smoothed lattice: rows mix toward uniform and stay normalized") {
  Rng rng(5);
  Tensor logits = random_tensor({3, 4}, rng, false, -2.0, 2.0);
  Tensor lat = ops::log_softmax(logits);
  Tensor smooth = smoothed_lattice(lat, 0.1);
  for (int r = 0; r < 3; ++r) {
    double total = 0.0;
    for (int c = 0; c < 4; ++c) {
      const double expected = 0.9 * std::exp(lat.at(r, c)) + 0.1 / 4.0;
      CHECK(std::exp(smooth.at(r, c)) == doctest::Approx(expected).epsilon(1e-12));
      total += std::exp(smooth.at(r, c));
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
  Tensor same = smoothed_lattice(lat, 0.0);
  CHECK(same.data == lat.data);
}

TEST_CASE("batch planner: budget, coverage, determinism, skip") {
  ModelConfig mc = toy_model_config();
  std::vector<Utterance> data = toy_dataset(10, mc, 3);
  BatchPlanner planner(data, 200, 99);
  std::set<int> seen;
  int total = 0;
  std::vector<std::vector<int>> batches;
  while (static_cast<int>(seen.size()) < 10) {
    std::vector<int> batch = planner.next();
    REQUIRE(!batch.empty());
    int frames = 0;
    for (int idx : batch) {
      seen.insert(idx);
      frames += data[static_cast<size_t>(idx)].frames.rows();
    }
    if (batch.size() > 1) CHECK(frames <= 200);
    batches.push_back(batch);
    ++total;
    REQUIRE(total < 100);
  }
  CHECK(seen.size() == 10);

  BatchPlanner replay(data, 200, 99);
  for (const auto& batch : batches) CHECK(replay.next() == batch);

  BatchPlanner ff(data, 200, 99);
  ff.skip(2);
  CHECK(ff.next() == batches[2]);
}

TEST_CASE("train step: identical seeds give bitwise identical updates") {
  ModelConfig mc = toy_model_config();
  std::vector<Utterance> data = toy_dataset(6, mc, 11);
  TrainConfig tc;
  tc.steps = 10;
  tc.warmup_steps = 5;
  tc.batch_frames = 200;
  tc.seed = 21;

  Rng init_a(77), init_b(77);
  ModelParams a = ModelParams::init(mc, init_a);
  ModelParams b = ModelParams::init(mc, init_b);
  REQUIRE(params_bitwise_equal(a, b));

  std::vector<const Utterance*> batch = {&data[0], &data[1], &data[2]};
  AdamState adam_a, adam_b;
  StepStats sa = train_step(a, adam_a, batch, tc, 1);
  StepStats sb = train_step(b, adam_b, batch, tc, 1);
  CHECK(sa.loss == sb.loss);
  CHECK(params_bitwise_equal(a, b));

  // A different seed gives a different trajectory (dropout and glancing).
  TrainConfig other = tc;
  other.seed = 22;
  StepStats sc = train_step(a, adam_a, batch, other, 2);
  StepStats sd = train_step(b, adam_b, batch, tc, 2);
  CHECK(sc.loss != sd.loss);
}

TEST_CASE("train step: non-finite loss names the utterance") {
  ModelConfig mc = toy_model_config();
  std::vector<Utterance> data = toy_dataset(2, mc, 13);
  Rng init(5);
  ModelParams params = ModelParams::init(mc, init);
  (*params.conv1_b.data)[0] = std::numeric_limits<double>::infinity();
  TrainConfig tc;
  // Ratio 0 keeps the glancing pass off the poisoned lattice so the error
  // surfaces at the loss check.
  tc.text_ratio_start = tc.text_ratio_end = 0.0;
  tc.unit_ratio_start = tc.unit_ratio_end = 0.0;
  AdamState adam;
  std::vector<const Utterance*> batch = {&data[0]};
  CHECK(message_contains([&] { train_step(params, adam, batch, tc, 1); }, "toy-0"));
}

TEST_CASE("two point-mass streams reach the -2 lower bound") {
  // Text [0,1] and units [2,3] each perfectly aligned: each stream's match
  // loss is exactly -1, so the combined objective attains -2.
  Tensor text = Tensor::full({4, 3}, -1e9);
  for (auto [r, c] : std::vector<std::pair<int, int>>{{0, 0}, {1, 2}, {2, 1}, {3, 2}}) {
    (*text.data)[static_cast<size_t>(r) * 3 + c] = 0.0;
  }
  Tensor units = Tensor::full({4, 5}, -1e9);
  for (auto [r, c] : std::vector<std::pair<int, int>>{{0, 2}, {1, 3}, {2, 4}, {3, 4}}) {
    (*units.data)[static_cast<size_t>(r) * 5 + c] = 0.0;
  }
  Tensor total = ops::add(ctc::gram_match_loss(text, {0, 1}, 2),
                          ctc::gram_match_loss(units, {2, 3}, 4));
  CHECK(total.value() == doctest::Approx(-2.0).epsilon(1e-9));
}

TEST_CASE("training: ctc loss halves on a toy subset, then match stage stays in range") {
  ModelConfig mc = toy_model_config();
  std::vector<Utterance> data = toy_dataset(32, mc, 17);
  Rng init(123);
  ModelParams params = ModelParams::init(mc, init);

  TrainConfig tc;
  tc.stage = TrainStage::ctc_pretrain;
  tc.steps = 200;
  tc.warmup_steps = 20;
  tc.peak_lr = 2e-3;
  tc.batch_frames = 320;
  tc.anneal_steps = 200;
  tc.seed = 31;

  BatchPlanner planner(data, tc.batch_frames, tc.seed);
  AdamState adam;
  double first_text_loss = 0.0, last_text_loss = 0.0;
  for (int step = 1; step <= tc.steps; ++step) {
    std::vector<const Utterance*> batch;
    for (int idx : planner.next()) batch.push_back(&data[static_cast<size_t>(idx)]);
    StepStats stats = train_step(params, adam, batch, tc, step);
    CHECK(stats.glance_skips == 0);
    if (step == 1) first_text_loss = stats.text_loss;
    last_text_loss = stats.text_loss;
  }
  INFO("text loss went from " << first_text_loss << " to " << last_text_loss);
  CHECK(last_text_loss < 0.5 * first_text_loss);

  // Match-loss finetuning stays within [-2, 0] and runs deterministically.
  TrainConfig ft = tc;
  ft.stage = TrainStage::gram_match;
  ft.steps = 10;
  ft.warmup_steps = 5;
  ft.peak_lr = 5e-4;
  for (int step = 1; step <= ft.steps; ++step) {
    std::vector<const Utterance*> batch;
    for (int idx : planner.next()) batch.push_back(&data[static_cast<size_t>(idx)]);
    StepStats stats = train_step(params, adam, batch, ft, step);
    CHECK(stats.loss <= 0.0);
    CHECK(stats.loss >= -2.0);
  }
}

TEST_CASE("training: resume from saved state matches an uninterrupted run") {
  ModelConfig mc = toy_model_config();
  std::vector<Utterance> data = toy_dataset(8, mc, 29);
  TrainConfig tc;
  tc.steps = 5;
  tc.warmup_steps = 2;
  tc.batch_frames = 250;
  tc.seed = 41;
  tc.log_every = 1;

  // Uninterrupted: 5 steps.
  Rng init_a(9);
  ModelParams full = ModelParams::init(mc, init_a);
  std::ostringstream log_a;
  run_training(full, data, tc, "", &log_a);

  // Interrupted: 3 steps with a checkpoint, then resume for the last 2.
  Rng init_b(9);
  ModelParams part = ModelParams::init(mc, init_b);
  TrainConfig first = tc;
  first.steps = 3;
  first.warmup_steps = 2;
  run_training(part, data, first, "test_train_ckpt.bin", nullptr);

  ModelParams resumed = load_model("test_train_ckpt.bin");
  TrainState state = load_train_state("test_train_ckpt.bin.state", resumed.named_params());
  CHECK(state.next_step == 4);
  run_training(resumed, data, tc, "", nullptr, &state);
  CHECK(params_bitwise_equal(full, resumed));
  CHECK(log_a.str().find("step=5") != std::string::npos);
  std::remove("test_train_ckpt.bin");
  std::remove("test_train_ckpt.bin.state");
}
