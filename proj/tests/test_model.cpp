#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "natstream/checkpoint.hpp"
#include "natstream/chunk_plan.hpp"
#include "natstream/model.hpp"
#include "natstream/ops.hpp"
#include "natstream/rng.hpp"
#include "test_util.hpp"

using namespace natstream;
using test_util::check_fd;
using test_util::message_contains;
using test_util::random_tensor;
using test_util::weighted_sum;

namespace {

// Small architecture that keeps every sequence length manageable.
ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.frame_ms = 10;
  cfg.chunk_ms = 80;  // 8 frames, 2 encoder, 1 linguistic position per chunk
  cfg.lookahead_ms = 0;
  cfg.lookahead_chunks = 0;
  cfg.r_down = 2;
  cfg.r_up = 2;
  cfg.feat_dim = 4;
  cfg.model_dim = 16;
  cfg.heads = 2;
  cfg.enc_layers = 2;
  cfg.ling_layers = 1;
  cfg.ac_layers = 1;
  cfg.ffn_mult = 2;
  cfg.text_vocab = 7;
  cfg.unit_vocab = 9;
  cfg.max_positions = 64;
  cfg.dropout = 0.1;
  return cfg;
}

void expect_bitwise(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape == b.shape);
  for (int64_t i = 0; i < a.numel(); ++i) {
    REQUIRE((*a.data)[i] == (*b.data)[i]);
  }
}

bool rows_equal(const Tensor& a, const Tensor& b, int row_begin, int row_end) {
  for (int r = row_begin; r < row_end; ++r) {
    for (int c = 0; c < a.cols(); ++c) {
      if (a.at(r, c) != b.at(r, c)) return false;
    }
  }
  return true;
}

// Half-open row range of chunk c in a position->chunk map.
std::pair<int, int> chunk_rows(const std::vector<int>& pos_chunk, int c) {
  int begin = -1, end = 0;
  for (size_t i = 0; i < pos_chunk.size(); ++i) {
    if (pos_chunk[i] == c) {
      if (begin < 0) begin = static_cast<int>(i);
      end = static_cast<int>(i) + 1;
    }
  }
  REQUIRE(begin >= 0);
  return {begin, end};
}

bool all_ones(const Tensor& mask) {
  for (int64_t i = 0; i < mask.numel(); ++i) {
    if ((*mask.data)[i] != 1.0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("chunk plan: 320 ms chunks give 32 frames, 8 encoder, 4 linguistic, 24 acoustic") {
  ModelConfig cfg;  // defaults: 320 ms chunks, 10 ms frames, r_down=2, r_up=6
  ChunkPlan plan = build_chunk_plan(128, cfg);
  REQUIRE(plan.num_chunks == 4);
  CHECK(plan.src_ms == 1280);
  CHECK(ChunkPlan::counts(plan.frame_chunk, 4) == std::vector<int>{32, 32, 32, 32});
  CHECK(ChunkPlan::counts(plan.enc_chunk, 4) == std::vector<int>{8, 8, 8, 8});
  CHECK(ChunkPlan::counts(plan.ling_chunk, 4) == std::vector<int>{4, 4, 4, 4});
  CHECK(ChunkPlan::counts(plan.ac_chunk, 4) == std::vector<int>{24, 24, 24, 24});
  CHECK(plan.enc_len() == 32);
  CHECK(plan.ling_len() == 16);
  CHECK(plan.ac_len() == 96);
  CHECK(plan.boundary_ms == std::vector<int>{320, 640, 960, 1280});
}

TEST_CASE("chunk plan: 100 frames split into chunks of 32/32/32/4") {
  ModelConfig cfg;
  ChunkPlan plan = build_chunk_plan(100, cfg);
  REQUIRE(plan.num_chunks == 4);
  CHECK(ChunkPlan::counts(plan.frame_chunk, 4) == std::vector<int>{32, 32, 32, 4});
  // Two stride-2 convolutions: ceil(ceil(100/2)/2) = 25 encoder positions.
  CHECK(plan.enc_len() == 25);
  CHECK(ChunkPlan::counts(plan.enc_chunk, 4) == std::vector<int>{8, 8, 8, 1});
  // The partial final chunk still emits ceil(1/2) = 1 linguistic position.
  CHECK(ChunkPlan::counts(plan.ling_chunk, 4) == std::vector<int>{4, 4, 4, 1});
  CHECK(ChunkPlan::counts(plan.ac_chunk, 4) == std::vector<int>{24, 24, 24, 6});
  CHECK(plan.boundary_ms == std::vector<int>{320, 640, 960, 1000});
}

TEST_CASE("chunk plan: boundaries wait for extra chunks and lookahead") {
  ModelConfig cfg;
  cfg.lookahead_chunks = 2;
  ChunkPlan plan = build_chunk_plan(400, cfg);  // 4000 ms
  // Chunk 0 with k=2 decodes once three chunks of audio have arrived.
  CHECK(plan.boundary_ms[0] == 960);
  CHECK(plan.boundary_ms[1] == 1280);
  CHECK(plan.boundary_ms.back() == 4000);

  cfg.lookahead_ms = 160;
  ChunkPlan with_la = build_chunk_plan(400, cfg);
  CHECK(with_la.boundary_ms[0] == 1120);

  Policy offline;
  offline.offline = true;
  ChunkPlan off = build_chunk_plan(400, ModelConfig{}, offline);
  REQUIRE(off.num_chunks == 1);
  CHECK(off.boundary_ms == std::vector<int>{4000});
}

TEST_CASE("chunk plan: validation errors name the constraint") {
  ModelConfig cfg;
  Policy p = Policy::from_config(cfg);
  p.chunk_ms = 300;  // not a multiple of 10*4*2
  CHECK(message_contains([&] { build_chunk_plan(100, cfg, p); }, "chunk_ms"));
  p = Policy::from_config(cfg);
  p.lookahead_ms = 30;
  CHECK(message_contains([&] { build_chunk_plan(100, cfg, p); }, "lookahead_ms"));
  p = Policy::from_config(cfg);
  p.lookahead_chunks = -1;
  CHECK(message_contains([&] { build_chunk_plan(100, cfg, p); }, "lookahead_chunks"));
  CHECK(message_contains([&] { build_chunk_plan(0, cfg); }, "num_frames"));
  ModelConfig bad = tiny_config();
  bad.heads = 3;  // does not divide model_dim=16
  CHECK(message_contains([&] { bad.validate(); }, "heads"));
}

TEST_CASE("masks: encoder lookahead is first-layer only") {
  ModelConfig cfg;
  cfg.lookahead_ms = 320;  // 8 encoder positions of lookahead
  ChunkPlan plan = build_chunk_plan(128, cfg);
  REQUIRE(plan.enc_lookahead == 8);
  Tensor first = encoder_self_mask(plan, true);
  Tensor rest = encoder_self_mask(plan, false);
  // Row 0 lives in chunk 0 (positions 0..7): bidirectional inside the chunk,
  // plus 8 lookahead positions in the first layer only.
  for (int j = 0; j < 32; ++j) {
    CHECK(first.at(0, j) == (j <= 15 ? 1.0 : 0.0));
    CHECK(rest.at(0, j) == (j <= 7 ? 1.0 : 0.0));
  }
  // Row 20 (chunk 2) sees chunks 0-2 everywhere, chunk 3 only via lookahead.
  for (int j = 0; j < 32; ++j) {
    CHECK(rest.at(20, j) == (j <= 23 ? 1.0 : 0.0));
    CHECK(first.at(20, j) == (j <= 31 ? 1.0 : 0.0));
  }
}

TEST_CASE("masks: decoder self and cross attention follow chunk order") {
  ModelConfig cfg;
  cfg.lookahead_chunks = 1;
  ChunkPlan plan = build_chunk_plan(128, cfg);
  Tensor self = chunk_self_mask(plan.ling_chunk);
  // Linguistic chunk 1 occupies rows 4..7; it sees chunks 0 and 1.
  for (int j = 0; j < plan.ling_len(); ++j) {
    CHECK(self.at(5, j) == (j <= 7 ? 1.0 : 0.0));
  }
  CHECK(self.at(5, 7) == 1.0);  // bidirectional inside the chunk
  Tensor cross = chunk_cross_mask(plan.ling_chunk, plan.enc_chunk, cfg.lookahead_chunks);
  // With k=1, linguistic chunk 1 reads encoder chunks 0-2 (positions 0..23).
  for (int j = 0; j < plan.enc_len(); ++j) {
    CHECK(cross.at(5, j) == (j <= 23 ? 1.0 : 0.0));
  }
}

TEST_CASE("masks: offline plan allows every position") {
  Policy offline;
  offline.offline = true;
  ChunkPlan plan = build_chunk_plan(100, ModelConfig{}, offline);
  CHECK(all_ones(encoder_self_mask(plan, true)));
  CHECK(all_ones(encoder_self_mask(plan, false)));
  CHECK(all_ones(chunk_self_mask(plan.ling_chunk)));
  CHECK(all_ones(chunk_self_mask(plan.ac_chunk)));
  CHECK(all_ones(chunk_cross_mask(plan.ac_chunk, plan.enc_chunk, 0)));
}

TEST_CASE("model: forward produces normalized lattices deterministically") {
  ModelConfig cfg = tiny_config();
  Rng rng(11);
  ModelParams params = ModelParams::init(cfg, rng);
  ChunkPlan plan = build_chunk_plan(40, cfg);  // 5 chunks
  Rng data_rng(5);
  Tensor frames = random_tensor({40, cfg.feat_dim}, data_rng, false);

  ForwardResult out = forward(params, frames, plan);
  REQUIRE(out.text_lattice.shape == Shape{plan.ling_len(), cfg.text_vocab + 1});
  REQUIRE(out.unit_lattice.shape == Shape{plan.ac_len(), cfg.unit_vocab + 1});
  REQUIRE(out.encoder_states.shape == Shape{plan.enc_len(), cfg.model_dim});
  for (int r = 0; r < out.text_lattice.rows(); ++r) {
    double total = 0.0;
    for (int c = 0; c < out.text_lattice.cols(); ++c) total += std::exp(out.text_lattice.at(r, c));
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  }

  ForwardResult again = forward(params, frames, plan);
  expect_bitwise(out.text_lattice, again.text_lattice);
  expect_bitwise(out.unit_lattice, again.unit_lattice);

  // Dropout draws from the provided generator: same seed, same result.
  ForwardOptions train_opts;
  train_opts.training = true;
  Rng d1(99), d2(99), d3(100);
  train_opts.rng = &d1;
  ForwardResult t1 = forward(params, frames, plan, train_opts);
  train_opts.rng = &d2;
  ForwardResult t2 = forward(params, frames, plan, train_opts);
  train_opts.rng = &d3;
  ForwardResult t3 = forward(params, frames, plan, train_opts);
  expect_bitwise(t1.unit_lattice, t2.unit_lattice);
  bool differs = false;
  for (int64_t i = 0; i < t1.unit_lattice.numel() && !differs; ++i) {
    differs = (*t1.unit_lattice.data)[i] != (*t3.unit_lattice.data)[i];
  }
  CHECK(differs);
}

TEST_CASE("model: chunk outputs depend only on audio before their boundary") {
  ModelConfig cfg = tiny_config();
  cfg.lookahead_chunks = 1;
  cfg.lookahead_ms = 80;
  Rng rng(21);
  ModelParams params = ModelParams::init(cfg, rng);
  const int num_frames = 40;  // 400 ms, 5 chunks
  ChunkPlan plan = build_chunk_plan(num_frames, cfg);
  // B_i = (i + 1 + 1)*80 + 80.
  REQUIRE(plan.boundary_ms == std::vector<int>{240, 320, 400, 400, 400});

  Rng data_rng(31);
  Tensor base = random_tensor({num_frames, cfg.feat_dim}, data_rng, false);
  ForwardResult ref = forward(params, base, plan);

  for (int i = 0; i < plan.num_chunks; ++i) {
    const int safe_frames = plan.boundary_ms[i] / cfg.frame_ms;
    if (safe_frames >= num_frames) continue;
    Tensor probe = Tensor::from(base.shape, *base.data);
    Rng noise(1000 + i);
    for (int t = safe_frames; t < num_frames; ++t) {
      for (int c = 0; c < cfg.feat_dim; ++c) {
        (*probe.data)[static_cast<size_t>(t) * cfg.feat_dim + c] = noise.uniform() * 3.0 - 1.5;
      }
    }
    ForwardResult out = forward(params, probe, plan);
    for (int j = 0; j <= i; ++j) {
      auto [tb, te] = chunk_rows(plan.ling_chunk, j);
      CHECK(rows_equal(ref.text_lattice, out.text_lattice, tb, te));
      auto [ub, ue] = chunk_rows(plan.ac_chunk, j);
      CHECK(rows_equal(ref.unit_lattice, out.unit_lattice, ub, ue));
    }
  }

  // Sanity: audio inside the boundary does change the chunk's output.
  Tensor inside = Tensor::from(base.shape, *base.data);
  (*inside.data)[20 * cfg.feat_dim] += 1.0;  // frame 20 = 200 ms < B_0 = 240 ms
  ForwardResult changed = forward(params, inside, plan);
  auto [tb, te] = chunk_rows(plan.ling_chunk, 0);
  CHECK_FALSE(rows_equal(ref.text_lattice, changed.text_lattice, tb, te));
}

TEST_CASE("model: offline policy equals one chunk covering the utterance") {
  ModelConfig cfg = tiny_config();
  Rng rng(3);
  ModelParams params = ModelParams::init(cfg, rng);
  Rng data_rng(4);
  Tensor frames = random_tensor({16, cfg.feat_dim}, data_rng, false);

  Policy offline;
  offline.offline = true;
  ChunkPlan off_plan = build_chunk_plan(16, cfg, offline);
  Policy wide = Policy::from_config(cfg);
  wide.chunk_ms = 160;  // covers the whole 160 ms utterance
  ChunkPlan wide_plan = build_chunk_plan(16, cfg, wide);
  REQUIRE(off_plan.num_chunks == 1);
  REQUIRE(wide_plan.num_chunks == 1);

  ForwardResult a = forward(params, frames, off_plan);
  ForwardResult b = forward(params, frames, wide_plan);
  expect_bitwise(a.text_lattice, b.text_lattice);
  expect_bitwise(a.unit_lattice, b.unit_lattice);
}

TEST_CASE("model: glancing substitutes decoder inputs") {
  ModelConfig cfg = tiny_config();
  Rng rng(17);
  ModelParams params = ModelParams::init(cfg, rng);
  ChunkPlan plan = build_chunk_plan(24, cfg);  // 3 chunks, 3 linguistic positions
  Rng data_rng(8);
  Tensor enc_states = random_tensor({plan.enc_len(), cfg.model_dim}, data_rng, false);
  Tensor pooled_a = random_tensor({plan.ling_len(), cfg.model_dim}, data_rng, false);
  Tensor pooled_b = random_tensor({plan.ling_len(), cfg.model_dim}, data_rng, false);

  GlancePlan all;
  for (int i = 0; i < plan.ling_len(); ++i) {
    all.positions.push_back(i);
    all.symbols.push_back(i % cfg.text_vocab);
  }
  ForwardOptions opts;
  opts.text_glance = &all;
  // With every input row substituted, the pooled states cannot matter.
  LinguisticResult a = linguistic_forward(params, pooled_a, enc_states, plan, opts);
  LinguisticResult b = linguistic_forward(params, pooled_b, enc_states, plan, opts);
  expect_bitwise(a.lattice, b.lattice);

  GlancePlan one;
  one.positions = {1};
  one.symbols = {3};
  opts.text_glance = &one;
  LinguisticResult partial = linguistic_forward(params, pooled_a, enc_states, plan, opts);
  LinguisticResult plain = linguistic_forward(params, pooled_a, enc_states, plan, {});
  bool differs = false;
  for (int64_t i = 0; i < partial.lattice.numel() && !differs; ++i) {
    differs = (*partial.lattice.data)[i] != (*plain.lattice.data)[i];
  }
  CHECK(differs);

  GlancePlan bad;
  bad.positions = {0, 1};
  bad.symbols = {2};
  opts.text_glance = &bad;
  CHECK(message_contains([&] { linguistic_forward(params, pooled_a, enc_states, plan, opts); },
                         "glance"));
}

TEST_CASE("model: gradients match finite differences through the full stack") {
  ModelConfig cfg = tiny_config();
  cfg.model_dim = 8;
  cfg.heads = 2;
  cfg.enc_layers = 1;
  cfg.feat_dim = 3;
  cfg.text_vocab = 4;
  cfg.unit_vocab = 5;
  cfg.lookahead_chunks = 1;
  cfg.max_positions = 16;
  Rng rng(13);
  ModelParams params = ModelParams::init(cfg, rng);
  ChunkPlan plan = build_chunk_plan(16, cfg);  // 2 chunks, 2 linguistic positions
  Rng data_rng(14);
  Tensor frames = random_tensor({16, cfg.feat_dim}, data_rng, false);

  // Glances exercise the embedding tables and the replace path.
  GlancePlan text_glance;
  text_glance.positions = {1};
  text_glance.symbols = {2};
  GlancePlan unit_glance;
  unit_glance.positions = {0, 3};
  unit_glance.symbols = {4, 1};
  ForwardOptions opts;
  opts.text_glance = &text_glance;
  opts.unit_glance = &unit_glance;

  std::vector<Tensor> probes = {
      params.conv1_w,
      params.encoder[0].self_attn.wq,
      params.linguistic[0].cross_attn.wv,
      params.linguistic[0].ffn_b1,
      params.acoustic[0].ln1_g,
      params.ling_pos,  // rows past the sequence keep zero gradient
      params.text_proj_b,
      params.text_embed,
      params.unit_embed,
  };
  check_fd(
      "full model",
      [&](const std::vector<Tensor>&) {
        ForwardResult out = forward(params, frames, plan, opts);
        Rng w1(100), w2(101);
        return ops::add(weighted_sum(out.text_lattice, w1), weighted_sum(out.unit_lattice, w2));
      },
      probes, 2e-3, 1e-5);
}

TEST_CASE("checkpoint: save and load round trip bitwise") {
  ModelConfig cfg = tiny_config();
  Rng rng(7);
  ModelParams params = ModelParams::init(cfg, rng);
  const std::string path = "test_model_ckpt.bin";
  save_model(path, params);
  CHECK(checkpoint_kind(path) == "chunked_ctc");

  ModelParams loaded = load_model(path);
  CHECK(loaded.cfg.chunk_ms == cfg.chunk_ms);
  CHECK(loaded.cfg.text_vocab == cfg.text_vocab);
  CHECK(loaded.cfg.dropout == cfg.dropout);
  auto a = params.named_params();
  auto b = loaded.named_params();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    expect_bitwise(*a[i].tensor, *b[i].tensor);
  }

  // Loaded parameters behave identically.
  ChunkPlan plan = build_chunk_plan(24, cfg);
  Rng data_rng(9);
  Tensor frames = random_tensor({24, cfg.feat_dim}, data_rng, false);
  expect_bitwise(forward(params, frames, plan).unit_lattice,
                 forward(loaded, frames, plan).unit_lattice);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint: corrupt files are rejected with names") {
  const std::string path = "test_model_bad.bin";
  {
    std::ofstream out(path, std::ios::binary);
    out << "this is not a bundle";
  }
  CHECK(message_contains([&] { load_bundle(path); }, "magic"));

  TensorBundle wrong_kind;
  wrong_kind.header.set("kind", "mystery");
  save_bundle(path, wrong_kind);
  CHECK(message_contains([&] { load_model(path); }, "mystery"));

  ModelConfig cfg = tiny_config();
  Rng rng(7);
  ModelParams params = ModelParams::init(cfg, rng);
  TensorBundle bundle;
  bundle.header.set("kind", "chunked_ctc");
  model_config_to_map(cfg, bundle.header);
  auto named = params.named_params();
  for (size_t i = 0; i + 1 < named.size(); ++i) {  // drop the last tensor
    bundle.tensors.emplace_back(named[i].name, *named[i].tensor);
  }
  save_bundle(path, bundle);
  CHECK(message_contains([&] { load_model(path); }, named.back().name));
  std::remove(path.c_str());
}

TEST_CASE("sinusoidal positions: anchors and offset consistency") {
  Tensor pe = sinusoidal_positions(8, 6);
  for (int c = 0; c < 6; ++c) {
    CHECK(pe.at(0, c) == (c % 2 == 0 ? 0.0 : 1.0));
  }
  CHECK(pe.at(1, 0) == doctest::Approx(std::sin(1.0)));
  CHECK(pe.at(1, 1) == doctest::Approx(std::cos(1.0)));
  CHECK(pe.at(3, 2) == doctest::Approx(std::sin(3.0 / std::pow(10000.0, 2.0 / 6.0))));

  Tensor shifted = sinusoidal_positions(3, 6, 5);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 6; ++c) {
      CHECK(shifted.at(r, c) == doctest::Approx(pe.at(r + 5, c)).epsilon(1e-12));
    }
  }
}
