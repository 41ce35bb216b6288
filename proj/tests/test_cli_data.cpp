#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "natstream/cli.hpp"
#include "natstream/corpus.hpp"
#include "natstream/stream.hpp"
#include "test_util.hpp"

using namespace natstream;
using test_util::message_contains;

namespace {

CorpusSpec tiny_spec() {
  CorpusSpec spec;
  spec.seed = 42;
  spec.train_size = 6;
  spec.dev_size = 1;
  spec.test_size = 2;
  spec.max_tokens = 6;
  return spec;
}

// Fresh scratch directory under the test working directory.
std::string scratch_dir(const std::string& name) {
  const std::string dir = "cli_scratch/" + name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  REQUIRE(out);
  out << content;
}

bool same_utterance(const Utterance& a, const Utterance& b) {
  return a.id == b.id && a.text == b.text && a.units == b.units &&
         a.frames.shape == b.frames.shape &&
         std::memcmp(a.frames.ptr(), b.frames.ptr(),
                     static_cast<size_t>(a.frames.numel()) * sizeof(double)) == 0;
}

int run_cli(const std::vector<std::string>& args, std::string* out_text = nullptr,
            std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (out_text != nullptr) *out_text = out.str();
  if (err_text != nullptr) *err_text = err.str();
  return code;
}

}  // namespace

TEST_CASE("corpus generation is deterministic and respects the spec bounds") {
  const CorpusSpec spec = tiny_spec();
  GeneratedCorpus a = generate_corpus(spec);
  GeneratedCorpus b = generate_corpus(spec);
  REQUIRE(a.train.size() == 6);
  REQUIRE(a.dev.size() == 1);
  REQUIRE(a.test.size() == 2);

  auto all_of_corpus = [](const GeneratedCorpus& c) {
    std::vector<const SyntheticUtterance*> all;
    for (const auto& u : c.train) all.push_back(&u);
    for (const auto& u : c.dev) all.push_back(&u);
    for (const auto& u : c.test) all.push_back(&u);
    return all;
  };
  const auto as = all_of_corpus(a);
  const auto bs = all_of_corpus(b);
  std::set<std::string> ids;
  for (size_t i = 0; i < as.size(); ++i) {
    CHECK(as[i]->source == bs[i]->source);
    CHECK(same_utterance(as[i]->utt, bs[i]->utt));
    ids.insert(as[i]->id);

    const int n = static_cast<int>(as[i]->source.size());
    CHECK(n >= spec.min_tokens);
    CHECK(n <= spec.max_tokens);
    CHECK(static_cast<int>(as[i]->utt.units.size()) == n * spec.units_per_token);
    CHECK(as[i]->utt.frames.rows() >= n * spec.min_frames_per_token);
    CHECK(as[i]->utt.frames.rows() <= n * spec.max_frames_per_token);
    CHECK(as[i]->utt.frames.cols() == spec.feat_dim);
    for (int t : as[i]->utt.text) {
      CHECK(t >= 0);
      CHECK(t < spec.text_vocab());
    }
    for (int u : as[i]->utt.units) {
      CHECK(u >= 0);
      CHECK(u < spec.unit_vocab);
    }
  }
  CHECK(ids.size() == as.size());  // splits disjoint by id
}

TEST_CASE("corpus maps are bijective, fixed-point free, and distinct") {
  const CorpusSpec spec = tiny_spec();
  const CorpusMaps maps = build_corpus_maps(spec);

  std::set<int> image(maps.token_to_text.begin(), maps.token_to_text.end());
  CHECK(static_cast<int>(image.size()) == spec.src_vocab);
  for (int v = 0; v < spec.src_vocab; ++v) CHECK(maps.token_to_text[v] != v);

  std::set<std::vector<int>> patterns(maps.text_to_units.begin(), maps.text_to_units.end());
  CHECK(patterns.size() == maps.text_to_units.size());
  for (const auto& p : maps.text_to_units) CHECK(static_cast<int>(p.size()) == spec.units_per_token);

  REQUIRE(static_cast<int>(maps.codebook.size()) == spec.src_vocab);
  for (const auto& row : maps.codebook) CHECK(static_cast<int>(row.size()) == spec.feat_dim);
}

TEST_CASE("swap probability zero maps tokens pointwise") {
  CorpusSpec spec = tiny_spec();
  spec.swap_prob = 0.0;
  const CorpusMaps maps = build_corpus_maps(spec);
  const GeneratedCorpus corpus = generate_corpus(spec);
  for (const SyntheticUtterance& su : corpus.train) {
    std::vector<int> mapped;
    for (int s : su.source) mapped.push_back(maps.token_to_text[s]);
    CHECK(su.utt.text == mapped);
  }
}

TEST_CASE("swaps are deterministic adjacent transpositions of the mapped text") {
  const CorpusSpec spec = tiny_spec();
  const CorpusMaps maps = build_corpus_maps(spec);

  int swapped_pairs = 0, total_pairs = 0;
  Rng rng(7);
  for (int iter = 0; iter < 300; ++iter) {
    const int n = 2 + rng.uniform_int(10);
    std::vector<int> source(n);
    for (int& s : source) s = rng.uniform_int(spec.src_vocab);

    const std::vector<int> text = swapped_text(source, spec, maps);
    CHECK(text == swapped_text(source, spec, maps));  // pure function of the source

    std::vector<int> mapped(n);
    for (int j = 0; j < n; ++j) mapped[j] = maps.token_to_text[source[j]];
    // Decompose the difference into non-overlapping adjacent transpositions.
    int j = 0;
    while (j < n) {
      if (text[j] == mapped[j]) {
        ++j;
        continue;
      }
      REQUIRE(j + 1 < n);
      CHECK(text[j] == mapped[j + 1]);
      CHECK(text[j + 1] == mapped[j]);
      ++swapped_pairs;
      j += 2;
    }
    total_pairs += n - 1;
  }
  // The hash drives roughly swap_prob of eligible pairs; identical-token
  // swaps are invisible, so the observed rate sits a little below 0.2.
  const double rate = static_cast<double>(swapped_pairs) / total_pairs;
  CHECK(rate > 0.08);
  CHECK(rate < 0.30);
}

TEST_CASE("written corpus files round-trip and regenerate bit-identically") {
  const std::string dir = scratch_dir("roundtrip");
  const CorpusSpec spec = tiny_spec();
  const GeneratedCorpus corpus = generate_corpus(spec);
  write_corpus(corpus, dir + "/a");
  write_corpus(corpus, dir + "/b");

  for (const char* name : {"corpus.config", "train.frames.bin", "train.index.jsonl",
                           "dev.frames.bin", "dev.index.jsonl", "test.frames.bin",
                           "test.index.jsonl"}) {
    CHECK(read_file(dir + "/a/" + name) == read_file(dir + "/b/" + name));
  }

  const std::vector<Utterance> train = load_split(dir + "/a", "train");
  REQUIRE(train.size() == corpus.train.size());
  for (size_t i = 0; i < train.size(); ++i) CHECK(same_utterance(train[i], corpus.train[i].utt));
  const std::vector<Utterance> test = load_split(dir + "/a", "test");
  REQUIRE(test.size() == 2);
  CHECK(test[0].id == "test-0000");
  CHECK(test[1].id == "test-0001");

  const CorpusSpec reloaded = corpus_spec_from_map(load_config_file(dir + "/a/corpus.config"));
  CHECK(reloaded.seed == spec.seed);
  CHECK(reloaded.max_tokens == spec.max_tokens);
  CHECK(reloaded.swap_prob == spec.swap_prob);
}

TEST_CASE("corpus loader rejects malformed files") {
  const std::string dir = scratch_dir("malformed");
  write_corpus(generate_corpus(tiny_spec()), dir);

  SUBCASE("bad magic") {
    std::string bin = read_file(dir + "/test.frames.bin");
    bin[0] = 'X';
    write_file(dir + "/test.frames.bin", bin);
    CHECK(message_contains([&] { load_split(dir, "test"); }, "bad magic"));
  }
  SUBCASE("truncated frame data") {
    std::string bin = read_file(dir + "/test.frames.bin");
    bin.resize(bin.size() - 16);
    write_file(dir + "/test.frames.bin", bin);
    CHECK(message_contains([&] { load_split(dir, "test"); }, "truncated"));
  }
  SUBCASE("header split mismatch") {
    write_file(dir + "/dev.index.jsonl", read_file(dir + "/test.index.jsonl"));
    CHECK(message_contains([&] { load_split(dir, "dev"); }, "split 'test'"));
  }
  SUBCASE("malformed index line carries its number") {
    std::string idx = read_file(dir + "/test.index.jsonl");
    idx += "{broken\n";
    write_file(dir + "/test.index.jsonl", idx);
    CHECK(message_contains([&] { load_split(dir, "test"); }, "line 4"));
  }
  SUBCASE("non-cumulative offset") {
    std::string idx = read_file(dir + "/test.index.jsonl");
    const size_t pos = idx.find("\"offset\":0", idx.find('\n'));
    REQUIRE(pos != std::string::npos);
    idx.replace(pos, 10, "\"offset\":1");
    write_file(dir + "/test.index.jsonl", idx);
    CHECK(message_contains([&] { load_split(dir, "test"); }, "not cumulative"));
  }
  SUBCASE("missing split") {
    CHECK(message_contains([&] { load_split(dir, "nope"); }, "cannot open"));
  }
}

TEST_CASE("corpus spec validation and config round-trip") {
  CHECK(message_contains(
      [] {
        CorpusSpec s;
        s.src_vocab = 1;
        s.validate();
      },
      "src_vocab"));
  CHECK(message_contains(
      [] {
        CorpusSpec s;
        s.swap_prob = 1.5;
        s.validate();
      },
      "swap_prob"));
  CHECK(message_contains(
      [] {
        CorpusSpec s;
        s.max_tokens = 2;
        s.validate();
      },
      "max_tokens"));

  CorpusSpec spec = tiny_spec();
  spec.noise_sigma = 0.25;
  spec.unit_vocab = 31;
  ConfigMap map;
  corpus_spec_to_map(spec, map);
  const CorpusSpec back = corpus_spec_from_map(map);
  CHECK(back.seed == spec.seed);
  CHECK(back.noise_sigma == spec.noise_sigma);
  CHECK(back.unit_vocab == spec.unit_vocab);
  CHECK(back.train_size == spec.train_size);
}

TEST_CASE("experiment config schema") {
  SUBCASE("defaults survive a map round-trip") {
    ConfigMap map;
    cli::experiment_to_map(cli::ExperimentConfig{}, map);
    const cli::ExperimentConfig back = cli::experiment_from_map(map);
    CHECK(back.model.model_dim == 64);
    CHECK(back.train.steps == 1000);
    CHECK(back.train.policies.empty());
  }
  SUBCASE("file text overrides a subset of keys") {
    const ConfigMap map = parse_config_text(
        "model.model_dim = 32\n"
        "# comment line\n"
        "train.stage = gram_match\n"
        "train.steps = 77\n"
        "train.warmup_steps = 10\n"
        "train.policies = 320:0:2,offline,640:40:1\n");
    const cli::ExperimentConfig cfg = cli::experiment_from_map(map);
    CHECK(cfg.model.model_dim == 32);
    CHECK(cfg.model.heads == 4);  // untouched default
    CHECK(cfg.train.stage == TrainStage::gram_match);
    CHECK(cfg.train.steps == 77);
    REQUIRE(cfg.train.policies.size() == 3);
    CHECK(cfg.train.policies[0].chunk_ms == 320);
    CHECK(cfg.train.policies[0].lookahead_chunks == 2);
    CHECK(cfg.train.policies[1].offline);
    CHECK(cfg.train.policies[2].lookahead_ms == 40);
  }
  SUBCASE("parsed config re-serializes to the same key set and values") {
    const std::string text =
        "model.model_dim=32\n"
        "train.steps=77\n";
    const ConfigMap map = parse_config_text(text);
    const ConfigMap again = parse_config_text(config_to_text(map));
    CHECK(again.entries() == map.entries());
  }
  SUBCASE("schema violations name the key") {
    CHECK(message_contains(
        [] { cli::experiment_from_map(parse_config_text("model.bogus = 3\n")); },
        "unknown config key 'model.bogus'"));
    CHECK(message_contains(
        [] { cli::experiment_from_map(parse_config_text("train.stage = nope\n")); },
        "train.stage"));
    CHECK(message_contains(
        [] { cli::experiment_from_map(parse_config_text("train.steps = many\n")); },
        "train.steps"));
    CHECK(message_contains(
        [] { cli::experiment_from_map(parse_config_text("train.policies = 320:x:2\n")); },
        "train.policies"));
  }
}

TEST_CASE("policy specs parse and print") {
  const Policy p = cli::policy_from_spec("640:40:2");
  CHECK(p.chunk_ms == 640);
  CHECK(p.lookahead_ms == 40);
  CHECK(p.lookahead_chunks == 2);
  CHECK(!p.offline);
  CHECK(cli::policy_to_spec(p) == "640:40:2");
  CHECK(cli::policy_from_spec("offline").offline);
  CHECK(cli::policy_to_spec(cli::policy_from_spec("offline")) == "offline");
  CHECK(message_contains([] { cli::policy_from_spec("640:40"); }, "bad policy spec"));
  CHECK(message_contains([] { cli::policy_from_spec("a:b:c"); }, "bad policy spec"));
}

TEST_CASE("instance log files read back with line diagnostics") {
  const std::string dir = scratch_dir("logs");
  InstanceLog log;
  log.id = "u1";
  log.src_ms = 640;
  log.ref_text = {1};
  log.ref_units = {2, 3};
  EmissionEvent e;
  e.stream = Stream::unit;
  e.token = 2;
  e.src_ms = 640;
  e.wall_ms = 640.0;
  log.events.push_back(e);
  log.chunk_compute_ms = {1.5};

  write_file(dir + "/ok.jsonl", instance_log_to_json(log) + "\n\n" + instance_log_to_json(log) + "\n");
  const std::vector<InstanceLog> logs = cli::read_logs_file(dir + "/ok.jsonl");
  REQUIRE(logs.size() == 2);  // the blank line is skipped
  CHECK(logs[0].id == "u1");
  CHECK(logs[1].chunk_compute_ms == std::vector<double>{1.5});

  write_file(dir + "/bad.jsonl", instance_log_to_json(log) + "\n{oops\n");
  CHECK(message_contains([&] { cli::read_logs_file(dir + "/bad.jsonl"); }, "line 2"));
  CHECK(message_contains([&] { cli::read_logs_file(dir + "/absent.jsonl"); }, "cannot open"));
}

TEST_CASE("command line pipeline glues the stages together") {
  const std::string dir = scratch_dir("pipeline");
  std::string out, err;

  SUBCASE("gen-data is deterministic at the command surface") {
    REQUIRE(run_cli({"gen-data", "--out", dir + "/c1", "--seed", "5", "--train-size", "4",
                     "--dev-size", "1", "--test-size", "2", "--max-tokens", "5"},
                    &out) == 0);
    CHECK(out.find("train 4") != std::string::npos);
    REQUIRE(run_cli({"gen-data", "--out", dir + "/c2", "--seed", "5", "--train-size", "4",
                     "--dev-size", "1", "--test-size", "2", "--max-tokens", "5"}) == 0);
    for (const char* name : {"train.frames.bin", "train.index.jsonl", "test.frames.bin"})
      CHECK(read_file(dir + "/c1/" + name) == read_file(dir + "/c2/" + name));
  }

  SUBCASE("train, simulate, evaluate, and bench run end to end") {
    REQUIRE(run_cli({"gen-data", "--out", dir + "/corpus", "--seed", "5", "--train-size", "4",
                     "--dev-size", "1", "--test-size", "2", "--max-tokens", "5"}) == 0);
    write_file(dir + "/exp.config",
               "model.model_dim = 16\n"
               "model.heads = 2\n"
               "model.enc_layers = 1\n"
               "model.ling_layers = 1\n"
               "model.ac_layers = 1\n"
               "model.r_up = 4\n"
               "model.dropout = 0\n"
               "train.stage = ctc_pretrain\n"
               "train.steps = 2\n"
               "train.batch_frames = 400\n"
               "train.warmup_steps = 1\n"
               "train.log_every = 1\n");
    REQUIRE(run_cli({"train", "--config", dir + "/exp.config", "--data", dir + "/corpus", "--out",
                     dir + "/run"},
                    &out, &err) == 0);
    CHECK(out.find("trained ctc_pretrain for 2 steps") != std::string::npos);
    {
      std::istringstream lines(read_file(dir + "/run/train.log"));
      std::string line;
      int count = 0;
      while (std::getline(lines, line))
        if (!line.empty()) ++count;
      CHECK(count == 2);  // log_every=1 -> one line per step
    }

    REQUIRE(run_cli({"simulate", "--ckpt", dir + "/run/model.ckpt", "--data", dir + "/corpus",
                     "--split", "test", "--out", dir + "/logs.jsonl", "--chunk-ms", "320"},
                    &out) == 0);
    CHECK(out.find("simulated 2 utterances") != std::string::npos);
    CHECK(cli::read_logs_file(dir + "/logs.jsonl").size() == 2);

    REQUIRE(run_cli({"evaluate", "--logs", dir + "/logs.jsonl", "--out-csv", dir + "/curve.csv"},
                    &out) == 0);
    CHECK(out.find("instances: 2") != std::string::npos);
    const std::string csv = read_file(dir + "/curve.csv");
    CHECK(csv.rfind("policy,chunk_ms,k,metric,value\n", 0) == 0);
    CHECK(csv.find("chunk320_k0,320,0,unit_al,") != std::string::npos);

    // Offline simulation stamps every event at the full source duration.
    REQUIRE(run_cli({"simulate", "--ckpt", dir + "/run/model.ckpt", "--data", dir + "/corpus",
                     "--split", "test", "--out", dir + "/offline.jsonl", "--offline"}) == 0);
    for (const InstanceLog& log : cli::read_logs_file(dir + "/offline.jsonl")) {
      CHECK(log.policy.offline);
      for (const EmissionEvent& ev : log.events) CHECK(ev.src_ms == log.src_ms);
    }

    REQUIRE(run_cli({"train", "--config", dir + "/exp.config", "--data", dir + "/corpus", "--out",
                     dir + "/run_ar", "--arch", "ar"}) == 0);
    REQUIRE(run_cli({"simulate", "--ckpt", dir + "/run_ar/model.ckpt", "--data", dir + "/corpus",
                     "--split", "test", "--out", dir + "/ar_logs.jsonl", "--policy", "waitk:1:2"},
                    &out) == 0);
    CHECK(cli::read_logs_file(dir + "/ar_logs.jsonl").size() == 2);

    REQUIRE(run_cli({"bench", "--nar-ckpt", dir + "/run/model.ckpt", "--ar-ckpt",
                     dir + "/run_ar/model.ckpt", "--data", dir + "/corpus", "--split", "test",
                     "--out-csv", dir + "/bench.csv"},
                    &out) == 0);
    CHECK(out.find("mean wall-time ratio") != std::string::npos);
    CHECK(read_file(dir + "/bench.csv")
              .rfind("id,nar_units,ar_units,nar_ms,ar_ms,nar_passes,ar_passes,ar_truncated", 0) ==
          0);
  }

  SUBCASE("surface errors return nonzero") {
    CHECK(run_cli({"frobnicate"}, &out, &err) != 0);
    CHECK(run_cli({"gen-data"}, &out, &err) != 0);  // missing --out
    CHECK(run_cli({"evaluate", "--logs", dir + "/absent.jsonl"}, &out, &err) != 0);
    CHECK(err.find("error:") != std::string::npos);
  }
}
