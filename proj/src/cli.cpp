#include "natstream/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "natstream/arbaseline.hpp"
#include "natstream/checkpoint.hpp"
#include "natstream/corpus.hpp"
#include "natstream/metrics.hpp"
#include "natstream/rng.hpp"

namespace natstream::cli {

namespace {

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::string part;
  std::istringstream in(text);
  while (std::getline(in, part, sep)) parts.push_back(part);
  return parts;
}

int parse_int_field(const std::string& text, const std::string& spec) {
  try {
    size_t used = 0;
    const int value = std::stoi(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return value;
  } catch (const std::exception&) {
    throw std::runtime_error("bad policy spec '" + spec +
                             "', expected offline or chunk_ms:extra_frames_ms:lookahead_chunks");
  }
}

std::vector<Policy> policies_from_spec_list(const std::string& text) {
  std::vector<Policy> policies;
  for (const std::string& part : split(text, ',')) {
    if (!part.empty()) policies.push_back(policy_from_spec(part));
  }
  return policies;
}

std::string policies_to_spec_list(const std::vector<Policy>& policies) {
  std::string out;
  for (size_t i = 0; i < policies.size(); ++i) {
    if (i > 0) out += ',';
    out += policy_to_spec(policies[i]);
  }
  return out;
}

// Checks that the config file's model block matches a checkpoint's, so a
// finetune or resume cannot silently change the architecture.
void check_model_agreement(const ModelConfig& from_config, const ModelConfig& from_ckpt,
                           const std::string& ckpt_path) {
  ConfigMap a, b;
  model_config_to_map(from_config, a, "model.");
  model_config_to_map(from_ckpt, b, "model.");
  for (const auto& [key, value] : a.entries()) {
    if (b.get_string(key) != value)
      throw std::runtime_error("config " + key + "=" + value + " disagrees with checkpoint '" +
                               ckpt_path + "' (" + key + "=" + b.get_string(key) + ")");
  }
}

void ensure_directory(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory '" + dir + "': " + ec.message());
}

std::ofstream open_for_write(const std::string& path, bool append = false,
                             bool binary = false) {
  std::ios::openmode mode = append ? std::ios::app : std::ios::trunc;
  if (binary) mode |= std::ios::binary;
  std::ofstream out(path, mode);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  return out;
}

struct GenDataOptions {
  std::string out_dir;
  CorpusSpec spec;
};

void run_gen_data(const GenDataOptions& o, std::ostream& out) {
  o.spec.validate();
  GeneratedCorpus corpus = generate_corpus(o.spec);
  write_corpus(corpus, o.out_dir);
  out << "wrote corpus to " << o.out_dir << " (train " << corpus.train.size() << ", dev "
      << corpus.dev.size() << ", test " << corpus.test.size() << ")\n";
}

struct TrainOptions {
  std::string config_path;
  std::string data_dir;
  std::string out_dir;
  std::string arch = "nar";
  std::string split = "train";
  std::string init_from;  // warm-start checkpoint (fresh optimizer)
  bool resume = false;
};

void run_train(const TrainOptions& o, std::ostream& out, std::ostream& err) {
  ExperimentConfig cfg = experiment_from_map(load_config_file(o.config_path));
  const std::vector<Utterance> dataset = load_split(o.data_dir, o.split);
  ensure_directory(o.out_dir);
  const std::string ckpt_path = o.out_dir + "/model.ckpt";
  const std::string log_path = o.out_dir + "/train.log";

  if (o.arch == "ar") {
    if (o.resume || !o.init_from.empty())
      throw std::runtime_error("--resume and --init-from are not supported for --arch ar");
    ARTrainConfig ar_cfg;
    ar_cfg.steps = cfg.train.steps;
    ar_cfg.batch_frames = cfg.train.batch_frames;
    ar_cfg.peak_lr = cfg.train.peak_lr;
    ar_cfg.warmup_steps = cfg.train.warmup_steps;
    ar_cfg.seed = cfg.train.seed;
    ar_cfg.log_every = cfg.train.log_every;
    Rng rng(cfg.train.seed);
    ARModel model = ARModel::init(cfg.model, rng);
    std::ofstream log = open_for_write(log_path);
    ARTrainResult result = run_ar_training(model, dataset, ar_cfg, &log);
    save_ar_model(ckpt_path, model);
    out << "trained ar baseline for " << result.steps_run << " steps, final loss "
        << result.final_loss << "; checkpoint " << ckpt_path << "\n";
    return;
  }
  if (o.arch != "nar") throw std::runtime_error("unknown --arch '" + o.arch + "', expected nar or ar");

  ModelParams model;
  TrainState state;
  const TrainState* resume_state = nullptr;
  if (o.resume) {
    if (!o.init_from.empty()) throw std::runtime_error("--resume and --init-from are exclusive");
    model = load_model(ckpt_path);
    check_model_agreement(cfg.model, model.cfg, ckpt_path);
    state = load_train_state(ckpt_path + ".state", model.named_params());
    resume_state = &state;
  } else if (!o.init_from.empty()) {
    model = load_model(o.init_from);
    check_model_agreement(cfg.model, model.cfg, o.init_from);
  } else {
    if (cfg.train.stage == TrainStage::gram_match)
      err << "warning: gram_match stage starting from random initialization "
             "(no pretrain checkpoint; pass --init-from)\n";
    Rng rng(cfg.train.seed);
    model = ModelParams::init(cfg.model, rng);
  }

  std::ofstream log = open_for_write(log_path, /*append=*/o.resume);
  TrainResult result = run_training(model, dataset, cfg.train, ckpt_path, &log, resume_state);
  out << "trained " << stage_to_string(cfg.train.stage) << " for " << result.steps_done
      << " steps, final loss " << result.last.loss << "; checkpoint " << ckpt_path << "\n";
}

struct SimulateOptions {
  std::string ckpt_path;
  std::string data_dir;
  std::string split = "test";
  std::string out_path;
  int chunk_ms = 0;             // 0 = model default
  int lookahead_chunks = -1;    // -1 = model default
  int extra_frames_ms = -1;     // -1 = model default
  bool offline = false;
  std::string clock = "nca";
  std::string policy = "nast";
  std::string engine = "incremental";
  int limit = 0;  // 0 = whole split
};

void run_simulate(const SimulateOptions& o, std::ostream& out) {
  std::vector<Utterance> utts = load_split(o.data_dir, o.split);
  if (o.limit > 0 && static_cast<int>(utts.size()) > o.limit) utts.resize(o.limit);
  const ClockSpec clock = parse_clock(o.clock);
  const std::string kind = checkpoint_kind(o.ckpt_path);
  std::ofstream log_file = open_for_write(o.out_path);
  int lines = 0;

  if (o.policy == "nast") {
    if (kind != "chunked_ctc")
      throw std::runtime_error("checkpoint kind '" + kind +
                               "' cannot serve the nast policy (expected chunked_ctc)");
    EngineKind engine;
    if (o.engine == "incremental") {
      engine = EngineKind::incremental;
    } else if (o.engine == "reference") {
      engine = EngineKind::reference;
    } else {
      throw std::runtime_error("unknown --engine '" + o.engine +
                               "', expected incremental or reference");
    }
    ModelParams model = load_model(o.ckpt_path);
    Policy policy = Policy::from_config(model.cfg);
    if (o.chunk_ms > 0) policy.chunk_ms = o.chunk_ms;
    if (o.extra_frames_ms >= 0) policy.lookahead_ms = o.extra_frames_ms;
    if (o.lookahead_chunks >= 0) policy.lookahead_chunks = o.lookahead_chunks;
    policy.offline = o.offline;
    for (const Utterance& utt : utts) {
      log_file << instance_log_to_json(simulate(utt, model, policy, clock, engine)) << "\n";
      ++lines;
    }
  } else if (o.policy.rfind("waitk:", 0) == 0) {
    if (kind != "ar_unit")
      throw std::runtime_error("policy waitk requires an autoregressive checkpoint "
                               "(kind ar_unit), got '" + kind + "'");
    if (o.offline) throw std::runtime_error("--offline applies to the nast policy");
    if (o.lookahead_chunks >= 0 || o.extra_frames_ms >= 0)
      throw std::runtime_error("--lookahead-chunks and --extra-frames-ms apply to the nast policy");
    const std::vector<std::string> parts = split(o.policy, ':');
    if (parts.size() != 3)
      throw std::runtime_error("bad --policy '" + o.policy + "', expected waitk:<k>:<n>");
    ARPolicy policy;
    if (o.chunk_ms > 0) policy.chunk_ms = o.chunk_ms;
    policy.wait_chunks = parse_int_field(parts[1], o.policy);
    policy.stride_tokens = parse_int_field(parts[2], o.policy);
    ARModel model = load_ar_model(o.ckpt_path);
    for (const Utterance& utt : utts) {
      log_file << instance_log_to_json(ar_simulate(utt, model, policy, clock).log) << "\n";
      ++lines;
    }
  } else {
    throw std::runtime_error("unknown --policy '" + o.policy +
                             "', expected nast or waitk:<k>:<n>");
  }
  if (!log_file) throw std::runtime_error("write to '" + o.out_path + "' failed");
  out << "simulated " << lines << " utterances -> " << o.out_path << "\n";
}

struct EvaluateOptions {
  std::string logs_path;
  std::string out_csv;
  std::string policy_label;
};

void run_evaluate(const EvaluateOptions& o, std::ostream& out) {
  const std::vector<InstanceLog> logs = read_logs_file(o.logs_path);
  const metrics::EvalReport report = metrics::evaluate_logs(logs);
  out << report_text(report);
  if (o.out_csv.empty()) return;

  const Policy& policy = logs.front().policy;
  std::string label = o.policy_label;
  int chunk_ms = 0, k = 0;
  if (!policy.offline) {
    chunk_ms = policy.chunk_ms;
    k = policy.lookahead_chunks;
  }
  if (label.empty()) {
    if (policy.offline) {
      label = "offline";
    } else {
      label = "chunk" + std::to_string(policy.chunk_ms) + "_k" +
              std::to_string(policy.lookahead_chunks);
      if (policy.lookahead_ms > 0) label += "_ta" + std::to_string(policy.lookahead_ms);
    }
  }
  std::error_code ec;
  const bool fresh = !std::filesystem::exists(o.out_csv, ec) ||
                     std::filesystem::file_size(o.out_csv, ec) == 0;
  std::ofstream csv = open_for_write(o.out_csv, /*append=*/true);
  if (fresh) csv << metrics::report_csv_header();
  csv << metrics::report_csv_rows(report, label, chunk_ms, k);
  if (!csv) throw std::runtime_error("write to '" + o.out_csv + "' failed");
  out << "appended metrics for policy " << label << " to " << o.out_csv << "\n";
}

struct BenchOptions {
  std::string nar_ckpt;
  std::string ar_ckpt;
  std::string data_dir;
  std::string split = "test";
  std::string out_csv;
  int min_units = 0;
  int limit = 0;
};

void run_bench_cmd(const BenchOptions& o, std::ostream& out) {
  std::vector<Utterance> utts = load_split(o.data_dir, o.split);
  std::erase_if(utts, [&](const Utterance& u) {
    return static_cast<int>(u.units.size()) < o.min_units;
  });
  if (o.limit > 0 && static_cast<int>(utts.size()) > o.limit) utts.resize(o.limit);
  if (utts.empty())
    throw std::runtime_error("no utterances with >= " + std::to_string(o.min_units) +
                             " units in split '" + o.split + "'");
  ModelParams nar = load_model(o.nar_ckpt);
  ARModel ar = load_ar_model(o.ar_ckpt);
  BenchReport report = run_bench(utts, nar, ar);
  out << bench_report_text(report);
  if (!o.out_csv.empty()) {
    std::ofstream csv = open_for_write(o.out_csv);
    csv << bench_report_csv(report);
    if (!csv) throw std::runtime_error("write to '" + o.out_csv + "' failed");
  }
}

}  // namespace

void experiment_to_map(const ExperimentConfig& cfg, ConfigMap& out) {
  model_config_to_map(cfg.model, out, "model.");
  out.set("train.stage", stage_to_string(cfg.train.stage));
  out.set_int("train.steps", cfg.train.steps);
  out.set_int("train.batch_frames", cfg.train.batch_frames);
  out.set_double("train.peak_lr", cfg.train.peak_lr);
  out.set_int("train.warmup_steps", cfg.train.warmup_steps);
  out.set_double("train.text_ratio_start", cfg.train.text_ratio_start);
  out.set_double("train.text_ratio_end", cfg.train.text_ratio_end);
  out.set_double("train.unit_ratio_start", cfg.train.unit_ratio_start);
  out.set_double("train.unit_ratio_end", cfg.train.unit_ratio_end);
  out.set_int("train.anneal_steps", cfg.train.anneal_steps);
  out.set_double("train.label_eps", cfg.train.label_eps);
  out.set_int("train.seed", static_cast<long long>(cfg.train.seed));
  out.set_int("train.checkpoint_every", cfg.train.checkpoint_every);
  out.set_int("train.log_every", cfg.train.log_every);
  out.set("train.policies", policies_to_spec_list(cfg.train.policies));
}

ExperimentConfig experiment_from_map(const ConfigMap& map) {
  ConfigMap known;
  experiment_to_map(ExperimentConfig{}, known);
  for (const auto& [key, value] : map.entries()) {
    if (!known.has(key)) throw std::runtime_error("unknown config key '" + key + "'");
  }
  ConfigMap merged = known;
  for (const auto& [key, value] : map.entries()) merged.set(key, value);

  ExperimentConfig cfg;
  cfg.model = model_config_from_map(merged, "model.");
  try {
    cfg.train.stage = stage_from_string(merged.get_string("train.stage"));
  } catch (const std::runtime_error& e) {
    throw std::runtime_error("config key 'train.stage': " + std::string(e.what()));
  }
  cfg.train.steps = static_cast<int>(merged.get_int("train.steps"));
  cfg.train.batch_frames = static_cast<int>(merged.get_int("train.batch_frames"));
  cfg.train.peak_lr = merged.get_double("train.peak_lr");
  cfg.train.warmup_steps = static_cast<int>(merged.get_int("train.warmup_steps"));
  cfg.train.text_ratio_start = merged.get_double("train.text_ratio_start");
  cfg.train.text_ratio_end = merged.get_double("train.text_ratio_end");
  cfg.train.unit_ratio_start = merged.get_double("train.unit_ratio_start");
  cfg.train.unit_ratio_end = merged.get_double("train.unit_ratio_end");
  cfg.train.anneal_steps = static_cast<int>(merged.get_int("train.anneal_steps"));
  cfg.train.label_eps = merged.get_double("train.label_eps");
  cfg.train.seed = static_cast<uint64_t>(merged.get_int("train.seed"));
  cfg.train.checkpoint_every = static_cast<int>(merged.get_int("train.checkpoint_every"));
  cfg.train.log_every = static_cast<int>(merged.get_int("train.log_every"));
  try {
    cfg.train.policies = policies_from_spec_list(merged.get_string("train.policies"));
  } catch (const std::runtime_error& e) {
    throw std::runtime_error("config key 'train.policies': " + std::string(e.what()));
  }
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

Policy policy_from_spec(const std::string& spec) {
  if (spec == "offline") {
    Policy policy;
    policy.offline = true;
    return policy;
  }
  const std::vector<std::string> parts = split(spec, ':');
  if (parts.size() != 3)
    throw std::runtime_error("bad policy spec '" + spec +
                             "', expected offline or chunk_ms:extra_frames_ms:lookahead_chunks");
  Policy policy;
  policy.chunk_ms = parse_int_field(parts[0], spec);
  policy.lookahead_ms = parse_int_field(parts[1], spec);
  policy.lookahead_chunks = parse_int_field(parts[2], spec);
  return policy;
}

std::string policy_to_spec(const Policy& policy) {
  if (policy.offline) return "offline";
  return std::to_string(policy.chunk_ms) + ":" + std::to_string(policy.lookahead_ms) + ":" +
         std::to_string(policy.lookahead_chunks);
}

std::vector<InstanceLog> read_logs_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::vector<InstanceLog> logs;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      logs.push_back(instance_log_from_json(line));
    } catch (const std::runtime_error& e) {
      throw std::runtime_error(path + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return logs;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"chunked non-autoregressive streaming speech translation toolkit"};
  app.require_subcommand(1);

  GenDataOptions gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "generate the synthetic corpus");
  gen_cmd->add_option("--out", gen.out_dir, "output directory")->required();
  gen_cmd->add_option("--seed", gen.spec.seed, "corpus seed");
  gen_cmd->add_option("--train-size", gen.spec.train_size, "training utterances");
  gen_cmd->add_option("--dev-size", gen.spec.dev_size, "dev utterances");
  gen_cmd->add_option("--test-size", gen.spec.test_size, "test utterances");
  gen_cmd->add_option("--src-vocab", gen.spec.src_vocab, "source vocabulary size");
  gen_cmd->add_option("--min-tokens", gen.spec.min_tokens, "min tokens per utterance");
  gen_cmd->add_option("--max-tokens", gen.spec.max_tokens, "max tokens per utterance");
  gen_cmd->add_option("--min-frames", gen.spec.min_frames_per_token, "min frames per token");
  gen_cmd->add_option("--max-frames", gen.spec.max_frames_per_token, "max frames per token");
  gen_cmd->add_option("--feat-dim", gen.spec.feat_dim, "feature dimension");
  gen_cmd->add_option("--noise-sigma", gen.spec.noise_sigma, "frame noise stddev");
  gen_cmd->add_option("--swap-prob", gen.spec.swap_prob, "adjacent swap probability");
  gen_cmd->add_option("--units-per-token", gen.spec.units_per_token, "units per text token");
  gen_cmd->add_option("--unit-vocab", gen.spec.unit_vocab, "unit vocabulary size");
  gen_cmd->callback([&] { run_gen_data(gen, out); });

  TrainOptions train;
  CLI::App* train_cmd = app.add_subcommand("train", "run one training stage");
  train_cmd->add_option("--config", train.config_path, "experiment config file")->required();
  train_cmd->add_option("--data", train.data_dir, "corpus directory")->required();
  train_cmd->add_option("--out", train.out_dir, "checkpoint/log directory")->required();
  train_cmd->add_option("--arch", train.arch, "nar (default) or ar");
  train_cmd->add_option("--split", train.split, "corpus split to train on");
  train_cmd->add_option("--init-from", train.init_from,
                        "warm-start checkpoint (fresh optimizer state)");
  train_cmd->add_flag("--resume", train.resume, "resume from <out>/model.ckpt");
  train_cmd->callback([&] { run_train(train, out, err); });

  SimulateOptions sim;
  CLI::App* sim_cmd = app.add_subcommand("simulate", "stream a split and write instance logs");
  sim_cmd->add_option("--ckpt", sim.ckpt_path, "model checkpoint")->required();
  sim_cmd->add_option("--data", sim.data_dir, "corpus directory")->required();
  sim_cmd->add_option("--split", sim.split, "corpus split");
  sim_cmd->add_option("--out", sim.out_path, "output JSONL path")->required();
  sim_cmd->add_option("--chunk-ms", sim.chunk_ms, "chunk size override");
  sim_cmd->add_option("--lookahead-chunks", sim.lookahead_chunks, "decoder lookahead k override");
  sim_cmd->add_option("--extra-frames-ms", sim.extra_frames_ms, "encoder lookahead override");
  sim_cmd->add_flag("--offline", sim.offline, "decode the whole utterance as one chunk");
  sim_cmd->add_option("--clock", sim.clock, "nca, ca, or injected:<ms>");
  sim_cmd->add_option("--policy", sim.policy, "nast (default) or waitk:<k>:<n>");
  sim_cmd->add_option("--engine", sim.engine, "incremental (default) or reference");
  sim_cmd->add_option("--limit", sim.limit, "only the first N utterances");
  sim_cmd->callback([&] { run_simulate(sim, out); });

  EvaluateOptions eval;
  CLI::App* eval_cmd = app.add_subcommand("evaluate", "score an instance log file");
  eval_cmd->add_option("--logs", eval.logs_path, "instance log JSONL")->required();
  eval_cmd->add_option("--out-csv", eval.out_csv, "append one row per metric here");
  eval_cmd->add_option("--policy-label", eval.policy_label, "CSV policy label override");
  eval_cmd->callback([&] { run_evaluate(eval, out); });

  BenchOptions bench;
  CLI::App* bench_cmd =
      app.add_subcommand("bench", "compare offline decoding cost against the ar baseline");
  bench_cmd->add_option("--nar-ckpt", bench.nar_ckpt, "chunked_ctc checkpoint")->required();
  bench_cmd->add_option("--ar-ckpt", bench.ar_ckpt, "ar_unit checkpoint")->required();
  bench_cmd->add_option("--data", bench.data_dir, "corpus directory")->required();
  bench_cmd->add_option("--split", bench.split, "corpus split");
  bench_cmd->add_option("--min-units", bench.min_units, "skip utterances with fewer units");
  bench_cmd->add_option("--limit", bench.limit, "only the first N matching utterances");
  bench_cmd->add_option("--out-csv", bench.out_csv, "write per-utterance timings here");
  bench_cmd->callback([&] { run_bench_cmd(bench, out); });

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace natstream::cli
