#include "natstream/corpus.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "natstream/rng.hpp"
#include "natstream/tensor.hpp"

namespace natstream {

namespace {

constexpr char kFramesMagic[9] = "NSTF0001";
constexpr int kIndexVersion = 1;

// Corpus-level substreams of the spec seed; utterances use 16 + global index.
constexpr uint64_t kCodebookStream = 1;
constexpr uint64_t kDerangementStream = 2;
constexpr uint64_t kPatternStream = 3;
constexpr uint64_t kUtteranceStreamBase = 16;

// Deterministic uniform in [0, 1) from the seed and a source-token pair.
double swap_u01(uint64_t seed, int a, int b) {
  uint64_t h = mix64(seed ^ 0x5357415030303031ULL);
  h = mix64(h + static_cast<uint64_t>(a));
  h = mix64(h + static_cast<uint64_t>(b));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

std::string utterance_id(const std::string& split, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s-%04d", split.c_str(), index);
  return buf;
}

void write_u64(std::ofstream& out, uint64_t value) {
  char buf[8];
  std::memcpy(buf, &value, 8);
  out.write(buf, 8);
}

uint64_t read_u64(std::ifstream& in) {
  char buf[8];
  in.read(buf, 8);
  uint64_t value = 0;
  std::memcpy(&value, buf, 8);
  return value;
}

std::string frames_path(const std::string& dir, const std::string& split) {
  return dir + "/" + split + ".frames.bin";
}
std::string index_path(const std::string& dir, const std::string& split) {
  return dir + "/" + split + ".index.jsonl";
}

void write_split(const std::string& dir, const std::string& split,
                 const std::vector<SyntheticUtterance>& utts, int feat_dim) {
  const std::string bin_path = frames_path(dir, split);
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open '" + bin_path + "' for writing");
  int64_t rows = 0;
  for (const SyntheticUtterance& su : utts) rows += su.utt.frames.rows();
  bin.write(kFramesMagic, 8);
  write_u64(bin, static_cast<uint64_t>(rows));
  write_u64(bin, static_cast<uint64_t>(feat_dim));
  for (const SyntheticUtterance& su : utts) {
    const Tensor& frames = su.utt.frames;
    bin.write(reinterpret_cast<const char*>(frames.ptr()),
              static_cast<std::streamsize>(frames.numel() * sizeof(double)));
  }
  if (!bin) throw std::runtime_error("write to '" + bin_path + "' failed");

  const std::string idx_path = index_path(dir, split);
  std::ofstream idx(idx_path);
  if (!idx) throw std::runtime_error("cannot open '" + idx_path + "' for writing");
  nlohmann::ordered_json header;
  header["format"] = "natstream-corpus";
  header["version"] = kIndexVersion;
  header["split"] = split;
  header["count"] = utts.size();
  header["feat_dim"] = feat_dim;
  idx << header.dump() << "\n";
  int64_t offset = 0;
  for (const SyntheticUtterance& su : utts) {
    nlohmann::ordered_json line;
    line["id"] = su.id;
    line["offset"] = offset;
    line["frames"] = su.utt.frames.rows();
    line["src"] = su.source;
    line["text"] = su.utt.text;
    line["units"] = su.utt.units;
    idx << line.dump() << "\n";
    offset += su.utt.frames.rows();
  }
  if (!idx) throw std::runtime_error("write to '" + idx_path + "' failed");
}

}  // namespace

void CorpusSpec::validate() const {
  auto fail = [](const std::string& what) {
    throw std::runtime_error("corpus spec: " + what);
  };
  if (src_vocab < 2) fail("src_vocab must be >= 2 (the derangement needs two tokens)");
  if (min_tokens < 1) fail("min_tokens must be >= 1");
  if (max_tokens < min_tokens) fail("max_tokens must be >= min_tokens");
  if (min_frames_per_token < 1) fail("min_frames_per_token must be >= 1");
  if (max_frames_per_token < min_frames_per_token)
    fail("max_frames_per_token must be >= min_frames_per_token");
  if (feat_dim < 1) fail("feat_dim must be >= 1");
  if (noise_sigma < 0) fail("noise_sigma must be >= 0");
  if (swap_prob < 0 || swap_prob > 1) fail("swap_prob must be in [0, 1]");
  if (units_per_token < 1) fail("units_per_token must be >= 1");
  if (unit_vocab < 2) fail("unit_vocab must be >= 2");
  if (train_size < 0 || dev_size < 0 || test_size < 0) fail("split sizes must be >= 0");
  if (train_size + dev_size + test_size < 1) fail("at least one utterance is required");
  // Distinct patterns for every text token must exist.
  double patterns = 1.0;
  for (int i = 0; i < units_per_token; ++i) patterns *= unit_vocab;
  if (patterns < src_vocab)
    fail("unit_vocab^units_per_token must be >= src_vocab for distinct patterns");
}

CorpusMaps build_corpus_maps(const CorpusSpec& spec) {
  spec.validate();
  CorpusMaps maps;

  Rng code_rng = Rng(spec.seed).fork(kCodebookStream);
  maps.codebook.assign(spec.src_vocab, std::vector<double>(spec.feat_dim, 0.0));
  for (int v = 0; v < spec.src_vocab; ++v)
    for (int f = 0; f < spec.feat_dim; ++f) maps.codebook[v][f] = code_rng.normal();

  Rng derange_rng = Rng(spec.seed).fork(kDerangementStream);
  maps.token_to_text.resize(spec.src_vocab);
  bool fixed_point = true;
  while (fixed_point) {
    for (int v = 0; v < spec.src_vocab; ++v) maps.token_to_text[v] = v;
    for (int i = spec.src_vocab - 1; i > 0; --i) {
      const int j = derange_rng.uniform_int(i + 1);
      std::swap(maps.token_to_text[i], maps.token_to_text[j]);
    }
    fixed_point = false;
    for (int v = 0; v < spec.src_vocab; ++v)
      if (maps.token_to_text[v] == v) fixed_point = true;
  }

  Rng pattern_rng = Rng(spec.seed).fork(kPatternStream);
  std::set<std::vector<int>> used;
  maps.text_to_units.resize(spec.src_vocab);
  for (int t = 0; t < spec.src_vocab; ++t) {
    std::vector<int> pattern(spec.units_per_token);
    do {
      for (int& u : pattern) u = pattern_rng.uniform_int(spec.unit_vocab);
    } while (!used.insert(pattern).second);
    maps.text_to_units[t] = pattern;
  }
  return maps;
}

std::vector<int> swapped_text(const std::vector<int>& source, const CorpusSpec& spec,
                              const CorpusMaps& maps) {
  std::vector<int> text(source.size());
  for (size_t j = 0; j < source.size(); ++j) {
    if (source[j] < 0 || source[j] >= spec.src_vocab)
      throw std::runtime_error("source token out of range");
    text[j] = maps.token_to_text[source[j]];
  }
  size_t j = 0;
  while (j + 1 < source.size()) {
    if (swap_u01(spec.seed, source[j], source[j + 1]) < spec.swap_prob) {
      std::swap(text[j], text[j + 1]);
      j += 2;  // a swapped pair is consumed; swaps never overlap
    } else {
      j += 1;
    }
  }
  return text;
}

SyntheticUtterance make_utterance(const CorpusSpec& spec, const CorpusMaps& maps,
                                  const std::string& split, int index_in_split,
                                  int global_index) {
  Rng rng = Rng(spec.seed).fork(kUtteranceStreamBase + static_cast<uint64_t>(global_index));
  SyntheticUtterance su;
  su.id = utterance_id(split, index_in_split);
  su.utt.id = su.id;

  const int n_tokens = spec.min_tokens + rng.uniform_int(spec.max_tokens - spec.min_tokens + 1);
  su.source.resize(n_tokens);
  for (int& s : su.source) s = rng.uniform_int(spec.src_vocab);

  std::vector<int> durations(n_tokens);
  int total_frames = 0;
  for (int& d : durations) {
    d = spec.min_frames_per_token +
        rng.uniform_int(spec.max_frames_per_token - spec.min_frames_per_token + 1);
    total_frames += d;
  }

  std::vector<double> values;
  values.reserve(static_cast<size_t>(total_frames) * spec.feat_dim);
  for (int j = 0; j < n_tokens; ++j) {
    const std::vector<double>& signature = maps.codebook[su.source[j]];
    for (int rep = 0; rep < durations[j]; ++rep)
      for (int f = 0; f < spec.feat_dim; ++f)
        values.push_back(signature[f] + spec.noise_sigma * rng.normal());
  }
  su.utt.frames = Tensor::from({total_frames, spec.feat_dim}, std::move(values));

  su.utt.text = swapped_text(su.source, spec, maps);
  su.utt.units.reserve(static_cast<size_t>(n_tokens) * spec.units_per_token);
  for (int t : su.utt.text)
    for (int u : maps.text_to_units[t]) su.utt.units.push_back(u);
  return su;
}

GeneratedCorpus generate_corpus(const CorpusSpec& spec) {
  GeneratedCorpus corpus;
  corpus.spec = spec;
  corpus.maps = build_corpus_maps(spec);
  int global = 0;
  auto fill = [&](const std::string& split, int size, std::vector<SyntheticUtterance>& out) {
    out.reserve(size);
    for (int i = 0; i < size; ++i) out.push_back(make_utterance(spec, corpus.maps, split, i, global++));
  };
  fill("train", spec.train_size, corpus.train);
  fill("dev", spec.dev_size, corpus.dev);
  fill("test", spec.test_size, corpus.test);
  return corpus;
}

void write_corpus(const GeneratedCorpus& corpus, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory '" + dir + "': " + ec.message());

  ConfigMap spec_map;
  corpus_spec_to_map(corpus.spec, spec_map);
  const std::string config_path = dir + "/corpus.config";
  std::ofstream config(config_path);
  if (!config) throw std::runtime_error("cannot open '" + config_path + "' for writing");
  config << config_to_text(spec_map);
  if (!config) throw std::runtime_error("write to '" + config_path + "' failed");

  write_split(dir, "train", corpus.train, corpus.spec.feat_dim);
  write_split(dir, "dev", corpus.dev, corpus.spec.feat_dim);
  write_split(dir, "test", corpus.test, corpus.spec.feat_dim);
}

std::vector<Utterance> load_split(const std::string& dir, const std::string& split) {
  const std::string idx_path = index_path(dir, split);
  std::ifstream idx(idx_path);
  if (!idx) throw std::runtime_error("cannot open '" + idx_path + "'");

  auto parse_line = [&](const std::string& text, int line_no) {
    try {
      return nlohmann::ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(idx_path + " line " + std::to_string(line_no) + ": " + e.what());
    }
  };

  std::string line;
  if (!std::getline(idx, line)) throw std::runtime_error(idx_path + ": missing header line");
  int64_t count = 0;
  int feat_dim = 0;
  try {
    nlohmann::ordered_json header = parse_line(line, 1);
    if (header.at("format").get<std::string>() != "natstream-corpus")
      throw std::runtime_error("unexpected format field");
    if (header.at("version").get<int>() != kIndexVersion)
      throw std::runtime_error("unsupported version");
    if (header.at("split").get<std::string>() != split)
      throw std::runtime_error("header names split '" + header.at("split").get<std::string>() +
                               "'");
    count = header.at("count").get<int64_t>();
    feat_dim = header.at("feat_dim").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(idx_path + " line 1: " + e.what());
  }

  struct IndexEntry {
    std::string id;
    int64_t offset = 0;
    int frames = 0;
    std::vector<int> text, units;
  };
  std::vector<IndexEntry> entries;
  entries.reserve(count);
  int64_t expected_offset = 0;
  int line_no = 1;
  while (std::getline(idx, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::ordered_json row = parse_line(line, line_no);
    IndexEntry entry;
    try {
      entry.id = row.at("id").get<std::string>();
      entry.offset = row.at("offset").get<int64_t>();
      entry.frames = row.at("frames").get<int>();
      entry.text = row.at("text").get<std::vector<int>>();
      entry.units = row.at("units").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(idx_path + " line " + std::to_string(line_no) + ": " + e.what());
    }
    if (entry.offset != expected_offset)
      throw std::runtime_error(idx_path + " line " + std::to_string(line_no) +
                               ": offset is not cumulative");
    expected_offset += entry.frames;
    entries.push_back(std::move(entry));
  }
  if (static_cast<int64_t>(entries.size()) != count)
    throw std::runtime_error(idx_path + ": header count " + std::to_string(count) +
                             " but " + std::to_string(entries.size()) + " entries");

  const std::string bin_path = frames_path(dir, split);
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open '" + bin_path + "'");
  char magic[9] = {};
  bin.read(magic, 8);
  if (!bin || std::string(magic, 8) != kFramesMagic)
    throw std::runtime_error(bin_path + ": bad magic, expected NSTF0001");
  const int64_t rows = static_cast<int64_t>(read_u64(bin));
  const int64_t bin_feat = static_cast<int64_t>(read_u64(bin));
  if (bin_feat != feat_dim)
    throw std::runtime_error(bin_path + ": feat_dim " + std::to_string(bin_feat) +
                             " does not match index feat_dim " + std::to_string(feat_dim));
  if (rows != expected_offset)
    throw std::runtime_error(bin_path + ": holds " + std::to_string(rows) +
                             " frame rows but the index references " +
                             std::to_string(expected_offset));
  std::vector<double> all(static_cast<size_t>(rows) * feat_dim);
  bin.read(reinterpret_cast<char*>(all.data()),
           static_cast<std::streamsize>(all.size() * sizeof(double)));
  if (!bin) throw std::runtime_error(bin_path + ": truncated frame data");

  std::vector<Utterance> out;
  out.reserve(entries.size());
  for (const IndexEntry& entry : entries) {
    Utterance utt;
    utt.id = entry.id;
    const auto begin = all.begin() + entry.offset * feat_dim;
    utt.frames = Tensor::from({entry.frames, feat_dim},
                              std::vector<double>(begin, begin + int64_t(entry.frames) * feat_dim));
    utt.text = entry.text;
    utt.units = entry.units;
    out.push_back(std::move(utt));
  }
  return out;
}

void corpus_spec_to_map(const CorpusSpec& spec, ConfigMap& out) {
  out.set_int("corpus.seed", static_cast<long long>(spec.seed));
  out.set_int("corpus.src_vocab", spec.src_vocab);
  out.set_int("corpus.min_tokens", spec.min_tokens);
  out.set_int("corpus.max_tokens", spec.max_tokens);
  out.set_int("corpus.min_frames_per_token", spec.min_frames_per_token);
  out.set_int("corpus.max_frames_per_token", spec.max_frames_per_token);
  out.set_int("corpus.feat_dim", spec.feat_dim);
  out.set_double("corpus.noise_sigma", spec.noise_sigma);
  out.set_double("corpus.swap_prob", spec.swap_prob);
  out.set_int("corpus.units_per_token", spec.units_per_token);
  out.set_int("corpus.unit_vocab", spec.unit_vocab);
  out.set_int("corpus.train_size", spec.train_size);
  out.set_int("corpus.dev_size", spec.dev_size);
  out.set_int("corpus.test_size", spec.test_size);
}

CorpusSpec corpus_spec_from_map(const ConfigMap& map) {
  CorpusSpec spec;
  spec.seed = static_cast<uint64_t>(map.get_int_or("corpus.seed", spec.seed));
  spec.src_vocab = static_cast<int>(map.get_int_or("corpus.src_vocab", spec.src_vocab));
  spec.min_tokens = static_cast<int>(map.get_int_or("corpus.min_tokens", spec.min_tokens));
  spec.max_tokens = static_cast<int>(map.get_int_or("corpus.max_tokens", spec.max_tokens));
  spec.min_frames_per_token =
      static_cast<int>(map.get_int_or("corpus.min_frames_per_token", spec.min_frames_per_token));
  spec.max_frames_per_token =
      static_cast<int>(map.get_int_or("corpus.max_frames_per_token", spec.max_frames_per_token));
  spec.feat_dim = static_cast<int>(map.get_int_or("corpus.feat_dim", spec.feat_dim));
  spec.noise_sigma = map.get_double_or("corpus.noise_sigma", spec.noise_sigma);
  spec.swap_prob = map.get_double_or("corpus.swap_prob", spec.swap_prob);
  spec.units_per_token =
      static_cast<int>(map.get_int_or("corpus.units_per_token", spec.units_per_token));
  spec.unit_vocab = static_cast<int>(map.get_int_or("corpus.unit_vocab", spec.unit_vocab));
  spec.train_size = static_cast<int>(map.get_int_or("corpus.train_size", spec.train_size));
  spec.dev_size = static_cast<int>(map.get_int_or("corpus.dev_size", spec.dev_size));
  spec.test_size = static_cast<int>(map.get_int_or("corpus.test_size", spec.test_size));
  spec.validate();
  return spec;
}

}  // namespace natstream
