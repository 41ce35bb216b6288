#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "natstream/config.hpp"
#include "natstream/data.hpp"

namespace natstream {

// Synthetic corpus recipe. Every source token has a fixed feature signature
// (the codebook row); an utterance's frames repeat its tokens' signatures for
// a per-token duration and add Gaussian noise. The text target relabels each
// source token through a fixed derangement and then applies deterministic
// adjacent swaps, so targets are a pure function of the source sequence. The
// unit target spells each text token as a fixed pattern of units_per_token
// units; patterns are pairwise distinct.
struct CorpusSpec {
  uint64_t seed = 1;
  int src_vocab = 20;
  int min_tokens = 4;  // tokens per utterance, inclusive bounds
  int max_tokens = 12;
  int min_frames_per_token = 20;  // inclusive bounds; 200-400 ms at 10 ms frames
  int max_frames_per_token = 40;
  int feat_dim = 16;
  double noise_sigma = 0.1;
  double swap_prob = 0.2;
  int units_per_token = 4;
  int unit_vocab = 40;
  int train_size = 2000;
  int dev_size = 200;
  int test_size = 200;

  // Text tokens are relabeled source tokens, so the vocabularies coincide.
  int text_vocab() const { return src_vocab; }
  void validate() const;
};

// The relabelings shared by every utterance of one corpus, all drawn from the
// spec seed.
struct CorpusMaps {
  std::vector<int> token_to_text;               // derangement over [0, src_vocab)
  std::vector<std::vector<int>> text_to_units;  // pairwise distinct patterns
  std::vector<std::vector<double>> codebook;    // [src_vocab][feat_dim] signatures
};
CorpusMaps build_corpus_maps(const CorpusSpec& spec);

// Relabels the source and applies the swap rule: scanning left to right, the
// pair (j, j+1) swaps when a seeded hash of (s_j, s_{j+1}) falls below
// swap_prob; a swapped pair is skipped so swaps never overlap. Deciding the
// output at position j therefore requires the following source token, which
// is what makes decoder lookahead pay off, while the 400 possible pairs keep
// the rule learnable from a few thousand utterances.
std::vector<int> swapped_text(const std::vector<int>& source, const CorpusSpec& spec,
                              const CorpusMaps& maps);

struct SyntheticUtterance {
  std::string id;
  std::vector<int> source;  // source tokens in [0, src_vocab)
  Utterance utt;            // frames + targets as the trainer consumes them
};

// Utterance `global_index` of the corpus (indices number train, then dev,
// then test utterances consecutively, so every utterance has its own
// substream of the corpus seed).
SyntheticUtterance make_utterance(const CorpusSpec& spec, const CorpusMaps& maps,
                                  const std::string& split, int index_in_split, int global_index);

struct GeneratedCorpus {
  CorpusSpec spec;
  CorpusMaps maps;
  std::vector<SyntheticUtterance> train, dev, test;
};
GeneratedCorpus generate_corpus(const CorpusSpec& spec);

// On-disk layout in `dir`:
//   corpus.config            the generating spec as corpus.* keys
//   <split>.frames.bin       magic "NSTF0001", u64 rows, u64 feat_dim, then
//                            row-major little-endian float64 frames
//   <split>.index.jsonl      a header line {format, version, split, count,
//                            feat_dim}, then one line per utterance with
//                            {id, offset, frames, src, text, units}; offset
//                            counts frame rows into the .bin file
// write_corpus creates the directory; loaders validate magic, version, and
// offsets and throw std::runtime_error naming the file (and line) otherwise.
void write_corpus(const GeneratedCorpus& corpus, const std::string& dir);
std::vector<Utterance> load_split(const std::string& dir, const std::string& split);

// CorpusSpec <-> corpus.* keys; from_map throws on a malformed value and
// fills absent keys with defaults.
void corpus_spec_to_map(const CorpusSpec& spec, ConfigMap& out);
CorpusSpec corpus_spec_from_map(const ConfigMap& map);

}  // namespace natstream
