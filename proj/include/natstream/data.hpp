#pragma once

#include <string>
#include <vector>

#include "natstream/tensor.hpp"

namespace natstream {

// One corpus utterance: source feature frames plus the two target streams.
struct Utterance {
  std::string id;
  Tensor frames;           // [num_frames, feat_dim]
  std::vector<int> text;   // ids in [0, text_vocab)
  std::vector<int> units;  // ids in [0, unit_vocab)
};

}  // namespace natstream
