#pragma once

#include <utility>
#include <vector>

#include "natstream/tensor.hpp"

// Lattice utilities for connectionist temporal classification (CTC) style
// outputs. A lattice is a [T, V+1] tensor of per-position log-probabilities
// whose last column is the blank symbol; rows produced by the model are
// log-normalized. The functions below stay well-defined for slightly
// perturbed rows so finite-difference probes can run against them.
namespace natstream::ctc {

// Merge consecutive duplicates, then delete blanks.
std::vector<int> collapse(const std::vector<int>& path, int blank);

// log P(target | lattice): sum over all alignment paths that collapse to
// `target`, via the forward dynamic program over the blank-interleaved
// target in log space. Returns [1]; -inf when no path of length T can
// produce the target. Differentiable w.r.t. the lattice.
Tensor ctc_log_likelihood(const Tensor& lattice, const std::vector<int>& target, int blank);

// Most probable alignment path of length T collapsing to `target`.
// Ties are broken position-by-position during backtrace: prefer blank,
// then the lower symbol index. Throws when the target is unalignable.
std::vector<int> best_alignment(const Tensor& lattice, const std::vector<int>& target, int blank);

// Expected count, under the per-position lattice distribution, of each
// ordered symbol pair (u,v) appearing adjacently in the collapsed output.
// Returns a differentiable [V, V] table indexed [u, v]. Runs in probability
// space with underflow floored at 1e-300.
Tensor expected_bigram_table(const Tensor& lattice, int blank);

// Expected number of occurrences of each symbol in the collapsed output,
// as a differentiable [1, V] row.
Tensor expected_unigram_counts(const Tensor& lattice, int blank);

// Table entries for an explicit list of pairs, in order. Returns [|grams|].
Tensor expected_bigram_counts(const Tensor& lattice,
                              const std::vector<std::pair<int, int>>& grams, int blank);

// Soft overlap loss between the target's bigram counts and the model's
// expected bigram counts:
//   loss = -2 * sum_g min(c_g(target), c_g(model)) /
//               sum_g (c_g(target) + c_g(model))
// where g ranges over the bigrams occurring in the target. Always in
// [-1, 0]. Where the model count reaches or exceeds the target count, the
// min passes zero gradient to the model branch. Single-symbol targets fall
// back to the same formula over unigram counts; an empty target throws.
Tensor gram_match_loss(const Tensor& lattice, const std::vector<int>& target, int blank);

}  // namespace natstream::ctc
