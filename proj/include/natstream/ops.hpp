#pragma once

#include <cstdint>
#include <vector>

#include "natstream/rng.hpp"
#include "natstream/tensor.hpp"

// Differentiable tensor operations. Every op validates shapes up front and
// throws std::runtime_error naming the op and the offending shapes. When
// grad mode is on and an input requires grad, the output carries a graph
// node whose backward lambda accumulates into the inputs' grad buffers.
namespace natstream::ops {

// [n,k] x [k,m] -> [n,m]
Tensor matmul(const Tensor& a, const Tensor& b);
// [n,m] -> [m,n]
Tensor transpose(const Tensor& a);
// Same shape, or b of shape [m] broadcast over the rows of a [n,m].
Tensor add(const Tensor& a, const Tensor& b);
// Same shape only.
Tensor sub(const Tensor& a, const Tensor& b);
// Elementwise; b may also be a single-element tensor broadcast to all of a.
Tensor mul(const Tensor& a, const Tensor& b);
// Elementwise quotient, same shape.
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
// max(a, floor); gradient passes only where a > floor.
Tensor clamp_min(const Tensor& a, double floor);
// min(a, c); gradient passes only where a < c, so exact ties contribute no
// gradient through a.
Tensor minimum_const(const Tensor& a, double c);
// Elementwise log(exp(a) + exp(b)), overflow-safe; -inf inputs behave as
// log of true zeros.
Tensor logaddexp(const Tensor& a, const Tensor& b);

// Row-wise softmax over positions whose mask entry is nonzero; masked
// positions are exactly 0 in the output. Pass an undefined mask for plain
// softmax. A mask row with no allowed position is an error.
Tensor masked_softmax(const Tensor& scores, const Tensor& mask);
// Row-wise log softmax.
Tensor log_softmax(const Tensor& a);
// Row-wise normalization with learned gain/bias of shape [m].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// table [v,d], ids of length n with entries in [0,v) -> [n,d].
Tensor embedding(const Tensor& table, const std::vector<int>& ids);
// x [t,c_in], w [k*c_in, c_out] (row i*c_in+c multiplies the input i steps
// from the oldest tap), b [c_out]. Left zero padding of k-1 frames makes
// output position q depend only on inputs at indices <= stride*q. Output
// has ceil(t/stride) rows.
Tensor causal_conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride);
// Average consecutive groups of `window` rows; the final partial group
// divides by its actual size. [t,d] -> [ceil(t/window), d].
Tensor mean_pool(const Tensor& x, int window);

Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, int start, int len);
Tensor slice_cols(const Tensor& a, int start, int len);
// Each row r of a becomes rows r*repeat .. r*repeat+repeat-1 of the output.
Tensor repeat_rows(const Tensor& a, int repeat);
// Copy of base with row positions[i] replaced by row i of rows. Positions
// must be distinct and in range.
Tensor replace_rows(const Tensor& base, const std::vector<int>& positions, const Tensor& rows);
// Shares the underlying buffers; only the shape changes.
Tensor reshape(const Tensor& a, Shape new_shape);

// Inverted dropout: keep with probability 1-rate and scale kept entries by
// 1/(1-rate). Pass rng == nullptr (or rate 0) for the identity map used at
// evaluation time.
Tensor dropout(const Tensor& x, double rate, Rng* rng);

// Sum of all entries -> [1].
Tensor sum_all(const Tensor& a);
// out[i] = a.data[flat_indices[i]] -> [n].
Tensor gather_entries(const Tensor& a, const std::vector<int64_t>& flat_indices);

inline Tensor div_scalar(const Tensor& a, double c) { return scale(a, 1.0 / c); }

}  // namespace natstream::ops
