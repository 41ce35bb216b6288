#include "natstream/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "natstream/ops.hpp"

namespace natstream::ctc {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kProbFloor = 1e-300;

void check_lattice(const char* op, const Tensor& lattice, int blank) {
  if (!lattice.defined() || lattice.ndim() != 2) {
    throw std::runtime_error(std::string(op) + ": lattice must be 2-d, got " +
                             shape_str(lattice.shape));
  }
  if (blank != lattice.shape[1] - 1) {
    throw std::runtime_error(std::string(op) + ": blank must be the last lattice column, got " +
                             std::to_string(blank) + " for " + shape_str(lattice.shape));
  }
}

void check_target(const char* op, const std::vector<int>& target, int vocab) {
  for (int s : target) {
    if (s < 0 || s >= vocab) {
      throw std::runtime_error(std::string(op) + ": target symbol " + std::to_string(s) +
                               " outside vocabulary of size " + std::to_string(vocab));
    }
  }
}

// Blank-interleaved target: [b, o1, b, o2, ..., oU, b].
std::vector<int> extended_labels(const std::vector<int>& target, int blank) {
  std::vector<int> lab(2 * target.size() + 1, blank);
  for (size_t i = 0; i < target.size(); ++i) lab[2 * i + 1] = target[i];
  return lab;
}

// Minimum path length: every symbol needs a slot, plus a separating blank
// between equal neighbours.
int min_alignment_length(const std::vector<int>& target) {
  int len = static_cast<int>(target.size());
  for (size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++len;
  return len;
}

}  // namespace

std::vector<int> collapse(const std::vector<int>& path, int blank) {
  std::vector<int> out;
  int prev = blank;
  for (int s : path) {
    if (s != blank && s != prev) out.push_back(s);
    prev = s;
  }
  return out;
}

Tensor ctc_log_likelihood(const Tensor& lattice, const std::vector<int>& target, int blank) {
  check_lattice("ctc_log_likelihood", lattice, blank);
  check_target("ctc_log_likelihood", target, blank);
  const int t_len = lattice.shape[0];
  const int cols = lattice.shape[1];
  const std::vector<int> lab = extended_labels(target, blank);
  const int s_len = static_cast<int>(lab.size());

  if (t_len < min_alignment_length(target)) {
    return Tensor::full({1}, kNegInf);
  }

  // Per-position gather indices into the flattened lattice, one per state.
  auto gather_row = [&](int t) {
    std::vector<int64_t> idx(s_len);
    for (int s = 0; s < s_len; ++s) idx[s] = static_cast<int64_t>(t) * cols + lab[s];
    return ops::reshape(ops::gather_entries(lattice, idx), {1, s_len});
  };

  // States 0 (leading blank) and 1 (first symbol) can start a path.
  Tensor init_mask = Tensor::full({1, s_len}, kNegInf);
  (*init_mask.data)[0] = 0.0;
  if (s_len > 1) (*init_mask.data)[1] = 0.0;
  Tensor alpha = ops::add(gather_row(0), init_mask);

  // Skip transitions s-2 -> s exist only into symbol states whose label
  // differs from the one two states back.
  Tensor skip_mask = Tensor::full({1, s_len}, kNegInf);
  for (int s = 2; s < s_len; ++s) {
    if (lab[s] != blank && lab[s] != lab[s - 2]) (*skip_mask.data)[s] = 0.0;
  }
  const Tensor ninf1 = Tensor::full({1, 1}, kNegInf);
  const Tensor ninf2 = Tensor::full({1, 2}, kNegInf);

  for (int t = 1; t < t_len; ++t) {
    Tensor reach = alpha;
    if (s_len >= 2) {
      Tensor prev = ops::concat_cols(ninf1, ops::slice_cols(alpha, 0, s_len - 1));
      reach = ops::logaddexp(reach, prev);
    }
    if (s_len >= 3) {
      Tensor skip = ops::concat_cols(ninf2, ops::slice_cols(alpha, 0, s_len - 2));
      reach = ops::logaddexp(reach, ops::add(skip, skip_mask));
    }
    alpha = ops::add(reach, gather_row(t));
  }

  Tensor last = ops::slice_cols(alpha, s_len - 1, 1);
  if (s_len >= 2) {
    last = ops::logaddexp(last, ops::slice_cols(alpha, s_len - 2, 1));
  }
  return ops::reshape(last, {1});
}

std::vector<int> best_alignment(const Tensor& lattice, const std::vector<int>& target, int blank) {
  check_lattice("best_alignment", lattice, blank);
  check_target("best_alignment", target, blank);
  const int t_len = lattice.shape[0];
  const int cols = lattice.shape[1];
  if (t_len < min_alignment_length(target)) {
    throw std::runtime_error("target unalignable at this length");
  }
  const std::vector<int> lab = extended_labels(target, blank);
  const int s_len = static_cast<int>(lab.size());
  const double* lp = lattice.ptr();
  auto lp_at = [&](int t, int s) { return lp[static_cast<int64_t>(t) * cols + lab[s]]; };

  // Forward pass storing the best prefix log-probability per state.
  std::vector<double> delta(static_cast<size_t>(t_len) * s_len, kNegInf);
  delta[0] = lp_at(0, 0);
  if (s_len > 1) delta[1] = lp_at(0, 1);
  for (int t = 1; t < t_len; ++t) {
    for (int s = 0; s < s_len; ++s) {
      double best = delta[static_cast<size_t>(t - 1) * s_len + s];
      if (s >= 1) best = std::max(best, delta[static_cast<size_t>(t - 1) * s_len + s - 1]);
      if (s >= 2 && lab[s] != blank && lab[s] != lab[s - 2]) {
        best = std::max(best, delta[static_cast<size_t>(t - 1) * s_len + s - 2]);
      }
      delta[static_cast<size_t>(t) * s_len + s] = best == kNegInf ? kNegInf : best + lp_at(t, s);
    }
  }

  // Tie rule shared by the final-state pick and the backtrace: prefer the
  // candidate whose path symbol is blank, then the lower symbol index.
  auto better_label = [&](int lab_a, int lab_b) {
    if (lab_a == blank) return lab_b != blank;
    if (lab_b == blank) return false;
    return lab_a < lab_b;
  };

  double best_end = delta[static_cast<size_t>(t_len - 1) * s_len + s_len - 1];
  int state = s_len - 1;
  if (s_len >= 2) {
    const double alt = delta[static_cast<size_t>(t_len - 1) * s_len + s_len - 2];
    if (alt > best_end ||
        (alt == best_end && better_label(lab[s_len - 2], lab[state]) && alt != kNegInf)) {
      best_end = alt;
      state = s_len - 2;
    }
  }
  if (best_end == kNegInf) {
    throw std::runtime_error("target unalignable at this length");
  }

  std::vector<int> path(t_len);
  path[t_len - 1] = lab[state];
  for (int t = t_len - 1; t >= 1; --t) {
    // The forward pass stored best_pred + lp, so testing candidates with the
    // same addition keeps tie detection exact in floating point.
    const double current = delta[static_cast<size_t>(t) * s_len + state];
    const double emit = lp_at(t, state);
    int chosen = -1;
    auto consider = [&](int pred) {
      if (pred < 0) return;
      if (pred == state - 2 && (lab[state] == blank || lab[state] == lab[state - 2])) return;
      if (delta[static_cast<size_t>(t - 1) * s_len + pred] + emit != current) return;
      if (chosen == -1 || better_label(lab[pred], lab[chosen])) chosen = pred;
    };
    consider(state);
    consider(state - 1);
    consider(state - 2);
    if (chosen == -1) {
      // Exact equality must hold for at least one predecessor because the
      // forward pass computed `needed` as a max over these very values.
      throw std::runtime_error("best_alignment: backtrace lost the optimal path");
    }
    state = chosen;
    path[t - 1] = lab[state];
  }
  return path;
}

Tensor expected_bigram_table(const Tensor& lattice, int blank) {
  check_lattice("expected_bigram_table", lattice, blank);
  const int t_len = lattice.shape[0];
  const int v = lattice.shape[1] - 1;
  Tensor probs = ops::clamp_min(ops::exp(lattice), kProbFloor);
  Tensor pv = ops::slice_cols(probs, 0, v);        // [T, V] symbol probabilities
  Tensor pb = ops::slice_cols(probs, v, 1);        // [T, 1] blank probability

  // alpha[t][u] = P(the last non-blank symbol among positions 0..t is u):
  // either position t emits u, or it emits blank and the property held at
  // t-1.
  std::vector<Tensor> alpha_rows;
  alpha_rows.reserve(t_len);
  alpha_rows.push_back(ops::slice_rows(pv, 0, 1));
  for (int t = 1; t < t_len; ++t) {
    Tensor carried = ops::mul(alpha_rows.back(), ops::slice_rows(pb, t, 1));
    alpha_rows.push_back(ops::add(ops::slice_rows(pv, t, 1), carried));
  }
  Tensor alpha = ops::concat_rows(alpha_rows);  // [T, V]

  // Off-diagonal pairs (u,v), u != v: sum_t p_t(v) * alpha_{t-1}(u).
  Tensor off_diag;
  if (t_len >= 2) {
    off_diag = ops::matmul(ops::transpose(ops::slice_rows(alpha, 0, t_len - 1)),
                           ops::slice_rows(pv, 1, t_len - 1));
  } else {
    off_diag = Tensor::zeros({v, v});
  }

  // Same-symbol pairs need an explicit separating blank:
  // sum_t p_t(u) * p_{t-1}(blank) * alpha_{t-2}(u).
  Tensor diag_vec;
  if (t_len >= 3) {
    Tensor alpha_head = ops::slice_rows(alpha, 0, t_len - 2);
    Tensor blank_mid = ops::matmul(ops::slice_rows(pb, 1, t_len - 2), Tensor::full({1, v}, 1.0));
    Tensor pv_tail = ops::slice_rows(pv, 2, t_len - 2);
    Tensor prod = ops::mul(ops::mul(alpha_head, blank_mid), pv_tail);
    diag_vec = ops::matmul(Tensor::full({1, t_len - 2}, 1.0), prod);  // [1, V]
  } else {
    diag_vec = Tensor::zeros({1, v});
  }

  Tensor identity = Tensor::zeros({v, v});
  Tensor off_mask = Tensor::full({v, v}, 1.0);
  for (int i = 0; i < v; ++i) {
    (*identity.data)[static_cast<int64_t>(i) * v + i] = 1.0;
    (*off_mask.data)[static_cast<int64_t>(i) * v + i] = 0.0;
  }
  return ops::add(ops::mul(off_diag, off_mask),
                  ops::mul(ops::repeat_rows(diag_vec, v), identity));
}

Tensor expected_unigram_counts(const Tensor& lattice, int blank) {
  check_lattice("expected_unigram_counts", lattice, blank);
  const int t_len = lattice.shape[0];
  const int v = lattice.shape[1] - 1;
  Tensor probs = ops::clamp_min(ops::exp(lattice), kProbFloor);
  Tensor pv = ops::slice_cols(probs, 0, v);
  // A symbol occurrence in the collapsed output is a run start: position t
  // emits u while position t-1 does not.
  Tensor first = ops::slice_rows(pv, 0, 1);
  if (t_len < 2) return first;
  Tensor not_prev = ops::sub(Tensor::full({t_len - 1, v}, 1.0), ops::slice_rows(pv, 0, t_len - 1));
  Tensor starts = ops::mul(ops::slice_rows(pv, 1, t_len - 1), not_prev);
  Tensor rest = ops::matmul(Tensor::full({1, t_len - 1}, 1.0), starts);
  return ops::add(first, rest);
}

Tensor expected_bigram_counts(const Tensor& lattice,
                              const std::vector<std::pair<int, int>>& grams, int blank) {
  Tensor table = expected_bigram_table(lattice, blank);
  const int v = table.shape[0];
  std::vector<int64_t> idx;
  idx.reserve(grams.size());
  for (const auto& [u, w] : grams) {
    if (u < 0 || u >= v || w < 0 || w >= v) {
      throw std::runtime_error("expected_bigram_counts: pair (" + std::to_string(u) + "," +
                               std::to_string(w) + ") outside vocabulary of size " +
                               std::to_string(v));
    }
    idx.push_back(static_cast<int64_t>(u) * v + w);
  }
  return ops::gather_entries(table, idx);
}

Tensor gram_match_loss(const Tensor& lattice, const std::vector<int>& target, int blank) {
  check_lattice("gram_match_loss", lattice, blank);
  check_target("gram_match_loss", target, blank);
  if (target.empty()) {
    throw std::runtime_error("gram_match_loss: empty target");
  }

  Tensor model_counts;  // [G] expected counts for the target's grams
  std::vector<double> target_counts;
  if (target.size() >= 2) {
    std::vector<std::pair<int, int>> keys;
    for (size_t i = 0; i + 1 < target.size(); ++i) {
      const std::pair<int, int> g{target[i], target[i + 1]};
      auto it = std::find(keys.begin(), keys.end(), g);
      if (it == keys.end()) {
        keys.push_back(g);
        target_counts.push_back(1.0);
      } else {
        target_counts[it - keys.begin()] += 1.0;
      }
    }
    model_counts = expected_bigram_counts(lattice, keys, blank);
  } else {
    Tensor unigrams = expected_unigram_counts(lattice, blank);
    model_counts = ops::gather_entries(unigrams, {target[0]});
    target_counts = {1.0};
  }

  double target_total = 0.0;
  for (double c : target_counts) target_total += c;
  Tensor target_tensor = Tensor::from({static_cast<int>(target_counts.size())}, target_counts);

  // min(c_target, c_model) written as c_target - relu(c_target - c_model):
  // at ties and beyond, the relu kink routes zero gradient to the model.
  Tensor mins = ops::sub(target_tensor, ops::relu(ops::sub(target_tensor, model_counts)));
  Tensor numer = ops::sum_all(mins);
  Tensor denom = ops::add_const(ops::sum_all(model_counts), target_total);
  return ops::neg(ops::scale(ops::div(numer, denom), 2.0));
}

}  // namespace natstream::ctc
