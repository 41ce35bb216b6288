#include "natstream/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "natstream/kernels.hpp"

namespace natstream::ops {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool want_grad(const Tensor& a) {
  return grad_enabled() && a.requires_grad;
}

bool want_grad(const Tensor& a, const Tensor& b) {
  return grad_enabled() && (a.requires_grad || b.requires_grad);
}

void check_defined(const char* op, const Tensor& t) {
  if (!t.defined()) throw std::runtime_error(std::string(op) + ": undefined input tensor");
}

void check_2d(const char* op, const Tensor& t) {
  check_defined(op, t);
  if (t.ndim() != 2) {
    throw std::runtime_error(std::string(op) + ": expected a 2-d tensor, got " +
                             shape_str(t.shape));
  }
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    throw std::runtime_error(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                             " vs " + shape_str(b.shape));
  }
}

void attach(Tensor& out, const char* op, std::vector<Tensor> parents,
            std::function<void()> backward) {
  auto node = std::make_shared<GraphNode>();
  node->op = op;
  node->parents = std::move(parents);
  node->backward = std::move(backward);
  out.node = node;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d("matmul", a);
  check_2d("matmul", b);
  if (a.shape[1] != b.shape[0]) {
    throw std::runtime_error("matmul: inner dimensions differ, " + shape_str(a.shape) + " vs " +
                             shape_str(b.shape));
  }
  const int n = a.shape[0], k = a.shape[1], m = b.shape[1];
  Tensor out = Tensor::zeros({n, m}, want_grad(a, b));
  kernels::gemm_nn(a.ptr(), b.ptr(), out.ptr(), n, k, m);
  if (out.requires_grad) {
    auto ad = a.data, bd = b.data, og = out.grad;
    auto ag = a.grad, bg = b.grad;
    attach(out, "matmul", {a, b}, [ad, bd, ag, bg, og, n, k, m]() {
      if (ag) kernels::gemm_nt(og->data(), bd->data(), ag->data(), n, m, k);
      if (bg) kernels::gemm_tn(ad->data(), og->data(), bg->data(), k, n, m);
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  check_2d("transpose", a);
  const int n = a.shape[0], m = a.shape[1];
  Tensor out = Tensor::zeros({m, n}, want_grad(a));
  const double* x = a.ptr();
  double* y = out.ptr();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) y[static_cast<int64_t>(j) * n + i] = x[static_cast<int64_t>(i) * m + j];
  if (out.requires_grad) {
    auto ag = a.grad, og = out.grad;
    attach(out, "transpose", {a}, [ag, og, n, m]() {
      if (!ag) return;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
          (*ag)[static_cast<int64_t>(i) * m + j] += (*og)[static_cast<int64_t>(j) * n + i];
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_defined("add", a);
  check_defined("add", b);
  const bool bias_broadcast =
      a.ndim() == 2 && b.ndim() == 1 && b.shape[0] == a.shape[1] && a.shape != b.shape;
  if (!bias_broadcast) check_same_shape("add", a, b);
  Tensor out = Tensor::zeros(a.shape, want_grad(a, b));
  const double* xa = a.ptr();
  const double* xb = b.ptr();
  double* y = out.ptr();
  const int64_t n = a.numel();
  if (bias_broadcast) {
    const int m = a.shape[1];
    for (int64_t i = 0; i < n; ++i) y[i] = xa[i] + xb[i % m];
  } else {
    for (int64_t i = 0; i < n; ++i) y[i] = xa[i] + xb[i];
  }
  if (out.requires_grad) {
    auto ag = a.grad, bg = b.grad, og = out.grad;
    const int m = bias_broadcast ? a.shape[1] : 0;
    attach(out, "add", {a, b}, [ag, bg, og, n, m, bias_broadcast]() {
      if (ag)
        for (int64_t i = 0; i < n; ++i) (*ag)[i] += (*og)[i];
      if (bg) {
        if (bias_broadcast) {
          for (int64_t i = 0; i < n; ++i) (*bg)[i % m] += (*og)[i];
        } else {
          for (int64_t i = 0; i < n; ++i) (*bg)[i] += (*og)[i];
        }
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_defined("sub", a);
  check_defined("sub", b);
  check_same_shape("sub", a, b);
  Tensor out = Tensor::zeros(a.shape, want_grad(a, b));
  const double* xa = a.ptr();
  const double* xb = b.ptr();
  double* y = out.ptr();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) y[i] = xa[i] - xb[i];
  if (out.requires_grad) {
    auto ag = a.grad, bg = b.grad, og = out.grad;
    attach(out, "sub", {a, b}, [ag, bg, og, n]() {
      if (ag)
        for (int64_t i = 0; i < n; ++i) (*ag)[i] += (*og)[i];
      if (bg)
        for (int64_t i = 0; i < n; ++i) (*bg)[i] -= (*og)[i];
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_defined("mul", a);
  check_defined("mul", b);
  const bool scalar_broadcast = b.numel() == 1 && a.numel() != 1;
  if (!scalar_broadcast) check_same_shape("mul", a, b);
  Tensor out = Tensor::zeros(a.shape, want_grad(a, b));
  const double* xa = a.ptr();
  const double* xb = b.ptr();
  double* y = out.ptr();
  const int64_t n = a.numel();
  if (scalar_broadcast) {
    const double s = xb[0];
    for (int64_t i = 0; i < n; ++i) y[i] = xa[i] * s;
  } else {
    for (int64_t i = 0; i < n; ++i) y[i] = xa[i] * xb[i];
  }
  if (out.requires_grad) {
    auto ad = a.data, bd = b.data, og = out.grad;
    auto ag = a.grad, bg = b.grad;
    attach(out, "mul", {a, b}, [ad, bd, ag, bg, og, n, scalar_broadcast]() {
      if (scalar_broadcast) {
        const double s = (*bd)[0];
        if (ag)
          for (int64_t i = 0; i < n; ++i) (*ag)[i] += (*og)[i] * s;
        if (bg) {
          double acc = 0.0;
          for (int64_t i = 0; i < n; ++i) acc += (*og)[i] * (*ad)[i];
          (*bg)[0] += acc;
        }
      } else {
        if (ag)
          for (int64_t i = 0; i < n; ++i) (*ag)[i] += (*og)[i] * (*bd)[i];
        if (bg)
          for (int64_t i = 0; i < n; ++i) (*bg)[i] += (*og)[i] * (*ad)[i];
      }
    });
  }
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_defined("div", a);
  check_defined("div", b);
  check_same_shape("div", a, b);
  Tensor out = Tensor::zeros(a.shape, want_grad(a, b));
  const double* xa = a.ptr();
  const double* xb = b.ptr();
  double* y = out.ptr();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) y[i] = xa[i] / xb[i];
  if (out.requires_grad) {
    auto ad = a.data, bd = b.data, od = out.data, og = out.grad;
    auto ag = a.grad, bg = b.grad;
    attach(out, "div", {a, b}, [ad, bd, od, ag, bg, og, n]() {
      if (ag)
        for (int64_t i = 0; i < n; ++i) (*ag)[i] += (*og)[i] / (*bd)[i];
      if (bg)
        for (int64_t i = 0; i < n; ++i) (*bg)[i] -= (*og)[i] * (*od)[i] / (*bd)[i];
    });
  }
  return out;
}

namespace {

// Shared scaffold for elementwise unary ops: fn fills the output, dfn
// accumulates input gradient given (x, y, gout).
template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Bwd bwd) {
  check_defined(name, a);
  Tensor out = Tensor::zeros(a.shape, want_grad(a));
  const double* x = a.ptr();
  double* y = out.ptr();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) y[i] = fwd(x[i]);
  if (out.requires_grad) {
    auto ad = a.data, od = out.data, og = out.grad;
    auto ag = a.grad;
    attach(out, name, {a}, [ad, od, ag, og, n, bwd]() {
      if (!ag) return;
      for (int64_t i = 0; i < n; ++i) (*ag)[i] += bwd((*ad)[i], (*od)[i], (*og)[i]);
    });
  }
  return out;
}

}  // namespace

Tensor scale(const Tensor& a, double c) {
  return unary_op(
      "scale", a, [c](double x) { return x * c; },
      [c](double, double, double g) { return g * c; });
}

Tensor add_const(const Tensor& a, double c) {
  return unary_op(
      "add_const", a, [c](double x) { return x + c; },
      [](double, double, double g) { return g; });
}

Tensor neg(const Tensor& a) {
  return unary_op(
      "neg", a, [](double x) { return -x; }, [](double, double, double g) { return -g; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double, double g) { return x > 0.0 ? g : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y, double g) { return g * y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double, double g) { return g / x; });
}

Tensor clamp_min(const Tensor& a, double floor) {
  return unary_op(
      "clamp_min", a, [floor](double x) { return x > floor ? x : floor; },
      [floor](double x, double, double g) { return x > floor ? g : 0.0; });
}

Tensor minimum_const(const Tensor& a, double c) {
  return unary_op(
      "minimum_const", a, [c](double x) { return x < c ? x : c; },
      [c](double x, double, double g) { return x < c ? g : 0.0; });
}

Tensor logaddexp(const Tensor& a, const Tensor& b) {
  check_defined("logaddexp", a);
  check_defined("logaddexp", b);
  check_same_shape("logaddexp", a, b);
  Tensor out = Tensor::zeros(a.shape, want_grad(a, b));
  const double* xa = a.ptr();
  const double* xb = b.ptr();
  double* y = out.ptr();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) {
    const double hi = std::max(xa[i], xb[i]);
    const double lo = std::min(xa[i], xb[i]);
    y[i] = hi == kNegInf ? kNegInf : hi + std::log1p(std::exp(lo - hi));
  }
  if (out.requires_grad) {
    auto ad = a.data, bd = b.data, od = out.data, og = out.grad;
    auto ag = a.grad, bg = b.grad;
    attach(out, "logaddexp", {a, b}, [ad, bd, od, ag, bg, og, n]() {
      for (int64_t i = 0; i < n; ++i) {
        const double yv = (*od)[i];
        if (yv == kNegInf) continue;  // log of zero mass: nothing to move
        if (ag) (*ag)[i] += (*og)[i] * std::exp((*ad)[i] - yv);
        if (bg) (*bg)[i] += (*og)[i] * std::exp((*bd)[i] - yv);
      }
    });
  }
  return out;
}

Tensor masked_softmax(const Tensor& scores, const Tensor& mask) {
  check_2d("masked_softmax", scores);
  const bool has_mask = mask.defined();
  if (has_mask) {
    check_same_shape("masked_softmax", scores, mask);
    if (mask.requires_grad) {
      throw std::runtime_error("masked_softmax: mask must not require grad");
    }
  }
  const int n = scores.shape[0], m = scores.shape[1];
  Tensor out = Tensor::zeros({n, m}, want_grad(scores));
  const double* x = scores.ptr();
  const double* mk = has_mask ? mask.ptr() : nullptr;
  double* y = out.ptr();
  for (int i = 0; i < n; ++i) {
    const double* row = x + static_cast<int64_t>(i) * m;
    double* orow = y + static_cast<int64_t>(i) * m;
    double hi = kNegInf;
    int allowed = 0;
    for (int j = 0; j < m; ++j) {
      if (mk) {
        const double v = mk[static_cast<int64_t>(i) * m + j];
        if (v != 0.0 && v != 1.0) {
          throw std::runtime_error("masked_softmax: mask entries must be 0 or 1, got " +
                                   std::to_string(v));
        }
        if (v == 0.0) continue;
      }
      ++allowed;
      hi = std::max(hi, row[j]);
    }
    if (allowed == 0) {
      throw std::runtime_error("masked_softmax: row " + std::to_string(i) +
                               " has no allowed positions");
    }
    double denom = 0.0;
    for (int j = 0; j < m; ++j) {
      const bool on = !mk || mk[static_cast<int64_t>(i) * m + j] != 0.0;
      const double e = on ? std::exp(row[j] - hi) : 0.0;
      orow[j] = e;
      denom += e;
    }
    for (int j = 0; j < m; ++j) orow[j] /= denom;
  }
  if (out.requires_grad) {
    auto od = out.data, og = out.grad;
    auto ag = scores.grad;
    attach(out, "masked_softmax", {scores}, [od, og, ag, n, m]() {
      if (!ag) return;
      for (int i = 0; i < n; ++i) {
        const double* p = od->data() + static_cast<int64_t>(i) * m;
        const double* g = og->data() + static_cast<int64_t>(i) * m;
        double dot = 0.0;
        for (int j = 0; j < m; ++j) dot += g[j] * p[j];
        double* out_g = ag->data() + static_cast<int64_t>(i) * m;
        for (int j = 0; j < m; ++j) out_g[j] += p[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& a) {
  check_2d("log_softmax", a);
  const int n = a.shape[0], m = a.shape[1];
  Tensor out = Tensor::zeros({n, m}, want_grad(a));
  const double* x = a.ptr();
  double* y = out.ptr();
  for (int i = 0; i < n; ++i) {
    const double* row = x + static_cast<int64_t>(i) * m;
    double* orow = y + static_cast<int64_t>(i) * m;
    double hi = row[0];
    for (int j = 1; j < m; ++j) hi = std::max(hi, row[j]);
    double denom = 0.0;
    for (int j = 0; j < m; ++j) denom += std::exp(row[j] - hi);
    const double lse = hi + std::log(denom);
    for (int j = 0; j < m; ++j) orow[j] = row[j] - lse;
  }
  if (out.requires_grad) {
    auto od = out.data, og = out.grad;
    auto ag = a.grad;
    attach(out, "log_softmax", {a}, [od, og, ag, n, m]() {
      if (!ag) return;
      for (int i = 0; i < n; ++i) {
        const double* ly = od->data() + static_cast<int64_t>(i) * m;
        const double* g = og->data() + static_cast<int64_t>(i) * m;
        double gsum = 0.0;
        for (int j = 0; j < m; ++j) gsum += g[j];
        double* out_g = ag->data() + static_cast<int64_t>(i) * m;
        for (int j = 0; j < m; ++j) out_g[j] += g[j] - std::exp(ly[j]) * gsum;
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  check_2d("layer_norm", x);
  check_defined("layer_norm", gain);
  check_defined("layer_norm", bias);
  const int n = x.shape[0], m = x.shape[1];
  if (gain.ndim() != 1 || gain.shape[0] != m || bias.ndim() != 1 || bias.shape[0] != m) {
    throw std::runtime_error("layer_norm: gain/bias must be [" + std::to_string(m) + "], got " +
                             shape_str(gain.shape) + " and " + shape_str(bias.shape));
  }
  Tensor out = Tensor::zeros({n, m}, want_grad(x) || want_grad(gain) || want_grad(bias));
  // Cache the normalized rows and per-row inverse stddev for the backward.
  auto norm = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * m);
  auto inv_std = std::make_shared<std::vector<double>>(n);
  const double* xd = x.ptr();
  const double* gd = gain.ptr();
  const double* bd = bias.ptr();
  double* y = out.ptr();
  for (int i = 0; i < n; ++i) {
    const double* row = xd + static_cast<int64_t>(i) * m;
    double mean = 0.0;
    for (int j = 0; j < m; ++j) mean += row[j];
    mean /= m;
    double var = 0.0;
    for (int j = 0; j < m; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= m;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (int j = 0; j < m; ++j) {
      const double z = (row[j] - mean) * is;
      (*norm)[static_cast<size_t>(i) * m + j] = z;
      y[static_cast<int64_t>(i) * m + j] = z * gd[j] + bd[j];
    }
  }
  if (out.requires_grad) {
    auto og = out.grad;
    auto xg = x.grad, gg = gain.grad, bg = bias.grad;
    auto gain_d = gain.data;
    attach(out, "layer_norm", {x, gain, bias}, [og, xg, gg, bg, gain_d, norm, inv_std, n, m]() {
      for (int i = 0; i < n; ++i) {
        const double* g = og->data() + static_cast<int64_t>(i) * m;
        const double* z = norm->data() + static_cast<size_t>(i) * m;
        if (gg || bg) {
          for (int j = 0; j < m; ++j) {
            if (gg) (*gg)[j] += g[j] * z[j];
            if (bg) (*bg)[j] += g[j];
          }
        }
        if (xg) {
          double sum_gh = 0.0, sum_ghz = 0.0;
          for (int j = 0; j < m; ++j) {
            const double gh = g[j] * (*gain_d)[j];
            sum_gh += gh;
            sum_ghz += gh * z[j];
          }
          const double is = (*inv_std)[i];
          double* out_g = xg->data() + static_cast<int64_t>(i) * m;
          for (int j = 0; j < m; ++j) {
            const double gh = g[j] * (*gain_d)[j];
            out_g[j] += is * (gh - sum_gh / m - z[j] * sum_ghz / m);
          }
        }
      }
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  check_2d("embedding", table);
  const int v = table.shape[0], d = table.shape[1];
  const int n = static_cast<int>(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw std::runtime_error("embedding: id " + std::to_string(id) + " out of range for table " +
                               shape_str(table.shape));
    }
  }
  Tensor out = Tensor::zeros({n, d}, want_grad(table));
  const double* td = table.ptr();
  double* y = out.ptr();
  for (int i = 0; i < n; ++i) {
    std::copy(td + static_cast<int64_t>(ids[i]) * d, td + static_cast<int64_t>(ids[i] + 1) * d,
              y + static_cast<int64_t>(i) * d);
  }
  if (out.requires_grad) {
    auto tg = table.grad, og = out.grad;
    attach(out, "embedding", {table}, [tg, og, ids, d, n]() {
      if (!tg) return;
      for (int i = 0; i < n; ++i) {
        const double* g = og->data() + static_cast<int64_t>(i) * d;
        double* row = tg->data() + static_cast<int64_t>(ids[i]) * d;
        for (int j = 0; j < d; ++j) row[j] += g[j];
      }
    });
  }
  return out;
}

Tensor causal_conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  check_2d("causal_conv1d", x);
  check_2d("causal_conv1d", w);
  check_defined("causal_conv1d", b);
  if (stride < 1) throw std::runtime_error("causal_conv1d: stride must be >= 1");
  const int t_in = x.shape[0], c_in = x.shape[1];
  const int c_out = w.shape[1];
  if (w.shape[0] % c_in != 0) {
    throw std::runtime_error("causal_conv1d: weight rows " + shape_str(w.shape) +
                             " not a multiple of input channels " + std::to_string(c_in));
  }
  const int k = w.shape[0] / c_in;
  if (b.ndim() != 1 || b.shape[0] != c_out) {
    throw std::runtime_error("causal_conv1d: bias must be [" + std::to_string(c_out) + "], got " +
                             shape_str(b.shape));
  }
  const int t_out = (t_in + stride - 1) / stride;
  // im2col: row q of cols holds the k input frames ending at stride*q, with
  // zeros where the window reaches before the first frame.
  auto cols = std::make_shared<std::vector<double>>(static_cast<size_t>(t_out) * k * c_in, 0.0);
  const double* xd = x.ptr();
  for (int q = 0; q < t_out; ++q) {
    for (int i = 0; i < k; ++i) {
      const int src = stride * q - (k - 1) + i;
      if (src < 0) continue;
      std::copy(xd + static_cast<int64_t>(src) * c_in, xd + static_cast<int64_t>(src + 1) * c_in,
                cols->data() + (static_cast<size_t>(q) * k + i) * c_in);
    }
  }
  Tensor out = Tensor::zeros({t_out, c_out}, want_grad(x) || want_grad(w) || want_grad(b));
  double* y = out.ptr();
  const double* bp = b.ptr();
  for (int q = 0; q < t_out; ++q)
    for (int o = 0; o < c_out; ++o) y[static_cast<int64_t>(q) * c_out + o] = bp[o];
  kernels::gemm_nn(cols->data(), w.ptr(), y, t_out, k * c_in, c_out);
  if (out.requires_grad) {
    auto og = out.grad;
    auto xg = x.grad, wg = w.grad, bg = b.grad;
    auto wd = w.data;
    attach(out, "causal_conv1d", {x, w, b},
           [og, xg, wg, bg, wd, cols, t_out, t_in, c_in, c_out, k, stride]() {
             if (bg) {
               for (int q = 0; q < t_out; ++q)
                 for (int o = 0; o < c_out; ++o) (*bg)[o] += (*og)[static_cast<int64_t>(q) * c_out + o];
             }
             if (wg) {
               kernels::gemm_tn(cols->data(), og->data(), wg->data(), k * c_in, t_out, c_out);
             }
             if (xg) {
               std::vector<double> dcols(static_cast<size_t>(t_out) * k * c_in, 0.0);
               kernels::gemm_nt(og->data(), wd->data(), dcols.data(), t_out, c_out, k * c_in);
               for (int q = 0; q < t_out; ++q) {
                 for (int i = 0; i < k; ++i) {
                   const int src = stride * q - (k - 1) + i;
                   if (src < 0) continue;
                   const double* g = dcols.data() + (static_cast<size_t>(q) * k + i) * c_in;
                   double* row = xg->data() + static_cast<int64_t>(src) * c_in;
                   for (int c = 0; c < c_in; ++c) row[c] += g[c];
                 }
               }
             }
           });
  }
  return out;
}

Tensor mean_pool(const Tensor& x, int window) {
  check_2d("mean_pool", x);
  if (window < 1) throw std::runtime_error("mean_pool: window must be >= 1");
  const int t = x.shape[0], d = x.shape[1];
  const int groups = (t + window - 1) / window;
  Tensor out = Tensor::zeros({groups, d}, want_grad(x));
  const double* xd = x.ptr();
  double* y = out.ptr();
  for (int g = 0; g < groups; ++g) {
    const int lo = g * window;
    const int hi = std::min(lo + window, t);
    for (int r = lo; r < hi; ++r)
      for (int j = 0; j < d; ++j) y[static_cast<int64_t>(g) * d + j] += xd[static_cast<int64_t>(r) * d + j];
    for (int j = 0; j < d; ++j) y[static_cast<int64_t>(g) * d + j] /= (hi - lo);
  }
  if (out.requires_grad) {
    auto xg = x.grad, og = out.grad;
    attach(out, "mean_pool", {x}, [xg, og, t, d, window, groups]() {
      if (!xg) return;
      for (int g = 0; g < groups; ++g) {
        const int lo = g * window;
        const int hi = std::min(lo + window, t);
        const double inv = 1.0 / (hi - lo);
        for (int r = lo; r < hi; ++r)
          for (int j = 0; j < d; ++j)
            (*xg)[static_cast<int64_t>(r) * d + j] += (*og)[static_cast<int64_t>(g) * d + j] * inv;
      }
    });
  }
  return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  return concat_rows(std::vector<Tensor>{a, b});
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::runtime_error("concat_rows: no inputs");
  int total = 0;
  bool grad = false;
  const int m = parts[0].ndim() == 2 ? parts[0].shape[1] : -1;
  for (const Tensor& p : parts) {
    check_2d("concat_rows", p);
    if (p.shape[1] != m) {
      throw std::runtime_error("concat_rows: column mismatch " + shape_str(parts[0].shape) +
                               " vs " + shape_str(p.shape));
    }
    total += p.shape[0];
    grad = grad || want_grad(p);
  }
  Tensor out = Tensor::zeros({total, m}, grad);
  double* y = out.ptr();
  int row = 0;
  for (const Tensor& p : parts) {
    std::copy(p.ptr(), p.ptr() + p.numel(), y + static_cast<int64_t>(row) * m);
    row += p.shape[0];
  }
  if (out.requires_grad) {
    auto og = out.grad;
    std::vector<std::shared_ptr<std::vector<double>>> grads;
    std::vector<int> rows;
    for (const Tensor& p : parts) {
      grads.push_back(p.grad);
      rows.push_back(p.shape[0]);
    }
    attach(out, "concat_rows", parts, [og, grads, rows, m]() {
      int64_t off = 0;
      for (size_t i = 0; i < grads.size(); ++i) {
        const int64_t count = static_cast<int64_t>(rows[i]) * m;
        if (grads[i]) {
          for (int64_t j = 0; j < count; ++j) (*grads[i])[j] += (*og)[off + j];
        }
        off += count;
      }
    });
  }
  return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  return concat_cols(std::vector<Tensor>{a, b});
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::runtime_error("concat_cols: no inputs");
  const int n = parts[0].ndim() == 2 ? parts[0].shape[0] : -1;
  int total = 0;
  bool grad = false;
  for (const Tensor& p : parts) {
    check_2d("concat_cols", p);
    if (p.shape[0] != n) {
      throw std::runtime_error("concat_cols: row mismatch " + shape_str(parts[0].shape) + " vs " +
                               shape_str(p.shape));
    }
    total += p.shape[1];
    grad = grad || want_grad(p);
  }
  Tensor out = Tensor::zeros({n, total}, grad);
  double* y = out.ptr();
  int col = 0;
  for (const Tensor& p : parts) {
    const int m = p.shape[1];
    for (int i = 0; i < n; ++i) {
      std::copy(p.ptr() + static_cast<int64_t>(i) * m, p.ptr() + static_cast<int64_t>(i + 1) * m,
                y + static_cast<int64_t>(i) * total + col);
    }
    col += m;
  }
  if (out.requires_grad) {
    auto og = out.grad;
    std::vector<std::shared_ptr<std::vector<double>>> grads;
    std::vector<int> widths;
    for (const Tensor& p : parts) {
      grads.push_back(p.grad);
      widths.push_back(p.shape[1]);
    }
    attach(out, "concat_cols", parts, [og, grads, widths, n, total]() {
      int col = 0;
      for (size_t i = 0; i < grads.size(); ++i) {
        const int m = widths[i];
        if (grads[i]) {
          for (int r = 0; r < n; ++r)
            for (int j = 0; j < m; ++j)
              (*grads[i])[static_cast<int64_t>(r) * m + j] +=
                  (*og)[static_cast<int64_t>(r) * total + col + j];
        }
        col += m;
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& a, int start, int len) {
  check_2d("slice_rows", a);
  if (start < 0 || len < 0 || start + len > a.shape[0]) {
    throw std::runtime_error("slice_rows: range [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") out of bounds for " +
                             shape_str(a.shape));
  }
  const int m = a.shape[1];
  Tensor out = Tensor::zeros({len, m}, want_grad(a));
  std::copy(a.ptr() + static_cast<int64_t>(start) * m, a.ptr() + static_cast<int64_t>(start + len) * m,
            out.ptr());
  if (out.requires_grad) {
    auto ag = a.grad, og = out.grad;
    attach(out, "slice_rows", {a}, [ag, og, start, len, m]() {
      if (!ag) return;
      const int64_t off = static_cast<int64_t>(start) * m;
      const int64_t count = static_cast<int64_t>(len) * m;
      for (int64_t i = 0; i < count; ++i) (*ag)[off + i] += (*og)[i];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& a, int start, int len) {
  check_2d("slice_cols", a);
  if (start < 0 || len < 0 || start + len > a.shape[1]) {
    throw std::runtime_error("slice_cols: range [" + std::to_string(start) + "," +
                             std::to_string(start + len) + ") out of bounds for " +
                             shape_str(a.shape));
  }
  const int n = a.shape[0], m = a.shape[1];
  Tensor out = Tensor::zeros({n, len}, want_grad(a));
  const double* x = a.ptr();
  double* y = out.ptr();
  for (int i = 0; i < n; ++i) {
    std::copy(x + static_cast<int64_t>(i) * m + start, x + static_cast<int64_t>(i) * m + start + len,
              y + static_cast<int64_t>(i) * len);
  }
  if (out.requires_grad) {
    auto ag = a.grad, og = out.grad;
    attach(out, "slice_cols", {a}, [ag, og, start, len, n, m]() {
      if (!ag) return;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < len; ++j)
          (*ag)[static_cast<int64_t>(i) * m + start + j] += (*og)[static_cast<int64_t>(i) * len + j];
    });
  }
  return out;
}

Tensor repeat_rows(const Tensor& a, int repeat) {
  check_2d("repeat_rows", a);
  if (repeat < 1) throw std::runtime_error("repeat_rows: repeat must be >= 1");
  const int n = a.shape[0], m = a.shape[1];
  Tensor out = Tensor::zeros({n * repeat, m}, want_grad(a));
  const double* x = a.ptr();
  double* y = out.ptr();
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < repeat; ++r)
      std::copy(x + static_cast<int64_t>(i) * m, x + static_cast<int64_t>(i + 1) * m,
                y + (static_cast<int64_t>(i) * repeat + r) * m);
  if (out.requires_grad) {
    auto ag = a.grad, og = out.grad;
    attach(out, "repeat_rows", {a}, [ag, og, n, m, repeat]() {
      if (!ag) return;
      for (int i = 0; i < n; ++i)
        for (int r = 0; r < repeat; ++r)
          for (int j = 0; j < m; ++j)
            (*ag)[static_cast<int64_t>(i) * m + j] +=
                (*og)[(static_cast<int64_t>(i) * repeat + r) * m + j];
    });
  }
  return out;
}

Tensor replace_rows(const Tensor& base, const std::vector<int>& positions, const Tensor& rows) {
  check_2d("replace_rows", base);
  check_2d("replace_rows", rows);
  const int n = base.shape[0], m = base.shape[1];
  if (rows.shape[1] != m || rows.shape[0] != static_cast<int>(positions.size())) {
    throw std::runtime_error("replace_rows: replacement " + shape_str(rows.shape) +
                             " does not match " + std::to_string(positions.size()) +
                             " positions in " + shape_str(base.shape));
  }
  std::vector<char> seen(n, 0);
  for (int p : positions) {
    if (p < 0 || p >= n) {
      throw std::runtime_error("replace_rows: position " + std::to_string(p) +
                               " out of bounds for " + shape_str(base.shape));
    }
    if (seen[p]) throw std::runtime_error("replace_rows: duplicate position " + std::to_string(p));
    seen[p] = 1;
  }
  Tensor out = Tensor::zeros({n, m}, want_grad(base, rows));
  std::copy(base.ptr(), base.ptr() + base.numel(), out.ptr());
  for (size_t i = 0; i < positions.size(); ++i) {
    std::copy(rows.ptr() + static_cast<int64_t>(i) * m, rows.ptr() + static_cast<int64_t>(i + 1) * m,
              out.ptr() + static_cast<int64_t>(positions[i]) * m);
  }
  if (out.requires_grad) {
    auto bg = base.grad, rg = rows.grad, og = out.grad;
    attach(out, "replace_rows", {base, rows}, [bg, rg, og, positions, n, m]() {
      if (bg) {
        std::vector<char> replaced(n, 0);
        for (int p : positions) replaced[p] = 1;
        for (int i = 0; i < n; ++i) {
          if (replaced[i]) continue;
          for (int j = 0; j < m; ++j)
            (*bg)[static_cast<int64_t>(i) * m + j] += (*og)[static_cast<int64_t>(i) * m + j];
        }
      }
      if (rg) {
        for (size_t i = 0; i < positions.size(); ++i)
          for (int j = 0; j < m; ++j)
            (*rg)[static_cast<int64_t>(i) * m + j] +=
                (*og)[static_cast<int64_t>(positions[i]) * m + j];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape new_shape) {
  check_defined("reshape", a);
  int64_t n = 1;
  for (int d : new_shape) n *= d;
  if (n != a.numel()) {
    throw std::runtime_error("reshape: cannot view " + shape_str(a.shape) + " as " +
                             shape_str(new_shape));
  }
  Tensor out;
  out.shape = std::move(new_shape);
  out.data = a.data;  // shared storage: values and gradients alias the input
  if (want_grad(a)) {
    out.requires_grad = true;
    out.grad = a.grad;
    attach(out, "reshape", {a}, nullptr);
  }
  return out;
}

Tensor dropout(const Tensor& x, double rate, Rng* rng) {
  check_defined("dropout", x);
  if (rate < 0.0 || rate >= 1.0) {
    throw std::runtime_error("dropout: rate must be in [0,1), got " + std::to_string(rate));
  }
  if (rng == nullptr || rate == 0.0) return x;
  const int64_t n = x.numel();
  auto keep = std::make_shared<std::vector<double>>(n);
  const double inv_keep = 1.0 / (1.0 - rate);
  for (int64_t i = 0; i < n; ++i) (*keep)[i] = rng->uniform() >= rate ? inv_keep : 0.0;
  Tensor out = Tensor::zeros(x.shape, want_grad(x));
  const double* xd = x.ptr();
  double* y = out.ptr();
  for (int64_t i = 0; i < n; ++i) y[i] = xd[i] * (*keep)[i];
  if (out.requires_grad) {
    auto xg = x.grad, og = out.grad;
    attach(out, "dropout", {x}, [xg, og, keep, n]() {
      if (!xg) return;
      for (int64_t i = 0; i < n; ++i) (*xg)[i] += (*og)[i] * (*keep)[i];
    });
  }
  return out;
}

Tensor sum_all(const Tensor& a) {
  check_defined("sum_all", a);
  Tensor out = Tensor::zeros({1}, want_grad(a));
  const double* x = a.ptr();
  const int64_t n = a.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += x[i];
  (*out.data)[0] = acc;
  if (out.requires_grad) {
    auto ag = a.grad, og = out.grad;
    attach(out, "sum_all", {a}, [ag, og, n]() {
      if (!ag) return;
      const double g = (*og)[0];
      for (int64_t i = 0; i < n; ++i) (*ag)[i] += g;
    });
  }
  return out;
}

Tensor gather_entries(const Tensor& a, const std::vector<int64_t>& flat_indices) {
  check_defined("gather_entries", a);
  const int64_t limit = a.numel();
  for (int64_t idx : flat_indices) {
    if (idx < 0 || idx >= limit) {
      throw std::runtime_error("gather_entries: index " + std::to_string(idx) +
                               " out of bounds for " + shape_str(a.shape));
    }
  }
  const int n = static_cast<int>(flat_indices.size());
  Tensor out = Tensor::zeros({n}, want_grad(a));
  const double* x = a.ptr();
  double* y = out.ptr();
  for (int i = 0; i < n; ++i) y[i] = x[flat_indices[i]];
  if (out.requires_grad) {
    auto ag = a.grad, og = out.grad;
    attach(out, "gather_entries", {a}, [ag, og, flat_indices, n]() {
      if (!ag) return;
      for (int i = 0; i < n; ++i) (*ag)[flat_indices[i]] += (*og)[i];
    });
  }
  return out;
}

}  // namespace natstream::ops
