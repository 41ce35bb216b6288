#pragma once

// Shared helpers for the test binaries: seeded tensor construction, the
// central-difference gradient oracle, and error-message matching.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "natstream/ops.hpp"
#include "natstream/rng.hpp"
#include "natstream/tensor.hpp"

namespace test_util {

inline natstream::Tensor random_tensor(natstream::Shape shape, natstream::Rng& rng,
                                       bool requires_grad = true, double lo = -1.0,
                                       double hi = 1.0) {
  natstream::Tensor t = natstream::Tensor::zeros(std::move(shape), requires_grad);
  for (double& x : *t.data) x = lo + (hi - lo) * rng.uniform();
  return t;
}

// Scalar readout that weights every output entry differently, so gradient
// errors cannot cancel in a plain sum.
inline natstream::Tensor weighted_sum(const natstream::Tensor& t, natstream::Rng& rng) {
  natstream::Tensor w = random_tensor(t.shape, rng, false, 0.25, 1.25);
  return natstream::ops::sum_all(natstream::ops::mul(t, w));
}

using GraphFn = std::function<natstream::Tensor(const std::vector<natstream::Tensor>&)>;

// Central-difference gradient oracle: compares backward() against
// (f(x+h) - f(x-h)) / 2h elementwise for every parameter entry.
inline void check_fd(const char* label, const GraphFn& fn, std::vector<natstream::Tensor> params,
                     double tol = 1e-4, double h = 1e-5) {
  natstream::Tensor loss = fn(params);
  REQUIRE(loss.numel() == 1);
  natstream::backward(loss);
  for (size_t p = 0; p < params.size(); ++p) {
    natstream::Tensor& t = params[p];
    REQUIRE(t.grad != nullptr);
    for (int64_t i = 0; i < t.numel(); ++i) {
      const double orig = (*t.data)[i];
      double fp, fm;
      {
        natstream::NoGradGuard no_grad;
        (*t.data)[i] = orig + h;
        fp = fn(params).value();
        (*t.data)[i] = orig - h;
        fm = fn(params).value();
        (*t.data)[i] = orig;
      }
      const double fd = (fp - fm) / (2.0 * h);
      const double an = (*t.grad)[i];
      const double err = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
      INFO(label << ": param " << p << " entry " << i << " fd=" << fd << " grad=" << an);
      CHECK(err < tol);
    }
  }
}

inline bool message_contains(const std::function<void()>& f, const std::string& needle) {
  try {
    f();
  } catch (const std::runtime_error& e) {
    return std::string(e.what()).find(needle) != std::string::npos;
  }
  return false;
}

}  // namespace test_util
