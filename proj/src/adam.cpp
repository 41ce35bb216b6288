#include "natstream/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace natstream {

void adam_step(const std::vector<NamedTensor>& params, AdamState& state, double lr,
               const AdamConfig& cfg) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      const size_t n = params[i].tensor->data->size();
      state.m[i].assign(n, 0.0);
      state.v[i].assign(n, 0.0);
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::runtime_error("adam: state tracks " + std::to_string(state.m.size()) +
                             " parameters but step got " + std::to_string(params.size()));
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].tensor;
    if (!p.grad) {
      throw std::runtime_error("adam: parameter " + params[i].name + " has no gradient buffer");
    }
    const size_t n = p.data->size();
    if (state.m[i].size() != n) {
      throw std::runtime_error("adam: parameter " + params[i].name +
                               " changed size since the state was created");
    }
    std::vector<double>& m = state.m[i];
    std::vector<double>& v = state.v[i];
    for (size_t j = 0; j < n; ++j) {
      const double g = (*p.grad)[j];
      if (!std::isfinite(g)) {
        throw std::runtime_error("adam: non-finite gradient in parameter " + params[i].name);
      }
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      (*p.data)[j] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

}  // namespace natstream
