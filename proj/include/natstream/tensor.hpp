#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace natstream {

using Shape = std::vector<int>;

struct GraphNode;

// Dense row-major tensor of 64-bit floats. Copies are shallow: they share
// the same data and gradient buffers, which is what lets GraphNode hold its
// parents by value.
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  std::shared_ptr<std::vector<double>> grad;  // allocated iff requires_grad
  std::shared_ptr<GraphNode> node;            // creator op, null for leaves
  bool requires_grad = false;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);

  int64_t numel() const;
  bool defined() const { return static_cast<bool>(data); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  double* ptr() { return data->data(); }
  const double* ptr() const { return data->data(); }
  double* grad_ptr() { return grad->data(); }
  const double* grad_ptr() const { return grad->data(); }

  double value() const;  // scalar read, throws unless numel() == 1
  double at(int i) const { return (*data)[i]; }
  double at(int i, int j) const { return (*data)[static_cast<int64_t>(i) * shape[1] + j]; }

  // Detached copy of the raw values (no graph, no grad).
  Tensor detach_copy() const;
};

struct GraphNode {
  const char* op = "";
  std::vector<Tensor> parents;
  // Accumulates into each parent's grad buffer. The lambda captures the
  // output's data/grad buffers by value (shared_ptr), never the output
  // tensor itself, so nodes do not own themselves.
  std::function<void()> backward;
};

std::string shape_str(const Shape& s);

// Thread-local switch; while disabled, ops skip graph construction even for
// tensors flagged requires_grad.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Runs reverse-mode differentiation from a scalar root. Every gradient
// buffer reachable from the root is zeroed first, so repeated calls on the
// same graph produce identical results.
void backward(const Tensor& root);

// Same traversal without the zeroing pass; gradients add into whatever the
// buffers already hold. Used to accumulate across per-utterance graphs.
void backward_accumulate(const Tensor& root);

}  // namespace natstream
