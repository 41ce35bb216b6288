#include "natstream/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace natstream {

static int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::runtime_error("tensor: negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t;
  int64_t n = shape_numel(shape);
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<double>>(n, 0.0);
  t.requires_grad = requires_grad;
  if (requires_grad) t.grad = std::make_shared<std::vector<double>>(n, 0.0);
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& x : *t.data) x = value;
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(values.size())) {
    throw std::runtime_error("tensor: from() got " + std::to_string(values.size()) +
                             " values for shape " + shape_str(shape));
  }
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<double>>(std::move(values));
  t.requires_grad = requires_grad;
  if (requires_grad) t.grad = std::make_shared<std::vector<double>>(n, 0.0);
  return t;
}

int64_t Tensor::numel() const {
  return shape_numel(shape);
}

double Tensor::value() const {
  if (!data || numel() != 1) {
    throw std::runtime_error("tensor: value() requires a single-element tensor, got shape " +
                             shape_str(shape));
  }
  return (*data)[0];
}

Tensor Tensor::detach_copy() const {
  Tensor t;
  t.shape = shape;
  t.data = std::make_shared<std::vector<double>>(*data);
  return t;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() {
  return g_grad_enabled;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() {
  g_grad_enabled = previous_;
}

namespace {

// Iterative post-order over the op graph. Nodes are deduplicated by GraphNode
// pointer; the returned order has parents before children, so reversing it
// gives a valid order for the backward sweep.
std::vector<GraphNode*> topo_order(const Tensor& root) {
  std::vector<GraphNode*> order;
  if (!root.node) return order;
  std::unordered_set<GraphNode*> visited;
  struct Frame {
    GraphNode* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  visited.insert(root.node.get());
  stack.push_back({root.node.get(), 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      GraphNode* p = f.node->parents[f.next_parent].node.get();
      ++f.next_parent;
      if (p && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  return order;
}

void run_backward(const Tensor& root, bool zero_first) {
  if (root.numel() != 1) {
    throw std::runtime_error("backward: root must be scalar, got shape " + shape_str(root.shape));
  }
  if (!root.requires_grad || !root.grad) {
    throw std::runtime_error("backward: root does not require grad");
  }
  std::vector<GraphNode*> order = topo_order(root);
  if (zero_first) {
    // Zero every gradient buffer reachable from the root, deduplicated by
    // buffer address so shared views are cleared exactly once.
    std::unordered_set<std::vector<double>*> seen;
    auto clear = [&seen](const Tensor& t) {
      if (t.grad && seen.insert(t.grad.get()).second) {
        std::fill(t.grad->begin(), t.grad->end(), 0.0);
      }
    };
    clear(root);
    for (GraphNode* n : order) {
      for (const Tensor& p : n->parents) clear(p);
    }
  }
  (*root.grad)[0] += 1.0;
  // order has parents before children; walk it in reverse so each node's
  // output gradient is complete before its backward runs.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    GraphNode* n = *it;
    if (n->backward) n->backward();
  }
}

}  // namespace

void backward(const Tensor& root) {
  run_backward(root, /*zero_first=*/true);
}

void backward_accumulate(const Tensor& root) {
  run_backward(root, /*zero_first=*/false);
}

}  // namespace natstream
