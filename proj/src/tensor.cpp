#include "ule/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "ule/ops.hpp"

namespace ule {

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

namespace {
thread_local bool grad_mode_enabled = true;
}

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool on) { grad_mode_enabled = on; }

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Array values) : shape_(std::move(shape)) {
  for (Index e : shape_) {
    if (e < 0) throw ShapeError("tensor: negative extent in shape " + shape_str(shape_));
  }
  if (shape_size(shape_) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape_) + " holds " + std::to_string(shape_size(shape_)) +
                     " values but " + std::to_string(values.size()) + " were given");
  }
  data_ = std::make_shared<const Array>(std::move(values));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(const Shape& shape) {
  return Tensor(shape, Array::Zero(shape_size(shape)));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::ones(const Shape& shape) {
  return Tensor(shape, Array::Ones(shape_size(shape)));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(const Shape& shape, Scalar value) {
  return Tensor(shape, Array::Constant(shape_size(shape), value));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value) {
  return Tensor(Shape{}, Array::Constant(1, value));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_vector(const Shape& shape, const std::vector<Scalar>& values) {
  Array a(static_cast<Index>(values.size()));
  std::copy(values.begin(), values.end(), a.data());
  return Tensor(shape, std::move(a));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::leaf(Shape shape, Array values) {
  return Tensor(std::move(shape), std::move(values)).requires_grad();
}

template <typename Scalar>
Index Tensor<Scalar>::extent(Index axis) const {
  if (axis < 0 || axis >= rank()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

template <typename Scalar>
const typename Tensor<Scalar>::Array& Tensor<Scalar>::values() const {
  if (!data_) throw Error("tensor: access to an undefined tensor");
  return *data_;
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not a scalar");
  return values()(0);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::requires_grad() const {
  auto node = std::make_shared<Node<Scalar>>();
  node->id = next_node_id();
  node->op = "leaf";
  node->shape = shape_;
  return with_node(shape_, data_, std::move(node));
}

template <typename Scalar>
std::vector<Scalar> Tensor<Scalar>::to_vector() const {
  const Array& a = values();
  return std::vector<Scalar>(a.data(), a.data() + a.size());
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::with_node(Shape shape, std::shared_ptr<const Array> data, NodePtr node) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(data);
  t.node_ = std::move(node);
  return t;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> grad(const Tensor<Scalar>& output, const std::vector<Tensor<Scalar>>& wrt,
                                 bool retain) {
  using NodeT = Node<Scalar>;
  if (output.size() != 1) {
    throw GradError("grad: output must be a scalar, got shape " + shape_str(output.shape()));
  }
  if (!output.on_graph()) throw GradError("grad: output is not on the active graph");
  for (const auto& w : wrt) {
    if (!w.on_graph()) throw GradError("grad: a wrt tensor is not on the active graph");
  }

  // Collect every node reachable from the output.
  std::vector<NodeT*> nodes;
  std::unordered_set<NodeT*> seen;
  std::vector<NodeT*> pending{output.node().get()};
  while (!pending.empty()) {
    NodeT* n = pending.back();
    pending.pop_back();
    if (!seen.insert(n).second) continue;
    nodes.push_back(n);
    for (const auto& p : n->parents) {
      if (p) pending.push_back(p.get());
    }
  }
  // Parents carry smaller ids, so ascending id order is a topological order.
  std::sort(nodes.begin(), nodes.end(), [](const NodeT* a, const NodeT* b) { return a->id < b->id; });

  std::unordered_set<const NodeT*> targets;
  for (const auto& w : wrt) targets.insert(w.node().get());

  // A node needs a gradient only when some wrt tensor lies at or below it.
  std::unordered_map<const NodeT*, bool> reaches;
  for (const NodeT* n : nodes) {
    bool r = targets.count(n) > 0;
    for (const auto& p : n->parents) {
      if (p && reaches[p.get()]) r = true;
    }
    reaches[n] = r;
  }

  std::unordered_map<const NodeT*, Tensor<Scalar>> grads;
  grads[output.node().get()] = Tensor<Scalar>::ones(output.shape());

  GradModeGuard mode(retain);
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    NodeT* n = *it;
    if (!reaches[n] || !n->backward) continue;
    auto found = grads.find(n);
    if (found == grads.end()) continue;
    std::vector<bool> needed(n->parents.size());
    bool any = false;
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      needed[i] = n->parents[i] && reaches[n->parents[i].get()];
      any = any || needed[i];
    }
    if (!any) continue;
    const Tensor<Scalar> upstream = found->second;
    if (!targets.count(n)) grads.erase(found);
    auto parent_grads = n->backward(upstream, needed);
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      if (!needed[i]) continue;
      const NodeT* p = n->parents[i].get();
      auto& g = parent_grads[i];
      if (!g.defined()) continue;
      auto slot = grads.find(p);
      if (slot == grads.end()) {
        grads.emplace(p, std::move(g));
      } else {
        slot->second = ops::add(slot->second, g);
      }
    }
  }

  std::vector<Tensor<Scalar>> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto found = grads.find(w.node().get());
    if (found == grads.end()) {
      result.push_back(Tensor<Scalar>::zeros(w.shape()));
    } else if (!retain) {
      result.push_back(found->second.detach());
    } else {
      result.push_back(found->second);
    }
  }
  return result;
}

template <typename Scalar>
std::string dump_graph(const Tensor<Scalar>& output) {
  using NodeT = Node<Scalar>;
  if (!output.on_graph()) return "";
  std::vector<const NodeT*> nodes;
  std::unordered_set<const NodeT*> seen;
  std::vector<const NodeT*> pending{output.node().get()};
  while (!pending.empty()) {
    const NodeT* n = pending.back();
    pending.pop_back();
    if (!seen.insert(n).second) continue;
    nodes.push_back(n);
    for (const auto& p : n->parents) {
      if (p) pending.push_back(p.get());
    }
  }
  std::sort(nodes.begin(), nodes.end(), [](const NodeT* a, const NodeT* b) { return a->id < b->id; });
  std::ostringstream os;
  for (const NodeT* n : nodes) {
    os << n->id << ' ' << n->op << ' ' << shape_str(n->shape) << " <-";
    for (const auto& p : n->parents) {
      if (p) {
        os << ' ' << p->id;
      } else {
        os << " const";
      }
    }
    os << '\n';
  }
  return os.str();
}

template class Tensor<float>;
template class Tensor<double>;
template std::vector<Tensor<float>> grad(const Tensor<float>&, const std::vector<Tensor<float>>&, bool);
template std::vector<Tensor<double>> grad(const Tensor<double>&, const std::vector<Tensor<double>>&, bool);
template std::string dump_graph(const Tensor<float>&);
template std::string dump_graph(const Tensor<double>&);

}  // namespace ule
