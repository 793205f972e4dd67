#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ule/error.hpp"

namespace ule {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

Index shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename Scalar>
class Tensor;

/// One recorded operation of the differentiation graph.
///
/// Parents are aligned with the operation's inputs; a null parent marks an
/// input that was a constant at recording time. Node ids grow monotonically,
/// so parents always carry smaller ids than their children.
template <typename Scalar>
struct Node {
  using Grads = std::vector<Tensor<Scalar>>;
  /// Maps the upstream gradient to one gradient per input. Entries whose
  /// `needed` flag is false may be left undefined.
  using Backward = std::function<Grads(const Tensor<Scalar>& upstream,
                                       const std::vector<bool>& needed)>;

  std::uint64_t id = 0;
  std::string op;
  Shape shape;
  std::vector<std::shared_ptr<Node>> parents;
  Backward backward;
};

std::uint64_t next_node_id();

/// Keeps large tensor buffers on the heap between training steps instead of
/// returning them to the OS after every operation (glibc only; no-op elsewhere).
void configure_allocator();

/// Thread-local switch deciding whether operations record graph nodes.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

/// RAII override of GradMode for a scope.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool on) : previous_(GradMode::enabled()) { GradMode::set_enabled(on); }
  ~GradModeGuard() { GradMode::set_enabled(previous_); }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

/// Scope in which no operation records graph nodes (evaluation).
class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

/// Dense row-major n-dimensional value, optionally linked into the active
/// differentiation graph.
///
/// Storage is immutable and shared between copies, so copying a tensor is
/// cheap and a tensor without a node may be read from several threads.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Tensor() = default;
  Tensor(Shape shape, Array values);

  static Tensor zeros(const Shape& shape);
  static Tensor ones(const Shape& shape);
  static Tensor full(const Shape& shape, Scalar value);
  static Tensor scalar(Scalar value);
  static Tensor from_vector(const Shape& shape, const std::vector<Scalar>& values);

  /// Graph-linked leaf: gradients can be taken with respect to it.
  static Tensor leaf(Shape shape, Array values);

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index extent(Index axis) const;
  Index size() const { return data_ ? data_->size() : 0; }

  const Array& values() const;
  const Scalar* data() const { return values().data(); }
  Scalar operator()(Index flat) const { return values()(flat); }
  Scalar item() const;

  bool on_graph() const { return static_cast<bool>(node_); }
  const NodePtr& node() const { return node_; }

  /// Same values, no graph linkage.
  Tensor detach() const;
  /// Same values as a fresh graph leaf.
  Tensor requires_grad() const;

  std::vector<Scalar> to_vector() const;

  /// Engine hook used by operations to attach their node.
  static Tensor with_node(Shape shape, std::shared_ptr<const Array> data, NodePtr node);
  const std::shared_ptr<const Array>& storage() const { return data_; }

 private:
  Shape shape_;
  std::shared_ptr<const Array> data_;
  NodePtr node_;
};

/// Gradient of a scalar `output` with respect to each tensor in `wrt`.
///
/// With `retain` set the backward pass records its own operations, so the
/// returned gradients are graph-linked and can be differentiated again. A wrt
/// tensor that the output does not depend on receives a zero tensor.
template <typename Scalar>
std::vector<Tensor<Scalar>> grad(const Tensor<Scalar>& output,
                                 const std::vector<Tensor<Scalar>>& wrt, bool retain = false);

/// Text adjacency list of the graph reachable from `output`, one node per line.
template <typename Scalar>
std::string dump_graph(const Tensor<Scalar>& output);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace ule
