#include "ule/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

namespace ule::ops {

namespace {

template <typename S>
using Array = typename Tensor<S>::Array;
template <typename S>
using Grads = std::vector<Tensor<S>>;
template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Needed = std::vector<bool>;

template <typename S>
Tensor<S> record(const char* op, Shape shape, std::shared_ptr<const Array<S>> data,
                 std::vector<Tensor<S>> inputs, typename Node<S>::Backward backward) {
  bool linked = false;
  if (GradMode::enabled()) {
    for (const auto& in : inputs) linked = linked || in.on_graph();
  }
  if (!linked) return Tensor<S>::with_node(std::move(shape), std::move(data), nullptr);
  auto node = std::make_shared<Node<S>>();
  node->id = next_node_id();
  node->op = op;
  node->shape = shape;
  node->parents.reserve(inputs.size());
  for (const auto& in : inputs) node->parents.push_back(in.node());
  node->backward = std::move(backward);
  return Tensor<S>::with_node(std::move(shape), std::move(data), std::move(node));
}

template <typename S>
Tensor<S> make_op(const char* op, Shape shape, Array<S> values, std::vector<Tensor<S>> inputs,
                  typename Node<S>::Backward backward) {
  // A non-finite entry turns the product with zero into NaN; Eigen vectorizes this reduction.
  if (!std::isfinite((values * S(0)).sum())) throw NonFiniteError(std::string(op) + ": non-finite value in output");
  return record<S>(op, std::move(shape), std::make_shared<const Array<S>>(std::move(values)), std::move(inputs),
                   std::move(backward));
}

template <typename S>
Tensor<S> constant(const Shape& shape, Array<S> values) {
  return Tensor<S>(shape, std::move(values));
}

template <typename S>
void require_same(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename S>
void require_rank(const Tensor<S>& a, Index rank, const char* op) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(a.shape()));
  }
}

template <typename S>
void require_scalar(const Tensor<S>& s, const char* op) {
  if (s.size() != 1) throw ShapeError(std::string(op) + ": expected a one-element tensor, got " + shape_str(s.shape()));
}

template <typename S>
Eigen::Map<const RowMat<S>> as_matrix(const Tensor<S>& a) {
  return Eigen::Map<const RowMat<S>>(a.data(), a.extent(0), a.extent(1));
}

// Convolution kernels on raw row-major storage.
struct ConvDims {
  Index n, c, h, w, o, k, oh, ow;
  Index ckk() const { return c * k * k; }
  Index positions() const { return oh * ow; }
};

ConvDims conv_dims(const Shape& x, const Shape& w) {
  if (x.size() != 4 || w.size() != 4) {
    throw ShapeError("conv2d: expected input (N,C,H,W) and weight (O,C,K,K), got " + shape_str(x) + " and " +
                     shape_str(w));
  }
  if (x[1] != w[1] || w[2] != w[3] || x[2] < w[2] || x[3] < w[3]) {
    throw ShapeError("conv2d: incompatible input " + shape_str(x) + " and weight " + shape_str(w));
  }
  return {x[0], x[1], x[2], x[3], w[0], w[2], x[2] - w[2] + 1, x[3] - w[3] + 1};
}

template <typename S>
void im2col(const S* x, const ConvDims& d, RowMat<S>& cols) {
  for (Index c = 0; c < d.c; ++c) {
    for (Index ki = 0; ki < d.k; ++ki) {
      for (Index kj = 0; kj < d.k; ++kj) {
        S* row = cols.row((c * d.k + ki) * d.k + kj).data();
        for (Index i = 0; i < d.oh; ++i) {
          std::memcpy(row + i * d.ow, x + (c * d.h + i + ki) * d.w + kj, sizeof(S) * d.ow);
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const RowMat<S>& cols, const ConvDims& d, S* x) {
  for (Index c = 0; c < d.c; ++c) {
    for (Index ki = 0; ki < d.k; ++ki) {
      for (Index kj = 0; kj < d.k; ++kj) {
        const S* row = cols.row((c * d.k + ki) * d.k + kj).data();
        for (Index i = 0; i < d.oh; ++i) {
          S* dst = x + (c * d.h + i + ki) * d.w + kj;
          const S* src = row + i * d.ow;
          for (Index j = 0; j < d.ow; ++j) dst[j] += src[j];
        }
      }
    }
  }
}

template <typename S>
Array<S> conv_forward(const S* x, const S* w, const ConvDims& d) {
  Array<S> y(d.n * d.o * d.positions());
  Eigen::Map<const RowMat<S>> wm(w, d.o, d.ckk());
  RowMat<S> cols(d.ckk(), d.positions());
  for (Index n = 0; n < d.n; ++n) {
    im2col(x + n * d.c * d.h * d.w, d, cols);
    Eigen::Map<RowMat<S>>(y.data() + n * d.o * d.positions(), d.o, d.positions()).noalias() = wm * cols;
  }
  return y;
}

template <typename S>
Array<S> conv_backward_input(const S* g, const S* w, const ConvDims& d) {
  Array<S> dx = Array<S>::Zero(d.n * d.c * d.h * d.w);
  Eigen::Map<const RowMat<S>> wm(w, d.o, d.ckk());
  RowMat<S> cols(d.ckk(), d.positions());
  for (Index n = 0; n < d.n; ++n) {
    Eigen::Map<const RowMat<S>> gn(g + n * d.o * d.positions(), d.o, d.positions());
    cols.noalias() = wm.transpose() * gn;
    col2im_add(cols, d, dx.data() + n * d.c * d.h * d.w);
  }
  return dx;
}

template <typename S>
Array<S> conv_backward_weight(const S* x, const S* g, const ConvDims& d) {
  Array<S> dw = Array<S>::Zero(d.o * d.ckk());
  Eigen::Map<RowMat<S>> dwm(dw.data(), d.o, d.ckk());
  RowMat<S> cols(d.ckk(), d.positions());
  for (Index n = 0; n < d.n; ++n) {
    im2col(x + n * d.c * d.h * d.w, d, cols);
    Eigen::Map<const RowMat<S>> gn(g + n * d.o * d.positions(), d.o, d.positions());
    dwm.noalias() += gn * cols.transpose();
  }
  return dw;
}

Shape conv_output_shape(const ConvDims& d) { return {d.n, d.o, d.oh, d.ow}; }

}  // namespace

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  require_same(a, b, "add");
  return make_op<S>("add", a.shape(), a.values() + b.values(), {a, b},
                    [](const Tensor<S>& g, const Needed&) { return Grads<S>{g, g}; });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  require_same(a, b, "sub");
  return make_op<S>("sub", a.shape(), a.values() - b.values(), {a, b}, [](const Tensor<S>& g, const Needed& need) {
    return Grads<S>{g, need[1] ? scalar_mul(g, S(-1)) : Tensor<S>()};
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  require_same(a, b, "mul");
  return make_op<S>("mul", a.shape(), a.values() * b.values(), {a, b},
                    [a, b](const Tensor<S>& g, const Needed& need) {
                      return Grads<S>{need[0] ? mul(g, b) : Tensor<S>(), need[1] ? mul(g, a) : Tensor<S>()};
                    });
}

template <typename S>
Tensor<S> scalar_mul(const Tensor<S>& a, S factor) {
  return make_op<S>("scalar_mul", a.shape(), a.values() * factor, {a},
                    [factor](const Tensor<S>& g, const Needed&) { return Grads<S>{scalar_mul(g, factor)}; });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, const Tensor<S>& s) {
  require_scalar(s, "scale");
  return make_op<S>("scale", a.shape(), a.values() * s.item(), {a, s},
                    [a, s](const Tensor<S>& g, const Needed& need) {
                      return Grads<S>{need[0] ? scale(g, s) : Tensor<S>(),
                                      need[1] ? reshape(sum(mul(g, a)), s.shape()) : Tensor<S>()};
                    });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  const Index n = a.size();
  const S* in = a.data();
  Array<S> m(n);
  Array<S> out(n);
  for (Index i = 0; i < n; ++i) {
    const bool on = in[i] > S(0);
    m(i) = on ? S(1) : S(0);
    out(i) = on ? in[i] : S(0);
  }
  Tensor<S> mask = constant<S>(a.shape(), std::move(m));
  return make_op<S>("relu", a.shape(), std::move(out), {a},
                    [mask](const Tensor<S>& g, const Needed&) { return Grads<S>{mul(g, mask)}; });
}

template <typename S>
Tensor<S> abs(const Tensor<S>& a) {
  Array<S> sign = (a.values() > S(0)).template cast<S>() - (a.values() < S(0)).template cast<S>();
  Tensor<S> signs = constant<S>(a.shape(), sign);
  return make_op<S>("abs", a.shape(), a.values().abs(), {a},
                    [signs](const Tensor<S>& g, const Needed&) { return Grads<S>{mul(g, signs)}; });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  return make_op<S>("log", a.shape(), a.values().log(), {a},
                    [a](const Tensor<S>& g, const Needed&) { return Grads<S>{mul(g, reciprocal(a))}; });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  return make_op<S>("exp", a.shape(), a.values().exp(), {a},
                    [a](const Tensor<S>& g, const Needed&) { return Grads<S>{mul(g, exp(a))}; });
}

template <typename S>
Tensor<S> reciprocal(const Tensor<S>& a) {
  return make_op<S>("reciprocal", a.shape(), a.values().inverse(), {a}, [a](const Tensor<S>& g, const Needed&) {
    Tensor<S> r = reciprocal(a);
    return Grads<S>{mul(g, scalar_mul(mul(r, r), S(-1)))};
  });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  Array<S> v(1);
  v(0) = a.values().sum();
  return make_op<S>("sum", Shape{}, std::move(v), {a}, [shape = a.shape()](const Tensor<S>& g, const Needed&) {
    return Grads<S>{scale(Tensor<S>::ones(shape), g)};
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  return scalar_mul(sum(a), S(1) / static_cast<S>(a.size()));
}

template <typename S>
Tensor<S> max_abs(const Tensor<S>& a) {
  if (a.size() == 0) throw ShapeError("max_abs: empty tensor");
  const Array<S>& v = a.values();
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i) {
    if (std::abs(v(i)) > std::abs(v(best))) best = i;
  }
  Array<S> sel = Array<S>::Zero(v.size());
  sel(best) = v(best) > 0 ? S(1) : (v(best) < 0 ? S(-1) : S(0));
  Tensor<S> selector = constant<S>(a.shape(), std::move(sel));
  Array<S> out(1);
  out(0) = std::abs(v(best));
  return make_op<S>("max_abs", Shape{}, std::move(out), {a},
                    [selector](const Tensor<S>& g, const Needed&) { return Grads<S>{scale(selector, g)}; });
}

template <typename S>
Tensor<S> max_abs_rows(const Tensor<S>& a, S floor) {
  require_rank(a, 2, "max_abs_rows");
  const Index rows = a.extent(0), cols = a.extent(1);
  if (cols == 0) throw ShapeError("max_abs_rows: rows are empty in " + shape_str(a.shape()));
  auto m = as_matrix(a);
  Array<S> out(rows);
  Array<S> sel = Array<S>::Zero(rows * cols);
  for (Index r = 0; r < rows; ++r) {
    Index best = 0;
    for (Index k = 1; k < cols; ++k) {
      if (std::abs(m(r, k)) > std::abs(m(r, best))) best = k;
    }
    const S peak = std::abs(m(r, best));
    if (peak >= floor) {
      out(r) = peak;
      sel(r * cols + best) = m(r, best) > 0 ? S(1) : S(-1);
    } else {
      out(r) = floor;
    }
  }
  Tensor<S> selector = constant<S>(a.shape(), std::move(sel));
  return make_op<S>("max_abs_rows", Shape{rows}, std::move(out), {a},
                    [selector](const Tensor<S>& g, const Needed&) { return Grads<S>{scale_rows(selector, g)}; });
}

template <typename S>
Tensor<S> scale_rows(const Tensor<S>& a, const Tensor<S>& s) {
  require_rank(a, 2, "scale_rows");
  if (s.rank() != 1 || s.extent(0) != a.extent(0)) {
    throw ShapeError("scale_rows: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(s.shape()));
  }
  const Index rows = a.extent(0), cols = a.extent(1);
  Array<S> out(rows * cols);
  Eigen::Map<RowMat<S>>(out.data(), rows, cols) =
      s.values().matrix().asDiagonal() * as_matrix(a);
  return make_op<S>("scale_rows", a.shape(), std::move(out), {a, s}, [a, s](const Tensor<S>& g, const Needed& need) {
    return Grads<S>{need[0] ? scale_rows(g, s) : Tensor<S>(), need[1] ? row_sums(mul(g, a)) : Tensor<S>()};
  });
}

template <typename S>
Tensor<S> divide_rows(const Tensor<S>& a, const Tensor<S>& s) {
  require_rank(a, 2, "divide_rows");
  if (s.rank() != 1 || s.extent(0) != a.extent(0)) {
    throw ShapeError("divide_rows: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(s.shape()));
  }
  const Index rows = a.extent(0), cols = a.extent(1);
  Array<S> out(rows * cols);
  Eigen::Map<RowMat<S>>(out.data(), rows, cols) =
      (as_matrix(a).array().colwise() / s.values()).matrix();
  return make_op<S>("divide_rows", a.shape(), std::move(out), {a, s}, [a, s](const Tensor<S>& g, const Needed& need) {
    return Grads<S>{need[0] ? divide_rows(g, s) : Tensor<S>(),
                    need[1] ? scalar_mul(row_sums(mul(g, divide_rows(a, mul(s, s)))), S(-1)) : Tensor<S>()};
  });
}

template <typename S>
Tensor<S> row_sums(const Tensor<S>& a) {
  require_rank(a, 2, "row_sums");
  const Index cols = a.extent(1);
  Array<S> out = as_matrix(a).rowwise().sum().array();
  return make_op<S>("row_sums", Shape{a.extent(0)}, std::move(out), {a}, [cols](const Tensor<S>& g, const Needed&) {
    return Grads<S>{broadcast_cols(g, cols)};
  });
}

template <typename S>
Tensor<S> broadcast_cols(const Tensor<S>& v, Index cols) {
  require_rank(v, 1, "broadcast_cols");
  const Index rows = v.extent(0);
  Array<S> out(rows * cols);
  Eigen::Map<RowMat<S>>(out.data(), rows, cols) = v.values().matrix().replicate(1, cols);
  return make_op<S>("broadcast_cols", Shape{rows, cols}, std::move(out), {v},
                    [](const Tensor<S>& g, const Needed&) { return Grads<S>{row_sums(g)}; });
}

template <typename S>
Tensor<S> col_sums(const Tensor<S>& a) {
  require_rank(a, 2, "col_sums");
  const Index rows = a.extent(0);
  Array<S> out = as_matrix(a).colwise().sum().transpose().array();
  return make_op<S>("col_sums", Shape{a.extent(1)}, std::move(out), {a}, [rows](const Tensor<S>& g, const Needed&) {
    return Grads<S>{broadcast_rows(g, rows)};
  });
}

template <typename S>
Tensor<S> broadcast_rows(const Tensor<S>& v, Index rows) {
  require_rank(v, 1, "broadcast_rows");
  const Index cols = v.extent(0);
  Array<S> out(rows * cols);
  Eigen::Map<RowMat<S>>(out.data(), rows, cols) = v.values().matrix().transpose().replicate(rows, 1);
  return make_op<S>("broadcast_rows", Shape{rows, cols}, std::move(out), {v},
                    [](const Tensor<S>& g, const Needed&) { return Grads<S>{col_sums(g)}; });
}

template <typename S>
Tensor<S> add_row_bias(const Tensor<S>& a, const Tensor<S>& bias) {
  require_rank(a, 2, "add_row_bias");
  if (bias.rank() != 1 || bias.extent(0) != a.extent(1)) {
    throw ShapeError("add_row_bias: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(bias.shape()));
  }
  return add(a, broadcast_rows(bias, a.extent(0)));
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Index m = a.extent(0), n = b.extent(1);
  Array<S> out(m * n);
  Eigen::Map<RowMat<S>>(out.data(), m, n).noalias() = as_matrix(a) * as_matrix(b);
  return make_op<S>("matmul", Shape{m, n}, std::move(out), {a, b}, [a, b](const Tensor<S>& g, const Needed& need) {
    return Grads<S>{need[0] ? matmul(g, transpose(b)) : Tensor<S>(), need[1] ? matmul(transpose(a), g) : Tensor<S>()};
  });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  require_rank(a, 2, "transpose");
  const Index rows = a.extent(0), cols = a.extent(1);
  Array<S> out(rows * cols);
  Eigen::Map<RowMat<S>>(out.data(), cols, rows) = as_matrix(a).transpose();
  return make_op<S>("transpose", Shape{cols, rows}, std::move(out), {a},
                    [](const Tensor<S>& g, const Needed&) { return Grads<S>{transpose(g)}; });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, const Shape& shape) {
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return record<S>("reshape", shape, a.storage(), {a}, [from = a.shape()](const Tensor<S>& g, const Needed&) {
    return Grads<S>{reshape(g, from)};
  });
}

template <typename S>
Tensor<S> stack(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("stack: no tensors given");
  const Shape& inner = parts.front().shape();
  const Index step = parts.front().size();
  Array<S> out(step * static_cast<Index>(parts.size()));
  for (std::size_t i = 0; i < parts.size(); ++i) {
    require_same(parts.front(), parts[i], "stack");
    out.segment(static_cast<Index>(i) * step, step) = parts[i].values();
  }
  Shape shape{static_cast<Index>(parts.size())};
  shape.insert(shape.end(), inner.begin(), inner.end());
  return make_op<S>("stack", shape, std::move(out), parts, [](const Tensor<S>& g, const Needed& need) {
    Grads<S> gs(need.size());
    for (std::size_t i = 0; i < need.size(); ++i) {
      if (need[i]) gs[i] = select(g, static_cast<Index>(i));
    }
    return gs;
  });
}

template <typename S>
Tensor<S> select(const Tensor<S>& a, Index index) {
  if (a.rank() < 1 || index < 0 || index >= a.extent(0)) {
    throw ShapeError("select: index " + std::to_string(index) + " out of range for " + shape_str(a.shape()));
  }
  Shape inner(a.shape().begin() + 1, a.shape().end());
  const Index step = shape_size(inner);
  Array<S> out = a.values().segment(index * step, step);
  return make_op<S>("select", inner, std::move(out), {a},
                    [index, count = a.extent(0)](const Tensor<S>& g, const Needed&) {
                      return Grads<S>{embed(g, index, count)};
                    });
}

template <typename S>
Tensor<S> embed(const Tensor<S>& v, Index index, Index count) {
  if (index < 0 || index >= count) throw ShapeError("embed: index out of range");
  Shape shape{count};
  shape.insert(shape.end(), v.shape().begin(), v.shape().end());
  Array<S> out = Array<S>::Zero(count * v.size());
  out.segment(index * v.size(), v.size()) = v.values();
  return make_op<S>("embed", shape, std::move(out), {v},
                    [index](const Tensor<S>& g, const Needed&) { return Grads<S>{select(g, index)}; });
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w) {
  const ConvDims d = conv_dims(x.shape(), w.shape());
  return make_op<S>("conv2d", conv_output_shape(d), conv_forward(x.data(), w.data(), d), {x, w},
                    [x, w](const Tensor<S>& g, const Needed& need) {
                      return Grads<S>{need[0] ? conv2d_input_grad(g, w, x.shape()) : Tensor<S>(),
                                      need[1] ? conv2d_weight_grad(x, g, w.shape()) : Tensor<S>()};
                    });
}

template <typename S>
Tensor<S> conv2d_input_grad(const Tensor<S>& upstream, const Tensor<S>& w, const Shape& input_shape) {
  const ConvDims d = conv_dims(input_shape, w.shape());
  if (upstream.shape() != conv_output_shape(d)) {
    throw ShapeError("conv2d_input_grad: upstream " + shape_str(upstream.shape()) + " does not match output " +
                     shape_str(conv_output_shape(d)));
  }
  return make_op<S>("conv2d_input_grad", input_shape, conv_backward_input(upstream.data(), w.data(), d), {upstream, w},
                    [upstream, w](const Tensor<S>& g, const Needed& need) {
                      return Grads<S>{need[0] ? conv2d(g, w) : Tensor<S>(),
                                      need[1] ? conv2d_weight_grad(g, upstream, w.shape()) : Tensor<S>()};
                    });
}

template <typename S>
Tensor<S> conv2d_weight_grad(const Tensor<S>& x, const Tensor<S>& upstream, const Shape& weight_shape) {
  const ConvDims d = conv_dims(x.shape(), weight_shape);
  if (upstream.shape() != conv_output_shape(d)) {
    throw ShapeError("conv2d_weight_grad: upstream " + shape_str(upstream.shape()) + " does not match output " +
                     shape_str(conv_output_shape(d)));
  }
  return make_op<S>("conv2d_weight_grad", weight_shape, conv_backward_weight(x.data(), upstream.data(), d),
                    {x, upstream}, [x, upstream](const Tensor<S>& g, const Needed& need) {
                      return Grads<S>{need[0] ? conv2d_input_grad(upstream, g, x.shape()) : Tensor<S>(),
                                      need[1] ? conv2d(x, g) : Tensor<S>()};
                    });
}

template <typename S>
Tensor<S> channel_sums(const Tensor<S>& x) {
  require_rank(x, 4, "channel_sums");
  const Index n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  Array<S> out = Array<S>::Zero(c);
  for (Index i = 0; i < n; ++i) {
    for (Index ch = 0; ch < c; ++ch) out(ch) += x.values().segment((i * c + ch) * hw, hw).sum();
  }
  return make_op<S>("channel_sums", Shape{c}, std::move(out), {x},
                    [shape = x.shape()](const Tensor<S>& g, const Needed&) {
                      return Grads<S>{channel_broadcast(g, shape)};
                    });
}

template <typename S>
Tensor<S> channel_broadcast(const Tensor<S>& bias, const Shape& shape) {
  if (shape.size() != 4 || bias.rank() != 1 || bias.extent(0) != shape[1]) {
    throw ShapeError("channel_broadcast: bias " + shape_str(bias.shape()) + " does not fit " + shape_str(shape));
  }
  const Index n = shape[0], c = shape[1], hw = shape[2] * shape[3];
  Array<S> out(n * c * hw);
  for (Index i = 0; i < n; ++i) {
    for (Index ch = 0; ch < c; ++ch) out.segment((i * c + ch) * hw, hw).setConstant(bias(ch));
  }
  return make_op<S>("channel_broadcast", shape, std::move(out), {bias},
                    [](const Tensor<S>& g, const Needed&) { return Grads<S>{channel_sums(g)}; });
}

template <typename S>
Tensor<S> add_channel_bias(const Tensor<S>& x, const Tensor<S>& bias) {
  require_rank(x, 4, "add_channel_bias");
  if (bias.rank() != 1 || bias.extent(0) != x.extent(1)) {
    throw ShapeError("add_channel_bias: bias " + shape_str(bias.shape()) + " does not fit " + shape_str(x.shape()));
  }
  const Index n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  Array<S> out = x.values();
  for (Index i = 0; i < n; ++i) {
    for (Index ch = 0; ch < c; ++ch) out.segment((i * c + ch) * hw, hw) += bias(ch);
  }
  return make_op<S>("add_channel_bias", x.shape(), std::move(out), {x, bias}, [](const Tensor<S>& g, const Needed& need) {
    return Grads<S>{g, need[1] ? channel_sums(g) : Tensor<S>()};
  });
}

template <typename S>
Tensor<S> maxpool2d(const Tensor<S>& x) {
  require_rank(x, 4, "maxpool2d");
  const Index n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  const Index oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) throw ShapeError("maxpool2d: input too small " + shape_str(x.shape()));
  auto index = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n * c * oh * ow));
  Array<S> out(n * c * oh * ow);
  const S* v = x.data();
  Index o = 0;
  for (Index plane = 0; plane < n * c; ++plane) {
    const Index base = plane * h * w;
    for (Index i = 0; i < oh; ++i) {
      for (Index j = 0; j < ow; ++j, ++o) {
        Index best = base + (2 * i) * w + 2 * j;
        for (Index di = 0; di < 2; ++di) {
          for (Index dj = 0; dj < 2; ++dj) {
            const Index at = base + (2 * i + di) * w + 2 * j + dj;
            if (v[at] > v[best]) best = at;
          }
        }
        (*index)[static_cast<std::size_t>(o)] = best;
        out(o) = v[best];
      }
    }
  }
  std::shared_ptr<const std::vector<Index>> idx = index;
  return make_op<S>("maxpool2d", Shape{n, c, oh, ow}, std::move(out), {x},
                    [idx, shape = x.shape()](const Tensor<S>& g, const Needed&) {
                      return Grads<S>{scatter(g, idx, shape)};
                    });
}

template <typename S>
Tensor<S> gather(const Tensor<S>& x, std::shared_ptr<const std::vector<Index>> index, const Shape& out_shape) {
  if (static_cast<Index>(index->size()) != shape_size(out_shape)) {
    throw ShapeError("gather: index count does not match output " + shape_str(out_shape));
  }
  Array<S> out(shape_size(out_shape));
  for (std::size_t i = 0; i < index->size(); ++i) out(static_cast<Index>(i)) = x((*index)[i]);
  return make_op<S>("gather", out_shape, std::move(out), {x},
                    [index, shape = x.shape()](const Tensor<S>& g, const Needed&) {
                      return Grads<S>{scatter(g, index, shape)};
                    });
}

template <typename S>
Tensor<S> scatter(const Tensor<S>& v, std::shared_ptr<const std::vector<Index>> index, const Shape& out_shape) {
  if (static_cast<Index>(index->size()) != v.size()) {
    throw ShapeError("scatter: index count does not match values " + shape_str(v.shape()));
  }
  Array<S> out = Array<S>::Zero(shape_size(out_shape));
  for (std::size_t i = 0; i < index->size(); ++i) out((*index)[i]) += v(static_cast<Index>(i));
  return make_op<S>("scatter", out_shape, std::move(out), {v},
                    [index, shape = v.shape()](const Tensor<S>& g, const Needed&) {
                      return Grads<S>{gather(g, index, shape)};
                    });
}

template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double p, bool train, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ArgumentError("dropout: p must lie in [0, 1), got " + std::to_string(p));
  if (!train || p == 0.0) return x;
  const S keep_scale = S(1) / static_cast<S>(1.0 - p);
  Array<S> m(x.size());
  for (Index i = 0; i < m.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    m(i) = u < p ? S(0) : keep_scale;
  }
  Tensor<S> mask = constant<S>(x.shape(), m);
  return make_op<S>("dropout", x.shape(), x.values() * m, {x},
                    [mask](const Tensor<S>& g, const Needed&) { return Grads<S>{mul(g, mask)}; });
}

template <typename S>
Tensor<S> softmax(const Tensor<S>& logits) {
  require_rank(logits, 2, "softmax");
  const Index rows = logits.extent(0), cols = logits.extent(1);
  Array<S> out(rows * cols);
  auto in = as_matrix(logits);
  Eigen::Map<RowMat<S>> y(out.data(), rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const S peak = in.row(r).maxCoeff();
    y.row(r) = (in.row(r).array() - peak).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return make_op<S>("softmax", logits.shape(), std::move(out), {logits},
                    [logits, cols](const Tensor<S>& g, const Needed&) {
                      Tensor<S> y = softmax(logits);
                      return Grads<S>{mul(y, sub(g, broadcast_cols(row_sums(mul(g, y)), cols)))};
                    });
}

template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const Tensor<S>& target) {
  require_rank(logits, 2, "cross_entropy");
  require_same(logits, target, "cross_entropy");
  const Index rows = logits.extent(0);
  if (rows == 0) throw ShapeError("cross_entropy: empty batch");
  auto in = as_matrix(logits);
  auto t = as_matrix(target);
  S total = 0;
  for (Index r = 0; r < rows; ++r) {
    const S peak = in.row(r).maxCoeff();
    const S lse = peak + std::log((in.row(r).array() - peak).exp().sum());
    total += (t.row(r).array() * (lse - in.row(r).array())).sum();
  }
  Array<S> out(1);
  out(0) = total / static_cast<S>(rows);
  return make_op<S>("cross_entropy", Shape{}, std::move(out), {logits, target},
                    [logits, target, rows](const Tensor<S>& g, const Needed& need) {
                      Grads<S> gs(2);
                      if (need[0]) {
                        gs[0] = scale(scalar_mul(sub(softmax(logits), target), S(1) / static_cast<S>(rows)), g);
                      }
                      return gs;
                    });
}

template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.size() != b.size() || a.size() == 0) {
    throw ShapeError("mse: size mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Shape flat{a.size()};
  Tensor<S> d = sub(reshape(a, flat), reshape(b, flat));
  return mean(mul(d, d));
}

template <typename S>
Tensor<S> l1(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.size() != b.size() || a.size() == 0) {
    throw ShapeError("l1: size mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Shape flat{a.size()};
  return mean(abs(sub(reshape(a, flat), reshape(b, flat))));
}

template <typename S>
Tensor<S> one_hot(const std::vector<int>& labels, Index classes) {
  const Index rows = static_cast<Index>(labels.size());
  Array<S> out = Array<S>::Zero(rows * classes);
  for (Index r = 0; r < rows; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= classes) throw ArgumentError("one_hot: label " + std::to_string(y) + " out of range");
    out(r * classes + y) = S(1);
  }
  return Tensor<S>(Shape{rows, classes}, std::move(out));
}

template <typename S>
std::vector<int> argmax_rows(const Tensor<S>& a) {
  require_rank(a, 2, "argmax_rows");
  auto m = as_matrix(a);
  std::vector<int> out(static_cast<std::size_t>(a.extent(0)));
  for (Index r = 0; r < a.extent(0); ++r) {
    Index best = 0;
    for (Index k = 1; k < a.extent(1); ++k) {
      if (m(r, k) > m(r, best)) best = k;
    }
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

#define ULE_INSTANTIATE_OPS(S)                                                                               \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                                \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                                \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                                \
  template Tensor<S> scalar_mul(const Tensor<S>&, S);                                                        \
  template Tensor<S> scale(const Tensor<S>&, const Tensor<S>&);                                              \
  template Tensor<S> relu(const Tensor<S>&);                                                                 \
  template Tensor<S> abs(const Tensor<S>&);                                                                  \
  template Tensor<S> log(const Tensor<S>&);                                                                  \
  template Tensor<S> exp(const Tensor<S>&);                                                                  \
  template Tensor<S> reciprocal(const Tensor<S>&);                                                           \
  template Tensor<S> sum(const Tensor<S>&);                                                                  \
  template Tensor<S> mean(const Tensor<S>&);                                                                 \
  template Tensor<S> max_abs(const Tensor<S>&);                                                              \
  template Tensor<S> max_abs_rows(const Tensor<S>&, S);                                                      \
  template Tensor<S> scale_rows(const Tensor<S>&, const Tensor<S>&);                                         \
  template Tensor<S> divide_rows(const Tensor<S>&, const Tensor<S>&);                                        \
  template Tensor<S> row_sums(const Tensor<S>&);                                                             \
  template Tensor<S> broadcast_cols(const Tensor<S>&, Index);                                                \
  template Tensor<S> col_sums(const Tensor<S>&);                                                             \
  template Tensor<S> broadcast_rows(const Tensor<S>&, Index);                                                \
  template Tensor<S> add_row_bias(const Tensor<S>&, const Tensor<S>&);                                       \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                             \
  template Tensor<S> transpose(const Tensor<S>&);                                                            \
  template Tensor<S> reshape(const Tensor<S>&, const Shape&);                                                \
  template Tensor<S> stack(const std::vector<Tensor<S>>&);                                                   \
  template Tensor<S> select(const Tensor<S>&, Index);                                                        \
  template Tensor<S> embed(const Tensor<S>&, Index, Index);                                                  \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&);                                             \
  template Tensor<S> conv2d_input_grad(const Tensor<S>&, const Tensor<S>&, const Shape&);                    \
  template Tensor<S> conv2d_weight_grad(const Tensor<S>&, const Tensor<S>&, const Shape&);                   \
  template Tensor<S> add_channel_bias(const Tensor<S>&, const Tensor<S>&);                                   \
  template Tensor<S> channel_sums(const Tensor<S>&);                                                         \
  template Tensor<S> channel_broadcast(const Tensor<S>&, const Shape&);                                      \
  template Tensor<S> maxpool2d(const Tensor<S>&);                                                            \
  template Tensor<S> gather(const Tensor<S>&, std::shared_ptr<const std::vector<Index>>, const Shape&);      \
  template Tensor<S> scatter(const Tensor<S>&, std::shared_ptr<const std::vector<Index>>, const Shape&);     \
  template Tensor<S> dropout(const Tensor<S>&, double, bool, std::mt19937_64&);                              \
  template Tensor<S> softmax(const Tensor<S>&);                                                              \
  template Tensor<S> cross_entropy(const Tensor<S>&, const Tensor<S>&);                                      \
  template Tensor<S> mse(const Tensor<S>&, const Tensor<S>&);                                                \
  template Tensor<S> l1(const Tensor<S>&, const Tensor<S>&);                                                 \
  template Tensor<S> one_hot(const std::vector<int>&, Index);                                                \
  template std::vector<int> argmax_rows(const Tensor<S>&);

ULE_INSTANTIATE_OPS(float)
ULE_INSTANTIATE_OPS(double)

#undef ULE_INSTANTIATE_OPS

}  // namespace ule::ops
