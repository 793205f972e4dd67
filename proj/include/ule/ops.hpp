#pragma once

#include <random>
#include <vector>

#include "ule/tensor.hpp"

/// Differentiable tensor operations.
///
/// Every operation records a node when GradMode is on and at least one input
/// is graph-linked. Backward rules are written in terms of these same
/// operations, which is what makes second-order gradients available.
namespace ule::ops {

// Elementwise, equal shapes.
template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> scalar_mul(const Tensor<S>& a, S factor);
/// a * s where s is a one-element tensor; differentiable in both.
template <typename S> Tensor<S> scale(const Tensor<S>& a, const Tensor<S>& s);
template <typename S> Tensor<S> relu(const Tensor<S>& a);
template <typename S> Tensor<S> abs(const Tensor<S>& a);
template <typename S> Tensor<S> log(const Tensor<S>& a);
template <typename S> Tensor<S> exp(const Tensor<S>& a);
template <typename S> Tensor<S> reciprocal(const Tensor<S>& a);

// Reductions to a one-element tensor of shape {}.
template <typename S> Tensor<S> sum(const Tensor<S>& a);
template <typename S> Tensor<S> mean(const Tensor<S>& a);
/// max |a|; ties go to the lowest flat index.
template <typename S> Tensor<S> max_abs(const Tensor<S>& a);

// Row-wise helpers over a (rows x cols) matrix.
/// max(max_k |a[r,k]|, floor) per row, shape {rows}; zero gradient where floored.
template <typename S> Tensor<S> max_abs_rows(const Tensor<S>& a, S floor);
/// a[r,:] * s[r]
template <typename S> Tensor<S> scale_rows(const Tensor<S>& a, const Tensor<S>& s);
template <typename S> Tensor<S> divide_rows(const Tensor<S>& a, const Tensor<S>& s);  // row i divided by s(i)
/// sum_k a[r,k], shape {rows}
template <typename S> Tensor<S> row_sums(const Tensor<S>& a);
/// v[r] repeated across `cols` columns
template <typename S> Tensor<S> broadcast_cols(const Tensor<S>& v, Index cols);
/// sum_r a[r,k], shape {cols}
template <typename S> Tensor<S> col_sums(const Tensor<S>& a);
/// v[k] repeated across `rows` rows
template <typename S> Tensor<S> broadcast_rows(const Tensor<S>& v, Index rows);
/// a + bias broadcast over rows
template <typename S> Tensor<S> add_row_bias(const Tensor<S>& a, const Tensor<S>& bias);

// Structure.
template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> transpose(const Tensor<S>& a);
template <typename S> Tensor<S> reshape(const Tensor<S>& a, const Shape& shape);
/// Stacks equally shaped tensors along a new leading axis.
template <typename S> Tensor<S> stack(const std::vector<Tensor<S>>& parts);
/// a[index] along the leading axis.
template <typename S> Tensor<S> select(const Tensor<S>& a, Index index);
/// Zero tensor with leading extent `count` holding v at `index`.
template <typename S> Tensor<S> embed(const Tensor<S>& v, Index index, Index count);

// Convolution: x (N,C,H,W), w (O,C,K,K); stride 1, no padding.
template <typename S> Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w);
/// Adjoint of conv2d in its input.
template <typename S>
Tensor<S> conv2d_input_grad(const Tensor<S>& upstream, const Tensor<S>& w, const Shape& input_shape);
/// Adjoint of conv2d in its weights.
template <typename S>
Tensor<S> conv2d_weight_grad(const Tensor<S>& x, const Tensor<S>& upstream, const Shape& weight_shape);
/// x (N,C,H,W) + b[c]
template <typename S> Tensor<S> add_channel_bias(const Tensor<S>& x, const Tensor<S>& bias);
template <typename S> Tensor<S> channel_sums(const Tensor<S>& x);
template <typename S> Tensor<S> channel_broadcast(const Tensor<S>& bias, const Shape& shape);

/// 2x2 max pooling with stride 2 over (N,C,H,W); ties go to the first element in scan order.
template <typename S> Tensor<S> maxpool2d(const Tensor<S>& x);
/// out[i] = x[index[i]]
template <typename S>
Tensor<S> gather(const Tensor<S>& x, std::shared_ptr<const std::vector<Index>> index, const Shape& out_shape);
/// out[index[i]] += v[i], zero elsewhere
template <typename S>
Tensor<S> scatter(const Tensor<S>& v, std::shared_ptr<const std::vector<Index>> index, const Shape& out_shape);

/// Inverted dropout. Identity when `train` is false or p == 0.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double p, bool train, std::mt19937_64& rng);

// Classification.
/// Softmax over the last axis of a (rows x classes) matrix.
template <typename S> Tensor<S> softmax(const Tensor<S>& logits);
/// Mean over rows of -sum_k target[r,k] * log softmax(logits)[r,k]. Target must be one-hot.
template <typename S> Tensor<S> cross_entropy(const Tensor<S>& logits, const Tensor<S>& target);
/// mean((a - b)^2) over all elements.
template <typename S> Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b);
/// mean(|a - b|) over all elements.
template <typename S> Tensor<S> l1(const Tensor<S>& a, const Tensor<S>& b);

/// Row-major one-hot matrix of shape (labels.size(), classes).
template <typename S> Tensor<S> one_hot(const std::vector<int>& labels, Index classes);
/// Per-row argmax of a (rows x cols) matrix; ties go to the lowest column.
template <typename S> std::vector<int> argmax_rows(const Tensor<S>& a);

template <typename S> Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S> Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S> Tensor<S> operator*(S c, const Tensor<S>& a) { return scalar_mul(a, c); }

}  // namespace ule::ops
