#pragma once

#include <vector>

#include "rcc/tensor.hpp"

namespace rcc {

// Elementwise binary ops broadcast NumPy-style; incompatible shapes throw with
// both shapes in the message.
Shape broadcast_shapes(const Shape& a, const Shape& b, const char* opname);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // rejects zero denominators

Tensor add(const Tensor& a, double s);
Tensor sub(const Tensor& a, double s);
Tensor sub(double s, const Tensor& a);
Tensor mul(const Tensor& a, double s);
Tensor div(const Tensor& a, double s);
Tensor div(double s, const Tensor& a);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, s); }
inline Tensor operator-(double s, const Tensor& a) { return sub(s, a); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul(a, s); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, s); }
inline Tensor operator/(double s, const Tensor& a) { return div(s, a); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Batched matrix product: [..., M, K] x [..., K, N] -> [..., M, N] with the
// leading (batch) dims broadcast against each other.
Tensor matmul(const Tensor& a, const Tensor& b);

// Axis permutation, materialized as a contiguous copy.
Tensor transpose(const Tensor& a, const std::vector<int>& perm);

// Copy into a new shape; one dim may be -1 and is inferred.
Tensor reshape(const Tensor& a, Shape new_shape);

Tensor broadcast_to(const Tensor& a, const Shape& target);

Tensor concat(const std::vector<Tensor>& parts, int axis);
std::vector<Tensor> split(const Tensor& a, int axis,
                          const std::vector<int64_t>& sizes);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);   // rejects non-positive input
Tensor sqrt(const Tensor& a);  // rejects negative input
Tensor abs(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation

Tensor sum(const Tensor& a);  // full reduction to a scalar
Tensor sum(const Tensor& a, std::vector<int> axes, bool keepdims = false);
Tensor mean(const Tensor& a, std::vector<int> axes, bool keepdims = false);
// Ties route the gradient to the first maximal element.
Tensor max(const Tensor& a, std::vector<int> axes, bool keepdims = false);

}  // namespace rcc
