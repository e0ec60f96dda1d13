#pragma once

#include "drfpn/tensor.hpp"

namespace drfpn {

// Pointwise arithmetic. b may share a's shape, or broadcast as (N,C,1,1)
// against (N,C,H,W) (per-channel gate) or as (N,1,H,W) (per-pixel weight).
// Backward sums over the broadcast axes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// x * k for a plain constant k (no gradient for k).
Tensor scale(const Tensor& x, double k);

// Channel concatenation; a's channels first. Backward splits at the boundary.
Tensor concat_channels(const Tensor& a, const Tensor& b);

// Channels [c_begin, c_end) of x.
Tensor slice_channels(const Tensor& x, long c_begin, long c_end);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Full reduction to a (1,1,1,1) scalar.
Tensor reduce_sum(const Tensor& x);
Tensor reduce_mean(const Tensor& x);

}  // namespace drfpn
