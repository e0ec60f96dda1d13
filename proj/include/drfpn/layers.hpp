#pragma once

#include <optional>

#include "drfpn/tensor.hpp"

namespace drfpn {

// Square-kernel convolution geometry. The model only uses k=1,s=1,p=0;
// k=3,s=1,p=1; and k=3,s=2,p=1.
struct ConvSpec {
    long in_channels = 1;
    long out_channels = 1;
    long kernel = 3;
    long stride = 1;
    long padding = 1;
    bool has_bias = true;

    long out_extent(long in) const { return (in + 2 * padding - kernel) / stride + 1; }
    long weight_count() const { return out_channels * in_channels * kernel * kernel; }
    long param_count() const { return weight_count() + (has_bias ? out_channels : 0); }
};

enum class Upsample { nearest, bilinear };

// Cross-correlation with zero padding. weight (out_c, in_c, k, k).
Tensor conv2d(const Tensor& x, const ConvSpec& spec, const Tensor& weight,
              const Tensor* bias = nullptr);

// Transposed convolution fixed at k=3, s=2, p=1, output_padding=1, so the
// output is exactly 2x the input in each spatial axis. weight (in_c, out_c, 3, 3).
// Value semantics: the input-gradient of the matched conv2d, applied forward.
Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor* bias = nullptr);

// Doubles H and W. Bilinear uses half-pixel-center alignment, border-clamped.
Tensor upsample2x(Upsample kind, const Tensor& x);

// Bilinear resize to an arbitrary extent, half-pixel-center alignment.
Tensor resize_bilinear(const Tensor& x, long h_out, long w_out);

// Samples src at per-pixel continuous coordinates. grid has shape
// (N, 2, H_out, W_out): channel 0 = x coordinate u, channel 1 = y coordinate v,
// in source-pixel units. Coordinates are clamped to [0,W-1]x[0,H-1] before
// weighting. Backward reaches both src values and grid coordinates.
Tensor grid_sample_bilinear(const Tensor& src, const Tensor& grid);

// (N,C,H,W) -> (N,C,1,1) mean over H*W.
Tensor global_avg_pool(const Tensor& x);

// (N,C,H,W) -> (N,C,b,b); bin (i,j) averages rows [floor(iH/b), ceil((i+1)H/b))
// and the analogous columns.
Tensor adaptive_avg_pool(const Tensor& x, long bins);

}  // namespace drfpn
