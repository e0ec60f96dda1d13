#pragma once

#include <string>

#include "drfpn/nn.hpp"
#include "drfpn/ops.hpp"

namespace drfpn {

// Spatial Refinement Block: learns per-pixel sampling offsets and a global
// weight map from adjacent-level context, warps the coarse map, and fuses.
struct SrbConfig {
    long channels = 256;      // C of both inputs
    long compression = 4;     // r; must divide C
    bool shared_stem = true;  // one relu trunk feeding both heads
    Upsample up = Upsample::nearest;
};

struct SrbSubnetOut {
    Tensor delta;  // (N,2,H,W) raw offsets; channel 0 = x, channel 1 = y
    Tensor omega;  // (N,1,H,W) sigmoid-activated weight map
};

// Registers the subnet convolutions under the prefix: compress_low,
// compress_high, deconv, trunk (shared-stem form only), delta, omega.
// The fusion's 3x3 output conv is registered by the caller.
void register_srb(ModelParams& reg, const std::string& prefix, const SrbConfig& cfg, Rng& rng);

// f_high at level l (coarse), f_low at level l-1 (exactly 2x finer, same C).
SrbSubnetOut srb_subnet(const Tensor& f_high, const Tensor& f_low, ModelParams& reg,
                        const std::string& prefix, const SrbConfig& cfg);

// Warps the coarse map to the fine resolution. The base grid maps fine pixel
// (i,j) to coarse coords by the half-pixel convention; raw offsets enter as
// 2*delta/(H_fine + W_fine), interpreted in coarse-pixel units.
Tensor srb_warp(const Tensor& f_high, const Tensor& delta);

// conv_out(omega (.) f_tilde + up(f_high) + f_low). out_conv names a 3x3
// C->C conv in the registry.
Tensor srb_fuse(const Tensor& f_tilde, const Tensor& omega, const Tensor& f_high,
                const Tensor& f_low, ModelParams& reg, const std::string& out_conv,
                const SrbConfig& cfg);

Tensor srb_forward(const Tensor& f_high, const Tensor& f_low, ModelParams& reg,
                   const std::string& prefix, const std::string& out_conv, const SrbConfig& cfg);

}  // namespace drfpn
