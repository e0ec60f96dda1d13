#pragma once

#include <string>

#include "drfpn/nn.hpp"
#include "drfpn/ops.hpp"

namespace drfpn {

// Where the channel gate reads its evidence from. Only `low` ships as the
// default; the alternatives exist for ablation parity.
enum class GateSource { low, high, add, cat };

// Channel Refinement Block: the low level gates the channels of the high
// level during bottom-up fusion.
struct CrbConfig {
    long channels = 256;
    long refine_kernel = 3;  // conv applied to the high level before gating
    long out_kernel = 3;     // conv producing the block output
    GateSource gate_source = GateSource::low;
};

// Registers gate, refine, down, out (and gate_cat for GateSource::cat).
void register_crb(ModelParams& reg, const std::string& prefix, const CrbConfig& cfg, Rng& rng);

// sigmoid(conv_gate(GAP(p_low))): shape (N,C,1,1), values strictly in (0,1).
Tensor crb_gate(const Tensor& p_low, ModelParams& reg, const std::string& prefix,
                const CrbConfig& cfg);

// conv_out(conv_refine(p_high) (.) alpha + conv_down(p_low)). p_low must be
// exactly 2x p_high in each spatial axis.
Tensor crb_fuse(const Tensor& p_low, const Tensor& p_high, const Tensor& alpha, ModelParams& reg,
                const std::string& prefix, const CrbConfig& cfg);

Tensor crb_forward(const Tensor& p_low, const Tensor& p_high, ModelParams& reg,
                   const std::string& prefix, const CrbConfig& cfg);

}  // namespace drfpn
