#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "drfpn/crb.hpp"
#include "drfpn/srb.hpp"

namespace drfpn {

// Where the refinement blocks sit in the pyramid pathways.
enum class Placement {
    td_srb_bu_crb,  // SRB top-down, CRB bottom-up (default)
    td_crb_bu_srb,  // swapped
    td_srb_crb,     // both in the top-down pathway, no bottom-up
};

// Channel ladder of the toy backbone stages (C2..C5).
constexpr std::array<long, 4> kBackboneChannels{16, 32, 64, 128};

struct PyramidConfig {
    long channels = 256;
    // Channel counts of the incoming C2..C5 maps (the toy backbone's ladder
    // by default; overridable to feed the pyramid directly at desk scale).
    std::array<long, 4> in_channels = kBackboneChannels;
    bool srb_enabled = true;
    bool crb_enabled = true;
    bool ppm_enabled = true;
    Placement placement = Placement::td_srb_bu_crb;
    std::vector<long> ppm_bins = {1, 2, 3, 6};
    long compression = 4;
    Upsample upsample = Upsample::nearest;
    long crb_refine_kernel = 3;
    long crb_out_kernel = 3;
    bool srb_shared_stem = true;
    GateSource gate_source = GateSource::low;

    SrbConfig srb() const {
        return SrbConfig{channels, compression, srb_shared_stem, upsample};
    }
    CrbConfig crb() const {
        return CrbConfig{channels, crb_refine_kernel, crb_out_kernel, gate_source};
    }
    void validate() const;
};

// Ordered maps for levels 2..5 at strides 4/8/16/32. Adjacent levels differ
// by exactly 2x in each spatial extent.
struct PyramidLevels {
    std::array<Tensor, 4> maps;
    static constexpr std::array<long, 4> strides{4, 8, 16, 32};

    Tensor& level(int l) { return maps[l - 2]; }
    const Tensor& level(int l) const { return maps[l - 2]; }
    void validate() const;
};

// Full registry for the configured model, deterministic given config + seed.
ModelParams build_params(const PyramidConfig& cfg, std::uint64_t seed, bool with_head = true);

// Five strided 3x3 conv + relu stages over an (N,3,H,W) image, H and W
// divisible by 32; emits C2..C5 at strides 4/8/16/32.
PyramidLevels toy_backbone(const Tensor& image, ModelParams& reg);

// Pyramid pooling context over C5: per bin size adaptive pool -> 1x1 conv ->
// relu -> bilinear resize back, concatenated with c5 and reduced to C channels.
Tensor ppm_forward(const Tensor& c5, ModelParams& reg, const PyramidConfig& cfg);

// Plain FPN baseline: laterals, top-down upsample + add, per-level 3x3 out conv.
PyramidLevels fpn_forward(const PyramidLevels& levels, ModelParams& reg, const PyramidConfig& cfg);

// Full model per config. With all three toggles off this is exactly
// fpn_forward.
PyramidLevels drfpn_forward(const PyramidLevels& levels, const PyramidConfig& cfg, ModelParams& reg);

// Per-level 3x3 conv to a 1-channel heatmap (the harness's regression head).
Tensor head_forward(const Tensor& level_map, ModelParams& reg, int level, const PyramidConfig& cfg);

// Scalar counts per module group (first name component) plus "total".
std::map<std::string, long> param_count(const PyramidConfig& cfg, bool with_head = false);

}  // namespace drfpn
