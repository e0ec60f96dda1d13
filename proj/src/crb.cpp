#include "drfpn/crb.hpp"

#include "drfpn/layers.hpp"

namespace drfpn {

namespace {

void check_pair(const Tensor& p_low, const Tensor& p_high, const CrbConfig& cfg) {
    if (p_low.shape.c != cfg.channels || p_high.shape.c != cfg.channels) {
        throw ShapeError("crb: inputs must have " + std::to_string(cfg.channels) + " channels, got " +
                         p_low.shape.str() + " and " + p_high.shape.str());
    }
    if (p_low.shape.h != 2 * p_high.shape.h || p_low.shape.w != 2 * p_high.shape.w ||
        p_low.shape.n != p_high.shape.n) {
        throw ShapeError("crb: resolution must be exactly 2:1, got " + p_low.shape.str() + " vs " +
                         p_high.shape.str());
    }
}

ConvSpec gate_spec(const CrbConfig& cfg) {
    const long in = cfg.gate_source == GateSource::cat ? 2 * cfg.channels : cfg.channels;
    return ConvSpec{in, cfg.channels, 1, 1, 0, true};
}

ConvSpec refine_spec(const CrbConfig& cfg) {
    const long k = cfg.refine_kernel;
    return ConvSpec{cfg.channels, cfg.channels, k, 1, k / 2, true};
}

ConvSpec out_spec(const CrbConfig& cfg) {
    const long k = cfg.out_kernel;
    return ConvSpec{cfg.channels, cfg.channels, k, 1, k / 2, true};
}

ConvSpec down_spec(const CrbConfig& cfg) { return ConvSpec{cfg.channels, cfg.channels, 3, 2, 1, true}; }

}  // namespace

void register_crb(ModelParams& reg, const std::string& prefix, const CrbConfig& cfg, Rng& rng) {
    register_conv(reg, prefix + ".gate", gate_spec(cfg), rng, Init::zero);
    register_conv(reg, prefix + ".refine", refine_spec(cfg), rng);
    register_conv(reg, prefix + ".down", down_spec(cfg), rng);
    register_conv(reg, prefix + ".out", out_spec(cfg), rng);
}

Tensor crb_gate(const Tensor& p_low, ModelParams& reg, const std::string& prefix,
                const CrbConfig& cfg) {
    Tensor pooled = global_avg_pool(p_low);
    return sigmoid(apply_conv(pooled, reg, prefix + ".gate", gate_spec(cfg)));
}

Tensor crb_fuse(const Tensor& p_low, const Tensor& p_high, const Tensor& alpha, ModelParams& reg,
                const std::string& prefix, const CrbConfig& cfg) {
    check_pair(p_low, p_high, cfg);
    if (!(alpha.shape == Shape4{p_low.shape.n, cfg.channels, 1, 1})) {
        throw ShapeError("crb_fuse: alpha " + alpha.shape.str());
    }
    Tensor refined = apply_conv(p_high, reg, prefix + ".refine", refine_spec(cfg));
    Tensor down = apply_conv(p_low, reg, prefix + ".down", down_spec(cfg));
    Tensor fused = add(mul(refined, alpha), down);
    return apply_conv(fused, reg, prefix + ".out", out_spec(cfg));
}

Tensor crb_forward(const Tensor& p_low, const Tensor& p_high, ModelParams& reg,
                   const std::string& prefix, const CrbConfig& cfg) {
    check_pair(p_low, p_high, cfg);
    Tensor alpha;
    switch (cfg.gate_source) {
        case GateSource::low:
            alpha = crb_gate(p_low, reg, prefix, cfg);
            break;
        case GateSource::high:
            alpha = sigmoid(apply_conv(global_avg_pool(p_high), reg, prefix + ".gate", gate_spec(cfg)));
            break;
        case GateSource::add: {
            Tensor down = apply_conv(p_low, reg, prefix + ".down", down_spec(cfg));
            alpha = sigmoid(
                apply_conv(global_avg_pool(add(down, p_high)), reg, prefix + ".gate", gate_spec(cfg)));
            break;
        }
        case GateSource::cat: {
            Tensor lo = global_avg_pool(p_low);
            Tensor hi = global_avg_pool(p_high);
            alpha = sigmoid(
                apply_conv(concat_channels(lo, hi), reg, prefix + ".gate", gate_spec(cfg)));
            break;
        }
    }
    return crb_fuse(p_low, p_high, alpha, reg, prefix, cfg);
}

}  // namespace drfpn
