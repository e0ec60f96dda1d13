#include "drfpn/srb.hpp"

namespace drfpn {

namespace {

void check_pair(const Tensor& f_high, const Tensor& f_low, const SrbConfig& cfg) {
    if (f_high.shape.c != cfg.channels || f_low.shape.c != cfg.channels) {
        throw ShapeError("srb: inputs must have " + std::to_string(cfg.channels) + " channels, got " +
                         f_high.shape.str() + " and " + f_low.shape.str());
    }
    if (f_low.shape.h != 2 * f_high.shape.h || f_low.shape.w != 2 * f_high.shape.w ||
        f_low.shape.n != f_high.shape.n) {
        throw ShapeError("srb: resolution must be exactly 2:1, got " + f_high.shape.str() + " vs " +
                         f_low.shape.str());
    }
    if (cfg.channels % cfg.compression != 0) {
        throw ShapeError("srb: compression " + std::to_string(cfg.compression) +
                         " does not divide C=" + std::to_string(cfg.channels));
    }
}

}  // namespace

void register_srb(ModelParams& reg, const std::string& prefix, const SrbConfig& cfg, Rng& rng) {
    const long c = cfg.channels;
    const long cr = c / cfg.compression;
    register_conv(reg, prefix + ".compress_low", ConvSpec{c, cr, 1, 1, 0, true}, rng);
    register_conv(reg, prefix + ".compress_high", ConvSpec{c, cr, 1, 1, 0, true}, rng);
    register_deconv(reg, prefix + ".deconv", cr, cr, rng);
    const long head_in = cfg.shared_stem ? cr : 2 * cr;
    if (cfg.shared_stem) {
        register_conv(reg, prefix + ".trunk", ConvSpec{2 * cr, cr, 3, 1, 1, true}, rng);
    }
    register_conv(reg, prefix + ".delta", ConvSpec{head_in, 2, 3, 1, 1, true}, rng, Init::zero);
    register_conv(reg, prefix + ".omega", ConvSpec{head_in, 1, 3, 1, 1, true}, rng, Init::zero);
}

SrbSubnetOut srb_subnet(const Tensor& f_high, const Tensor& f_low, ModelParams& reg,
                        const std::string& prefix, const SrbConfig& cfg) {
    check_pair(f_high, f_low, cfg);
    const long c = cfg.channels;
    const long cr = c / cfg.compression;
    Tensor low_c = apply_conv(f_low, reg, prefix + ".compress_low", ConvSpec{c, cr, 1, 1, 0, true});
    Tensor high_c =
        apply_conv(f_high, reg, prefix + ".compress_high", ConvSpec{c, cr, 1, 1, 0, true});
    Tensor high_up = apply_deconv(high_c, reg, prefix + ".deconv");
    Tensor cat = concat_channels(high_up, low_c);
    Tensor head_in = cat;
    long in_c = 2 * cr;
    if (cfg.shared_stem) {
        head_in = relu(apply_conv(cat, reg, prefix + ".trunk", ConvSpec{2 * cr, cr, 3, 1, 1, true}));
        in_c = cr;
    }
    SrbSubnetOut out;
    out.delta = apply_conv(head_in, reg, prefix + ".delta", ConvSpec{in_c, 2, 3, 1, 1, true});
    out.omega =
        sigmoid(apply_conv(head_in, reg, prefix + ".omega", ConvSpec{in_c, 1, 3, 1, 1, true}));
    return out;
}

Tensor srb_warp(const Tensor& f_high, const Tensor& delta) {
    const Shape4 ds = delta.shape;
    if (ds.c != 2) throw ShapeError("srb_warp: delta must have 2 channels, got " + ds.str());
    if (ds.h != 2 * f_high.shape.h || ds.w != 2 * f_high.shape.w || ds.n != f_high.shape.n) {
        throw ShapeError("srb_warp: delta " + ds.str() + " is not 2x of " + f_high.shape.str());
    }
    // Base grid: fine pixel -> coarse coordinate, half-pixel centers.
    Tensor base = Tensor::zeros(ds);
    for (long n = 0; n < ds.n; ++n) {
        for (long i = 0; i < ds.h; ++i) {
            for (long j = 0; j < ds.w; ++j) {
                base.at(n, 0, i, j) = (static_cast<double>(j) + 0.5) / 2.0 - 0.5;
                base.at(n, 1, i, j) = (static_cast<double>(i) + 0.5) / 2.0 - 0.5;
            }
        }
    }
    const double norm = 2.0 / static_cast<double>(ds.h + ds.w);
    Tensor grid = add(base, scale(delta, norm));
    return grid_sample_bilinear(f_high, grid);
}

Tensor srb_fuse(const Tensor& f_tilde, const Tensor& omega, const Tensor& f_high,
                const Tensor& f_low, ModelParams& reg, const std::string& out_conv,
                const SrbConfig& cfg) {
    if (!(f_tilde.shape == f_low.shape)) {
        throw ShapeError("srb_fuse: f_tilde " + f_tilde.shape.str() + " vs f_low " +
                         f_low.shape.str());
    }
    if (omega.shape.c != 1 || omega.shape.h != f_low.shape.h || omega.shape.w != f_low.shape.w) {
        throw ShapeError("srb_fuse: omega " + omega.shape.str());
    }
    Tensor fused = add(add(mul(f_tilde, omega), upsample2x(cfg.up, f_high)), f_low);
    return apply_conv(fused, reg, out_conv, ConvSpec{cfg.channels, cfg.channels, 3, 1, 1, true});
}

Tensor srb_forward(const Tensor& f_high, const Tensor& f_low, ModelParams& reg,
                   const std::string& prefix, const std::string& out_conv, const SrbConfig& cfg) {
    SrbSubnetOut sub = srb_subnet(f_high, f_low, reg, prefix, cfg);
    Tensor f_tilde = srb_warp(f_high, sub.delta);
    return srb_fuse(f_tilde, sub.omega, f_high, f_low, reg, out_conv, cfg);
}

}  // namespace drfpn
