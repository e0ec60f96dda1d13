#include "drfpn/pyramid.hpp"

#include <algorithm>

namespace drfpn {

namespace {

ConvSpec lateral_spec(long in_c, long c) { return ConvSpec{in_c, c, 1, 1, 0, true}; }
ConvSpec output_spec(long c) { return ConvSpec{c, c, 3, 1, 1, true}; }

std::string level_name(const std::string& base, int l) { return base + "." + std::to_string(l); }

}  // namespace

void PyramidConfig::validate() const {
    if (channels < 1) throw ConfigError("channels must be positive");
    if (compression < 1 || channels % compression != 0) {
        throw ConfigError("compression must divide channels");
    }
    if (ppm_bins.empty()) throw ConfigError("ppm_bins must not be empty");
    for (long b : ppm_bins) {
        if (b < 1) throw ConfigError("ppm bin sizes must be positive");
    }
    if (ppm_enabled && in_channels[3] % static_cast<long>(ppm_bins.size()) != 0) {
        throw ConfigError("ppm branch count must divide the C5 channel count");
    }
    if (crb_refine_kernel != 1 && crb_refine_kernel != 3) throw ConfigError("crb refine kernel must be 1 or 3");
    if (crb_out_kernel != 1 && crb_out_kernel != 3) throw ConfigError("crb out kernel must be 1 or 3");
    if (placement != Placement::td_srb_bu_crb && !(srb_enabled && crb_enabled)) {
        throw ConfigError("alternative placements require both SRB and CRB enabled");
    }
}

void PyramidLevels::validate() const {
    for (int i = 0; i < 4; ++i) {
        if (!maps[i].defined()) throw ShapeError("pyramid level " + std::to_string(i + 2) + " undefined");
    }
    for (int i = 0; i < 3; ++i) {
        const Shape4& fine = maps[i].shape;
        const Shape4& coarse = maps[i + 1].shape;
        if (fine.h != 2 * coarse.h || fine.w != 2 * coarse.w || fine.n != coarse.n) {
            throw ShapeError("pyramid levels " + std::to_string(i + 2) + "/" + std::to_string(i + 3) +
                             " are not 2:1: " + fine.str() + " vs " + coarse.str());
        }
    }
}

ModelParams build_params(const PyramidConfig& cfg, std::uint64_t seed, bool with_head) {
    cfg.validate();
    ModelParams reg;
    Rng rng(seed);
    const long c = cfg.channels;
    const long c5 = cfg.in_channels[3];

    register_conv(reg, "backbone.stem", ConvSpec{3, kBackboneChannels[0], 3, 2, 1, true}, rng);
    long prev = kBackboneChannels[0];
    for (int s = 0; s < 4; ++s) {
        register_conv(reg, "backbone.stage" + std::to_string(s + 1),
                      ConvSpec{s == 0 ? prev : kBackboneChannels[s - 1], kBackboneChannels[s], 3, 2, 1, true},
                      rng);
    }

    for (int l = 2; l <= 4; ++l) {
        register_conv(reg, level_name("lateral", l), lateral_spec(cfg.in_channels[l - 2], c), rng);
    }
    if (!cfg.ppm_enabled) {
        register_conv(reg, "lateral.5", lateral_spec(c5, c), rng);
    } else {
        const long nb = static_cast<long>(cfg.ppm_bins.size());
        for (long i = 0; i < nb; ++i) {
            register_conv(reg, "ppm.branch" + std::to_string(i), ConvSpec{c5, c5 / nb, 1, 1, 0, true},
                          rng);
        }
        register_conv(reg, "ppm.reduce", ConvSpec{2 * c5, c, 1, 1, 0, true}, rng);
        register_conv(reg, "ppm.seed", ConvSpec{c + c5, c, 1, 1, 0, true}, rng);
    }

    for (int l = 2; l <= 5; ++l) register_conv(reg, level_name("output", l), output_spec(c), rng);

    switch (cfg.placement) {
        case Placement::td_srb_bu_crb:
            if (cfg.srb_enabled) {
                for (int l = 4; l >= 2; --l) register_srb(reg, level_name("srb", l), cfg.srb(), rng);
            }
            if (cfg.crb_enabled) {
                register_conv(reg, "bottomup.n2", output_spec(c), rng);
                for (int l = 3; l <= 5; ++l) register_crb(reg, level_name("crb", l), cfg.crb(), rng);
            }
            break;
        case Placement::td_crb_bu_srb: {
            for (int l = 4; l >= 2; --l) {
                register_conv(reg, level_name("tdcrb", l) + ".gate", ConvSpec{c, c, 1, 1, 0, true},
                              rng, Init::zero);
                register_conv(reg, level_name("tdcrb", l) + ".refine",
                              ConvSpec{c, c, cfg.crb_refine_kernel, 1, cfg.crb_refine_kernel / 2, true},
                              rng);
            }
            register_conv(reg, "bottomup.n2", output_spec(c), rng);
            const long cr = c / cfg.compression;
            for (int l = 3; l <= 5; ++l) {
                const std::string p = level_name("busrb", l);
                register_conv(reg, p + ".compress_low", ConvSpec{c, cr, 1, 1, 0, true}, rng);
                register_conv(reg, p + ".compress_high", ConvSpec{c, cr, 1, 1, 0, true}, rng);
                register_conv(reg, p + ".down", ConvSpec{cr, cr, 3, 2, 1, true}, rng);
                const long head_in = cfg.srb_shared_stem ? cr : 2 * cr;
                if (cfg.srb_shared_stem) {
                    register_conv(reg, p + ".trunk", ConvSpec{2 * cr, cr, 3, 1, 1, true}, rng);
                }
                register_conv(reg, p + ".delta", ConvSpec{head_in, 2, 3, 1, 1, true}, rng, Init::zero);
                register_conv(reg, p + ".omega", ConvSpec{head_in, 1, 3, 1, 1, true}, rng, Init::zero);
                register_conv(reg, p + ".down_full", ConvSpec{c, c, 3, 2, 1, true}, rng);
                register_conv(reg, p + ".out", output_spec(c), rng);
            }
            break;
        }
        case Placement::td_srb_crb:
            for (int l = 4; l >= 2; --l) {
                register_srb(reg, level_name("srb", l), cfg.srb(), rng);
                register_conv(reg, level_name("tdcrb", l) + ".gate", ConvSpec{c, c, 1, 1, 0, true},
                              rng, Init::zero);
                register_conv(reg, level_name("tdcrb", l) + ".refine",
                              ConvSpec{c, c, cfg.crb_refine_kernel, 1, cfg.crb_refine_kernel / 2, true},
                              rng);
                register_conv(reg, level_name("tdcrb", l) + ".out",
                              ConvSpec{c, c, cfg.crb_out_kernel, 1, cfg.crb_out_kernel / 2, true}, rng);
            }
            break;
    }

    if (with_head) {
        for (int l = 2; l <= 5; ++l) {
            register_conv(reg, level_name("head", l), ConvSpec{c, 1, 3, 1, 1, true}, rng);
        }
    }
    return reg;
}

PyramidLevels toy_backbone(const Tensor& image, ModelParams& reg) {
    const Shape4 s = image.shape;
    if (s.c != 3) throw ShapeError("toy_backbone: image must have 3 channels, got " + s.str());
    if (s.h % 32 != 0 || s.w % 32 != 0) {
        throw ShapeError("toy_backbone: extents must be divisible by 32, got " + s.str());
    }
    Tensor x = relu(apply_conv(image, reg, "backbone.stem", ConvSpec{3, kBackboneChannels[0], 3, 2, 1, true}));
    PyramidLevels out;
    long prev = kBackboneChannels[0];
    for (int st = 0; st < 4; ++st) {
        x = relu(apply_conv(x, reg, "backbone.stage" + std::to_string(st + 1),
                            ConvSpec{prev, kBackboneChannels[st], 3, 2, 1, true}));
        prev = kBackboneChannels[st];
        out.maps[st] = x;
    }
    return out;
}

Tensor ppm_forward(const Tensor& c5, ModelParams& reg, const PyramidConfig& cfg) {
    const Shape4 s = c5.shape;
    const long nb = static_cast<long>(cfg.ppm_bins.size());
    for (long b : cfg.ppm_bins) {
        if (b > s.h || b > s.w) {
            throw ContractError("ppm: bin " + std::to_string(b) + " exceeds c5 extent " + s.str());
        }
    }
    Tensor cat = c5;
    for (long i = 0; i < nb; ++i) {
        Tensor pooled = adaptive_avg_pool(c5, cfg.ppm_bins[i]);
        Tensor conv = relu(apply_conv(pooled, reg, "ppm.branch" + std::to_string(i),
                                      ConvSpec{s.c, s.c / nb, 1, 1, 0, true}));
        cat = concat_channels(cat, resize_bilinear(conv, s.h, s.w));
    }
    return apply_conv(cat, reg, "ppm.reduce", ConvSpec{2 * s.c, cfg.channels, 1, 1, 0, true});
}

namespace {

std::array<Tensor, 4> laterals(const PyramidLevels& levels, ModelParams& reg,
                               const PyramidConfig& cfg, bool with_top) {
    std::array<Tensor, 4> lat;
    for (int l = 2; l <= 4; ++l) {
        lat[l - 2] = apply_conv(levels.level(l), reg, level_name("lateral", l),
                                lateral_spec(cfg.in_channels[l - 2], cfg.channels));
    }
    if (with_top) {
        lat[3] = apply_conv(levels.level(5), reg, "lateral.5",
                            lateral_spec(cfg.in_channels[3], cfg.channels));
    }
    return lat;
}

// The seed of the top-down pathway: PPM context fused with raw C5, or the
// plain lateral when PPM is off.
Tensor top_seed(const PyramidLevels& levels, ModelParams& reg, const PyramidConfig& cfg) {
    if (!cfg.ppm_enabled) {
        return apply_conv(levels.level(5), reg, "lateral.5",
                          lateral_spec(cfg.in_channels[3], cfg.channels));
    }
    Tensor ctx = ppm_forward(levels.level(5), reg, cfg);
    Tensor cat = concat_channels(ctx, levels.level(5));
    return apply_conv(cat, reg, "ppm.seed",
                      ConvSpec{cfg.channels + cfg.in_channels[3], cfg.channels, 1, 1, 0, true});
}

// Plain upsample-add chain from a given top map; out convs applied at the end.
std::array<Tensor, 4> plain_topdown(const std::array<Tensor, 4>& lat, const Tensor& top,
                                    ModelParams& reg, const PyramidConfig& cfg) {
    std::array<Tensor, 4> merged;
    merged[3] = top;
    for (int l = 4; l >= 2; --l) {
        merged[l - 2] = add(lat[l - 2], upsample2x(cfg.upsample, merged[l - 1]));
    }
    std::array<Tensor, 4> out;
    for (int l = 2; l <= 5; ++l) {
        out[l - 2] = apply_conv(merged[l - 2], reg, level_name("output", l), output_spec(cfg.channels));
    }
    return out;
}

// Bottom-up SRB step for the swapped placement: warps the fine refined map
// down onto the coarse grid instead of up.
Tensor busrb_step(const Tensor& n_low, const Tensor& p_high, ModelParams& reg,
                  const std::string& prefix, const PyramidConfig& cfg) {
    const long c = cfg.channels;
    const long cr = c / cfg.compression;
    Tensor cl = apply_conv(n_low, reg, prefix + ".compress_low", ConvSpec{c, cr, 1, 1, 0, true});
    Tensor ch = apply_conv(p_high, reg, prefix + ".compress_high", ConvSpec{c, cr, 1, 1, 0, true});
    Tensor cld = apply_conv(cl, reg, prefix + ".down", ConvSpec{cr, cr, 3, 2, 1, true});
    Tensor cat = concat_channels(cld, ch);
    Tensor head_in = cat;
    long in_c = 2 * cr;
    if (cfg.srb_shared_stem) {
        head_in = relu(apply_conv(cat, reg, prefix + ".trunk", ConvSpec{2 * cr, cr, 3, 1, 1, true}));
        in_c = cr;
    }
    Tensor delta = apply_conv(head_in, reg, prefix + ".delta", ConvSpec{in_c, 2, 3, 1, 1, true});
    Tensor omega = sigmoid(apply_conv(head_in, reg, prefix + ".omega", ConvSpec{in_c, 1, 3, 1, 1, true}));

    // Base grid: coarse pixel -> fine coordinate, half-pixel centers.
    const Shape4 ds = delta.shape;
    Tensor base = Tensor::zeros(ds);
    for (long n = 0; n < ds.n; ++n) {
        for (long i = 0; i < ds.h; ++i) {
            for (long j = 0; j < ds.w; ++j) {
                base.at(n, 0, i, j) = (static_cast<double>(j) + 0.5) * 2.0 - 0.5;
                base.at(n, 1, i, j) = (static_cast<double>(i) + 0.5) * 2.0 - 0.5;
            }
        }
    }
    Tensor grid = add(base, scale(delta, 2.0 / static_cast<double>(ds.h + ds.w)));
    Tensor warped = grid_sample_bilinear(n_low, grid);
    Tensor down = apply_conv(n_low, reg, prefix + ".down_full", ConvSpec{c, c, 3, 2, 1, true});
    Tensor fused = add(add(mul(warped, omega), down), p_high);
    return apply_conv(fused, reg, prefix + ".out", output_spec(c));
}

// Channel-gated top-down merge for placements that put CRB in the top-down
// pathway; output at the fine level's resolution.
Tensor tdcrb_step(const Tensor& high, const Tensor& lat, ModelParams& reg, const std::string& prefix,
                  const std::string& out_conv, const PyramidConfig& cfg) {
    const long c = cfg.channels;
    Tensor alpha = sigmoid(apply_conv(global_avg_pool(lat), reg, prefix + ".gate",
                                      ConvSpec{c, c, 1, 1, 0, true}));
    Tensor refined = apply_conv(high, reg, prefix + ".refine",
                                ConvSpec{c, c, cfg.crb_refine_kernel, 1, cfg.crb_refine_kernel / 2, true});
    Tensor fused = add(mul(refined, alpha), lat);
    return apply_conv(fused, reg, out_conv, output_spec(c));
}

}  // namespace

PyramidLevels fpn_forward(const PyramidLevels& levels, ModelParams& reg, const PyramidConfig& cfg) {
    levels.validate();
    auto lat = laterals(levels, reg, cfg, true);
    PyramidLevels out;
    out.maps = plain_topdown(lat, lat[3], reg, cfg);
    return out;
}

PyramidLevels drfpn_forward(const PyramidLevels& levels, const PyramidConfig& cfg, ModelParams& reg) {
    cfg.validate();
    levels.validate();
    if (!cfg.srb_enabled && !cfg.crb_enabled && !cfg.ppm_enabled) {
        return fpn_forward(levels, reg, cfg);
    }

    auto lat = laterals(levels, reg, cfg, false);
    Tensor top = top_seed(levels, reg, cfg);

    std::array<Tensor, 4> p;
    switch (cfg.placement) {
        case Placement::td_srb_bu_crb:
        case Placement::td_srb_crb:
            if (cfg.srb_enabled) {
                p[3] = apply_conv(top, reg, "output.5", output_spec(cfg.channels));
                for (int l = 4; l >= 2; --l) {
                    p[l - 2] = srb_forward(p[l - 1], lat[l - 2], reg, level_name("srb", l),
                                           level_name("output", l), cfg.srb());
                }
            } else {
                p = plain_topdown(lat, top, reg, cfg);
            }
            if (cfg.placement == Placement::td_srb_crb) {
                std::array<Tensor, 4> refined;
                refined[3] = p[3];
                for (int l = 4; l >= 2; --l) {
                    refined[l - 2] = tdcrb_step(p[l - 2], lat[l - 2], reg, level_name("tdcrb", l),
                                                level_name("tdcrb", l) + ".out", cfg);
                }
                PyramidLevels out;
                out.maps = refined;
                return out;
            }
            break;
        case Placement::td_crb_bu_srb:
            p[3] = apply_conv(top, reg, "output.5", output_spec(cfg.channels));
            for (int l = 4; l >= 2; --l) {
                p[l - 2] = tdcrb_step(upsample2x(cfg.upsample, p[l - 1]), lat[l - 2], reg,
                                      level_name("tdcrb", l), level_name("output", l), cfg);
            }
            break;
    }

    PyramidLevels out;
    if (cfg.placement == Placement::td_crb_bu_srb) {
        out.maps[0] = apply_conv(p[0], reg, "bottomup.n2", output_spec(cfg.channels));
        for (int l = 3; l <= 5; ++l) {
            out.maps[l - 2] = busrb_step(out.maps[l - 3], p[l - 2], reg, level_name("busrb", l), cfg);
        }
        return out;
    }

    if (!cfg.crb_enabled) {
        out.maps = p;
        return out;
    }
    out.maps[0] = apply_conv(p[0], reg, "bottomup.n2", output_spec(cfg.channels));
    for (int l = 3; l <= 5; ++l) {
        out.maps[l - 2] = crb_forward(out.maps[l - 3], p[l - 2], reg, level_name("crb", l), cfg.crb());
    }
    return out;
}

Tensor head_forward(const Tensor& level_map, ModelParams& reg, int level, const PyramidConfig& cfg) {
    return apply_conv(level_map, reg, level_name("head", level),
                      ConvSpec{cfg.channels, 1, 3, 1, 1, true});
}

std::map<std::string, long> param_count(const PyramidConfig& cfg, bool with_head) {
    ModelParams reg = build_params(cfg, 0, with_head);
    std::map<std::string, long> counts;
    for (const auto& name : reg.names()) {
        const std::string group = name.substr(0, name.find('.'));
        counts[group] += reg.get(name).elems();
    }
    counts["total"] = reg.scalar_count();
    return counts;
}

}  // namespace drfpn
