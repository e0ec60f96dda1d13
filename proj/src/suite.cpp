#include "drfpn/suite.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <sstream>

#include "drfpn/gradcheck.hpp"
#include "drfpn/harness.hpp"

namespace drfpn {

namespace {

Tensor rand_tensor(Shape4 s, Rng& rng, double stddev = 1.0) {
    return Tensor::randn(s, rng, 0.0, stddev);
}

// Random values bounded away from zero, for ops with a kink at the origin.
Tensor rand_offzero(Shape4 s, Rng& rng) {
    Tensor t = Tensor::zeros(s);
    for (double& v : *t.data) {
        const double mag = rng.uniform(0.25, 1.0);
        v = rng.uniform() < 0.5 ? -mag : mag;
    }
    return t;
}

void randomize_params(ModelParams& reg, Rng& rng, double stddev = 0.3) {
    for (const auto& name : reg.names()) {
        for (double& v : *reg.get(name).data) v = rng.normal(0.0, stddev);
    }
}

struct CaseDef {
    std::string name;
    SuiteScope scope;
    double threshold;
    double eps;
    long stride;
    std::function<double(Rng&)> run;  // returns max rel error
};

// Small-pyramid inputs derived from one watched tensor, so a single gradcheck
// reaches the whole graph.
PyramidLevels levels_from(const Tensor& x) {
    PyramidLevels levels;
    levels.maps[0] = x;
    levels.maps[1] = adaptive_avg_pool(x, x.shape.h / 2);
    levels.maps[2] = adaptive_avg_pool(x, x.shape.h / 4);
    levels.maps[3] = adaptive_avg_pool(x, x.shape.h / 8);
    return levels;
}

PyramidConfig small_pyramid_config() {
    PyramidConfig cfg;
    cfg.channels = 4;
    cfg.in_channels = {4, 4, 4, 4};
    cfg.ppm_bins = {1, 2};
    cfg.compression = 4;
    return cfg;
}

std::vector<CaseDef> all_cases() {
    std::vector<CaseDef> cases;
    auto add_case = [&](std::string name, SuiteScope scope, double thr, double eps, long stride,
                        std::function<double(Rng&)> run) {
        cases.push_back({std::move(name), scope, thr, eps, stride, std::move(run)});
    };

    // ---- op scope ----
    add_case("op.add", SuiteScope::op, 1e-10, 0.5, 1, [](Rng& rng) {
        Tensor b = rand_tensor({1, 3, 4, 5}, rng);
        return gradcheck([&](Tensor& x) { return reduce_sum(add(x, b)); },
                         rand_tensor({1, 3, 4, 5}, rng), 0.5);
    });
    add_case("op.sub", SuiteScope::op, 1e-10, 0.5, 1, [](Rng& rng) {
        Tensor a = rand_tensor({1, 3, 4, 5}, rng);
        // Quadratic: central differences are exact, only roundoff remains.
        return gradcheck([&](Tensor& x) { return reduce_sum(mul(sub(a, x), sub(a, x))); },
                         rand_tensor({1, 3, 4, 5}, rng), 0.5);
    });
    add_case("op.mul.square", SuiteScope::op, 1e-6, 1e-5, 1, [](Rng& rng) {
        return gradcheck([&](Tensor& x) { return reduce_sum(mul(x, x)); },
                         rand_tensor({1, 2, 3, 3}, rng), 1e-5);
    });
    add_case("op.mul.gate_channel", SuiteScope::op, 1e-10, 0.5, 1, [](Rng& rng) {
        Tensor a = rand_tensor({2, 3, 4, 4}, rng);
        return gradcheck([&](Tensor& x) { return reduce_sum(mul(a, x)); },
                         rand_tensor({2, 3, 1, 1}, rng), 0.5);
    });
    add_case("op.mul.weight_spatial", SuiteScope::op, 1e-10, 0.5, 1, [](Rng& rng) {
        Tensor a = rand_tensor({2, 3, 4, 4}, rng);
        return gradcheck([&](Tensor& x) { return reduce_sum(mul(a, x)); },
                         rand_tensor({2, 1, 4, 4}, rng), 0.5);
    });
    add_case("op.concat_channels", SuiteScope::op, 1e-10, 0.5, 1, [](Rng& rng) {
        Tensor b = rand_tensor({1, 3, 4, 4}, rng);
        Tensor w = rand_tensor({1, 5, 4, 4}, rng);
        return gradcheck([&](Tensor& x) { return reduce_sum(mul(concat_channels(x, b), w)); },
                         rand_tensor({1, 2, 4, 4}, rng), 0.5);
    });
    add_case("op.slice_channels", SuiteScope::op, 1e-10, 0.5, 1, [](Rng& rng) {
        Tensor w = rand_tensor({1, 2, 4, 4}, rng);
        return gradcheck([&](Tensor& x) { return reduce_sum(mul(slice_channels(x, 1, 3), w)); },
                         rand_tensor({1, 4, 4, 4}, rng), 0.5);
    });
    add_case("op.relu", SuiteScope::op, 1e-6, 1e-5, 1, [](Rng& rng) {
        return gradcheck([&](Tensor& x) { return reduce_sum(mul(relu(x), relu(x))); },
                         rand_offzero({1, 3, 4, 4}, rng), 1e-5);
    });
    add_case("op.sigmoid", SuiteScope::op, 1e-6, 1e-5, 1, [](Rng& rng) {
        return gradcheck([&](Tensor& x) { return reduce_sum(sigmoid(x)); },
                         rand_tensor({1, 3, 4, 4}, rng), 1e-5);
    });
    add_case("op.reduce_mean", SuiteScope::op, 1e-10, 0.5, 1, [](Rng& rng) {
        return gradcheck([&](Tensor& x) { return reduce_mean(x); },
                         rand_tensor({1, 2, 3, 4}, rng), 0.5);
    });
    struct ConvCase {
        const char* tag;
        ConvSpec spec;
        Shape4 in;
    };
    const ConvCase conv_cases[] = {
        {"k3s1p1", ConvSpec{3, 4, 3, 1, 1, true}, {2, 3, 5, 5}},
        {"k1s1p0", ConvSpec{3, 4, 1, 1, 0, true}, {2, 3, 5, 5}},
        {"k3s2p1", ConvSpec{3, 4, 3, 2, 1, true}, {2, 3, 6, 6}},
    };
    for (const auto& cc : conv_cases) {
        add_case(std::string("op.conv2d.") + cc.tag + ".x", SuiteScope::op, 1e-10, 0.5, 1,
                 [cc](Rng& rng) {
                     Tensor w = rand_tensor({cc.spec.out_channels, cc.spec.in_channels,
                                             cc.spec.kernel, cc.spec.kernel},
                                            rng);
                     Tensor b = rand_tensor({1, cc.spec.out_channels, 1, 1}, rng);
                     Tensor m = rand_tensor({cc.in.n, cc.spec.out_channels,
                                             cc.spec.out_extent(cc.in.h), cc.spec.out_extent(cc.in.w)},
                                            rng);
                     return gradcheck(
                         [&](Tensor& x) { return reduce_sum(mul(conv2d(x, cc.spec, w, &b), m)); },
                         rand_tensor(cc.in, rng), 0.5);
                 });
        add_case(std::string("op.conv2d.") + cc.tag + ".w", SuiteScope::op, 1e-10, 0.5, 1,
                 [cc](Rng& rng) {
                     Tensor xin = rand_tensor(cc.in, rng);
                     Tensor m = rand_tensor({cc.in.n, cc.spec.out_channels,
                                             cc.spec.out_extent(cc.in.h), cc.spec.out_extent(cc.in.w)},
                                            rng);
                     return gradcheck(
                         [&](Tensor& w) { return reduce_sum(mul(conv2d(xin, cc.spec, w), m)); },
                         rand_tensor({cc.spec.out_channels, cc.spec.in_channels, cc.spec.kernel,
                                      cc.spec.kernel},
                                     rng),
                         0.5);
                 });
    }
    add_case("op.conv_transpose2d.x", SuiteScope::op, 1e-10, 0.5, 1, [](Rng& rng) {
        Tensor w = rand_tensor({3, 2, 3, 3}, rng);
        Tensor m = rand_tensor({1, 2, 8, 8}, rng);
        return gradcheck([&](Tensor& x) { return reduce_sum(mul(conv_transpose2d(x, w), m)); },
                         rand_tensor({1, 3, 4, 4}, rng), 0.5);
    });
    add_case("op.conv_transpose2d.w", SuiteScope::op, 1e-10, 0.5, 1, [](Rng& rng) {
        Tensor xin = rand_tensor({1, 3, 4, 4}, rng);
        Tensor m = rand_tensor({1, 2, 8, 8}, rng);
        return gradcheck([&](Tensor& w) { return reduce_sum(mul(conv_transpose2d(xin, w), m)); },
                         rand_tensor({3, 2, 3, 3}, rng), 0.5);
    });
    add_case("op.upsample2x.nearest", SuiteScope::op, 1e-10, 0.5, 1, [](Rng& rng) {
        Tensor m = rand_tensor({1, 2, 8, 8}, rng);
        return gradcheck(
            [&](Tensor& x) { return reduce_sum(mul(upsample2x(Upsample::nearest, x), m)); },
            rand_tensor({1, 2, 4, 4}, rng), 0.5);
    });
    add_case("op.upsample2x.bilinear", SuiteScope::op, 1e-10, 0.5, 1, [](Rng& rng) {
        Tensor m = rand_tensor({1, 2, 8, 8}, rng);
        return gradcheck(
            [&](Tensor& x) { return reduce_sum(mul(upsample2x(Upsample::bilinear, x), m)); },
            rand_tensor({1, 2, 4, 4}, rng), 0.5);
    });
    add_case("op.resize_bilinear", SuiteScope::op, 1e-10, 0.5, 1, [](Rng& rng) {
        Tensor m = rand_tensor({1, 2, 7, 5}, rng);
        return gradcheck([&](Tensor& x) { return reduce_sum(mul(resize_bilinear(x, 7, 5), m)); },
                         rand_tensor({1, 2, 3, 4}, rng), 0.5);
    });
    add_case("op.grid_sample.src", SuiteScope::op, 1e-10, 0.5, 1, [](Rng& rng) {
        Tensor grid = Tensor::zeros({1, 2, 3, 3});
        for (long i = 0; i < 2 * 9; ++i) (*grid.data)[i] = rng.uniform(0.3, 3.6);
        Tensor m = rand_tensor({1, 2, 3, 3}, rng);
        return gradcheck(
            [&](Tensor& x) { return reduce_sum(mul(grid_sample_bilinear(x, grid), m)); },
            rand_tensor({1, 2, 5, 5}, rng), 0.5);
    });
    add_case("op.grid_sample.grid", SuiteScope::op, 1e-6, 1e-5, 1, [](Rng& rng) {
        Tensor src = rand_tensor({1, 2, 5, 5}, rng);
        Tensor m = rand_tensor({1, 2, 3, 3}, rng);
        // Fractional parts kept away from the integer-lattice kinks.
        Tensor g0 = Tensor::zeros({1, 2, 3, 3});
        for (long i = 0; i < 2 * 9; ++i) {
            (*g0.data)[i] = static_cast<double>(rng.next_u64() % 4) + rng.uniform(0.25, 0.75);
        }
        return gradcheck(
            [&](Tensor& g) { return reduce_sum(mul(grid_sample_bilinear(src, g), m)); }, g0, 1e-5);
    });
    add_case("op.global_avg_pool", SuiteScope::op, 1e-10, 0.5, 1, [](Rng& rng) {
        Tensor m = rand_tensor({1, 3, 1, 1}, rng);
        return gradcheck([&](Tensor& x) { return reduce_sum(mul(global_avg_pool(x), m)); },
                         rand_tensor({1, 3, 4, 4}, rng), 0.5);
    });
    add_case("op.adaptive_avg_pool.b2", SuiteScope::op, 1e-10, 0.5, 1, [](Rng& rng) {
        Tensor m = rand_tensor({1, 2, 2, 2}, rng);
        return gradcheck([&](Tensor& x) { return reduce_sum(mul(adaptive_avg_pool(x, 2), m)); },
                         rand_tensor({1, 2, 5, 5}, rng), 0.5);
    });

    // ---- module scope ----
    const SrbConfig srb_cfg{4, 4, true, Upsample::nearest};
    auto srb_params = [srb_cfg](Rng& rng) {
        ModelParams reg;
        Rng init = rng.child(1000);
        register_srb(reg, "srb", srb_cfg, init);
        register_conv(reg, "out", ConvSpec{4, 4, 3, 1, 1, true}, init);
        randomize_params(reg, init);
        return reg;
    };
    add_case("module.srb_subnet.f_low", SuiteScope::module, 1e-5, 1e-5, 1, [=](Rng& rng) {
        ModelParams reg = srb_params(rng);
        Tensor f_high = rand_tensor({1, 4, 4, 4}, rng);
        return gradcheck(
            [&](Tensor& f_low) {
                auto s = srb_subnet(f_high, f_low, reg, "srb", srb_cfg);
                return add(reduce_sum(s.delta), reduce_sum(s.omega));
            },
            rand_tensor({1, 4, 8, 8}, rng), 1e-5);
    });
    add_case("module.srb_subnet.f_high", SuiteScope::module, 1e-5, 1e-5, 1, [=](Rng& rng) {
        ModelParams reg = srb_params(rng);
        Tensor f_low = rand_tensor({1, 4, 8, 8}, rng);
        return gradcheck(
            [&](Tensor& f_high) {
                auto s = srb_subnet(f_high, f_low, reg, "srb", srb_cfg);
                return add(reduce_sum(s.delta), reduce_sum(s.omega));
            },
            rand_tensor({1, 4, 4, 4}, rng), 1e-5);
    });
    add_case("module.srb_warp.src", SuiteScope::module, 1e-5, 1e-5, 1, [](Rng& rng) {
        Tensor delta = rand_tensor({1, 2, 8, 8}, rng, 0.7);
        Tensor m = rand_tensor({1, 3, 8, 8}, rng);
        return gradcheck([&](Tensor& src) { return reduce_sum(mul(srb_warp(src, delta), m)); },
                         rand_tensor({1, 3, 4, 4}, rng), 1e-5);
    });
    add_case("module.srb_warp.delta", SuiteScope::module, 1e-5, 1e-5, 1, [](Rng& rng) {
        Tensor src = rand_tensor({1, 3, 4, 4}, rng);
        Tensor m = rand_tensor({1, 3, 8, 8}, rng);
        return gradcheck([&](Tensor& d) { return reduce_sum(mul(srb_warp(src, d), m)); },
                         rand_tensor({1, 2, 8, 8}, rng, 0.7), 1e-5);
    });
    add_case("module.srb_forward", SuiteScope::module, 1e-4, 1e-5, 1, [=](Rng& rng) {
        ModelParams reg = srb_params(rng);
        Tensor f_high = rand_tensor({1, 4, 4, 4}, rng);
        return gradcheck(
            [&](Tensor& f_low) {
                Tensor p = srb_forward(f_high, f_low, reg, "srb", "out", srb_cfg);
                return reduce_mean(mul(p, p));
            },
            rand_tensor({1, 4, 8, 8}, rng), 1e-5);
    });
    const CrbConfig crb_cfg{4, 3, 3, GateSource::low};
    auto crb_params = [crb_cfg](Rng& rng) {
        ModelParams reg;
        Rng init = rng.child(1001);
        register_crb(reg, "crb", crb_cfg, init);
        randomize_params(reg, init);
        return reg;
    };
    add_case("module.crb_gate", SuiteScope::module, 1e-6, 1e-5, 1, [=](Rng& rng) {
        ModelParams reg = crb_params(rng);
        return gradcheck([&](Tensor& p_low) { return reduce_sum(crb_gate(p_low, reg, "crb", crb_cfg)); },
                         rand_tensor({1, 4, 8, 8}, rng), 1e-5);
    });
    add_case("module.crb_forward", SuiteScope::module, 1e-5, 1e-5, 1, [=](Rng& rng) {
        ModelParams reg = crb_params(rng);
        Tensor p_high = rand_tensor({1, 4, 4, 4}, rng);
        return gradcheck(
            [&](Tensor& p_low) {
                Tensor n = crb_forward(p_low, p_high, reg, "crb", crb_cfg);
                return reduce_mean(mul(n, n));
            },
            rand_tensor({1, 4, 8, 8}, rng), 1e-5);
    });
    add_case("module.ppm", SuiteScope::module, 1e-5, 1e-5, 1, [](Rng& rng) {
        PyramidConfig cfg = small_pyramid_config();
        ModelParams reg = build_params(cfg, 7, false);
        Rng init = rng.child(1002);
        randomize_params(reg, init);
        return gradcheck(
            [&](Tensor& c5) {
                Tensor p = ppm_forward(c5, reg, cfg);
                return reduce_mean(mul(p, p));
            },
            rand_tensor({1, 4, 4, 4}, rng), 1e-5);
    });
    add_case("module.backbone", SuiteScope::module, 1e-5, 1e-6, 7, [](Rng& rng) {
        PyramidConfig cfg;
        cfg.channels = 8;
        cfg.ppm_bins = {1};
        ModelParams reg = build_params(cfg, 11, false);
        Rng init = rng.child(1003);
        randomize_params(reg, init, 0.15);
        return gradcheck(
            [&](Tensor& img) {
                PyramidLevels f = toy_backbone(img, reg);
                Tensor total;
                for (int l = 2; l <= 5; ++l) {
                    Tensor s = reduce_mean(mul(f.level(l), f.level(l)));
                    total = total.defined() ? add(total, s) : s;
                }
                return total;
            },
            rand_tensor({1, 3, 32, 32}, rng, 0.5), 1e-6, 7);
    });
    // Linear in x with a quadratic loss, so a large step is exact (see the
    // linear op cases above).
    add_case("module.fpn", SuiteScope::module, 1e-5, 0.5, 1, [](Rng& rng) {
        PyramidConfig cfg = small_pyramid_config();
        cfg.srb_enabled = cfg.crb_enabled = cfg.ppm_enabled = false;
        ModelParams reg = build_params(cfg, 13, false);
        Rng init = rng.child(1004);
        randomize_params(reg, init);
        return gradcheck(
            [&](Tensor& x) {
                PyramidLevels out = fpn_forward(levels_from(x), reg, cfg);
                Tensor total;
                for (int l = 2; l <= 5; ++l) {
                    Tensor s = reduce_mean(mul(out.level(l), out.level(l)));
                    total = total.defined() ? add(total, s) : s;
                }
                return total;
            },
            rand_tensor({1, 4, 16, 16}, rng), 0.5);
    });

    // ---- full scope ----
    add_case("full.drfpn_levels", SuiteScope::full, 1e-4, 1e-5, 1, [](Rng& rng) {
        PyramidConfig cfg = small_pyramid_config();
        ModelParams reg = build_params(cfg, 17, false);
        Rng init = rng.child(1005);
        randomize_params(reg, init);
        return gradcheck(
            [&](Tensor& x) {
                PyramidLevels out = drfpn_forward(levels_from(x), cfg, reg);
                Tensor total;
                for (int l = 2; l <= 5; ++l) {
                    Tensor s = reduce_mean(mul(out.level(l), out.level(l)));
                    total = total.defined() ? add(total, s) : s;
                }
                return total;
            },
            rand_tensor({1, 4, 16, 16}, rng), 1e-5);
    });
    add_case("full.drfpn_image64", SuiteScope::full, 1e-4, 1e-5, 29, [](Rng& rng) {
        PyramidConfig cfg;
        cfg.channels = 8;
        cfg.ppm_bins = {1, 2};
        ModelParams reg = build_params(cfg, 19, true);
        Rng init = rng.child(1006);
        randomize_params(reg, init, 0.15);
        auto ds = gen_dataset(23, 1, 64);
        return gradcheck(
            [&](Tensor& img) {
                PyramidLevels f = toy_backbone(img, reg);
                PyramidLevels out = drfpn_forward(f, cfg, reg);
                Tensor total;
                for (int l = 2; l <= 5; ++l) {
                    Tensor pred = head_forward(out.level(l), reg, l, cfg);
                    Tensor d = sub(pred, ds[0].targets[l - 2]);
                    Tensor s = reduce_mean(mul(d, d));
                    total = total.defined() ? add(total, s) : s;
                }
                return total;
            },
            ds[0].image, 1e-5, 29);
    });
    return cases;
}

}  // namespace

std::vector<SuiteCase> run_gradcheck_suite(SuiteScope scope, std::uint64_t seed) {
    std::vector<SuiteCase> results;
    Rng root(seed);
    std::uint64_t idx = 0;
    for (const auto& def : all_cases()) {
        ++idx;
        if (scope != SuiteScope::all && def.scope != scope) continue;
        Rng rng = root.child(idx);
        SuiteCase r;
        r.name = def.name;
        r.threshold = def.threshold;
        r.max_rel = def.run(rng);
        r.pass = r.max_rel < def.threshold;
        results.push_back(std::move(r));
    }
    return results;
}

// ---------------------------------------------------------------------------
// Acceptance criteria
// ---------------------------------------------------------------------------

namespace {

// Plain six-nested-loop convolution, independent of the library kernel.
Tensor oracle_conv2d(const Tensor& x, const ConvSpec& spec, const Tensor& w, const Tensor* b) {
    const long oh = spec.out_extent(x.shape.h), ow = spec.out_extent(x.shape.w);
    Tensor out = Tensor::zeros({x.shape.n, spec.out_channels, oh, ow});
    for (long n = 0; n < x.shape.n; ++n)
        for (long o = 0; o < spec.out_channels; ++o)
            for (long oi = 0; oi < oh; ++oi)
                for (long oj = 0; oj < ow; ++oj) {
                    double acc = b ? b->at(0, o, 0, 0) : 0.0;
                    for (long c = 0; c < spec.in_channels; ++c)
                        for (long p = 0; p < spec.kernel; ++p)
                            for (long q = 0; q < spec.kernel; ++q) {
                                const long xi = oi * spec.stride + p - spec.padding;
                                const long xj = oj * spec.stride + q - spec.padding;
                                if (xi < 0 || xi >= x.shape.h || xj < 0 || xj >= x.shape.w) continue;
                                acc += x.at(n, c, xi, xj) *
                                       w.at(o, c, p, q);
                            }
                    out.at(n, o, oi, oj) = acc;
                }
    return out;
}

// Gather-form transposed conv (the library kernel scatters).
Tensor oracle_conv_transpose2d(const Tensor& x, const Tensor& w) {
    const long ic = x.shape.c, oc = w.shape.c;
    const long oh = 2 * x.shape.h, ow = 2 * x.shape.w;
    Tensor out = Tensor::zeros({x.shape.n, oc, oh, ow});
    for (long n = 0; n < x.shape.n; ++n)
        for (long o = 0; o < oc; ++o)
            for (long ii = 0; ii < oh; ++ii)
                for (long jj = 0; jj < ow; ++jj) {
                    double acc = 0.0;
                    for (long p = 0; p < 3; ++p) {
                        if ((ii + 1 - p) % 2 != 0) continue;
                        const long oi = (ii + 1 - p) / 2;
                        if (oi < 0 || oi >= x.shape.h) continue;
                        for (long q = 0; q < 3; ++q) {
                            if ((jj + 1 - q) % 2 != 0) continue;
                            const long oj = (jj + 1 - q) / 2;
                            if (oj < 0 || oj >= x.shape.w) continue;
                            for (long c = 0; c < ic; ++c)
                                acc += x.at(n, c, oi, oj) * w.at(c, o, p, q);
                        }
                    }
                    out.at(n, o, ii, jj) = acc;
                }
    return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (long i = 0; i < a.elems(); ++i) m = std::max(m, std::abs((*a.data)[i] - (*b.data)[i]));
    return m;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (!(a.shape == b.shape)) return false;
    for (long i = 0; i < a.elems(); ++i) {
        if ((*a.data)[i] != (*b.data)[i]) return false;
    }
    return true;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

using Criterion = std::function<CriterionResult()>;

CriterionResult criterion_gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    auto results = run_gradcheck_suite(SuiteScope::all, 20240901);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    long failed = 0;
    double worst = 0.0;
    std::string worst_name;
    for (const auto& r : results) {
        if (!r.pass) ++failed;
        if (r.max_rel / r.threshold > worst) {
            worst = r.max_rel / r.threshold;
            worst_name = r.name;
        }
    }
    CriterionResult c;
    c.name = "gradient-suite";
    c.pass = failed == 0 && secs < 600.0;
    c.detail = std::to_string(results.size()) + " cases, " + std::to_string(failed) +
               " failed, worst " + worst_name + " at " + fmt(worst) + "x threshold, " + fmt(secs) +
               "s";
    return c;
}

CriterionResult criterion_conv_oracles() {
    Rng rng(424242);
    const ConvSpec specs[] = {
        ConvSpec{3, 4, 3, 1, 1, true},
        ConvSpec{3, 4, 1, 1, 0, true},
        ConvSpec{3, 4, 3, 2, 1, true},
    };
    double worst = 0.0;
    for (const ConvSpec& spec : specs) {
        for (int i = 0; i < 100; ++i) {
            const long h = 4 + static_cast<long>(rng.next_u64() % 4);
            const long w = 4 + static_cast<long>(rng.next_u64() % 4);
            Tensor x = rand_tensor({2, spec.in_channels, h, w}, rng);
            Tensor wt = rand_tensor({spec.out_channels, spec.in_channels, spec.kernel, spec.kernel}, rng);
            Tensor b = rand_tensor({1, spec.out_channels, 1, 1}, rng);
            worst = std::max(worst, max_abs_diff(conv2d(x, spec, wt, &b), oracle_conv2d(x, spec, wt, &b)));
        }
    }
    double worst_t = 0.0;
    for (int i = 0; i < 100; ++i) {
        Tensor x = rand_tensor({1, 3, 4, 4}, rng);
        Tensor wt = rand_tensor({3, 2, 3, 3}, rng);
        worst_t = std::max(worst_t, max_abs_diff(conv_transpose2d(x, wt), oracle_conv_transpose2d(x, wt)));
    }
    // Adjoint inner-product identity: <conv(x), y> == <x, convT(y)>.
    double worst_adj = 0.0;
    const ConvSpec down{3, 4, 3, 2, 1, false};
    for (int i = 0; i < 100; ++i) {
        Tensor x = rand_tensor({1, 3, 8, 8}, rng);
        Tensor wt = rand_tensor({4, 3, 3, 3}, rng);
        Tensor y = rand_tensor({1, 4, 4, 4}, rng);
        Tensor cx = conv2d(x, down, wt, nullptr);
        Tensor cty = conv_transpose2d(y, wt);  // weight (oc,ic,..) read as (in,out,..)
        double lhs = 0.0, rhs = 0.0;
        for (long k = 0; k < cx.elems(); ++k) lhs += (*cx.data)[k] * (*y.data)[k];
        for (long k = 0; k < x.elems(); ++k) rhs += (*x.data)[k] * (*cty.data)[k];
        worst_adj = std::max(worst_adj, std::abs(lhs - rhs));
    }
    CriterionResult c;
    c.name = "conv-oracles";
    c.pass = worst <= 1e-12 && worst_t <= 1e-12 && worst_adj <= 1e-10;
    c.detail = "conv2d " + fmt(worst) + ", convT " + fmt(worst_t) + ", adjoint " + fmt(worst_adj);
    return c;
}

CriterionResult criterion_fusion_exactness() {
    Rng rng(55555);
    const SrbConfig scfg{4, 4, true, Upsample::nearest};
    const CrbConfig ccfg{4, 3, 3, GateSource::low};
    double worst_srb = 0.0, worst_crb = 0.0;
    for (int i = 0; i < 100; ++i) {
        ModelParams reg;
        Rng init = rng.child(i);
        register_srb(reg, "srb", scfg, init);
        register_conv(reg, "out", ConvSpec{4, 4, 3, 1, 1, true}, init);
        register_crb(reg, "crb", ccfg, init);
        randomize_params(reg, init);

        Tensor f_high = rand_tensor({1, 4, 4, 4}, rng);
        Tensor f_low = rand_tensor({1, 4, 8, 8}, rng);
        Tensor f_tilde = rand_tensor({1, 4, 8, 8}, rng);
        Tensor omega = Tensor::zeros({1, 1, 8, 8});
        for (double& v : *omega.data) v = rng.uniform(0.05, 0.95);
        Tensor got = srb_fuse(f_tilde, omega, f_high, f_low, reg, "out", scfg);
        // Straight-line re-statement: conv_3((omega (.) f_tilde + up(f_high)) + f_low).
        Tensor e = Tensor::zeros({1, 4, 8, 8});
        for (long ch = 0; ch < 4; ++ch)
            for (long y = 0; y < 8; ++y)
                for (long x = 0; x < 8; ++x)
                    e.at(0, ch, y, x) = omega.at(0, 0, y, x) * f_tilde.at(0, ch, y, x) +
                                        f_high.at(0, ch, y / 2, x / 2) + f_low.at(0, ch, y, x);
        Tensor want = oracle_conv2d(e, ConvSpec{4, 4, 3, 1, 1, true}, reg.get("out.w"), &reg.get("out.b"));
        worst_srb = std::max(worst_srb, max_abs_diff(got, want));

        Tensor p_low = rand_tensor({1, 4, 8, 8}, rng);
        Tensor p_high = rand_tensor({1, 4, 4, 4}, rng);
        Tensor alpha = Tensor::zeros({1, 4, 1, 1});
        for (double& v : *alpha.data) v = rng.uniform(0.05, 0.95);
        Tensor got_c = crb_fuse(p_low, p_high, alpha, reg, "crb", ccfg);
        // Straight-line: conv_6(conv_5(p_high) (.) alpha + conv_down(p_low)).
        Tensor refined = oracle_conv2d(p_high, ConvSpec{4, 4, 3, 1, 1, true}, reg.get("crb.refine.w"),
                                       &reg.get("crb.refine.b"));
        Tensor down = oracle_conv2d(p_low, ConvSpec{4, 4, 3, 2, 1, true}, reg.get("crb.down.w"),
                                    &reg.get("crb.down.b"));
        Tensor fused = Tensor::zeros({1, 4, 4, 4});
        for (long ch = 0; ch < 4; ++ch)
            for (long y = 0; y < 4; ++y)
                for (long x = 0; x < 4; ++x)
                    fused.at(0, ch, y, x) =
                        refined.at(0, ch, y, x) * alpha.at(0, ch, 0, 0) + down.at(0, ch, y, x);
        Tensor want_c = oracle_conv2d(fused, ConvSpec{4, 4, 3, 1, 1, true}, reg.get("crb.out.w"),
                                      &reg.get("crb.out.b"));
        worst_crb = std::max(worst_crb, max_abs_diff(got_c, want_c));
    }
    CriterionResult c;
    c.name = "fusion-exactness";
    c.pass = worst_srb <= 1e-12 && worst_crb <= 1e-12;
    c.detail = "srb_fuse " + fmt(worst_srb) + ", crb_fuse " + fmt(worst_crb);
    return c;
}

CriterionResult criterion_degeneracy() {
    Rng rng(777);
    std::ostringstream detail;
    bool pass = true;

    // (a) zero-offset warp equals bilinear upsample exactly.
    Tensor src = rand_tensor({1, 3, 4, 4}, rng);
    Tensor zero_delta = Tensor::zeros({1, 2, 8, 8});
    pass &= bitwise_equal(srb_warp(src, zero_delta), upsample2x(Upsample::bilinear, src));
    detail << "warp-degenerate " << (pass ? "ok" : "FAIL");

    // (b) zero-initialized heads: srb_forward collapses to
    // conv_out(0.5*bilinear_up(f_high) + up(f_high) + f_low).
    {
        const SrbConfig scfg{4, 4, true, Upsample::nearest};
        ModelParams reg;
        Rng init(999);
        register_srb(reg, "srb", scfg, init);
        register_conv(reg, "out", ConvSpec{4, 4, 3, 1, 1, true}, init);
        Tensor f_high = rand_tensor({1, 4, 4, 4}, rng);
        Tensor f_low = rand_tensor({1, 4, 8, 8}, rng);
        Tensor got = srb_forward(f_high, f_low, reg, "srb", "out", scfg);
        Tensor expect_in = add(add(scale(upsample2x(Upsample::bilinear, f_high), 0.5),
                                   upsample2x(Upsample::nearest, f_high)),
                               f_low);
        Tensor want = conv2d(expect_in, ConvSpec{4, 4, 3, 1, 1, true}, reg.get("out.w"), &reg.get("out.b"));
        const bool ok = max_abs_diff(got, want) <= 1e-12;
        pass &= ok;
        detail << ", srb-zero-init " << (ok ? "ok" : "FAIL");
    }
    {
        const CrbConfig ccfg{4, 3, 3, GateSource::low};
        ModelParams reg;
        Rng init(998);
        register_crb(reg, "crb", ccfg, init);
        Tensor p_low = rand_tensor({1, 4, 8, 8}, rng);
        Tensor p_high = rand_tensor({1, 4, 4, 4}, rng);
        Tensor got = crb_forward(p_low, p_high, reg, "crb", ccfg);
        Tensor refined = conv2d(p_high, ConvSpec{4, 4, 3, 1, 1, true}, reg.get("crb.refine.w"),
                                &reg.get("crb.refine.b"));
        Tensor down = conv2d(p_low, ConvSpec{4, 4, 3, 2, 1, true}, reg.get("crb.down.w"),
                             &reg.get("crb.down.b"));
        Tensor fused = add(scale(refined, 0.5), down);
        Tensor want = conv2d(fused, ConvSpec{4, 4, 3, 1, 1, true}, reg.get("crb.out.w"),
                             &reg.get("crb.out.b"));
        const bool ok = max_abs_diff(got, want) <= 1e-12;
        pass &= ok;
        detail << ", crb-zero-init " << (ok ? "ok" : "FAIL");
    }

    // (c) all toggles off == plain FPN bitwise.
    {
        PyramidConfig cfg;
        cfg.channels = 8;
        cfg.srb_enabled = cfg.crb_enabled = cfg.ppm_enabled = false;
        ModelParams reg = build_params(cfg, 31, false);
        Rng data(1234);
        Tensor img = rand_tensor({1, 3, 64, 64}, data);
        PyramidLevels feats = toy_backbone(img, reg);
        PyramidLevels a = drfpn_forward(feats, cfg, reg);
        PyramidLevels b = fpn_forward(feats, reg, cfg);
        bool ok = true;
        for (int l = 2; l <= 5; ++l) ok &= bitwise_equal(a.level(l), b.level(l));
        pass &= ok;
        detail << ", all-off-bitwise " << (ok ? "ok" : "FAIL");
    }
    return {"degeneracy-chain", pass, detail.str()};
}

CriterionResult criterion_offset_normalization() {
    Rng rng(888);
    Tensor src = rand_tensor({1, 2, 8, 8}, rng);
    const long hf = 16, wf = 16;
    Tensor zero_delta = Tensor::zeros({1, 2, hf, wf});
    Tensor base = srb_warp(src, zero_delta);
    // Raw x-offset of (H+W)/2 normalizes to exactly one coarse pixel.
    Tensor delta = Tensor::zeros({1, 2, hf, wf});
    for (long i = 0; i < hf; ++i)
        for (long j = 0; j < wf; ++j) delta.at(0, 0, i, j) = static_cast<double>(hf + wf) / 2.0;
    Tensor shifted = srb_warp(src, delta);
    // One coarse pixel = two fine output columns; compare where neither lands
    // in the clamped border.
    double worst = 0.0;
    long compared = 0;
    for (long c = 0; c < 2; ++c)
        for (long i = 0; i < hf; ++i)
            for (long j = 2; j + 2 < wf; ++j) {
                const double u = (static_cast<double>(j) + 0.5) / 2.0 - 0.5 + 1.0;
                if (u <= 0.0 || u >= 7.0) continue;
                worst = std::max(worst, std::abs(shifted.at(0, c, i, j) - base.at(0, c, i, j + 2)));
                ++compared;
            }
    CriterionResult c;
    c.name = "offset-normalization";
    c.pass = compared > 0 && worst <= 1e-12;
    c.detail = std::to_string(compared) + " interior pixels, max diff " + fmt(worst);
    return c;
}

CriterionResult criterion_ablation_parity() {
    PyramidConfig base;
    base.channels = 32;
    base.ppm_bins = {1, 2};
    base.srb_enabled = base.crb_enabled = base.ppm_enabled = false;
    const long c = base.channels;
    const long cr = c / base.compression;
    const long c5 = base.in_channels[3];
    const long nb = static_cast<long>(base.ppm_bins.size());

    auto conv_params = [](long in, long out, long k) { return out * in * k * k + out; };
    // Closed-form module sizes from the conv geometry.
    const long srb_delta =
        3 * (conv_params(c, cr, 1) * 2 + conv_params(cr, cr, 3) /*deconv*/ +
             conv_params(2 * cr, cr, 3) /*trunk*/ + conv_params(cr, 2, 3) + conv_params(cr, 1, 3));
    const long crb_delta = conv_params(c, c, 3) /*n2*/ +
                           3 * (conv_params(c, c, 1) + conv_params(c, c, 3) * 3);
    const long ppm_delta = nb * conv_params(c5, c5 / nb, 1) + conv_params(2 * c5, c, 1) +
                           conv_params(c + c5, c, 1) - conv_params(c5, c, 1) /*lateral.5*/;

    const long base_total = param_count(base)["total"];
    bool pass = true;
    std::ostringstream detail;
    for (int mask = 0; mask < 8; ++mask) {
        PyramidConfig cfg = base;
        cfg.srb_enabled = mask & 1;
        cfg.crb_enabled = mask & 2;
        cfg.ppm_enabled = mask & 4;
        const long expect = base_total + (cfg.srb_enabled ? srb_delta : 0) +
                            (cfg.crb_enabled ? crb_delta : 0) + (cfg.ppm_enabled ? ppm_delta : 0);
        const long got = param_count(cfg)["total"];
        if (got != expect) {
            pass = false;
            detail << "mask " << mask << ": got " << got << " want " << expect << "; ";
        }
    }
    // The three placements must construct and produce correct shapes.
    for (Placement pl : {Placement::td_srb_bu_crb, Placement::td_crb_bu_srb, Placement::td_srb_crb}) {
        PyramidConfig cfg;
        cfg.channels = 8;
        cfg.ppm_bins = {1, 2};
        cfg.placement = pl;
        ModelParams reg = build_params(cfg, 91, false);
        Rng data(4321);
        Tensor img = rand_tensor({1, 3, 64, 64}, data);
        PyramidLevels out = drfpn_forward(toy_backbone(img, reg), cfg, reg);
        for (int l = 2; l <= 5; ++l) {
            const long ext = 64 / PyramidLevels::strides[l - 2];
            if (!(out.level(l).shape == Shape4{1, 8, ext, ext})) {
                pass = false;
                detail << "placement " << static_cast<int>(pl) << " level " << l << " shape "
                       << out.level(l).shape.str() << "; ";
            }
        }
    }
    if (pass) detail << "8 toggle combos + 3 placements ok";
    return {"ablation-parity", pass, detail.str()};
}

CriterionResult criterion_training_smoke(bool quick) {
    namespace fs = std::filesystem;
    const auto t0 = std::chrono::steady_clock::now();
    RunConfig drfpn_cfg = RunConfig::defaults();
    if (quick) {
        drfpn_cfg.steps = 5;
        drfpn_cfg.dataset_size = 2;
    }
    RunConfig fpn_cfg = drfpn_cfg;
    fpn_cfg.model.srb_enabled = fpn_cfg.model.crb_enabled = fpn_cfg.model.ppm_enabled = false;

    TrainReport drfpn_rep = train(drfpn_cfg);
    TrainReport fpn_rep = train(fpn_cfg);
    TrainReport drfpn_rep2 = train(drfpn_cfg);

    const fs::path dir = fs::temp_directory_path() / "drfpn_accept";
    fs::create_directories(dir);
    const std::string w1 = (dir / "run1.drfw").string();
    const std::string w2 = (dir / "run2.drfw").string();
    save_weights(drfpn_rep.params, w1);
    save_weights(drfpn_rep2.params, w2);
    std::ifstream f1(w1, std::ios::binary), f2(w2, std::ios::binary);
    std::stringstream b1, b2;
    b1 << f1.rdbuf();
    b2 << f2.rdbuf();
    const bool deterministic = b1.str() == b2.str() && !b1.str().empty();

    const bool drfpn_ok = quick || drfpn_rep.final_loss <= 0.5 * drfpn_rep.initial_loss;
    const bool fpn_ok = quick || fpn_rep.final_loss <= 0.5 * fpn_rep.initial_loss;
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CriterionResult c;
    c.name = "training-smoke";
    c.pass = drfpn_ok && fpn_ok && deterministic && secs < 1800.0;
    c.detail = "drfpn " + fmt(drfpn_rep.initial_loss) + "->" + fmt(drfpn_rep.final_loss) + ", fpn " +
               fmt(fpn_rep.initial_loss) + "->" + fmt(fpn_rep.final_loss) +
               (deterministic ? ", deterministic" : ", NON-DETERMINISTIC") + ", " + fmt(secs) + "s";
    return c;
}

CriterionResult criterion_persistence() {
    namespace fs = std::filesystem;
    PyramidConfig cfg;
    cfg.channels = 8;
    cfg.ppm_bins = {1, 2};
    ModelParams params = build_params(cfg, 47, true);
    const fs::path dir = fs::temp_directory_path() / "drfpn_accept";
    fs::create_directories(dir);
    const std::string p1 = (dir / "persist1.drfw").string();
    const std::string p2 = (dir / "persist2.drfw").string();
    save_weights(params, p1);
    ModelParams reload = build_params(cfg, 48, true);
    load_weights(p1, reload);
    save_weights(reload, p2);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::stringstream b1, b2;
    b1 << f1.rdbuf();
    b2 << f2.rdbuf();
    bool roundtrip = b1.str() == b2.str() && !b1.str().empty();

    bool truncated_rejected = false;
    const std::string pt = (dir / "truncated.drfw").string();
    write_text_file(b1.str().substr(0, b1.str().size() / 2), pt);
    ModelParams victim = build_params(cfg, 49, true);
    const std::string before = [&] {
        std::ostringstream os;
        for (double v : *victim.get(params.names().front()).data) os << v << ",";
        return os.str();
    }();
    try {
        load_weights(pt, victim);
    } catch (const FormatError&) {
        truncated_rejected = true;
    }
    const std::string after = [&] {
        std::ostringstream os;
        for (double v : *victim.get(params.names().front()).data) os << v << ",";
        return os.str();
    }();
    const bool no_partial = before == after;

    // Shape mismatch must name the offending tensor.
    bool named = false;
    PyramidConfig other = cfg;
    other.channels = 16;
    ModelParams wrong = build_params(other, 50, true);
    try {
        load_weights(p1, wrong);
    } catch (const FormatError& e) {
        named = std::string(e.what()).find("lateral.2.w") != std::string::npos;
    }
    CriterionResult c;
    c.name = "persistence";
    c.pass = roundtrip && truncated_rejected && no_partial && named;
    c.detail = std::string("roundtrip ") + (roundtrip ? "ok" : "FAIL") + ", truncated " +
               (truncated_rejected ? "rejected" : "ACCEPTED") + ", partial-load " +
               (no_partial ? "none" : "MUTATED") + ", named-tensor " + (named ? "ok" : "FAIL");
    return c;
}

}  // namespace

std::vector<CriterionResult> run_acceptance(std::ostream& log, bool quick_training) {
    std::vector<CriterionResult> results;
    const Criterion criteria[] = {
        criterion_gradients,
        criterion_conv_oracles,
        criterion_fusion_exactness,
        criterion_degeneracy,
        criterion_offset_normalization,
        criterion_ablation_parity,
        [quick_training] { return criterion_training_smoke(quick_training); },
        criterion_persistence,
    };
    for (const auto& crit : criteria) {
        CriterionResult r = crit();
        log << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << ": " << r.detail << "\n";
        results.push_back(std::move(r));
    }
    return results;
}

}  // namespace drfpn
