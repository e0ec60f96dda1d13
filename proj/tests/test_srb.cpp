#include <doctest.h>

#include <cmath>

#include "drfpn/gradcheck.hpp"
#include "drfpn/srb.hpp"

using namespace drfpn;

namespace {

const SrbConfig kCfg{8, 4, true, Upsample::nearest};

ModelParams make_params(std::uint64_t seed, bool randomize_heads = false) {
    ModelParams reg;
    Rng rng(seed);
    register_srb(reg, "srb", kCfg, rng);
    register_conv(reg, "out", ConvSpec{8, 8, 3, 1, 1, true}, rng);
    if (randomize_heads) {
        Rng r2(seed ^ 0x9e3779b97f4a7c15ull);
        for (const auto& name : reg.names()) {
            for (double& v : *reg.get(name).data) v = r2.normal(0.0, 0.2);
        }
    }
    return reg;
}

}  // namespace

TEST_CASE("subnet shapes and zero-init collapse") {
    ModelParams reg = make_params(1);
    Rng rng(2);
    Tensor f_high = Tensor::randn({1, 8, 8, 8}, rng);
    Tensor f_low = Tensor::randn({1, 8, 16, 16}, rng);
    SrbSubnetOut s = srb_subnet(f_high, f_low, reg, "srb", kCfg);
    CHECK(s.delta.shape == Shape4{1, 2, 16, 16});
    CHECK(s.omega.shape == Shape4{1, 1, 16, 16});
    // zero-initialized heads: delta == 0, omega == 0.5 regardless of input
    for (double v : *s.delta.data) CHECK(v == 0.0);
    for (double v : *s.omega.data) CHECK(v == 0.5);

    CHECK_THROWS_AS(srb_subnet(f_high, Tensor::zeros({1, 8, 12, 12}), reg, "srb", kCfg),
                    ShapeError);
}

TEST_CASE("zero-offset warp degenerates to bilinear upsample") {
    Rng rng(3);
    Tensor f_high = Tensor::randn({1, 8, 4, 4}, rng);
    Tensor zero = Tensor::zeros({1, 2, 8, 8});
    Tensor warped = srb_warp(f_high, zero);
    Tensor up = upsample2x(Upsample::bilinear, f_high);
    for (long i = 0; i < warped.elems(); ++i) CHECK((*warped.data)[i] == (*up.data)[i]);
}

TEST_CASE("constant offset shifts interior content by one coarse pixel") {
    Rng rng(4);
    Tensor f_high = Tensor::randn({1, 2, 8, 8}, rng);
    Tensor zero = Tensor::zeros({1, 2, 16, 16});
    Tensor base = srb_warp(f_high, zero);
    // raw x-offset (H+W)/2 -> normalized offset exactly 1 coarse pixel
    Tensor delta = Tensor::zeros({1, 2, 16, 16});
    for (long i = 0; i < 16; ++i)
        for (long j = 0; j < 16; ++j) delta.at(0, 0, i, j) = 16.0;
    Tensor shifted = srb_warp(f_high, delta);
    long compared = 0;
    for (long c = 0; c < 2; ++c) {
        for (long i = 0; i < 16; ++i) {
            for (long j = 0; j + 2 < 16; ++j) {
                const double u = (static_cast<double>(j) + 0.5) / 2.0 - 0.5 + 1.0;
                if (u <= 0.0 || u >= 7.0) continue;
                CHECK(shifted.at(0, c, i, j) ==
                      doctest::Approx(base.at(0, c, i, j + 2)).epsilon(1e-14));
                ++compared;
            }
        }
    }
    CHECK(compared > 0);
}

TEST_CASE("fuse collapses for degenerate gates") {
    ModelParams reg = make_params(5, true);
    Rng rng(6);
    Tensor f_high = Tensor::randn({1, 8, 4, 4}, rng);
    Tensor f_low = Tensor::randn({1, 8, 8, 8}, rng);
    Tensor f_tilde = Tensor::randn({1, 8, 8, 8}, rng);

    // omega == 0: the warped map contributes nothing
    Tensor zero_w = Tensor::zeros({1, 1, 8, 8});
    Tensor got = srb_fuse(f_tilde, zero_w, f_high, f_low, reg, "out", kCfg);
    Tensor fused = add(upsample2x(Upsample::nearest, f_high), f_low);
    Tensor want = conv2d(fused, ConvSpec{8, 8, 3, 1, 1, true}, reg.get("out.w"), &reg.get("out.b"));
    double diff = 0.0;
    for (long i = 0; i < got.elems(); ++i)
        diff = std::max(diff, std::abs((*got.data)[i] - (*want.data)[i]));
    CHECK(diff <= 1e-12);

    CHECK_THROWS_AS(srb_fuse(f_tilde, zero_w, f_high, f_high, reg, "out", kCfg), ShapeError);
}

TEST_CASE("forward shape and zero-init closed form") {
    ModelParams reg = make_params(7);
    Rng rng(8);
    Tensor f_high = Tensor::randn({1, 8, 8, 8}, rng);
    Tensor f_low = Tensor::randn({1, 8, 16, 16}, rng);
    Tensor p = srb_forward(f_high, f_low, reg, "srb", "out", kCfg);
    CHECK(p.shape == Shape4{1, 8, 16, 16});

    // P = conv_out(0.5 * bilinear_up(f_high) + up(f_high) + f_low)
    Tensor fused = add(add(scale(upsample2x(Upsample::bilinear, f_high), 0.5),
                           upsample2x(Upsample::nearest, f_high)),
                       f_low);
    Tensor want = conv2d(fused, ConvSpec{8, 8, 3, 1, 1, true}, reg.get("out.w"), &reg.get("out.b"));
    double diff = 0.0;
    for (long i = 0; i < p.elems(); ++i)
        diff = std::max(diff, std::abs((*p.data)[i] - (*want.data)[i]));
    CHECK(diff <= 1e-12);
}

TEST_CASE("end-to-end gradient through the block") {
    ModelParams reg = make_params(9, true);
    Rng rng(10);
    Tensor f_high = Tensor::randn({1, 8, 4, 4}, rng);
    const double err = gradcheck(
        [&](Tensor& f_low) {
            Tensor p = srb_forward(f_high, f_low, reg, "srb", "out", kCfg);
            return reduce_mean(mul(p, p));
        },
        Tensor::randn({1, 8, 8, 8}, rng), 1e-5);
    CHECK(err < 1e-4);
}
