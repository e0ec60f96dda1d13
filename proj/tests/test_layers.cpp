#include <doctest.h>

#include <cmath>
#include <limits>

#include "drfpn/gradcheck.hpp"
#include "drfpn/layers.hpp"
#include "drfpn/ops.hpp"

using namespace drfpn;

TEST_CASE("conv2d counting and identity") {
    // all-ones 3x3 input, all-ones 3x3 kernel, p=1: center 9, corners 4
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
    ConvSpec spec{1, 1, 3, 1, 1, false};
    Tensor y = conv2d(x, spec, w);
    CHECK(y.at(0, 0, 1, 1) == 9.0);
    CHECK(y.at(0, 0, 0, 0) == 4.0);
    CHECK(y.at(0, 0, 0, 2) == 4.0);
    CHECK(y.at(0, 0, 2, 0) == 4.0);
    CHECK(y.at(0, 0, 2, 2) == 4.0);

    // 1x1 kernel with weight 1, bias 0: identity
    Rng rng(31);
    Tensor r = Tensor::randn({1, 1, 4, 4}, rng);
    Tensor w1 = Tensor::full({1, 1, 1, 1}, 1.0);
    Tensor id = conv2d(r, ConvSpec{1, 1, 1, 1, 0, false}, w1);
    for (long i = 0; i < r.elems(); ++i) CHECK((*id.data)[i] == (*r.data)[i]);

    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 3, 3}), spec, w), ShapeError);
}

TEST_CASE("conv_transpose2d shape and impulse stamp") {
    Rng rng(33);
    Tensor w = Tensor::randn({1, 2, 3, 3}, rng);
    Tensor x = Tensor::zeros({1, 1, 4, 4});
    Tensor y = conv_transpose2d(x, w);
    CHECK(y.shape == Shape4{1, 2, 8, 8});

    // Unit impulse at (1,1): output (ii,jj) = w[p,q] at ii=2*1+p-1, jj=2*1+q-1.
    x.at(0, 0, 1, 1) = 1.0;
    y = conv_transpose2d(x, w);
    for (long o = 0; o < 2; ++o) {
        for (long p = 0; p < 3; ++p) {
            for (long q = 0; q < 3; ++q) {
                CHECK(y.at(0, o, 1 + p, 1 + q) == w.at(0, o, p, q));
            }
        }
    }
    CHECK(y.at(0, 0, 0, 0) == 0.0);
    CHECK(y.at(0, 0, 7, 7) == 0.0);
}

TEST_CASE("conv_transpose2d is the adjoint of strided conv2d") {
    Rng rng(35);
    const ConvSpec down{3, 4, 3, 2, 1, false};
    for (int rep = 0; rep < 5; ++rep) {
        Tensor x = Tensor::randn({1, 3, 8, 8}, rng);
        Tensor w = Tensor::randn({4, 3, 3, 3}, rng);
        Tensor y = Tensor::randn({1, 4, 4, 4}, rng);
        Tensor cx = conv2d(x, down, w);
        Tensor cty = conv_transpose2d(y, w);
        double lhs = 0.0, rhs = 0.0;
        for (long i = 0; i < cx.elems(); ++i) lhs += (*cx.data)[i] * (*y.data)[i];
        for (long i = 0; i < x.elems(); ++i) rhs += (*x.data)[i] * (*cty.data)[i];
        CHECK(std::abs(lhs - rhs) <= 1e-10);
    }
}

TEST_CASE("upsample2x") {
    Tensor x = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor n = upsample2x(Upsample::nearest, x);
    CHECK(n.shape == Shape4{1, 1, 4, 4});
    CHECK(n.at(0, 0, 0, 0) == 1.0);
    CHECK(n.at(0, 0, 0, 1) == 1.0);
    CHECK(n.at(0, 0, 1, 1) == 1.0);
    CHECK(n.at(0, 0, 0, 2) == 2.0);
    CHECK(n.at(0, 0, 2, 0) == 3.0);
    CHECK(n.at(0, 0, 3, 3) == 4.0);

    Tensor c = Tensor::full({1, 2, 3, 3}, 1.75);
    Tensor bc = upsample2x(Upsample::bilinear, c);
    for (double v : *bc.data) CHECK(v == 1.75);

    // Half-pixel formula by hand: output column 1 samples u = 0.25, so
    // row 1 / col 1 mixes the quad with weights (0.75, 0.25) per axis.
    Tensor b = upsample2x(Upsample::bilinear, x);
    CHECK(b.at(0, 0, 0, 0) == 1.0);  // clamped corner
    CHECK(b.at(0, 0, 1, 1) ==
          doctest::Approx(0.75 * (0.75 * 1 + 0.25 * 2) + 0.25 * (0.75 * 3 + 0.25 * 4))
              .epsilon(1e-15));
    CHECK(b.at(0, 0, 1, 2) ==
          doctest::Approx(0.75 * (0.25 * 1 + 0.75 * 2) + 0.25 * (0.25 * 3 + 0.75 * 4))
              .epsilon(1e-15));
}

TEST_CASE("grid_sample_bilinear") {
    Tensor src = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4});

    // identity lattice
    Tensor lattice = Tensor::zeros({1, 2, 2, 2});
    for (long i = 0; i < 2; ++i) {
        for (long j = 0; j < 2; ++j) {
            lattice.at(0, 0, i, j) = static_cast<double>(j);
            lattice.at(0, 1, i, j) = static_cast<double>(i);
        }
    }
    Tensor id = grid_sample_bilinear(src, lattice);
    for (long i = 0; i < src.elems(); ++i) CHECK((*id.data)[i] == (*src.data)[i]);

    // midpoint sample
    Tensor mid = Tensor::zeros({1, 2, 1, 1});
    mid.at(0, 0, 0, 0) = 0.5;
    mid.at(0, 1, 0, 0) = 0.5;
    CHECK(grid_sample_bilinear(src, mid).at(0, 0, 0, 0) == 2.5);

    // coordinate gradient at (0.5, 0.5): d/du = 1.0, d/dv = 2.0
    Tensor g = mid.clone();
    g.requires_grad = true;
    Tape tape;
    tape.watch(g);
    tape.backward(reduce_sum(grid_sample_bilinear(src, g)));
    Tensor gg = tape.grad(g);
    CHECK(gg.at(0, 0, 0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(gg.at(0, 1, 0, 0) == doctest::Approx(2.0).epsilon(1e-12));

    Tensor bad = mid.clone();
    bad.at(0, 0, 0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(grid_sample_bilinear(src, bad), ContractError);
}

TEST_CASE("grid_sample with the half-pixel 2x grid equals bilinear upsample") {
    Rng rng(37);
    Tensor src = Tensor::randn({1, 3, 4, 4}, rng);
    Tensor grid = Tensor::zeros({1, 2, 8, 8});
    for (long i = 0; i < 8; ++i) {
        for (long j = 0; j < 8; ++j) {
            grid.at(0, 0, i, j) = (static_cast<double>(j) + 0.5) / 2.0 - 0.5;
            grid.at(0, 1, i, j) = (static_cast<double>(i) + 0.5) / 2.0 - 0.5;
        }
    }
    Tensor a = grid_sample_bilinear(src, grid);
    Tensor b = upsample2x(Upsample::bilinear, src);
    for (long i = 0; i < a.elems(); ++i) CHECK((*a.data)[i] == (*b.data)[i]);
}

TEST_CASE("pooling") {
    Tensor x = Tensor::from_values({1, 1, 2, 2}, {1, 3, 5, 7});
    CHECK(global_avg_pool(x).at(0, 0, 0, 0) == 4.0);

    Tensor c = Tensor::full({2, 3, 4, 4}, 2.5);
    Tensor gc = global_avg_pool(c);
    CHECK(gc.shape == Shape4{2, 3, 1, 1});
    for (double v : *gc.data) CHECK(v == 2.5);

    // b=1 equals global pool; b=H=W is the identity
    Rng rng(41);
    Tensor r = Tensor::randn({1, 2, 4, 4}, rng);
    Tensor p1 = adaptive_avg_pool(r, 1);
    Tensor gp = global_avg_pool(r);
    for (long i = 0; i < p1.elems(); ++i) CHECK((*p1.data)[i] == (*gp.data)[i]);
    Tensor p4 = adaptive_avg_pool(r, 4);
    for (long i = 0; i < r.elems(); ++i) CHECK((*p4.data)[i] == (*r.data)[i]);

    // b=2 on a 4x4 ramp: quadrant means
    std::vector<double> ramp(16);
    for (int i = 0; i < 16; ++i) ramp[i] = i;
    Tensor rt = Tensor::from_values({1, 1, 4, 4}, ramp);
    Tensor q = adaptive_avg_pool(rt, 2);
    CHECK(q.at(0, 0, 0, 0) == (0 + 1 + 4 + 5) / 4.0);
    CHECK(q.at(0, 0, 0, 1) == (2 + 3 + 6 + 7) / 4.0);
    CHECK(q.at(0, 0, 1, 0) == (8 + 9 + 12 + 13) / 4.0);
    CHECK(q.at(0, 0, 1, 1) == (10 + 11 + 14 + 15) / 4.0);

    CHECK_THROWS_AS(adaptive_avg_pool(rt, 5), ContractError);
}

TEST_CASE("layer gradients") {
    Rng rng(43);
    Tensor m = Tensor::randn({1, 2, 4, 4}, rng);
    const double perr = gradcheck(
        [&](Tensor& x) { return reduce_sum(mul(adaptive_avg_pool(x, 4), m)); },
        Tensor::randn({1, 2, 4, 4}, rng), 1e-3);
    CHECK(perr <= 1e-10);

    Tensor w = Tensor::randn({2, 2, 3, 3}, rng);
    Tensor mask = Tensor::randn({1, 2, 4, 4}, rng);
    const double cerr = gradcheck(
        [&](Tensor& x) {
            return reduce_sum(mul(conv2d(x, ConvSpec{2, 2, 3, 1, 1, false}, w), mask));
        },
        Tensor::randn({1, 2, 4, 4}, rng), 1e-3);
    CHECK(cerr <= 1e-10);
}
