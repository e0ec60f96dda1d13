#include <doctest.h>

#include "drfpn/gradcheck.hpp"
#include "drfpn/ops.hpp"

using namespace drfpn;

namespace {

Tensor vec(std::vector<double> v) {
    const long n = static_cast<long>(v.size());
    return Tensor::from_values({1, 1, 1, n}, std::move(v));
}

}  // namespace

TEST_CASE("tensor creation") {
    Tensor z = Tensor::zeros({1, 1, 2, 2});
    for (double v : *z.data) CHECK(v == 0.0);

    Tensor f = Tensor::full({1, 2, 1, 1}, 3.5);
    CHECK(f.at(0, 0, 0, 0) == 3.5);
    CHECK(f.at(0, 1, 0, 0) == 3.5);

    Rng a(7), b(7);
    Tensor r1 = Tensor::randn({2, 3, 4, 4}, a);
    Tensor r2 = Tensor::randn({2, 3, 4, 4}, b);
    for (long i = 0; i < r1.elems(); ++i) CHECK((*r1.data)[i] == (*r2.data)[i]);

    const Shape4 bad{0, 1, 1, 1};
    CHECK_THROWS_AS(bad.validate(), ShapeError);
}

TEST_CASE("elementwise arithmetic") {
    Tensor a = vec({1, 2});
    Tensor b = vec({3, 4});
    Tensor s = add(a, b);
    CHECK(s.at(0, 0, 0, 0) == 4.0);
    CHECK(s.at(0, 0, 0, 1) == 6.0);

    Rng rng(5);
    Tensor x = Tensor::randn({2, 3, 4, 4}, rng);
    Tensor ones = Tensor::full({2, 3, 1, 1}, 1.0);
    Tensor g = mul(x, ones);
    for (long i = 0; i < x.elems(); ++i) CHECK((*g.data)[i] == (*x.data)[i]);

    CHECK_THROWS_AS(add(vec({1, 2}), vec({1, 2, 3})), ShapeError);
}

TEST_CASE("broadcast backward sums over broadcast axes") {
    Rng rng(11);
    Tensor a = Tensor::randn({1, 2, 3, 3}, rng);
    Tensor gate = Tensor::randn({1, 2, 1, 1}, rng);
    gate.requires_grad = true;
    Tape tape;
    tape.watch(gate);
    Tensor loss = reduce_sum(mul(a, gate));
    tape.backward(loss);
    Tensor g = tape.grad(gate);
    for (long c = 0; c < 2; ++c) {
        double want = 0.0;
        for (long i = 0; i < 3; ++i)
            for (long j = 0; j < 3; ++j) want += a.at(0, c, i, j);
        CHECK(g.at(0, c, 0, 0) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("concat and slice") {
    Rng rng(3);
    Tensor a = Tensor::randn({1, 2, 2, 2}, rng);
    Tensor b = Tensor::randn({1, 3, 2, 2}, rng);
    Tensor cat = concat_channels(a, b);
    CHECK(cat.shape == Shape4{1, 5, 2, 2});
    Tensor a2 = slice_channels(cat, 0, 2);
    Tensor b2 = slice_channels(cat, 2, 5);
    for (long i = 0; i < a.elems(); ++i) CHECK((*a2.data)[i] == (*a.data)[i]);
    for (long i = 0; i < b.elems(); ++i) CHECK((*b2.data)[i] == (*b.data)[i]);

    // cat(cat(a,b),c) == cat(a,cat(b,c))
    Tensor c = Tensor::randn({1, 1, 2, 2}, rng);
    Tensor l = concat_channels(concat_channels(a, b), c);
    Tensor r = concat_channels(a, concat_channels(b, c));
    for (long i = 0; i < l.elems(); ++i) CHECK((*l.data)[i] == (*r.data)[i]);

    // backward of sum(concat) is all-ones on both inputs
    Tensor wa = a.clone(), wb = b.clone();
    wa.requires_grad = wb.requires_grad = true;
    Tape tape;
    tape.watch(wa);
    tape.watch(wb);
    tape.backward(reduce_sum(concat_channels(wa, wb)));
    Tensor ga = tape.grad(wa), gb = tape.grad(wb);
    for (double v : *ga.data) CHECK(v == 1.0);
    for (double v : *gb.data) CHECK(v == 1.0);
}

TEST_CASE("activations") {
    Tensor r = relu(vec({-1, 0, 2}));
    CHECK(r.at(0, 0, 0, 0) == 0.0);
    CHECK(r.at(0, 0, 0, 1) == 0.0);
    CHECK(r.at(0, 0, 0, 2) == 2.0);
    CHECK(sigmoid(vec({0})).at(0, 0, 0, 0) == 0.5);

    const double err = gradcheck([](Tensor& x) { return reduce_sum(sigmoid(x)); },
                                 vec({-2, 0, 3}), 1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("reductions") {
    Tensor x = Tensor::full({1, 1, 2, 2}, 2.0);
    CHECK(reduce_sum(x).at(0, 0, 0, 0) == 8.0);
    CHECK(reduce_mean(x).at(0, 0, 0, 0) == 2.0);

    Tensor w = x.clone();
    w.requires_grad = true;
    Tape tape;
    tape.watch(w);
    tape.backward(reduce_mean(w));
    Tensor gw = tape.grad(w);
    for (double v : *gw.data) CHECK(v == 0.25);
}

TEST_CASE("backward basics") {
    Rng rng(9);
    Tensor x = Tensor::randn({1, 2, 3, 3}, rng);
    x.requires_grad = true;
    Tape tape;
    tape.watch(x);
    tape.backward(reduce_sum(mul(x, x)));
    Tensor g = tape.grad(x);
    for (long i = 0; i < x.elems(); ++i) {
        CHECK((*g.data)[i] == doctest::Approx(2.0 * (*x.data)[i]).epsilon(1e-12));
    }
}

TEST_CASE("backward requires a scalar loss and consumes the tape") {
    Rng rng(13);
    Tensor x = Tensor::randn({1, 1, 2, 2}, rng);
    x.requires_grad = true;
    Tape tape;
    tape.watch(x);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
    Tensor loss = reduce_sum(y);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), ContractError);
}

TEST_CASE("gradient accumulates across fan-out") {
    Tensor x = vec({1.5});
    x.requires_grad = true;
    Tape tape;
    tape.watch(x);
    // loss = sum(x + x) -> grad 2
    tape.backward(reduce_sum(add(x, x)));
    CHECK(tape.grad(x).at(0, 0, 0, 0) == 2.0);
}

TEST_CASE("gradcheck itself") {
    Rng rng(21);
    Tensor x = Tensor::randn({1, 2, 3, 3}, rng);
    CHECK(gradcheck([](Tensor& t) { return reduce_sum(t); }, x, 1e-3) <= 1e-10);

    Tensor b = Tensor::randn({1, 2, 3, 3}, rng);
    const double err =
        gradcheck([&](Tensor& t) { return reduce_sum(mul(t, b)); }, x, 1e-3);
    CHECK(err < 1e-6);
}
