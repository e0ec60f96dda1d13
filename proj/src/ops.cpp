#include "drfpn/ops.hpp"

#include <cmath>

namespace drfpn {

namespace {

enum class Bcast { same, channel, spatial };

Bcast broadcast_mode(const Shape4& a, const Shape4& b) {
    if (a == b) return Bcast::same;
    if (b.n == a.n && b.c == a.c && b.h == 1 && b.w == 1) return Bcast::channel;
    if (b.n == a.n && b.c == 1 && b.h == a.h && b.w == a.w) return Bcast::spatial;
    throw ShapeError("cannot broadcast " + b.str() + " against " + a.str());
}

// Index into b for output coordinate (n,c,h,w) under the given mode.
long b_index(const Shape4& a, Bcast mode, long idx) {
    long w = idx % a.w;
    long h = (idx / a.w) % a.h;
    long c = (idx / (a.w * a.h)) % a.c;
    long n = idx / (a.w * a.h * a.c);
    switch (mode) {
        case Bcast::same: return idx;
        case Bcast::channel: return n * a.c + c;
        case Bcast::spatial: return (n * a.h + h) * a.w + w;
    }
    return idx;
}

enum class Arith { add, sub, mul };

Tensor arith(Arith op, const Tensor& a, const Tensor& b) {
    Bcast mode = broadcast_mode(a.shape, b.shape);
    Tensor out = Tensor::zeros(a.shape);
    const auto& av = *a.data;
    const auto& bv = *b.data;
    auto& ov = *out.data;
    const long n = a.elems();
    for (long i = 0; i < n; ++i) {
        double bi = bv[b_index(a.shape, mode, i)];
        switch (op) {
            case Arith::add: ov[i] = av[i] + bi; break;
            case Arith::sub: ov[i] = av[i] - bi; break;
            case Arith::mul: ov[i] = av[i] * bi; break;
        }
    }
    Tape* tape = common_tape({&a, &b});
    if (!tape) return out;
    int na = node_on(a, tape), nb = node_on(b, tape);
    Shape4 ash = a.shape;
    auto adata = a.data;
    auto bdata = b.data;
    bind_output(out, tape, {na, nb}, [=](const std::vector<double>& g, Tape& t) {
        if (na >= 0) {
            auto& ga = t.grad_buf(na);
            for (long i = 0; i < n; ++i) {
                double bi = (op == Arith::mul) ? (*bdata)[b_index(ash, mode, i)] : 1.0;
                ga[i] += g[i] * bi;
            }
        }
        if (nb >= 0) {
            auto& gb = t.grad_buf(nb);
            for (long i = 0; i < n; ++i) {
                long j = b_index(ash, mode, i);
                switch (op) {
                    case Arith::add: gb[j] += g[i]; break;
                    case Arith::sub: gb[j] -= g[i]; break;
                    case Arith::mul: gb[j] += g[i] * (*adata)[i]; break;
                }
            }
        }
    });
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return arith(Arith::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return arith(Arith::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return arith(Arith::mul, a, b); }

Tensor scale(const Tensor& x, double k) {
    Tensor out = Tensor::zeros(x.shape);
    const long n = x.elems();
    for (long i = 0; i < n; ++i) (*out.data)[i] = (*x.data)[i] * k;
    Tape* tape = common_tape({&x});
    int nx = node_on(x, tape);
    bind_output(out, tape, {nx}, [=](const std::vector<double>& g, Tape& t) {
        if (nx < 0) return;
        auto& gx = t.grad_buf(nx);
        for (long i = 0; i < n; ++i) gx[i] += g[i] * k;
    });
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.shape.n != b.shape.n || a.shape.h != b.shape.h || a.shape.w != b.shape.w) {
        throw ShapeError("concat_channels: " + a.shape.str() + " vs " + b.shape.str());
    }
    Shape4 os{a.shape.n, a.shape.c + b.shape.c, a.shape.h, a.shape.w};
    Tensor out = Tensor::zeros(os);
    const long hw = os.h * os.w;
    for (long n = 0; n < os.n; ++n) {
        for (long c = 0; c < a.shape.c; ++c)
            for (long i = 0; i < hw; ++i)
                (*out.data)[(n * os.c + c) * hw + i] = (*a.data)[(n * a.shape.c + c) * hw + i];
        for (long c = 0; c < b.shape.c; ++c)
            for (long i = 0; i < hw; ++i)
                (*out.data)[(n * os.c + a.shape.c + c) * hw + i] =
                    (*b.data)[(n * b.shape.c + c) * hw + i];
    }
    Tape* tape = common_tape({&a, &b});
    int na = node_on(a, tape), nb = node_on(b, tape);
    long ca = a.shape.c, cb = b.shape.c, nn = os.n;
    bind_output(out, tape, {na, nb}, [=](const std::vector<double>& g, Tape& t) {
        long oc = ca + cb;
        if (na >= 0) {
            auto& ga = t.grad_buf(na);
            for (long n = 0; n < nn; ++n)
                for (long c = 0; c < ca; ++c)
                    for (long i = 0; i < hw; ++i)
                        ga[(n * ca + c) * hw + i] += g[(n * oc + c) * hw + i];
        }
        if (nb >= 0) {
            auto& gb = t.grad_buf(nb);
            for (long n = 0; n < nn; ++n)
                for (long c = 0; c < cb; ++c)
                    for (long i = 0; i < hw; ++i)
                        gb[(n * cb + c) * hw + i] += g[(n * oc + ca + c) * hw + i];
        }
    });
    return out;
}

Tensor slice_channels(const Tensor& x, long c_begin, long c_end) {
    if (c_begin < 0 || c_end > x.shape.c || c_begin >= c_end) {
        throw ShapeError("slice_channels: bad range [" + std::to_string(c_begin) + "," +
                         std::to_string(c_end) + ") for " + x.shape.str());
    }
    Shape4 os{x.shape.n, c_end - c_begin, x.shape.h, x.shape.w};
    Tensor out = Tensor::zeros(os);
    const long hw = os.h * os.w;
    for (long n = 0; n < os.n; ++n)
        for (long c = 0; c < os.c; ++c)
            for (long i = 0; i < hw; ++i)
                (*out.data)[(n * os.c + c) * hw + i] =
                    (*x.data)[(n * x.shape.c + c_begin + c) * hw + i];
    Tape* tape = common_tape({&x});
    int nx = node_on(x, tape);
    long xc = x.shape.c, oc = os.c, nn = os.n;
    bind_output(out, tape, {nx}, [=](const std::vector<double>& g, Tape& t) {
        if (nx < 0) return;
        auto& gx = t.grad_buf(nx);
        for (long n = 0; n < nn; ++n)
            for (long c = 0; c < oc; ++c)
                for (long i = 0; i < hw; ++i)
                    gx[(n * xc + c_begin + c) * hw + i] += g[(n * oc + c) * hw + i];
    });
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape);
    const long n = x.elems();
    for (long i = 0; i < n; ++i) (*out.data)[i] = (*x.data)[i] > 0.0 ? (*x.data)[i] : 0.0;
    Tape* tape = common_tape({&x});
    int nx = node_on(x, tape);
    auto xdata = x.data;
    bind_output(out, tape, {nx}, [=](const std::vector<double>& g, Tape& t) {
        if (nx < 0) return;
        auto& gx = t.grad_buf(nx);
        for (long i = 0; i < n; ++i)
            if ((*xdata)[i] > 0.0) gx[i] += g[i];
    });
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape);
    const long n = x.elems();
    for (long i = 0; i < n; ++i) (*out.data)[i] = 1.0 / (1.0 + std::exp(-(*x.data)[i]));
    Tape* tape = common_tape({&x});
    int nx = node_on(x, tape);
    auto odata = out.data;
    bind_output(out, tape, {nx}, [=](const std::vector<double>& g, Tape& t) {
        if (nx < 0) return;
        auto& gx = t.grad_buf(nx);
        for (long i = 0; i < n; ++i) {
            double s = (*odata)[i];
            gx[i] += g[i] * s * (1.0 - s);
        }
    });
    return out;
}

namespace {

Tensor reduce(const Tensor& x, bool mean) {
    Tensor out = Tensor::zeros(Shape4{1, 1, 1, 1});
    const long n = x.elems();
    double acc = 0.0;
    for (long i = 0; i < n; ++i) acc += (*x.data)[i];
    (*out.data)[0] = mean ? acc / static_cast<double>(n) : acc;
    Tape* tape = common_tape({&x});
    int nx = node_on(x, tape);
    double unit = mean ? 1.0 / static_cast<double>(n) : 1.0;
    bind_output(out, tape, {nx}, [=](const std::vector<double>& g, Tape& t) {
        if (nx < 0) return;
        auto& gx = t.grad_buf(nx);
        for (long i = 0; i < n; ++i) gx[i] += g[0] * unit;
    });
    return out;
}

}  // namespace

Tensor reduce_sum(const Tensor& x) { return reduce(x, false); }
Tensor reduce_mean(const Tensor& x) { return reduce(x, true); }

}  // namespace drfpn
