#include "drfpn/layers.hpp"

#include <algorithm>
#include <cmath>

namespace drfpn {

Tensor conv2d(const Tensor& x, const ConvSpec& spec, const Tensor& weight, const Tensor* bias) {
    const Shape4 xs = x.shape;
    if (xs.c != spec.in_channels) {
        throw ShapeError("conv2d: input has " + std::to_string(xs.c) + " channels, spec expects " +
                         std::to_string(spec.in_channels));
    }
    Shape4 ws{spec.out_channels, spec.in_channels, spec.kernel, spec.kernel};
    if (!(weight.shape == ws)) {
        throw ShapeError("conv2d: weight " + weight.shape.str() + " does not match " + ws.str());
    }
    if (bias && !(bias->shape == Shape4{1, spec.out_channels, 1, 1})) {
        throw ShapeError("conv2d: bias shape " + bias->shape.str());
    }
    const long oh = spec.out_extent(xs.h);
    const long ow = spec.out_extent(xs.w);
    if (oh < 1 || ow < 1) throw ShapeError("conv2d: output extent < 1 for input " + xs.str());

    const long k = spec.kernel, s = spec.stride, pad = spec.padding;
    const long ic = spec.in_channels, oc = spec.out_channels;
    Tensor out = Tensor::zeros(Shape4{xs.n, oc, oh, ow});
    const auto& xv = *x.data;
    const auto& wv = *weight.data;
    auto& ov = *out.data;
    for (long n = 0; n < xs.n; ++n) {
        for (long o = 0; o < oc; ++o) {
            const double b = bias ? (*bias->data)[o] : 0.0;
            for (long oi = 0; oi < oh; ++oi) {
                for (long oj = 0; oj < ow; ++oj) {
                    double acc = b;
                    for (long c = 0; c < ic; ++c) {
                        for (long p = 0; p < k; ++p) {
                            const long xi = oi * s + p - pad;
                            if (xi < 0 || xi >= xs.h) continue;
                            for (long q = 0; q < k; ++q) {
                                const long xj = oj * s + q - pad;
                                if (xj < 0 || xj >= xs.w) continue;
                                acc += xv[((n * ic + c) * xs.h + xi) * xs.w + xj] *
                                       wv[((o * ic + c) * k + p) * k + q];
                            }
                        }
                    }
                    ov[((n * oc + o) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }

    Tape* tape = common_tape({&x, &weight, bias});
    if (!tape) return out;
    const int nx = node_on(x, tape), nw = node_on(weight, tape),
              nb = bias ? node_on(*bias, tape) : -1;
    auto xdata = x.data;
    auto wdata = weight.data;
    bind_output(out, tape, {nx, nw, nb}, [=](const std::vector<double>& g, Tape& t) {
        for (long n = 0; n < xs.n; ++n) {
            for (long o = 0; o < oc; ++o) {
                for (long oi = 0; oi < oh; ++oi) {
                    for (long oj = 0; oj < ow; ++oj) {
                        const double go = g[((n * oc + o) * oh + oi) * ow + oj];
                        if (go == 0.0) continue;
                        if (nb >= 0) t.grad_buf(nb)[o] += go;
                        for (long c = 0; c < ic; ++c) {
                            for (long p = 0; p < k; ++p) {
                                const long xi = oi * s + p - pad;
                                if (xi < 0 || xi >= xs.h) continue;
                                for (long q = 0; q < k; ++q) {
                                    const long xj = oj * s + q - pad;
                                    if (xj < 0 || xj >= xs.w) continue;
                                    const long xoff = ((n * ic + c) * xs.h + xi) * xs.w + xj;
                                    const long woff = ((o * ic + c) * k + p) * k + q;
                                    if (nx >= 0) t.grad_buf(nx)[xoff] += go * (*wdata)[woff];
                                    if (nw >= 0) t.grad_buf(nw)[woff] += go * (*xdata)[xoff];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    return out;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& weight, const Tensor* bias) {
    const Shape4 xs = x.shape;
    const long ic = xs.c;
    if (weight.shape.n != ic || weight.shape.h != 3 || weight.shape.w != 3) {
        throw ShapeError("conv_transpose2d: weight " + weight.shape.str() + " for input " + xs.str());
    }
    const long oc = weight.shape.c;
    if (bias && !(bias->shape == Shape4{1, oc, 1, 1})) {
        throw ShapeError("conv_transpose2d: bias shape " + bias->shape.str());
    }
    const long oh = 2 * xs.h, ow = 2 * xs.w;
    Tensor out = Tensor::zeros(Shape4{xs.n, oc, oh, ow});
    const auto& xv = *x.data;
    const auto& wv = *weight.data;
    auto& ov = *out.data;
    if (bias) {
        for (long n = 0; n < xs.n; ++n)
            for (long o = 0; o < oc; ++o)
                for (long i = 0; i < oh * ow; ++i) ov[(n * oc + o) * oh * ow + i] = (*bias->data)[o];
    }
    for (long n = 0; n < xs.n; ++n) {
        for (long c = 0; c < ic; ++c) {
            for (long oi = 0; oi < xs.h; ++oi) {
                for (long oj = 0; oj < xs.w; ++oj) {
                    const double xval = xv[((n * ic + c) * xs.h + oi) * xs.w + oj];
                    if (xval == 0.0) continue;
                    for (long p = 0; p < 3; ++p) {
                        const long ii = 2 * oi + p - 1;
                        if (ii < 0 || ii >= oh) continue;
                        for (long q = 0; q < 3; ++q) {
                            const long jj = 2 * oj + q - 1;
                            if (jj < 0 || jj >= ow) continue;
                            for (long o = 0; o < oc; ++o) {
                                ov[((n * oc + o) * oh + ii) * ow + jj] +=
                                    xval * wv[((c * oc + o) * 3 + p) * 3 + q];
                            }
                        }
                    }
                }
            }
        }
    }

    Tape* tape = common_tape({&x, &weight, bias});
    if (!tape) return out;
    const int nx = node_on(x, tape), nw = node_on(weight, tape),
              nb = bias ? node_on(*bias, tape) : -1;
    auto xdata = x.data;
    auto wdata = weight.data;
    bind_output(out, tape, {nx, nw, nb}, [=](const std::vector<double>& g, Tape& t) {
        if (nb >= 0) {
            auto& gb = t.grad_buf(nb);
            for (long n = 0; n < xs.n; ++n)
                for (long o = 0; o < oc; ++o)
                    for (long i = 0; i < oh * ow; ++i) gb[o] += g[(n * oc + o) * oh * ow + i];
        }
        for (long n = 0; n < xs.n; ++n) {
            for (long c = 0; c < ic; ++c) {
                for (long oi = 0; oi < xs.h; ++oi) {
                    for (long oj = 0; oj < xs.w; ++oj) {
                        const long xoff = ((n * ic + c) * xs.h + oi) * xs.w + oj;
                        for (long p = 0; p < 3; ++p) {
                            const long ii = 2 * oi + p - 1;
                            if (ii < 0 || ii >= oh) continue;
                            for (long q = 0; q < 3; ++q) {
                                const long jj = 2 * oj + q - 1;
                                if (jj < 0 || jj >= ow) continue;
                                for (long o = 0; o < oc; ++o) {
                                    const double go = g[((n * oc + o) * oh + ii) * ow + jj];
                                    const long woff = ((c * oc + o) * 3 + p) * 3 + q;
                                    if (nx >= 0) t.grad_buf(nx)[xoff] += go * (*wdata)[woff];
                                    if (nw >= 0) t.grad_buf(nw)[woff] += go * (*xdata)[xoff];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    return out;
}

Tensor upsample2x(Upsample kind, const Tensor& x) {
    if (kind == Upsample::bilinear) return resize_bilinear(x, 2 * x.shape.h, 2 * x.shape.w);
    const Shape4 xs = x.shape;
    const long oh = 2 * xs.h, ow = 2 * xs.w;
    Tensor out = Tensor::zeros(Shape4{xs.n, xs.c, oh, ow});
    for (long nc = 0; nc < xs.n * xs.c; ++nc)
        for (long i = 0; i < oh; ++i)
            for (long j = 0; j < ow; ++j)
                (*out.data)[(nc * oh + i) * ow + j] = (*x.data)[(nc * xs.h + i / 2) * xs.w + j / 2];
    Tape* tape = common_tape({&x});
    const int nx = node_on(x, tape);
    bind_output(out, tape, {nx}, [=](const std::vector<double>& g, Tape& t) {
        if (nx < 0) return;
        auto& gx = t.grad_buf(nx);
        for (long nc = 0; nc < xs.n * xs.c; ++nc)
            for (long i = 0; i < oh; ++i)
                for (long j = 0; j < ow; ++j)
                    gx[(nc * xs.h + i / 2) * xs.w + j / 2] += g[(nc * oh + i) * ow + j];
    });
    return out;
}

namespace {

struct Tap {
    long i0, i1;
    double f;  // fraction toward i1
};

Tap tap_for(long out_idx, long out_extent, long in_extent) {
    double u = (static_cast<double>(out_idx) + 0.5) * static_cast<double>(in_extent) /
                   static_cast<double>(out_extent) -
               0.5;
    u = std::clamp(u, 0.0, static_cast<double>(in_extent - 1));
    long i0 = static_cast<long>(std::floor(u));
    long i1 = std::min(i0 + 1, in_extent - 1);
    return Tap{i0, i1, u - static_cast<double>(i0)};
}

}  // namespace

Tensor resize_bilinear(const Tensor& x, long h_out, long w_out) {
    const Shape4 xs = x.shape;
    Tensor out = Tensor::zeros(Shape4{xs.n, xs.c, h_out, w_out});
    std::vector<Tap> rows(h_out), cols(w_out);
    for (long i = 0; i < h_out; ++i) rows[i] = tap_for(i, h_out, xs.h);
    for (long j = 0; j < w_out; ++j) cols[j] = tap_for(j, w_out, xs.w);
    for (long nc = 0; nc < xs.n * xs.c; ++nc) {
        const double* src = x.data->data() + nc * xs.h * xs.w;
        double* dst = out.data->data() + nc * h_out * w_out;
        for (long i = 0; i < h_out; ++i) {
            const Tap& r = rows[i];
            for (long j = 0; j < w_out; ++j) {
                const Tap& c = cols[j];
                dst[i * w_out + j] =
                    (1 - r.f) * ((1 - c.f) * src[r.i0 * xs.w + c.i0] + c.f * src[r.i0 * xs.w + c.i1]) +
                    r.f * ((1 - c.f) * src[r.i1 * xs.w + c.i0] + c.f * src[r.i1 * xs.w + c.i1]);
            }
        }
    }
    Tape* tape = common_tape({&x});
    const int nx = node_on(x, tape);
    bind_output(out, tape, {nx}, [=](const std::vector<double>& g, Tape& t) {
        if (nx < 0) return;
        auto& gx = t.grad_buf(nx);
        for (long nc = 0; nc < xs.n * xs.c; ++nc) {
            double* gs = gx.data() + nc * xs.h * xs.w;
            const double* go = g.data() + nc * h_out * w_out;
            for (long i = 0; i < h_out; ++i) {
                const Tap& r = rows[i];
                for (long j = 0; j < w_out; ++j) {
                    const Tap& c = cols[j];
                    const double v = go[i * w_out + j];
                    gs[r.i0 * xs.w + c.i0] += (1 - r.f) * (1 - c.f) * v;
                    gs[r.i0 * xs.w + c.i1] += (1 - r.f) * c.f * v;
                    gs[r.i1 * xs.w + c.i0] += r.f * (1 - c.f) * v;
                    gs[r.i1 * xs.w + c.i1] += r.f * c.f * v;
                }
            }
        }
    });
    return out;
}

Tensor grid_sample_bilinear(const Tensor& src, const Tensor& grid) {
    const Shape4 ss = src.shape;
    const Shape4 gs = grid.shape;
    if (gs.n != ss.n || gs.c != 2) {
        throw ShapeError("grid_sample: grid " + gs.str() + " for src " + ss.str());
    }
    for (double v : *grid.data) {
        if (!std::isfinite(v)) throw ContractError("grid_sample: non-finite coordinate");
    }
    const long oh = gs.h, ow = gs.w;
    const double wmax = static_cast<double>(ss.w - 1);
    const double hmax = static_cast<double>(ss.h - 1);
    Tensor out = Tensor::zeros(Shape4{ss.n, ss.c, oh, ow});
    for (long n = 0; n < ss.n; ++n) {
        for (long i = 0; i < oh; ++i) {
            for (long j = 0; j < ow; ++j) {
                const double u = std::clamp((*grid.data)[((n * 2 + 0) * oh + i) * ow + j], 0.0, wmax);
                const double v = std::clamp((*grid.data)[((n * 2 + 1) * oh + i) * ow + j], 0.0, hmax);
                const long u0 = static_cast<long>(std::floor(u));
                const long v0 = static_cast<long>(std::floor(v));
                const long u1 = std::min(u0 + 1, ss.w - 1);
                const long v1 = std::min(v0 + 1, ss.h - 1);
                const double fu = u - static_cast<double>(u0);
                const double fv = v - static_cast<double>(v0);
                for (long c = 0; c < ss.c; ++c) {
                    const double* s = src.data->data() + (n * ss.c + c) * ss.h * ss.w;
                    (*out.data)[((n * ss.c + c) * oh + i) * ow + j] =
                        (1 - fv) * ((1 - fu) * s[v0 * ss.w + u0] + fu * s[v0 * ss.w + u1]) +
                        fv * ((1 - fu) * s[v1 * ss.w + u0] + fu * s[v1 * ss.w + u1]);
                }
            }
        }
    }
    Tape* tape = common_tape({&src, &grid});
    if (!tape) return out;
    const int nsrc = node_on(src, tape), ngrid = node_on(grid, tape);
    auto sdata = src.data;
    auto gdata = grid.data;
    bind_output(out, tape, {nsrc, ngrid}, [=](const std::vector<double>& g, Tape& t) {
        for (long n = 0; n < ss.n; ++n) {
            for (long i = 0; i < oh; ++i) {
                for (long j = 0; j < ow; ++j) {
                    const double ur = (*gdata)[((n * 2 + 0) * oh + i) * ow + j];
                    const double vr = (*gdata)[((n * 2 + 1) * oh + i) * ow + j];
                    const bool u_in = ur > 0.0 && ur < wmax;
                    const bool v_in = vr > 0.0 && vr < hmax;
                    const double u = std::clamp(ur, 0.0, wmax);
                    const double v = std::clamp(vr, 0.0, hmax);
                    const long u0 = static_cast<long>(std::floor(u));
                    const long v0 = static_cast<long>(std::floor(v));
                    const long u1 = std::min(u0 + 1, ss.w - 1);
                    const long v1 = std::min(v0 + 1, ss.h - 1);
                    const double fu = u - static_cast<double>(u0);
                    const double fv = v - static_cast<double>(v0);
                    double du = 0.0, dv = 0.0;
                    for (long c = 0; c < ss.c; ++c) {
                        const double go = g[((n * ss.c + c) * oh + i) * ow + j];
                        if (go == 0.0) continue;
                        const double* s = sdata->data() + (n * ss.c + c) * ss.h * ss.w;
                        if (nsrc >= 0) {
                            auto& gsrc = t.grad_buf(nsrc);
                            double* gp = gsrc.data() + (n * ss.c + c) * ss.h * ss.w;
                            gp[v0 * ss.w + u0] += go * (1 - fv) * (1 - fu);
                            gp[v0 * ss.w + u1] += go * (1 - fv) * fu;
                            gp[v1 * ss.w + u0] += go * fv * (1 - fu);
                            gp[v1 * ss.w + u1] += go * fv * fu;
                        }
                        du += go * ((1 - fv) * (s[v0 * ss.w + u1] - s[v0 * ss.w + u0]) +
                                    fv * (s[v1 * ss.w + u1] - s[v1 * ss.w + u0]));
                        dv += go * ((1 - fu) * (s[v1 * ss.w + u0] - s[v0 * ss.w + u0]) +
                                    fu * (s[v1 * ss.w + u1] - s[v0 * ss.w + u1]));
                    }
                    if (ngrid >= 0) {
                        auto& gg = t.grad_buf(ngrid);
                        if (u_in) gg[((n * 2 + 0) * oh + i) * ow + j] += du;
                        if (v_in) gg[((n * 2 + 1) * oh + i) * ow + j] += dv;
                    }
                }
            }
        }
    });
    return out;
}

Tensor global_avg_pool(const Tensor& x) {
    const Shape4 xs = x.shape;
    Tensor out = Tensor::zeros(Shape4{xs.n, xs.c, 1, 1});
    const long hw = xs.h * xs.w;
    for (long nc = 0; nc < xs.n * xs.c; ++nc) {
        double acc = 0.0;
        for (long i = 0; i < hw; ++i) acc += (*x.data)[nc * hw + i];
        (*out.data)[nc] = acc / static_cast<double>(hw);
    }
    Tape* tape = common_tape({&x});
    const int nx = node_on(x, tape);
    bind_output(out, tape, {nx}, [=](const std::vector<double>& g, Tape& t) {
        if (nx < 0) return;
        auto& gx = t.grad_buf(nx);
        const double unit = 1.0 / static_cast<double>(hw);
        for (long nc = 0; nc < xs.n * xs.c; ++nc)
            for (long i = 0; i < hw; ++i) gx[nc * hw + i] += g[nc] * unit;
    });
    return out;
}

Tensor adaptive_avg_pool(const Tensor& x, long bins) {
    const Shape4 xs = x.shape;
    if (bins < 1 || bins > xs.h || bins > xs.w) {
        throw ContractError("adaptive_avg_pool: bins " + std::to_string(bins) + " for " + xs.str());
    }
    // Capture bins by value: the backward closure copies these lambdas and
    // outlives this stack frame.
    auto lo = [bins](long i, long extent) { return i * extent / bins; };
    auto hi = [bins](long i, long extent) {
        return (i + 1) * extent / bins + ((i + 1) * extent % bins ? 1 : 0);
    };
    Tensor out = Tensor::zeros(Shape4{xs.n, xs.c, bins, bins});
    for (long nc = 0; nc < xs.n * xs.c; ++nc) {
        const double* s = x.data->data() + nc * xs.h * xs.w;
        for (long bi = 0; bi < bins; ++bi) {
            for (long bj = 0; bj < bins; ++bj) {
                double acc = 0.0;
                long cnt = 0;
                for (long i = lo(bi, xs.h); i < hi(bi, xs.h); ++i)
                    for (long j = lo(bj, xs.w); j < hi(bj, xs.w); ++j, ++cnt) acc += s[i * xs.w + j];
                (*out.data)[(nc * bins + bi) * bins + bj] = acc / static_cast<double>(cnt);
            }
        }
    }
    Tape* tape = common_tape({&x});
    const int nx = node_on(x, tape);
    bind_output(out, tape, {nx}, [=](const std::vector<double>& g, Tape& t) {
        if (nx < 0) return;
        auto& gx = t.grad_buf(nx);
        for (long nc = 0; nc < xs.n * xs.c; ++nc) {
            double* gp = gx.data() + nc * xs.h * xs.w;
            for (long bi = 0; bi < bins; ++bi) {
                for (long bj = 0; bj < bins; ++bj) {
                    const long r0 = lo(bi, xs.h), r1 = hi(bi, xs.h);
                    const long c0 = lo(bj, xs.w), c1 = hi(bj, xs.w);
                    const double unit = g[(nc * bins + bi) * bins + bj] /
                                        static_cast<double>((r1 - r0) * (c1 - c0));
                    for (long i = r0; i < r1; ++i)
                        for (long j = c0; j < c1; ++j) gp[i * xs.w + j] += unit;
                }
            }
        }
    });
    return out;
}

}  // namespace drfpn
