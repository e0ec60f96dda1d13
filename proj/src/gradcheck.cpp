#include "drfpn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace drfpn {

double gradcheck(const ScalarFn& f, const Tensor& x0, double eps, long coord_stride) {
    if (coord_stride < 1) throw ContractError("gradcheck: coord_stride must be >= 1");

    Tensor x = x0.clone();
    x.requires_grad = true;
    Tape tape;
    tape.watch(x);
    Tensor loss = f(x);
    if (loss.elems() != 1) throw ContractError("gradcheck: f must return a scalar");
    tape.backward(loss);
    Tensor analytic = tape.grad(x);

    auto eval = [&](long coord, double delta) {
        Tensor xp = x0.clone();
        xp.requires_grad = false;
        (*xp.data)[coord] += delta;
        Tensor l = f(xp);
        if (l.elems() != 1) throw ContractError("gradcheck: f must return a scalar");
        return (*l.data)[0];
    };

    double max_rel = 0.0;
    const long n = x0.elems();
    for (long i = 0; i < n; i += coord_stride) {
        const double numeric = (eval(i, eps) - eval(i, -eps)) / (2.0 * eps);
        const double a = (*analytic.data)[i];
        const double rel =
            std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace drfpn
