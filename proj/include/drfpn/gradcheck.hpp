#pragma once

#include <functional>

#include "drfpn/tensor.hpp"

namespace drfpn {

// Maps a tensor to a scalar loss. The tensor handed in is already watched on
// a live tape for the analytic pass and unbound for the numeric passes, so
// the function body is written once with plain ops.
using ScalarFn = std::function<Tensor(Tensor&)>;

// Max over checked coordinates of
//   |analytic - central difference| / max(|analytic|, |numeric|, 1e-8).
// coord_stride > 1 checks every coord_stride-th coordinate only (used to keep
// whole-model checks on large inputs inside the runtime budget).
double gradcheck(const ScalarFn& f, const Tensor& x0, double eps, long coord_stride = 1);

}  // namespace drfpn
