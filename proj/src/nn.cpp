#include "drfpn/nn.hpp"

#include <cmath>

namespace drfpn {

namespace {

Tensor init_weight(Shape4 shape, long fan_in, Rng& rng, Init init) {
    if (init == Init::zero) return Tensor::zeros(shape);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor w = Tensor::zeros(shape);
    for (double& v : *w.data) v = rng.uniform(-bound, bound);
    return w;
}

}  // namespace

void register_conv(ModelParams& reg, const std::string& name, const ConvSpec& spec, Rng& rng,
                   Init init) {
    const long fan_in = spec.in_channels * spec.kernel * spec.kernel;
    Shape4 ws{spec.out_channels, spec.in_channels, spec.kernel, spec.kernel};
    reg.add(name + ".w", init_weight(ws, fan_in, rng, init));
    if (spec.has_bias) reg.add(name + ".b", Tensor::zeros(Shape4{1, spec.out_channels, 1, 1}));
}

Tensor apply_conv(const Tensor& x, ModelParams& reg, const std::string& name,
                  const ConvSpec& spec) {
    const Tensor* bias = spec.has_bias ? &reg.get(name + ".b") : nullptr;
    return conv2d(x, spec, reg.get(name + ".w"), bias);
}

void register_deconv(ModelParams& reg, const std::string& name, long in_c, long out_c, Rng& rng,
                     Init init) {
    reg.add(name + ".w", init_weight(Shape4{in_c, out_c, 3, 3}, in_c * 9, rng, init));
    reg.add(name + ".b", Tensor::zeros(Shape4{1, out_c, 1, 1}));
}

Tensor apply_deconv(const Tensor& x, ModelParams& reg, const std::string& name) {
    return conv_transpose2d(x, reg.get(name + ".w"), &reg.get(name + ".b"));
}

}  // namespace drfpn
