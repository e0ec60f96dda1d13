#pragma once

#include <string>

#include "drfpn/layers.hpp"
#include "drfpn/params.hpp"
#include "drfpn/rng.hpp"

namespace drfpn {

enum class Init {
    he_uniform,  // weight ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), bias 0
    zero,        // weight and bias 0 (offset/weight/gate heads)
};

// Registers "{name}.w" (+ "{name}.b" when spec.has_bias) in the registry.
void register_conv(ModelParams& reg, const std::string& name, const ConvSpec& spec, Rng& rng,
                   Init init = Init::he_uniform);

Tensor apply_conv(const Tensor& x, ModelParams& reg, const std::string& name, const ConvSpec& spec);

// Transposed conv fixed at k=3, s=2, p=1, op=1; weight (in_c, out_c, 3, 3).
void register_deconv(ModelParams& reg, const std::string& name, long in_c, long out_c, Rng& rng,
                     Init init = Init::he_uniform);

Tensor apply_deconv(const Tensor& x, ModelParams& reg, const std::string& name);

}  // namespace drfpn
