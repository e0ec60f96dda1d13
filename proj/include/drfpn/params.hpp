#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "drfpn/tensor.hpp"

namespace drfpn {

// Named, ordered registry of learnable tensors. Iteration order is the
// registration order, which the model builder fixes per config, so two
// constructions from the same config and seed are bitwise identical.
class ModelParams {
public:
    Tensor& add(const std::string& name, Tensor t);
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const;

    const std::vector<std::string>& names() const { return order_; }
    std::size_t size() const { return order_.size(); }

    long scalar_count() const;
    long scalar_count_prefix(const std::string& prefix) const;

    void watch_all(Tape& tape);

    // Gradients of all watched params after backward, keyed by name.
    std::map<std::string, Tensor> grads(const Tape& tape) const;

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor> map_;
};

// SGD with classical momentum: v <- momentum*v + g; p <- p - lr*v.
// Velocity buffers persist across calls. Params without a gradient are skipped.
class SgdOptimizer {
public:
    SgdOptimizer(double lr, double momentum);
    void step(ModelParams& params, const std::map<std::string, Tensor>& grads);

private:
    double lr_;
    double momentum_;
    std::unordered_map<std::string, std::vector<double>> velocity_;
};

// Binary weight file: magic "DRFW", u32 version=1, u32 tensor count; per
// tensor u16 name length, UTF-8 name, u8 rank (=4), four u32 dims, u8 dtype
// code (2 = 64-bit float), raw little-endian values. Round-trip is bitwise
// lossless. Writing goes to a temp file first, then renames.
void save_weights(const ModelParams& params, const std::string& path);

// Loads into an existing registry, validating magic, version, and every
// tensor's name and shape against it. Errors name the offending tensor.
void load_weights(const std::string& path, ModelParams& params);

}  // namespace drfpn
