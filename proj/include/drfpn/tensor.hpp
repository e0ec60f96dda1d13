#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "drfpn/errors.hpp"
#include "drfpn/rng.hpp"

namespace drfpn {

// Extents of a dense rank-4 feature map in N x C x H x W layout.
struct Shape4 {
    long n = 1;
    long c = 1;
    long h = 1;
    long w = 1;

    long elems() const { return n * c * h * w; }
    bool operator==(const Shape4&) const = default;
    std::string str() const;
    void validate() const;
};

class Tape;

// Dense rank-4 tensor of doubles, row-major with n outermost. Copies alias
// the underlying buffer. A tensor may be bound to at most one tape; the
// binding carries the node id used to look up its gradient after backward.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape4 s);
    static Tensor full(Shape4 s, double v);
    static Tensor randn(Shape4 s, Rng& rng, double mean = 0.0, double stddev = 1.0);
    static Tensor from_values(Shape4 s, std::vector<double> values);

    Shape4 shape;
    std::shared_ptr<std::vector<double>> data;
    bool requires_grad = false;
    Tape* tape = nullptr;
    int node = -1;
    // Identity of the binding tape; a binding is honored only while that tape
    // is alive, so tensors outliving a tape silently fall back to constants.
    std::uint64_t tape_uid = 0;

    bool defined() const { return data != nullptr; }
    long elems() const { return shape.elems(); }

    double& at(long n, long c, long h, long w) {
        return (*data)[((n * shape.c + c) * shape.h + h) * shape.w + w];
    }
    double at(long n, long c, long h, long w) const {
        return (*data)[((n * shape.c + c) * shape.h + h) * shape.w + w];
    }

    // Deep copy with no tape binding.
    Tensor clone() const;
};

// Append-only record of one forward pass. Node ids are topologically ordered
// by construction; backward walks them once in reverse. A tape is consumed by
// its single backward pass, a second call throws.
class Tape {
public:
    using BackFn = std::function<void(const std::vector<double>& gout, Tape& tape)>;

    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::uint64_t uid() const { return uid_; }
    // True while the tape identified by (pointer, uid) is alive. Tensors that
    // outlive their tape keep a stale binding; this distinguishes it from a
    // new tape reusing the same address.
    static bool is_live(const Tape* tape, std::uint64_t uid);

    // Registers a leaf. Only requires_grad tensors may be watched.
    int watch(Tensor& t);

    // Records an interior node. Inputs listed by node id (-1 entries allowed
    // and ignored). Returns the new node id.
    int record(const Shape4& out_shape, std::vector<int> inputs, BackFn back);

    void backward(const Tensor& loss);

    bool has_grad(int node) const;
    // Gradient of the given tensor after backward; throws if the tensor was
    // never on this tape. Returns zeros if nothing reached it.
    Tensor grad(const Tensor& t) const;

    // Accumulation buffer for a node, sized on first touch. Backward rules
    // write through this.
    std::vector<double>& grad_buf(int node);

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

private:
    struct Node {
        Shape4 shape;
        BackFn back;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    bool consumed_ = false;
    std::uint64_t uid_ = 0;
};

// The common tape of a set of op inputs: null if none is bound, throws if two
// inputs are bound to different tapes. Bindings to destroyed tapes are
// ignored, so such tensors act as constants.
Tape* common_tape(std::initializer_list<const Tensor*> inputs);

// Node id of t on the given tape, or -1 when t is not (or no longer) bound
// there. Ops use this instead of reading node ids raw so stale bindings
// cannot leak into a live tape's input lists.
int node_on(const Tensor& t, const Tape* tape);

// Binds an op output to the tape (when non-null) with the given backward rule.
void bind_output(Tensor& out, Tape* tape, std::vector<int> inputs, Tape::BackFn back);

}  // namespace drfpn
