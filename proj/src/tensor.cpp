#include "drfpn/tensor.hpp"

#include <limits>
#include <mutex>
#include <sstream>
#include <unordered_map>

namespace drfpn {

namespace {

// Live-tape registry keyed by address. Tensors cache (tape pointer, uid); a
// binding is honored only while the registry maps that address to that uid,
// so stale bindings from destroyed tapes are ignored even if a later tape
// reuses the same address.
std::mutex& registry_mutex() {
    static std::mutex m;
    return m;
}

std::unordered_map<const Tape*, std::uint64_t>& live_tapes() {
    static std::unordered_map<const Tape*, std::uint64_t> reg;
    return reg;
}

std::uint64_t next_tape_uid() {
    static std::uint64_t counter = 0;
    return ++counter;
}

bool bound_to(const Tensor& t, const Tape* tape) {
    return t.tape == tape && t.node >= 0 && Tape::is_live(t.tape, t.tape_uid);
}

}  // namespace

Tape::Tape() {
    std::lock_guard<std::mutex> lock(registry_mutex());
    uid_ = next_tape_uid();
    live_tapes()[this] = uid_;
}

Tape::~Tape() {
    std::lock_guard<std::mutex> lock(registry_mutex());
    live_tapes().erase(this);
}

bool Tape::is_live(const Tape* tape, std::uint64_t uid) {
    std::lock_guard<std::mutex> lock(registry_mutex());
    auto it = live_tapes().find(tape);
    return it != live_tapes().end() && it->second == uid;
}

std::string Shape4::str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
}

void Shape4::validate() const {
    if (n < 1 || c < 1 || h < 1 || w < 1) {
        throw ShapeError("all extents must be positive, got " + str());
    }
    long limit = std::numeric_limits<long>::max();
    if (c != 0 && n > limit / c) throw ShapeError("element count overflow " + str());
    long nc = n * c;
    if (h != 0 && nc > limit / h) throw ShapeError("element count overflow " + str());
    long nch = nc * h;
    if (w != 0 && nch > limit / w) throw ShapeError("element count overflow " + str());
}

Tensor Tensor::zeros(Shape4 s) {
    s.validate();
    Tensor t;
    t.shape = s;
    t.data = std::make_shared<std::vector<double>>(s.elems(), 0.0);
    return t;
}

Tensor Tensor::full(Shape4 s, double v) {
    s.validate();
    Tensor t;
    t.shape = s;
    t.data = std::make_shared<std::vector<double>>(s.elems(), v);
    return t;
}

Tensor Tensor::randn(Shape4 s, Rng& rng, double mean, double stddev) {
    Tensor t = zeros(s);
    for (double& v : *t.data) v = rng.normal(mean, stddev);
    return t;
}

Tensor Tensor::from_values(Shape4 s, std::vector<double> values) {
    s.validate();
    if (static_cast<long>(values.size()) != s.elems()) {
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not match shape " + s.str());
    }
    Tensor t;
    t.shape = s;
    t.data = std::make_shared<std::vector<double>>(std::move(values));
    return t;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<double>>(*data);
    t.requires_grad = requires_grad;
    return t;
}

int Tape::watch(Tensor& t) {
    if (!t.defined()) throw ContractError("cannot watch an undefined tensor");
    if (!t.requires_grad) throw ContractError("cannot watch a tensor with requires_grad=false");
    if (bound_to(t, this)) return t.node;
    nodes_.push_back(Node{t.shape, nullptr});
    t.tape = this;
    t.node = static_cast<int>(nodes_.size()) - 1;
    t.tape_uid = uid_;
    return t.node;
}

int Tape::record(const Shape4& out_shape, std::vector<int> inputs, BackFn back) {
    for (int id : inputs) {
        if (id >= static_cast<int>(nodes_.size())) {
            throw ContractError("input node id out of range");
        }
    }
    nodes_.push_back(Node{out_shape, std::move(back)});
    return static_cast<int>(nodes_.size()) - 1;
}

void Tape::backward(const Tensor& loss) {
    if (consumed_) throw ContractError("tape already consumed by a previous backward pass");
    if (!bound_to(loss, this)) throw ContractError("loss is not on this tape");
    if (loss.elems() != 1) throw ContractError("loss must be scalar, got " + loss.shape.str());
    consumed_ = true;
    grads_.assign(nodes_.size(), {});
    grads_[loss.node].assign(1, 1.0);
    for (int i = loss.node; i >= 0; --i) {
        if (grads_[i].empty() || !nodes_[i].back) continue;
        nodes_[i].back(grads_[i], *this);
    }
}

bool Tape::has_grad(int node) const {
    return node >= 0 && node < static_cast<int>(grads_.size()) && !grads_[node].empty();
}

Tensor Tape::grad(const Tensor& t) const {
    if (!bound_to(t, this)) throw ContractError("tensor is not on this tape");
    if (!consumed_) throw ContractError("backward has not been run");
    Tensor g = Tensor::zeros(t.shape);
    if (has_grad(t.node)) *g.data = grads_[t.node];
    return g;
}

std::vector<double>& Tape::grad_buf(int node) {
    if (node < 0 || node >= static_cast<int>(grads_.size())) {
        throw ContractError("grad_buf: node id out of range");
    }
    if (grads_[node].empty()) grads_[node].assign(nodes_[node].shape.elems(), 0.0);
    return grads_[node];
}

Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
    Tape* tape = nullptr;
    for (const Tensor* t : inputs) {
        if (!t || t->tape == nullptr || t->node < 0) continue;
        if (!Tape::is_live(t->tape, t->tape_uid)) continue;  // stale binding: constant
        if (tape && tape != t->tape) throw ContractError("inputs bound to different tapes");
        tape = t->tape;
    }
    return tape;
}

int node_on(const Tensor& t, const Tape* tape) {
    return (tape && bound_to(t, tape)) ? t.node : -1;
}

void bind_output(Tensor& out, Tape* tape, std::vector<int> inputs, Tape::BackFn back) {
    if (!tape) return;
    out.tape = tape;
    out.node = tape->record(out.shape, std::move(inputs), std::move(back));
    out.tape_uid = tape->uid();
}

}  // namespace drfpn
