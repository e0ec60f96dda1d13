#include "drfpn/params.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace drfpn {

Tensor& ModelParams::add(const std::string& name, Tensor t) {
    if (map_.count(name)) throw ContractError("duplicate parameter name: " + name);
    t.requires_grad = true;
    order_.push_back(name);
    return map_.emplace(name, std::move(t)).first->second;
}

Tensor& ModelParams::get(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
}

const Tensor& ModelParams::get(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
}

bool ModelParams::has(const std::string& name) const { return map_.count(name) != 0; }

long ModelParams::scalar_count() const {
    long total = 0;
    for (const auto& name : order_) total += map_.at(name).elems();
    return total;
}

long ModelParams::scalar_count_prefix(const std::string& prefix) const {
    long total = 0;
    for (const auto& name : order_) {
        if (name.rfind(prefix, 0) == 0) total += map_.at(name).elems();
    }
    return total;
}

void ModelParams::watch_all(Tape& tape) {
    for (const auto& name : order_) tape.watch(map_.at(name));
}

std::map<std::string, Tensor> ModelParams::grads(const Tape& tape) const {
    std::map<std::string, Tensor> out;
    for (const auto& name : order_) {
        const Tensor& p = map_.at(name);
        if (node_on(p, &tape) >= 0) out.emplace(name, tape.grad(p));
    }
    return out;
}

SgdOptimizer::SgdOptimizer(double lr, double momentum) : lr_(lr), momentum_(momentum) {
    if (lr < 0.0) throw ContractError("sgd: negative learning rate");
    if (momentum < 0.0 || momentum >= 1.0) throw ContractError("sgd: momentum outside [0,1)");
}

void SgdOptimizer::step(ModelParams& params, const std::map<std::string, Tensor>& grads) {
    for (const auto& name : params.names()) {
        auto it = grads.find(name);
        if (it == grads.end()) continue;
        Tensor& p = params.get(name);
        const Tensor& g = it->second;
        if (!(g.shape == p.shape)) {
            throw ContractError("sgd: gradient shape " + g.shape.str() + " for param " + name +
                                " of shape " + p.shape.str());
        }
        auto& v = velocity_[name];
        if (v.empty()) v.assign(p.elems(), 0.0);
        for (long i = 0; i < p.elems(); ++i) {
            v[i] = momentum_ * v[i] + (*g.data)[i];
            (*p.data)[i] -= lr_ * v[i];
        }
    }
}

namespace {

constexpr char kMagic[4] = {'D', 'R', 'F', 'W'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kDtypeF64 = 2;

void put_u16(std::string& buf, std::uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>(v >> 8));
}

void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    std::ifstream in;
    std::string path;

    void read(void* dst, std::size_t count, const std::string& what) {
        in.read(static_cast<char*>(dst), static_cast<std::streamsize>(count));
        if (in.gcount() != static_cast<std::streamsize>(count)) {
            throw FormatError(path + ": truncated while reading " + what);
        }
    }
    std::uint8_t u8(const std::string& what) {
        std::uint8_t v;
        read(&v, 1, what);
        return v;
    }
    std::uint16_t u16(const std::string& what) {
        unsigned char b[2];
        read(b, 2, what);
        return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }
    std::uint32_t u32(const std::string& what) {
        unsigned char b[4];
        read(b, 4, what);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }
};

}  // namespace

void save_weights(const ModelParams& params, const std::string& path) {
    std::string buf;
    buf.append(kMagic, 4);
    put_u32(buf, kVersion);
    put_u32(buf, static_cast<std::uint32_t>(params.size()));
    for (const auto& name : params.names()) {
        const Tensor& t = params.get(name);
        put_u16(buf, static_cast<std::uint16_t>(name.size()));
        buf.append(name);
        buf.push_back(4);  // rank
        put_u32(buf, static_cast<std::uint32_t>(t.shape.n));
        put_u32(buf, static_cast<std::uint32_t>(t.shape.c));
        put_u32(buf, static_cast<std::uint32_t>(t.shape.h));
        put_u32(buf, static_cast<std::uint32_t>(t.shape.w));
        buf.push_back(static_cast<char>(kDtypeF64));
        static_assert(sizeof(double) == 8);
        const char* raw = reinterpret_cast<const char*>(t.data->data());
        buf.append(raw, static_cast<std::size_t>(t.elems()) * 8);
    }
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot open " + tmp + " for writing");
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) throw FormatError("write failed: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw FormatError("rename " + tmp + " -> " + path + ": " + ec.message());
}

void load_weights(const std::string& path, ModelParams& params) {
    Reader r{std::ifstream(path, std::ios::binary), path};
    if (!r.in) throw FormatError("cannot open " + path);
    char magic[4];
    r.read(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path + ": bad magic");
    if (r.u32("version") != kVersion) throw FormatError(path + ": unsupported version");
    const std::uint32_t count = r.u32("tensor count");
    if (count != params.size()) {
        throw FormatError(path + ": file has " + std::to_string(count) + " tensors, registry has " +
                          std::to_string(params.size()));
    }
    // Stage everything first so a corrupt file never partially mutates params.
    std::vector<std::pair<std::string, std::vector<double>>> staged;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t len = r.u16("name length");
        std::string name(len, '\0');
        r.read(name.data(), len, "name");
        if (!params.has(name)) throw FormatError(path + ": unexpected tensor '" + name + "'");
        const Tensor& expect = params.get(name);
        if (r.u8("rank of " + name) != 4) throw FormatError(path + ": tensor '" + name + "': bad rank");
        Shape4 s;
        s.n = r.u32("dims of " + name);
        s.c = r.u32("dims of " + name);
        s.h = r.u32("dims of " + name);
        s.w = r.u32("dims of " + name);
        if (!(s == expect.shape)) {
            throw FormatError(path + ": tensor '" + name + "': shape " + s.str() + " expected " +
                              expect.shape.str());
        }
        if (r.u8("dtype of " + name) != kDtypeF64) {
            throw FormatError(path + ": tensor '" + name + "': unsupported dtype");
        }
        std::vector<double> values(s.elems());
        r.read(values.data(), static_cast<std::size_t>(s.elems()) * 8, "values of " + name);
        staged.emplace_back(name, std::move(values));
    }
    for (auto& [name, values] : staged) *params.get(name).data = std::move(values);
}

}  // namespace drfpn
