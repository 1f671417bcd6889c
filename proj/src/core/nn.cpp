#include "oscar/core/nn.hpp"

#include <cmath>
#include <cstring>

#include "oscar/core/hash.hpp"

namespace oscar {

// ---------------- ParamStore ----------------

Var ParamStore::add(const std::string& name, Tensor init, bool trainable) {
    if (has(name)) throw ValidationError("duplicate parameter name: " + name);
    Var v = make_leaf(std::move(init), trainable);
    items.emplace_back(name, v);
    return v;
}

const Var& ParamStore::at(const std::string& name) const {
    for (const auto& [n, v] : items)
        if (n == name) return v;
    throw ValidationError("unknown parameter: " + name);
}

bool ParamStore::has(const std::string& name) const {
    for (const auto& [n, v] : items)
        if (n == name) return true;
    return false;
}

std::vector<Var> ParamStore::trainable() const {
    std::vector<Var> out;
    for (const auto& [n, v] : items)
        if (v->requires_grad) out.push_back(v);
    return out;
}

void ParamStore::set_trainable(bool on) {
    for (auto& [n, v] : items) v->requires_grad = on;
}

std::size_t ParamStore::scalar_count() const {
    std::size_t c = 0;
    for (const auto& [n, v] : items) c += v->value.numel();
    return c;
}

namespace {
template <class T>
void put(std::vector<unsigned char>& buf, const T& v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    buf.insert(buf.end(), p, p + sizeof(T));
}

template <class T>
T get(const std::vector<unsigned char>& buf, std::size_t& off) {
    if (off + sizeof(T) > buf.size()) throw ArtifactError("parameter blob truncated");
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}
}  // namespace

std::vector<unsigned char> ParamStore::serialize() const {
    std::vector<unsigned char> buf;
    const char magic[8] = {'O', 'S', 'K', 'R', '0', '0', '0', '1'};
    buf.insert(buf.end(), magic, magic + 8);
    put<std::uint64_t>(buf, items.size());
    for (const auto& [name, v] : items) {
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
        buf.insert(buf.end(), name.begin(), name.end());
        const Shape& s = v->value.shape();
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(s.size()));
        for (auto d : s) put<std::uint64_t>(buf, d);
        const auto* p = reinterpret_cast<const unsigned char*>(v->value.data());
        buf.insert(buf.end(), p, p + v->value.numel() * sizeof(Real));
    }
    return buf;
}

void ParamStore::deserialize(const std::vector<unsigned char>& bytes) {
    std::size_t off = 0;
    if (bytes.size() < 8 || std::memcmp(bytes.data(), "OSKR0001", 8) != 0)
        throw ArtifactError("bad parameter blob magic");
    off = 8;
    auto n = get<std::uint64_t>(bytes, off);
    if (n != items.size())
        throw ArtifactError("parameter count mismatch: blob has " + std::to_string(n) +
                            ", model has " + std::to_string(items.size()));
    for (auto& [name, v] : items) {
        auto len = get<std::uint32_t>(bytes, off);
        if (off + len > bytes.size()) throw ArtifactError("parameter blob truncated");
        std::string bn(reinterpret_cast<const char*>(bytes.data() + off), len);
        off += len;
        if (bn != name)
            throw ArtifactError("parameter name mismatch: expected " + name + ", got " + bn);
        auto nd = get<std::uint32_t>(bytes, off);
        Shape s(nd);
        for (auto& d : s) d = get<std::uint64_t>(bytes, off);
        if (s != v->value.shape())
            throw ArtifactError("parameter shape mismatch for " + name);
        std::size_t bytes_needed = v->value.numel() * sizeof(Real);
        if (off + bytes_needed > bytes.size()) throw ArtifactError("parameter blob truncated");
        std::memcpy(v->value.data(), bytes.data() + off, bytes_needed);
        off += bytes_needed;
    }
}

std::string ParamStore::content_sha256() const { return sha256_hex(serialize()); }

// ---------------- initializers ----------------

Tensor init_normal(Shape s, Real std, Rng& rng) {
    Tensor t(s);
    for (auto& v : t.vec()) v = rng.normal(0.0, std);
    return t;
}

Tensor init_kaiming_conv(std::size_t cout, std::size_t cin, std::size_t kh, std::size_t kw,
                         Rng& rng) {
    Real fan_in = static_cast<Real>(cin * kh * kw);
    Real std = std::sqrt(2.0 / fan_in);
    return init_normal(Shape{cout, cin, kh, kw}, std, rng);
}

// ---------------- modules ----------------

Linear::Linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out,
               Rng& rng, bool bias, Real init_std, bool trainable, bool zero_init) {
    Tensor w = zero_init ? Tensor::zeros(Shape{out, in})
                         : init_normal(Shape{out, in}, init_std, rng);
    W = ps.add(name + ".W", std::move(w), trainable);
    if (bias) b = ps.add(name + ".b", Tensor::zeros(Shape{out}), trainable);
}

Var Linear::rows(const Var& x) const {
    Var y = matmul(x, W, false, true);
    if (b) y = add_broadcast_suffix(y, b);
    return y;
}

Var Linear::tokens(const Var& x) const {
    const Shape& s = x->value.shape();
    if (s.size() != 3) throw ShapeError("Linear::tokens: rank-3 required");
    Var flat = reshape(x, Shape{s[0] * s[1], s[2]});
    Var y = rows(flat);
    return reshape(y, Shape{s[0], s[1], W->value.dim(0)});
}

LayerNormM::LayerNormM(ParamStore& ps, const std::string& name, std::size_t dim,
                       bool trainable) {
    gamma = ps.add(name + ".gamma", Tensor::full(Shape{dim}, 1.0), trainable);
    beta = ps.add(name + ".beta", Tensor::zeros(Shape{dim}), trainable);
}

Conv2dM::Conv2dM(ParamStore& ps, const std::string& name, std::size_t cin,
                 std::size_t cout, std::size_t k, std::size_t stride_, std::size_t pad_,
                 Rng& rng, bool trainable, bool zero_init)
    : stride(stride_), pad(pad_) {
    Tensor w = zero_init ? Tensor::zeros(Shape{cout, cin, k, k})
                         : init_kaiming_conv(cout, cin, k, k, rng);
    W = ps.add(name + ".W", std::move(w), trainable);
    b = ps.add(name + ".b", Tensor::zeros(Shape{cout}), trainable);
}

GroupNormM::GroupNormM(ParamStore& ps, const std::string& name, std::size_t channels,
                       std::size_t groups_, bool trainable)
    : groups(groups_) {
    gamma = ps.add(name + ".gamma", Tensor::full(Shape{channels}, 1.0), trainable);
    beta = ps.add(name + ".beta", Tensor::zeros(Shape{channels}), trainable);
}

// ---------------- Adam ----------------

Adam::Adam(std::vector<Var> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
    }
}

void Adam::zero_grad() {
    for (auto& p : params_)
        if (p->grad.numel()) p->grad.fill(0.0);
}

Real Adam::lr_at(std::size_t step) const {
    if (cfg_.warmup_steps > 0 && step < cfg_.warmup_steps)
        return cfg_.lr * static_cast<Real>(step + 1) / static_cast<Real>(cfg_.warmup_steps);
    if (cfg_.total_steps == 0 || cfg_.total_steps <= cfg_.warmup_steps) return cfg_.lr;
    Real prog = static_cast<Real>(step - cfg_.warmup_steps) /
                static_cast<Real>(cfg_.total_steps - cfg_.warmup_steps);
    prog = std::min(prog, 1.0);
    Real lo = cfg_.lr * cfg_.final_lr_frac;
    return lo + (cfg_.lr - lo) * 0.5 * (1.0 + std::cos(prog * 3.14159265358979323846));
}

void Adam::step() {
    Real lr = lr_at(t_);
    ++t_;
    Real bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<Real>(t_));
    Real bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<Real>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        if (!p->grad.numel()) continue;  // no gradient flowed this step
        const Real* g = p->grad.data();
        Real* m = m_[i].data();
        Real* v = v_[i].data();
        Real* w = p->value.data();
        for (std::size_t k = 0; k < p->value.numel(); ++k) {
            m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
            v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
            Real mhat = m[k] / bc1;
            Real vhat = v[k] / bc2;
            w[k] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

}  // namespace oscar
