#pragma once

#include <string>
#include <utility>
#include <vector>

#include "oscar/core/ops.hpp"
#include "oscar/core/rng.hpp"

namespace oscar {

// Ordered registry of named leaf tensors. Owns the canonical parameter list used
// for optimization, freezing, serialization, and content hashing.
struct ParamStore {
    std::vector<std::pair<std::string, Var>> items;

    Var add(const std::string& name, Tensor init, bool trainable = true);
    const Var& at(const std::string& name) const;
    bool has(const std::string& name) const;
    std::vector<Var> trainable() const;
    void set_trainable(bool on);
    std::size_t tensor_count() const { return items.size(); }
    std::size_t scalar_count() const;

    std::vector<unsigned char> serialize() const;
    void deserialize(const std::vector<unsigned char>& bytes);  // shapes must match
    std::string content_sha256() const;
};

// ---- initializers ----
Tensor init_normal(Shape s, Real std, Rng& rng);
Tensor init_kaiming_conv(std::size_t cout, std::size_t cin, std::size_t kh, std::size_t kw,
                         Rng& rng);

// ---- modules ----

struct Linear {
    Var W;  // (out, in)
    Var b;  // (out); empty Var when bias disabled

    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out,
           Rng& rng, bool bias = true, Real init_std = 0.02, bool trainable = true,
           bool zero_init = false);
    Var rows(const Var& x) const;    // x (R, in) -> (R, out)
    Var tokens(const Var& x) const;  // x (B, T, in) -> (B, T, out)
};

struct LayerNormM {
    Var gamma, beta;
    LayerNormM() = default;
    LayerNormM(ParamStore& ps, const std::string& name, std::size_t dim,
               bool trainable = true);
    Var forward(const Var& x) const { return layer_norm(x, gamma, beta); }
};

struct Conv2dM {
    Var W, b;
    std::size_t stride = 1, pad = 0;
    Conv2dM() = default;
    Conv2dM(ParamStore& ps, const std::string& name, std::size_t cin, std::size_t cout,
            std::size_t k, std::size_t stride, std::size_t pad, Rng& rng,
            bool trainable = true, bool zero_init = false);
    Var forward(const Var& x) const { return conv2d(x, W, b, stride, pad); }
};

struct GroupNormM {
    Var gamma, beta;
    std::size_t groups = 8;
    GroupNormM() = default;
    GroupNormM(ParamStore& ps, const std::string& name, std::size_t channels,
               std::size_t groups, bool trainable = true);
    Var forward(const Var& x) const { return group_norm4(x, groups, gamma, beta); }
};

// ---- optimizer ----

struct AdamConfig {
    Real lr = 5e-5;
    Real beta1 = 0.9;
    Real beta2 = 0.999;
    Real eps = 1e-8;
    std::size_t warmup_steps = 100;  // linear warmup from 0
    std::size_t total_steps = 0;     // 0 = constant lr after warmup
    Real final_lr_frac = 0.0;        // cosine decays to lr * frac
};

class Adam {
  public:
    Adam(std::vector<Var> params, AdamConfig cfg);
    void zero_grad();
    void step();  // applies the schedule for the current step count
    Real current_lr() const { return lr_at(t_); }
    std::size_t steps_done() const { return t_; }
    Real lr_at(std::size_t step) const;  // step counted from 0

  private:
    std::vector<Var> params_;
    std::vector<Tensor> m_, v_;
    std::size_t t_ = 0;
    AdamConfig cfg_;
};

}  // namespace oscar
