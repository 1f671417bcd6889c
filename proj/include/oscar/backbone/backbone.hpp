#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "oscar/core/io.hpp"
#include "oscar/core/nn.hpp"

namespace oscar {

// Shared encoder architecture for the optical teacher and the SAR student.
struct EncoderConfig {
    std::size_t depth = 8;
    std::size_t embed_dim = 128;
    std::size_t heads = 4;
    std::size_t patch_size = 8;
    std::size_t num_classes = 6;
    std::size_t lora_rank = 8;
    Real lora_alpha = 16.0;
    Real lora_dropout = 0.05;
    std::vector<std::size_t> aligned_layers = {1, 3, 4, 5, 7};  // deeper-layer set L_d
    std::vector<std::size_t> hier_layers = {3, 4, 5, 7};        // four deepest, L_h

    void validate() const;  // throws ConfigError on violated invariants
};

Json encoder_config_to_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const Json& j);  // unknown keys are errors

// Per-layer semantic features exposed by one forward pass. Attention rows are
// CLS-to-patch probabilities, head-averaged and renormalized to sum 1.
struct FeatureBundle {
    std::map<std::size_t, Var> cls_per_layer;    // layer -> (B, d)
    std::map<std::size_t, Var> attn_per_layer;   // layer -> (B, N)
    std::map<std::size_t, Var> patch_per_layer;  // layer -> (B, N, d)
    Var logits;                                  // (B, C)
};

// y = W·x + (α/r)·B·(A·x) for a single input vector; the adapter path used by
// every attention projection, exposed standalone for the merge oracle.
Var lora_forward(const Var& base_W, const Var& input, const Var& A, const Var& B,
                 std::size_t r, Real alpha);

// Frozen base projection plus trainable low-rank adapter.
struct LoraLinear {
    Linear base;  // frozen
    Var A;        // (r, in), small random init
    Var B;        // (out, r), zero init so the adapter starts as the identity
    Real scale = 1.0;
    Real drop_p = 0.0;

    LoraLinear() = default;
    LoraLinear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out,
               std::size_t r, Real alpha, Real drop, Rng& rng);
    // x (B,T,in) -> (B,T,out); dropout on the adapter input in train mode only
    Var tokens(const Var& x, bool train, Rng* rng) const;
    Tensor merged_weight() const;  // base W + scale·B·A, for the merge oracle
};

class Encoder {
  public:
    Encoder(EncoderConfig cfg, std::uint64_t seed);

    // image (B,3,H,W) with H,W divisible by patch_size; captures every layer in
    // aligned_layers. Eval mode (train=false) is fully deterministic.
    FeatureBundle encode(const Var& image, bool train = false, Rng* rng = nullptr) const;

    const EncoderConfig& config() const { return cfg_; }
    ParamStore& params() { return ps_; }
    const ParamStore& params() const { return ps_; }

  private:
    struct Block {
        LayerNormM ln1, ln2;
        LoraLinear q, k, v, o;
        Linear fc1, fc2;
    };
    EncoderConfig cfg_;
    ParamStore ps_;
    Linear patch_embed_;
    Var cls_token_;  // (1, d)
    std::vector<Block> blocks_;
    LayerNormM ln_f_;
    Linear head_;
};

// Multi-label probabilities: sigmoid over the bundle's logits.
Var classify(const FeatureBundle& bundle);

// Fixed 2-D sin/cos position table for an h_p × w_p patch grid, with a zero row
// prepended for CLS; shape (N+1, d). Resolution-free, so the encoder needs no
// image size at construction.
Tensor sincos_position_table(std::size_t h_p, std::size_t w_p, std::size_t d);

// Checkpoint = params.bin (binary container) + manifest.json (config, step,
// content checksum). Loading re-validates the checksum and config.
void save_encoder_checkpoint(const std::string& dir, const Encoder& enc,
                             std::size_t step, const Json& extra = Json::object());
Encoder load_encoder_checkpoint(const std::string& dir);
Json read_checkpoint_manifest(const std::string& dir);

}  // namespace oscar
