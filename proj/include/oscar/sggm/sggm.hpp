#pragma once

#include <map>
#include <string>
#include <vector>

#include "oscar/backbone/backbone.hpp"

namespace oscar {

// The nine guided stages of the denoiser's control branch.
enum class Stage {
    Enc1,
    Enc2,
    Enc3,
    Enc4,
    Mid,
    Dec1,
    Dec2,
    Dec3,
    Dec4,
};

const std::vector<Stage>& all_stages();  // enumeration order above
std::string stage_name(Stage s);
Stage stage_from_name(const std::string& name);  // unknown -> ConfigError

// Palindromic layer-to-stage map over the four deepest aligned layers
// (ascending hier_layers): enc1..enc4 -> shallowest..deepest, mid -> deepest,
// dec1..dec4 -> deepest..shallowest.
std::size_t stage_to_layer(Stage s, const std::vector<std::size_t>& hier_layers);

// Patch-token grids from the student's four deepest aligned layers, captured
// without gradients (the encoder stays frozen during translator training).
struct HierPrompts {
    std::map<std::size_t, Tensor> features;  // layer -> (B, N, d)
    std::size_t grid = 0;                    // token grid side, N = grid²
    std::size_t dim = 0;                     // token width d
    std::string source;                      // provenance id of the encoder
};

HierPrompts extract_hier_prompts(const Tensor& sar3, const Encoder& student,
                                 const std::string& source_id = "");

// One stage's two-phase cross-attention parameters. Output projections are
// zero-initialized so the whole block starts as the identity.
struct GuidanceBlock {
    std::size_t channels = 0, d_txt = 0, d_vis = 0, d_k = 0;
    Linear txt_q, txt_k, txt_v, txt_o;  // phase 1 (text)
    Linear vis_q, vis_k, vis_v, vis_o;  // phase 2 (visual)

    GuidanceBlock() = default;
    GuidanceBlock(ParamStore& ps, const std::string& name, std::size_t channels,
                  std::size_t d_txt, std::size_t d_vis, std::size_t d_k, Rng& rng);
};

// Z (B,C,H,W) + attention of flattened spatial queries over text tokens
// Y_txt (B,L,d_txt); residual form of Eq. 10.
Var phase1_text_attention(const Var& Z, const Var& Y_txt, const GuidanceBlock& blk);

// Z_sem (B,C,H,W) + attention over visual tokens F (B,N,d_vis); Eq. 11.
Var phase2_visual_attention(const Var& Z_sem, const Var& F, const GuidanceBlock& blk);

// Resamples a layer's token grid to (h,w) stage resolution; plain tensors since
// hierarchical prompts carry no gradient.
Tensor resample_tokens(const Tensor& tokens, std::size_t grid, std::size_t out_h,
                       std::size_t out_w);

// All nine per-stage blocks, one per control-branch stage.
struct SggmStack {
    std::map<Stage, GuidanceBlock> blocks;
    std::size_t d_txt = 0, d_vis = 0, d_k = 0;

    SggmStack() = default;
    SggmStack(ParamStore& ps, const std::string& name,
              const std::map<Stage, std::size_t>& stage_channels, std::size_t d_txt,
              std::size_t d_vis, std::size_t d_k, Rng& rng);
};

// Phase 1 then phase 2 for one stage: selects the stage's hierarchical layer,
// resamples it to Z's resolution, and applies both attentions. Appends
// "<stage>:text" / "<stage>:visual" events to trace when given.
Var apply_guidance_stage(const GuidanceBlock& blk, Stage s, const Var& Z,
                         const Var& Y_txt, const HierPrompts& prompts,
                         const std::vector<std::size_t>& hier_layers,
                         std::vector<std::string>* trace = nullptr);

// Applies guidance to every stage's features; requires one block per stage.
std::map<Stage, Var> apply_sggm(const std::map<Stage, Var>& stage_features,
                                const Var& Y_txt, const HierPrompts& prompts,
                                const SggmStack& stack,
                                const std::vector<std::size_t>& hier_layers,
                                std::vector<std::string>* trace = nullptr);

}  // namespace oscar
