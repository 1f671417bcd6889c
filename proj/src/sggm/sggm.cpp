#include "oscar/sggm/sggm.hpp"

#include <cmath>

namespace oscar {

const std::vector<Stage>& all_stages() {
    static const std::vector<Stage> stages = {Stage::Enc1, Stage::Enc2, Stage::Enc3,
                                              Stage::Enc4, Stage::Mid,  Stage::Dec1,
                                              Stage::Dec2, Stage::Dec3, Stage::Dec4};
    return stages;
}

std::string stage_name(Stage s) {
    switch (s) {
        case Stage::Enc1: return "enc1";
        case Stage::Enc2: return "enc2";
        case Stage::Enc3: return "enc3";
        case Stage::Enc4: return "enc4";
        case Stage::Mid: return "mid";
        case Stage::Dec1: return "dec1";
        case Stage::Dec2: return "dec2";
        case Stage::Dec3: return "dec3";
        case Stage::Dec4: return "dec4";
    }
    throw ConfigError("stage_name: invalid stage");
}

Stage stage_from_name(const std::string& name) {
    for (Stage s : all_stages())
        if (stage_name(s) == name) return s;
    throw ConfigError("stage_from_name: unknown stage '" + name + "'");
}

std::size_t stage_to_layer(Stage s, const std::vector<std::size_t>& hier_layers) {
    if (hier_layers.size() != 4)
        throw ConfigError("stage_to_layer: expects exactly four hierarchical layers");
    for (std::size_t i = 1; i < 4; ++i)
        if (hier_layers[i] <= hier_layers[i - 1])
            throw ConfigError("stage_to_layer: hier_layers must be strictly increasing");
    switch (s) {
        case Stage::Enc1: return hier_layers[0];
        case Stage::Enc2: return hier_layers[1];
        case Stage::Enc3: return hier_layers[2];
        case Stage::Enc4: return hier_layers[3];
        case Stage::Mid: return hier_layers[3];
        case Stage::Dec1: return hier_layers[3];
        case Stage::Dec2: return hier_layers[2];
        case Stage::Dec3: return hier_layers[1];
        case Stage::Dec4: return hier_layers[0];
    }
    throw ConfigError("stage_to_layer: invalid stage");
}

HierPrompts extract_hier_prompts(const Tensor& sar3, const Encoder& student,
                                 const std::string& source_id) {
    NoGradGuard guard;
    FeatureBundle fb = student.encode(constant(sar3));
    HierPrompts hp;
    hp.source = source_id;
    hp.dim = student.config().embed_dim;
    for (std::size_t layer : student.config().hier_layers) {
        if (!fb.patch_per_layer.count(layer))
            throw ValidationError(
                "extract_hier_prompts: encoder bundle missing hierarchical layer " +
                std::to_string(layer));
        hp.features[layer] = fb.patch_per_layer.at(layer)->value;
    }
    std::size_t N = hp.features.begin()->second.dim(1);
    auto grid = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<Real>(N))));
    if (grid * grid != N)
        throw ValidationError("extract_hier_prompts: token count is not a square grid");
    hp.grid = grid;
    return hp;
}

GuidanceBlock::GuidanceBlock(ParamStore& ps, const std::string& name,
                             std::size_t channels_, std::size_t d_txt_,
                             std::size_t d_vis_, std::size_t d_k_, Rng& rng)
    : channels(channels_), d_txt(d_txt_), d_vis(d_vis_), d_k(d_k_) {
    txt_q = Linear(ps, name + ".txt_q", channels, d_k, rng);
    txt_k = Linear(ps, name + ".txt_k", d_txt, d_k, rng);
    txt_v = Linear(ps, name + ".txt_v", d_txt, d_k, rng);
    txt_o = Linear(ps, name + ".txt_o", d_k, channels, rng, true, 0.02, true,
                   /*zero_init=*/true);
    vis_q = Linear(ps, name + ".vis_q", channels, d_k, rng);
    vis_k = Linear(ps, name + ".vis_k", d_vis, d_k, rng);
    vis_v = Linear(ps, name + ".vis_v", d_vis, d_k, rng);
    vis_o = Linear(ps, name + ".vis_o", d_k, channels, rng, true, 0.02, true,
                   /*zero_init=*/true);
}

namespace {
// (B,C,H,W) -> (B,HW,C)
Var spatial_to_tokens(const Var& Z) {
    const Shape& s = Z->value.shape();
    if (s.size() != 4) throw ShapeError("guidance: stage features must be (B,C,H,W)");
    std::size_t B = s[0], C = s[1], HW = s[2] * s[3];
    return reshape(permute_0213(reshape(Z, {B, C, HW, 1})), {B, HW, C});
}

// (B,HW,C) -> (B,C,H,W)
Var tokens_to_spatial(const Var& t, const Shape& like) {
    std::size_t B = like[0], C = like[1], HW = like[2] * like[3];
    return reshape(permute_0213(reshape(t, {B, HW, C, 1})),
                   {B, C, like[2], like[3]});
}

Var cross_attention(const Var& Z, const Var& tokens, const Linear& q, const Linear& k,
                    const Linear& v, const Linear& o, std::size_t d_k) {
    const Shape& zs = Z->value.shape();
    if (tokens->value.ndim() != 3 || tokens->value.dim(0) != zs[0])
        throw ShapeError("guidance: token sequence must be (B,L,d) with matching batch");
    Var zt = spatial_to_tokens(Z);
    Var Q = q.tokens(zt);       // (B,HW,d_k)
    Var K = k.tokens(tokens);   // (B,L,d_k)
    Var V = v.tokens(tokens);   // (B,L,d_k)
    Var scores = muls(bmm(Q, K, false, true), 1.0 / std::sqrt(static_cast<Real>(d_k)));
    Var probs = softmax_last(scores);      // rows over L sum to 1
    Var ctx = o.tokens(bmm(probs, V));     // (B,HW,C)
    return add(Z, tokens_to_spatial(ctx, zs));
}
}  // namespace

Var phase1_text_attention(const Var& Z, const Var& Y_txt, const GuidanceBlock& blk) {
    if (Z->value.dim(1) != blk.channels)
        throw ShapeError("phase1_text_attention: channel count does not match block");
    if (Y_txt->value.ndim() != 3 || Y_txt->value.dim(2) != blk.d_txt)
        throw ShapeError("phase1_text_attention: text embedding width mismatch");
    return cross_attention(Z, Y_txt, blk.txt_q, blk.txt_k, blk.txt_v, blk.txt_o,
                           blk.d_k);
}

Var phase2_visual_attention(const Var& Z_sem, const Var& F, const GuidanceBlock& blk) {
    if (Z_sem->value.dim(1) != blk.channels)
        throw ShapeError("phase2_visual_attention: channel count does not match block");
    if (F->value.ndim() != 3 || F->value.dim(2) != blk.d_vis)
        throw ShapeError("phase2_visual_attention: visual token width mismatch");
    return cross_attention(Z_sem, F, blk.vis_q, blk.vis_k, blk.vis_v, blk.vis_o,
                           blk.d_k);
}

Tensor resample_tokens(const Tensor& tokens, std::size_t grid, std::size_t out_h,
                       std::size_t out_w) {
    const Shape& s = tokens.shape();
    if (s.size() != 3 || s[1] != grid * grid)
        throw ShapeError("resample_tokens: expects (B, grid², d)");
    std::size_t B = s[0], d = s[2];
    Tensor out({B, out_h * out_w, d});
    for (std::size_t b = 0; b < B; ++b) {
        Tensor one({grid * grid, d});
        std::copy(tokens.data() + b * grid * grid * d,
                  tokens.data() + (b + 1) * grid * grid * d, one.data());
        Tensor res = bilinear_resize_grid(one, grid, grid, out_h, out_w);
        std::copy(res.data(), res.data() + out_h * out_w * d,
                  out.data() + b * out_h * out_w * d);
    }
    return out;
}

SggmStack::SggmStack(ParamStore& ps, const std::string& name,
                     const std::map<Stage, std::size_t>& stage_channels,
                     std::size_t d_txt_, std::size_t d_vis_, std::size_t d_k_, Rng& rng)
    : d_txt(d_txt_), d_vis(d_vis_), d_k(d_k_) {
    for (Stage s : all_stages()) {
        auto it = stage_channels.find(s);
        if (it == stage_channels.end())
            throw ConfigError("SggmStack: missing channel count for stage " +
                              stage_name(s));
        blocks.emplace(s, GuidanceBlock(ps, name + "." + stage_name(s), it->second,
                                        d_txt, d_vis, d_k, rng));
    }
}

Var apply_guidance_stage(const GuidanceBlock& blk, Stage s, const Var& Z,
                         const Var& Y_txt, const HierPrompts& prompts,
                         const std::vector<std::size_t>& hier_layers,
                         std::vector<std::string>* trace) {
    std::size_t layer = stage_to_layer(s, hier_layers);
    auto it = prompts.features.find(layer);
    if (it == prompts.features.end())
        throw ValidationError("apply_guidance_stage: prompts missing layer " +
                              std::to_string(layer));
    const Shape& zs = Z->value.shape();
    Var Z_sem = phase1_text_attention(Z, Y_txt, blk);
    if (trace) trace->push_back(stage_name(s) + ":text");
    Tensor F = resample_tokens(it->second, prompts.grid, zs[2], zs[3]);
    Var out = phase2_visual_attention(Z_sem, constant(F), blk);
    if (trace) trace->push_back(stage_name(s) + ":visual");
    return out;
}

std::map<Stage, Var> apply_sggm(const std::map<Stage, Var>& stage_features,
                                const Var& Y_txt, const HierPrompts& prompts,
                                const SggmStack& stack,
                                const std::vector<std::size_t>& hier_layers,
                                std::vector<std::string>* trace) {
    std::map<Stage, Var> out;
    for (Stage s : all_stages()) {
        auto zf = stage_features.find(s);
        if (zf == stage_features.end()) continue;  // stage not supplied
        auto blk = stack.blocks.find(s);
        if (blk == stack.blocks.end())
            throw ConfigError("apply_sggm: no guidance block for stage " +
                              stage_name(s));
        out[s] = apply_guidance_stage(blk->second, s, zf->second, Y_txt, prompts,
                                      hier_layers, trace);
    }
    return out;
}

}  // namespace oscar
