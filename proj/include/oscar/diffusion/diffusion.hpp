#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "oscar/distill/distill.hpp"
#include "oscar/prompt/prompt.hpp"
#include "oscar/sggm/sggm.hpp"

namespace oscar {

// Linear-beta DDPM schedule; alpha_bar is the running product of (1 - beta).
struct NoiseSchedule {
    std::size_t t_max = 0;
    std::vector<Real> beta, alpha_bar;

    NoiseSchedule() = default;
    NoiseSchedule(std::size_t steps, Real beta_start, Real beta_end);
    // alpha_bar with t = -1 meaning "fully denoised" (value 1).
    Real alpha_bar_at(std::ptrdiff_t t) const;
};

// x_t = sqrt(alpha_bar_t)·x0 + sqrt(1-alpha_bar_t)·eps
Tensor forward_diffuse(const Tensor& x0, std::size_t t, const Tensor& eps,
                       const NoiseSchedule& sched);

struct UncertaintyConfig {
    Real beta = 1.0;    // confidence exponent
    Real delta = 1e-6;  // regularizer floor
    Real lambda = 0.1;  // regularization weight
    void validate() const;
};

struct DiffusionConfig {
    std::size_t image_size = 64;
    std::vector<std::size_t> stage_channels = {16, 24, 32, 48};  // enc1..enc4
    std::size_t groups = 8;     // group-norm groups
    std::size_t time_dim = 64;  // timestep embedding width
    std::size_t t_max = 1000;
    Real beta_start = 1e-4, beta_end = 0.02;
    UncertaintyConfig uncertainty;
    std::size_t d_txt = 32, d_k = 32;  // guidance dims
    Real tau = 0.7;                    // prompt confidence threshold
    std::size_t top_k = 2;
    Real cfg_scale = 5.5;
    std::size_t ddim_steps = 50;
    Real p_drop = 0.5;        // training-time prompt dropout
    bool use_control = true;  // SAR control branch
    bool use_sggm = true;     // two-phase guidance inside the control branch

    void validate() const;
};

Json diffusion_config_to_json(const DiffusionConfig& cfg);
DiffusionConfig diffusion_config_from_json(const Json& j);  // unknown keys error

struct DenoiserOut {
    Var eps;         // (B,3,H,W)
    Var confidence;  // (B,1,H,W), exp of a pre-activation clamped to [-10,10]
};

// Everything the denoiser is conditioned on for one batch.
struct Condition {
    Tensor sar3;                      // (B,3,H,W) in [-1,1]
    std::vector<PromptSpec> prompts;  // one per sample
    HierPrompts hier;                 // batch-matched student features
};

// Conditional denoiser: U-shaped trunk, SAR control branch initialized as an
// exact copy, per-stage zero-initialized additive injections, SGGM guidance in
// the control branch, and a confidence head sharing the decoder trunk.
class Translator {
  public:
    Translator(DiffusionConfig cfg, EncoderConfig student_cfg,
               std::vector<std::string> class_names, std::uint64_t seed);

    DenoiserOut denoise(const Var& x_t, const std::vector<std::size_t>& ts,
                        const Condition& cond) const;

    const DiffusionConfig& config() const { return cfg_; }
    const EncoderConfig& student_config() const { return student_cfg_; }
    const std::vector<std::string>& class_names() const { return class_names_; }
    const NoiseSchedule& schedule() const { return sched_; }
    ParamStore& params() { return ps_; }
    const ParamStore& params() const { return ps_; }
    const PromptEmbedder& embedder() const { return embedder_; }

  private:
    struct ResBlock {
        GroupNormM gn1, gn2;
        Conv2dM conv1, conv2, skip;
        Linear time;
        bool has_skip = false;
        Var forward(const Var& x, const Var& t_emb) const;
    };
    struct Trunk {
        Conv2dM stem;  // stride-2, so the deepest attention stays affordable
        ResBlock enc1, enc2, enc3, enc4, mid, dec1, dec2, dec3, dec4;
    };
    Trunk build_trunk(const std::string& prefix, Rng& rng);
    ResBlock make_block(const std::string& name, std::size_t cin, std::size_t cout,
                        Rng& rng);
    Var time_embedding(const std::vector<std::size_t>& ts) const;

    DiffusionConfig cfg_;
    EncoderConfig student_cfg_;
    std::vector<std::string> class_names_;
    NoiseSchedule sched_;
    ParamStore ps_;
    Trunk base_, ctrl_;
    Conv2dM hint_conv_, hint_zero_;
    std::map<Stage, Conv2dM> inject_;  // zero-init 1x1 adds into the base
    SggmStack sggm_;
    GroupNormM out_gn_;
    Conv2dM out_refine_, eps_head_, conf_head_;
    Linear time_lin1_, time_lin2_;
    PromptEmbedder embedder_;
};

struct UncertaintyLoss {
    Var total, recon, reg;
};

// recon = mean over pixels of ½·‖ε−ε_pred‖²·Σ^β (confidence broadcast over
// channels); reg = mean of −log(Σ^β + δ); total = recon + λ·reg.
UncertaintyLoss uncertainty_loss(const DenoiserOut& out, const Tensor& eps,
                                 const UncertaintyConfig& cfg);

// Analytic minimizer of ½·r²·Σ^β − λ·log(Σ^β): Σ^β = 2λ/r², clamped to the
// confidence head's representable range [e^-10, e^10].
Real optimal_confidence(Real residual_sq, const UncertaintyConfig& cfg);

// DDIM update t -> t_prev (t_prev = -1 lands on x0); predicted x0 is clamped
// to [-1,1] before reprojection; eta > 0 adds stochasticity via rng.
Tensor ddim_step(const Tensor& x_t, const Tensor& eps_pred, std::size_t t,
                 std::ptrdiff_t t_prev, const NoiseSchedule& sched, Real eta = 0.0,
                 Rng* rng = nullptr);

// Uniform-stride sampling timesteps, descending: ((i+1)·T)/S - 1.
std::vector<std::ptrdiff_t> ddim_timesteps(std::size_t steps, std::size_t t_max);

// eps_uncond + s·(eps_cond − eps_uncond)
Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, Real s);

struct TranslatorTrainConfig {
    DiffusionConfig diffusion;
    std::size_t steps = 4000;
    std::size_t batch_size = 4;
    Real lr = 2e-4;
    std::size_t warmup_steps = 100;
    bool cosine = true;
    bool augment = true;
    std::uint64_t seed = 1;
    std::string out_dir;
    std::string log_path;
    std::size_t overfit_count = 0;  // >0: cycle fixed (x0,t,eps) tuples
};

struct TranslatorTrainReport {
    std::size_t steps = 0;
    Real final_loss = 0, final_recon = 0, final_reg = 0;
    Real mean_sigma_first = 0, mean_sigma_last = 0;  // collapse diagnostics
    std::string checkpoint_dir;
};

// Trains denoiser + control + SGGM + confidence head with the uncertainty
// objective; prompts come from the frozen student's predictions with p_drop
// conditioning dropout. The student checkpoint is never modified.
TranslatorTrainReport train_translator(const LoadedDataset& data,
                                       const std::string& student_dir,
                                       const TranslatorTrainConfig& cfg);

void save_translator_checkpoint(const std::string& dir, const Translator& model,
                                std::size_t step, const Json& extra = Json::object());
Translator load_translator_checkpoint(const std::string& dir);

struct TranslationResult {
    Image optical;          // (H,W,3) in [0,1]
    Tensor confidence_mid;  // (H,W) Σ snapshot at the halfway timestep
    PromptSpec prompt;
    Json stats;  // prompt text, seed, cfg scale, steps, Σ summary
};

// Full DDIM trajectory from pure noise conditioned on one SAR input ([0,1]
// (3,H,W) tensor); also captures the confidence map at t ≈ T_max/2.
TranslationResult translate(const Tensor& sar3_01, const Translator& model,
                            const Encoder& student, std::size_t steps, Real cfg_scale,
                            std::uint64_t seed);

// Batched variant used by evaluation sweeps; one seed per image.
std::vector<TranslationResult> translate_batch(const std::vector<Tensor>& sar3_01,
                                               const Translator& model,
                                               const Encoder& student,
                                               std::size_t steps, Real cfg_scale,
                                               const std::vector<std::uint64_t>& seeds);

}  // namespace oscar
