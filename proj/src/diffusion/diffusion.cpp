#include "oscar/diffusion/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <utility>

#include "oscar/core/errors.hpp"
#include "oscar/core/hash.hpp"
#include "oscar/core/io.hpp"
#include "oscar/core/jsonl.hpp"
#include "oscar/synthdata/synthdata.hpp"

namespace oscar {

namespace {

constexpr Real kConfClampLo = -10.0, kConfClampHi = 10.0;

bool all_finite(const Tensor& t) {
    for (Real v : t.vec()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Real tensor_mean(const Tensor& t) {
    Real s = 0;
    for (Real v : t.vec()) s += v;
    return t.numel() ? s / static_cast<Real>(t.numel()) : 0.0;
}

}  // namespace

// ---------------------------------------------------------------------------
// schedule

NoiseSchedule::NoiseSchedule(std::size_t steps, Real beta_start, Real beta_end) {
    if (steps < 2) throw ConfigError("NoiseSchedule: need at least 2 steps");
    if (!(beta_start > 0) || !(beta_end < 1) || beta_end < beta_start)
        throw ConfigError("NoiseSchedule: betas must satisfy 0 < start <= end < 1");
    t_max = steps;
    beta.resize(steps);
    alpha_bar.resize(steps);
    Real prod = 1.0;
    for (std::size_t t = 0; t < steps; ++t) {
        beta[t] = beta_start +
                  (beta_end - beta_start) * static_cast<Real>(t) /
                      static_cast<Real>(steps - 1);
        prod *= 1.0 - beta[t];
        alpha_bar[t] = prod;
    }
}

Real NoiseSchedule::alpha_bar_at(std::ptrdiff_t t) const {
    if (t < 0) return 1.0;
    if (static_cast<std::size_t>(t) >= t_max)
        throw ValidationError("alpha_bar_at: timestep out of range");
    return alpha_bar[static_cast<std::size_t>(t)];
}

Tensor forward_diffuse(const Tensor& x0, std::size_t t, const Tensor& eps,
                       const NoiseSchedule& sched) {
    if (x0.shape() != eps.shape())
        throw ShapeError("forward_diffuse: x0 and eps shapes differ");
    if (t >= sched.t_max)
        throw ValidationError("forward_diffuse: timestep out of range");
    Real ab = sched.alpha_bar[t];
    Real a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Tensor out(x0.shape());
    const auto& xv = x0.vec();
    const auto& ev = eps.vec();
    auto& ov = out.vec();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = a * xv[i] + b * ev[i];
    return out;
}

// ---------------------------------------------------------------------------
// configs

void UncertaintyConfig::validate() const {
    if (!(beta > 0)) throw ConfigError("UncertaintyConfig: beta must be > 0");
    if (!(delta > 0)) throw ConfigError("UncertaintyConfig: delta must be > 0");
    if (lambda < 0) throw ConfigError("UncertaintyConfig: lambda must be >= 0");
}

void DiffusionConfig::validate() const {
    if (image_size < 16 || image_size % 16 != 0)
        throw ConfigError("DiffusionConfig: image_size must be a multiple of 16");
    if (stage_channels.size() != 4)
        throw ConfigError("DiffusionConfig: expected 4 stage channel counts");
    for (std::size_t c : stage_channels) {
        if (c == 0 || c % groups != 0)
            throw ConfigError("DiffusionConfig: stage channels must divide into groups");
    }
    // decoder blocks normalize their concatenated inputs
    std::size_t c1 = stage_channels[0], c2 = stage_channels[1], c3 = stage_channels[2],
                c4 = stage_channels[3];
    for (std::size_t cin : {2 * c4, c4 + c3, c3 + c2, c2 + c1}) {
        if (cin % groups != 0)
            throw ConfigError("DiffusionConfig: concat channels must divide into groups");
    }
    if (time_dim == 0 || time_dim % 2 != 0)
        throw ConfigError("DiffusionConfig: time_dim must be even and positive");
    if (t_max < 2) throw ConfigError("DiffusionConfig: t_max must be >= 2");
    if (!(beta_start > 0) || !(beta_end < 1) || beta_end < beta_start)
        throw ConfigError("DiffusionConfig: invalid beta range");
    uncertainty.validate();
    if (d_txt == 0 || d_k == 0) throw ConfigError("DiffusionConfig: zero guidance dim");
    if (!(tau >= 0 && tau <= 1)) throw ConfigError("DiffusionConfig: tau out of [0,1]");
    if (top_k == 0) throw ConfigError("DiffusionConfig: top_k must be >= 1");
    if (ddim_steps == 0 || ddim_steps > t_max)
        throw ConfigError("DiffusionConfig: ddim_steps out of range");
    if (!(p_drop >= 0 && p_drop <= 1))
        throw ConfigError("DiffusionConfig: p_drop out of [0,1]");
    if (use_sggm && !use_control)
        throw ConfigError("DiffusionConfig: guidance requires the control branch");
}

Json diffusion_config_to_json(const DiffusionConfig& cfg) {
    return Json{{"image_size", cfg.image_size},
                {"stage_channels", cfg.stage_channels},
                {"groups", cfg.groups},
                {"time_dim", cfg.time_dim},
                {"t_max", cfg.t_max},
                {"beta_start", cfg.beta_start},
                {"beta_end", cfg.beta_end},
                {"uncertainty_beta", cfg.uncertainty.beta},
                {"uncertainty_delta", cfg.uncertainty.delta},
                {"uncertainty_lambda", cfg.uncertainty.lambda},
                {"d_txt", cfg.d_txt},
                {"d_k", cfg.d_k},
                {"tau", cfg.tau},
                {"top_k", cfg.top_k},
                {"cfg_scale", cfg.cfg_scale},
                {"ddim_steps", cfg.ddim_steps},
                {"p_drop", cfg.p_drop},
                {"use_control", cfg.use_control},
                {"use_sggm", cfg.use_sggm}};
}

DiffusionConfig diffusion_config_from_json(const Json& j) {
    static const std::vector<std::string> known = {
        "image_size", "stage_channels", "groups", "time_dim", "t_max",
        "beta_start", "beta_end", "uncertainty_beta", "uncertainty_delta",
        "uncertainty_lambda", "d_txt", "d_k", "tau", "top_k", "cfg_scale",
        "ddim_steps", "p_drop", "use_control", "use_sggm"};
    for (auto& [key, val] : j.items()) {
        (void)val;
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ConfigError("DiffusionConfig: unknown key '" + key + "'");
    }
    DiffusionConfig cfg;
    try {
        if (j.contains("image_size")) cfg.image_size = j.at("image_size").get<std::size_t>();
        if (j.contains("stage_channels"))
            cfg.stage_channels = j.at("stage_channels").get<std::vector<std::size_t>>();
        if (j.contains("groups")) cfg.groups = j.at("groups").get<std::size_t>();
        if (j.contains("time_dim")) cfg.time_dim = j.at("time_dim").get<std::size_t>();
        if (j.contains("t_max")) cfg.t_max = j.at("t_max").get<std::size_t>();
        if (j.contains("beta_start")) cfg.beta_start = j.at("beta_start").get<Real>();
        if (j.contains("beta_end")) cfg.beta_end = j.at("beta_end").get<Real>();
        if (j.contains("uncertainty_beta"))
            cfg.uncertainty.beta = j.at("uncertainty_beta").get<Real>();
        if (j.contains("uncertainty_delta"))
            cfg.uncertainty.delta = j.at("uncertainty_delta").get<Real>();
        if (j.contains("uncertainty_lambda"))
            cfg.uncertainty.lambda = j.at("uncertainty_lambda").get<Real>();
        if (j.contains("d_txt")) cfg.d_txt = j.at("d_txt").get<std::size_t>();
        if (j.contains("d_k")) cfg.d_k = j.at("d_k").get<std::size_t>();
        if (j.contains("tau")) cfg.tau = j.at("tau").get<Real>();
        if (j.contains("top_k")) cfg.top_k = j.at("top_k").get<std::size_t>();
        if (j.contains("cfg_scale")) cfg.cfg_scale = j.at("cfg_scale").get<Real>();
        if (j.contains("ddim_steps")) cfg.ddim_steps = j.at("ddim_steps").get<std::size_t>();
        if (j.contains("p_drop")) cfg.p_drop = j.at("p_drop").get<Real>();
        if (j.contains("use_control")) cfg.use_control = j.at("use_control").get<bool>();
        if (j.contains("use_sggm")) cfg.use_sggm = j.at("use_sggm").get<bool>();
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("DiffusionConfig: bad value: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// denoiser

Var Translator::ResBlock::forward(const Var& x, const Var& t_emb) const {
    Var h = conv1.forward(silu_v(gn1.forward(x)));
    h = add_channel_bias(h, time.rows(t_emb));
    h = conv2.forward(silu_v(gn2.forward(h)));
    Var s = has_skip ? skip.forward(x) : x;
    return add(h, s);
}

Translator::ResBlock Translator::make_block(const std::string& name, std::size_t cin,
                                            std::size_t cout, Rng& rng) {
    ResBlock b;
    b.gn1 = GroupNormM(ps_, name + ".gn1", cin, cfg_.groups);
    b.conv1 = Conv2dM(ps_, name + ".conv1", cin, cout, 3, 1, 1, rng);
    b.time = Linear(ps_, name + ".time", cfg_.time_dim, cout, rng);
    b.gn2 = GroupNormM(ps_, name + ".gn2", cout, cfg_.groups);
    b.conv2 = Conv2dM(ps_, name + ".conv2", cout, cout, 3, 1, 1, rng);
    b.has_skip = cin != cout;
    if (b.has_skip) b.skip = Conv2dM(ps_, name + ".skip", cin, cout, 1, 1, 0, rng);
    return b;
}

Translator::Trunk Translator::build_trunk(const std::string& prefix, Rng& rng) {
    std::size_t c1 = cfg_.stage_channels[0], c2 = cfg_.stage_channels[1],
                c3 = cfg_.stage_channels[2], c4 = cfg_.stage_channels[3];
    Trunk t;
    t.stem = Conv2dM(ps_, prefix + ".stem", 3, c1, 3, 2, 1, rng);
    t.enc1 = make_block(prefix + ".enc1", c1, c1, rng);
    t.enc2 = make_block(prefix + ".enc2", c1, c2, rng);
    t.enc3 = make_block(prefix + ".enc3", c2, c3, rng);
    t.enc4 = make_block(prefix + ".enc4", c3, c4, rng);
    t.mid = make_block(prefix + ".mid", c4, c4, rng);
    t.dec1 = make_block(prefix + ".dec1", 2 * c4, c4, rng);
    t.dec2 = make_block(prefix + ".dec2", c4 + c3, c3, rng);
    t.dec3 = make_block(prefix + ".dec3", c3 + c2, c2, rng);
    t.dec4 = make_block(prefix + ".dec4", c2 + c1, c1, rng);
    return t;
}

Translator::Translator(DiffusionConfig cfg, EncoderConfig student_cfg,
                       std::vector<std::string> class_names, std::uint64_t seed)
    : cfg_(std::move(cfg)),
      student_cfg_(std::move(student_cfg)),
      class_names_(std::move(class_names)) {
    cfg_.validate();
    student_cfg_.validate();
    if (class_names_.size() != student_cfg_.num_classes)
        throw ConfigError("Translator: class names must match the student's classes");
    sched_ = NoiseSchedule(cfg_.t_max, cfg_.beta_start, cfg_.beta_end);

    Rng root(seed);
    Rng rng_time = root.child("time");
    time_lin1_ = Linear(ps_, "time.lin1", cfg_.time_dim, cfg_.time_dim, rng_time);
    time_lin2_ = Linear(ps_, "time.lin2", cfg_.time_dim, cfg_.time_dim, rng_time);

    // The control branch starts as an exact copy of the base trunk: same child
    // stream, same construction order, so the parameter draws coincide.
    {
        Rng rb = root.child("trunk");
        base_ = build_trunk("base", rb);
    }
    {
        Rng rc = root.child("trunk");
        ctrl_ = build_trunk("ctrl", rc);
    }

    std::size_t c1 = cfg_.stage_channels[0];
    Rng rng_hint = root.child("hint");
    hint_conv_ = Conv2dM(ps_, "hint.conv", 3, c1, 3, 2, 1, rng_hint);
    hint_zero_ = Conv2dM(ps_, "hint.zero", c1, c1, 1, 1, 0, rng_hint, true, true);

    std::map<Stage, std::size_t> stage_ch = {
        {Stage::Enc1, cfg_.stage_channels[0]}, {Stage::Enc2, cfg_.stage_channels[1]},
        {Stage::Enc3, cfg_.stage_channels[2]}, {Stage::Enc4, cfg_.stage_channels[3]},
        {Stage::Mid, cfg_.stage_channels[3]},  {Stage::Dec1, cfg_.stage_channels[3]},
        {Stage::Dec2, cfg_.stage_channels[2]}, {Stage::Dec3, cfg_.stage_channels[1]},
        {Stage::Dec4, cfg_.stage_channels[0]}};
    Rng rng_inject = root.child("inject");
    for (Stage s : all_stages()) {
        inject_.emplace(s, Conv2dM(ps_, "inject." + stage_name(s), stage_ch.at(s),
                                   stage_ch.at(s), 1, 1, 0, rng_inject, true, true));
    }

    Rng rng_sggm = root.child("sggm");
    sggm_ = SggmStack(ps_, "sggm", stage_ch, cfg_.d_txt, student_cfg_.embed_dim,
                      cfg_.d_k, rng_sggm);

    Rng rng_head = root.child("head");
    out_gn_ = GroupNormM(ps_, "head.gn", c1, cfg_.groups);
    out_refine_ = Conv2dM(ps_, "head.refine", c1, c1, 3, 1, 1, rng_head);
    eps_head_ = Conv2dM(ps_, "head.eps", c1, 3, 3, 1, 1, rng_head, true, true);
    conf_head_ = Conv2dM(ps_, "head.conf", c1, 1, 3, 1, 1, rng_head, true, true);

    Rng rng_prompt = root.child("prompt");
    embedder_ = PromptEmbedder(ps_, "prompt", class_names_, cfg_.d_txt, rng_prompt);
}

Var Translator::time_embedding(const std::vector<std::size_t>& ts) const {
    std::size_t B = ts.size(), half = cfg_.time_dim / 2;
    Tensor emb(Shape{B, cfg_.time_dim});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < half; ++i) {
            Real freq = std::pow(10000.0, -static_cast<Real>(i) / static_cast<Real>(half));
            Real arg = static_cast<Real>(ts[b]) * freq;
            emb.vec()[b * cfg_.time_dim + i] = std::sin(arg);
            emb.vec()[b * cfg_.time_dim + half + i] = std::cos(arg);
        }
    }
    return time_lin2_.rows(silu_v(time_lin1_.rows(constant(std::move(emb)))));
}

DenoiserOut Translator::denoise(const Var& x_t, const std::vector<std::size_t>& ts,
                                const Condition& cond) const {
    const Shape& s = x_t->value.shape();
    if (s.size() != 4 || s[1] != 3) throw ShapeError("denoise: x_t must be (B,3,H,W)");
    std::size_t B = s[0], H = s[2], W = s[3];
    if (H != W || H % 16 != 0) throw ShapeError("denoise: spatial size must be square and /16");
    if (ts.size() != B) throw ShapeError("denoise: one timestep per sample required");
    for (std::size_t t : ts) {
        if (t >= cfg_.t_max) throw ValidationError("denoise: timestep out of range");
    }
    if (cfg_.use_control) {
        if (cond.sar3.shape() != s)
            throw ShapeError("denoise: control input must match x_t shape");
        if (cond.prompts.size() != B)
            throw ShapeError("denoise: one prompt per sample required");
    }
    if (cfg_.use_sggm && cond.hier.features.empty())
        throw ValidationError("denoise: guidance requires hierarchical prompts");

    Var t_emb = time_embedding(ts);

    auto bottom_up = [&](const Trunk& tr, const Var& x0stage,
                         auto&& stage_hook) -> Var {
        // runs one trunk; stage_hook(stage, features) may transform features
        Var e1 = stage_hook(Stage::Enc1, tr.enc1.forward(x0stage, t_emb));
        Var e2 = stage_hook(Stage::Enc2, tr.enc2.forward(avg_pool2(e1), t_emb));
        Var e3 = stage_hook(Stage::Enc3, tr.enc3.forward(avg_pool2(e2), t_emb));
        Var e4 = stage_hook(Stage::Enc4, tr.enc4.forward(avg_pool2(e3), t_emb));
        Var m = stage_hook(Stage::Mid, tr.mid.forward(e4, t_emb));
        Var d1 = stage_hook(Stage::Dec1, tr.dec1.forward(concat_axis({m, e4}, 1), t_emb));
        Var d2 = stage_hook(
            Stage::Dec2, tr.dec2.forward(concat_axis({upsample_nearest2(d1), e3}, 1), t_emb));
        Var d3 = stage_hook(
            Stage::Dec3, tr.dec3.forward(concat_axis({upsample_nearest2(d2), e2}, 1), t_emb));
        Var d4 = stage_hook(
            Stage::Dec4, tr.dec4.forward(concat_axis({upsample_nearest2(d3), e1}, 1), t_emb));
        return d4;
    };

    Var d4;
    if (!cfg_.use_control) {
        Var s0 = base_.stem.forward(x_t);
        d4 = bottom_up(base_, s0, [](Stage, Var v) { return v; });
    } else {
        Var y_txt = embedder_.embed_batch(cond.prompts);
        std::map<Stage, Var> injected;
        Var c0 = add(ctrl_.stem.forward(x_t),
                     hint_zero_.forward(hint_conv_.forward(constant(cond.sar3))));
        bottom_up(ctrl_, c0, [&](Stage st, Var v) {
            if (cfg_.use_sggm)
                v = apply_guidance_stage(sggm_.blocks.at(st), st, v, y_txt, cond.hier,
                                         student_cfg_.hier_layers);
            injected[st] = inject_.at(st).forward(v);
            return v;
        });
        Var s0 = base_.stem.forward(x_t);
        d4 = bottom_up(base_, s0,
                       [&](Stage st, Var v) { return add(v, injected.at(st)); });
    }

    Var h = out_refine_.forward(silu_v(out_gn_.forward(upsample_nearest2(d4))));
    h = silu_v(h);
    Var eps = eps_head_.forward(h);
    Var conf = exp_v(clamp_v(conf_head_.forward(h), kConfClampLo, kConfClampHi));
    return DenoiserOut{eps, conf};
}

// ---------------------------------------------------------------------------
// objective

UncertaintyLoss uncertainty_loss(const DenoiserOut& out, const Tensor& eps,
                                 const UncertaintyConfig& cfg) {
    cfg.validate();
    if (!out.eps || !out.confidence) throw ValidationError("uncertainty_loss: empty output");
    const Shape& se = out.eps->value.shape();
    if (se != eps.shape()) throw ShapeError("uncertainty_loss: eps shape mismatch");
    const Shape& sc = out.confidence->value.shape();
    if (sc.size() != 4 || sc[1] != 1 || sc[0] != se[0] || sc[2] != se[2] || sc[3] != se[3])
        throw ShapeError("uncertainty_loss: confidence must be (B,1,H,W)");
    for (Real v : out.confidence->value.vec()) {
        if (!(v > 0)) throw ValidationError("uncertainty_loss: confidence must be positive");
    }
    std::size_t C = se[1];

    Var sb = pow_scalar(out.confidence, cfg.beta);  // Σ^β, (B,1,H,W)
    std::vector<Var> reps(C, sb);
    Var sb_c = concat_axis(reps, 1);  // broadcast over channels
    Var sq = square_v(sub(out.eps, constant(eps)));
    // mean over pixels of ½·(channel-summed squared error)·Σ^β
    Var recon = muls(mean_all(mul(sq, sb_c)), static_cast<Real>(C) / 2.0);
    Var reg = neg(mean_all(log_v(adds(sb, cfg.delta))));
    Var total = add(recon, muls(reg, cfg.lambda));
    if (!std::isfinite(total->value.item()))
        throw NumericError("uncertainty_loss: non-finite loss");
    return UncertaintyLoss{total, recon, reg};
}

Real optimal_confidence(Real residual_sq, const UncertaintyConfig& cfg) {
    cfg.validate();
    if (residual_sq < 0) throw ValidationError("optimal_confidence: negative residual");
    Real lo = std::exp(kConfClampLo), hi = std::exp(kConfClampHi);
    if (residual_sq == 0) return hi;  // no error: confidence saturates at the clamp
    Real s = 2.0 * cfg.lambda / residual_sq;
    return std::min(std::max(s, lo), hi);
}

// ---------------------------------------------------------------------------
// sampling

Tensor ddim_step(const Tensor& x_t, const Tensor& eps_pred, std::size_t t,
                 std::ptrdiff_t t_prev, const NoiseSchedule& sched, Real eta,
                 Rng* rng) {
    if (x_t.shape() != eps_pred.shape())
        throw ShapeError("ddim_step: shape mismatch");
    if (t >= sched.t_max) throw ValidationError("ddim_step: timestep out of range");
    if (t_prev >= static_cast<std::ptrdiff_t>(t) || t_prev < -1)
        throw ValidationError("ddim_step: t_prev must be in [-1, t)");
    if (eta < 0) throw ConfigError("ddim_step: eta must be >= 0");
    if (eta > 0 && !rng) throw ConfigError("ddim_step: stochastic step needs an rng");

    Real ab_t = sched.alpha_bar[t];
    Real ab_p = sched.alpha_bar_at(t_prev);
    Real sq_ab_t = std::sqrt(ab_t), sq1m_t = std::sqrt(1.0 - ab_t);
    Real sigma = 0.0;
    if (eta > 0) {
        sigma = eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) *
                std::sqrt(1.0 - ab_t / ab_p);
    }
    Real dir_coef = std::sqrt(std::max(1.0 - ab_p - sigma * sigma, 0.0));
    Real sq_ab_p = std::sqrt(ab_p);

    Tensor out(x_t.shape());
    const auto& xv = x_t.vec();
    const auto& ev = eps_pred.vec();
    auto& ov = out.vec();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        Real x0 = (xv[i] - sq1m_t * ev[i]) / sq_ab_t;
        x0 = std::min(std::max(x0, -1.0), 1.0);  // clamp the data prediction
        Real v = sq_ab_p * x0 + dir_coef * ev[i];
        if (sigma > 0) v += sigma * rng->normal();
        ov[i] = v;
    }
    return out;
}

std::vector<std::ptrdiff_t> ddim_timesteps(std::size_t steps, std::size_t t_max) {
    if (steps == 0 || steps > t_max)
        throw ConfigError("ddim_timesteps: steps must be in [1, t_max]");
    std::vector<std::ptrdiff_t> ts(steps);
    for (std::size_t i = 0; i < steps; ++i) {
        std::size_t rank = steps - 1 - i;  // descending
        ts[i] = static_cast<std::ptrdiff_t>(((rank + 1) * t_max) / steps) - 1;
    }
    return ts;
}

Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, Real s) {
    if (eps_cond.shape() != eps_uncond.shape())
        throw ShapeError("cfg_combine: shape mismatch");
    Tensor out(eps_cond.shape());
    const auto& c = eps_cond.vec();
    const auto& u = eps_uncond.vec();
    auto& ov = out.vec();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = u[i] + s * (c[i] - u[i]);
    return out;
}

// ---------------------------------------------------------------------------
// checkpoints

void save_translator_checkpoint(const std::string& dir, const Translator& model,
                                std::size_t step, const Json& extra) {
    ensure_dir(dir);
    auto bytes = model.params().serialize();
    atomic_write_bytes(dir + "/params.bin", bytes);
    Json manifest{{"schema_version", 1},
                  {"kind", "translator_checkpoint"},
                  {"config", diffusion_config_to_json(model.config())},
                  {"student_config", encoder_config_to_json(model.student_config())},
                  {"class_names", model.class_names()},
                  {"step", step},
                  {"params_sha256", sha256_hex(bytes)}};
    for (auto& [key, val] : extra.items()) manifest[key] = val;
    write_json(dir + "/manifest.json", manifest);
}

Translator load_translator_checkpoint(const std::string& dir) {
    std::string path = dir + "/manifest.json";
    if (!file_exists(path)) throw ArtifactError("checkpoint manifest missing: " + path);
    Json manifest = read_json(path);
    if (manifest.value("kind", "") != "translator_checkpoint")
        throw ArtifactError("not a translator checkpoint: " + dir);
    DiffusionConfig cfg;
    EncoderConfig scfg;
    std::vector<std::string> names;
    try {
        cfg = diffusion_config_from_json(manifest.at("config"));
        scfg = encoder_config_from_json(manifest.at("student_config"));
        names = manifest.at("class_names").get<std::vector<std::string>>();
    } catch (const ConfigError& e) {
        throw ArtifactError(std::string("checkpoint config invalid: ") + e.what());
    } catch (const Json::exception& e) {
        throw ArtifactError(std::string("checkpoint manifest invalid: ") + e.what());
    }
    Translator model(cfg, scfg, names, 0);
    auto bytes = read_file_bytes(dir + "/params.bin");
    if (sha256_hex(bytes) != manifest.value("params_sha256", ""))
        throw ArtifactError("translator checkpoint corrupt: checksum mismatch");
    model.params().deserialize(bytes);
    return model;
}

// ---------------------------------------------------------------------------
// training

namespace {

// Batch tensors scaled to the diffusion domain [-1,1].
Tensor to_pm1(const Tensor& t01) {
    Tensor out(t01.shape());
    const auto& a = t01.vec();
    auto& o = out.vec();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = 2.0 * a[i] - 1.0;
    return out;
}

std::vector<Real> probs_row(const Tensor& probs, std::size_t row, std::size_t C) {
    std::vector<Real> out(C);
    for (std::size_t c = 0; c < C; ++c) out[c] = probs.vec()[row * C + c];
    return out;
}

}  // namespace

TranslatorTrainReport train_translator(const LoadedDataset& data,
                                       const std::string& student_dir,
                                       const TranslatorTrainConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("train_translator: out_dir required");
    if (cfg.steps == 0) throw ConfigError("train_translator: steps must be >= 1");
    if (cfg.batch_size == 0) throw ConfigError("train_translator: batch_size >= 1");
    if (data.train.empty()) throw ValidationError("train_translator: empty train split");
    cfg.diffusion.validate();

    auto student_bytes_before = read_file_bytes(student_dir + "/params.bin");
    Encoder student = load_encoder_checkpoint(student_dir);
    std::string student_hash = student.params().content_sha256();
    std::vector<std::string> names = class_names();
    if (names.size() != student.config().num_classes)
        throw ConfigError("train_translator: student classes do not match the class table");

    Translator model(cfg.diffusion, student.config(), names, cfg.seed);
    const NoiseSchedule& sched = model.schedule();

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    acfg.warmup_steps = cfg.warmup_steps;
    acfg.total_steps = cfg.cosine ? cfg.steps : 0;
    Adam opt(model.params().trainable(), acfg);

    JsonlLogger log;
    if (!cfg.log_path.empty()) log.open(cfg.log_path);

    Rng root(cfg.seed);
    Rng rng_order = root.child("order");
    Rng rng_aug = root.child("augment");
    Rng rng_t = root.child("timestep");
    Rng rng_eps = root.child("noise");
    Rng rng_drop = root.child("cfg_drop");

    std::size_t n_train =
        cfg.overfit_count > 0 ? std::min(cfg.overfit_count, data.train.size())
                              : data.train.size();
    std::vector<std::size_t> order(n_train);
    for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
    std::size_t cursor = n_train;  // forces an initial shuffle

    TranslatorTrainReport report;
    std::size_t tail = std::min<std::size_t>(50, cfg.steps);
    std::vector<Real> recon_hist, sigma_hist;
    Real sigma_first_sum = 0, sigma_last_sum = 0;
    // disjoint head/tail windows even on short runs
    std::size_t head_n = std::min<std::size_t>(100, std::max<std::size_t>(1, cfg.steps / 5));

    std::vector<PreprocessedPair> scratch(cfg.batch_size);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<const PreprocessedPair*> batch;
        batch.reserve(cfg.batch_size);
        for (std::size_t k = 0; k < cfg.batch_size; ++k) {
            if (cursor >= n_train) {
                if (cfg.overfit_count == 0) rng_order.shuffle(order);
                cursor = 0;
            }
            const PreprocessedPair& src = data.train[order[cursor++]];
            if (cfg.augment && cfg.overfit_count == 0) {
                scratch[k] = augment(src, rng_aug.next_u64());
                batch.push_back(&scratch[k]);
            } else {
                batch.push_back(&src);
            }
        }

        Tensor sar01 = stack_sar(batch);
        Tensor x0 = to_pm1(stack_optical(batch));
        std::size_t B = batch.size();
        std::size_t HW = x0.shape()[2] * x0.shape()[3];

        Condition cond;
        cond.sar3 = to_pm1(sar01);
        {
            NoGradGuard ng;
            cond.hier = extract_hier_prompts(sar01, student, student_hash);
            Var probs = classify(student.encode(make_leaf(sar01)));
            for (std::size_t b = 0; b < B; ++b) {
                PromptSpec p =
                    build_prompt(probs_row(probs->value, b, names.size()),
                                 cfg.diffusion.tau, cfg.diffusion.top_k, names);
                cond.prompts.push_back(cfg_drop(p, cfg.diffusion.p_drop, rng_drop));
            }
        }

        std::vector<std::size_t> ts(B);
        Tensor eps(x0.shape());
        Tensor x_t(x0.shape());
        for (std::size_t b = 0; b < B; ++b) {
            ts[b] = static_cast<std::size_t>(
                rng_t.uniform_int(0, static_cast<std::int64_t>(sched.t_max) - 1));
            Real a = std::sqrt(sched.alpha_bar[ts[b]]);
            Real c = std::sqrt(1.0 - sched.alpha_bar[ts[b]]);
            for (std::size_t i = 0; i < 3 * HW; ++i) {
                std::size_t j = b * 3 * HW + i;
                eps.vec()[j] = rng_eps.normal();
                x_t.vec()[j] = a * x0.vec()[j] + c * eps.vec()[j];
            }
        }

        DenoiserOut out = model.denoise(make_leaf(x_t), ts, cond);
        UncertaintyLoss loss = uncertainty_loss(out, eps, cfg.diffusion.uncertainty);
        Real total = loss.total->value.item();
        Real recon = loss.recon->value.item();
        Real reg = loss.reg->value.item();
        Real mean_sigma = tensor_mean(out.confidence->value);
        if (!std::isfinite(total)) throw NumericError("train_translator: non-finite loss");

        opt.zero_grad();
        backward(loss.total);
        opt.step();

        if (recon_hist.size() == tail) recon_hist.erase(recon_hist.begin());
        recon_hist.push_back(recon);
        if (sigma_hist.size() == tail) sigma_hist.erase(sigma_hist.begin());
        sigma_hist.push_back(mean_sigma);
        if (step < head_n) sigma_first_sum += mean_sigma;
        if (step + head_n >= cfg.steps) sigma_last_sum += mean_sigma;

        report.final_loss = total;
        report.final_reg = reg;
        if (log.is_open()) {
            log.log(Json{{"stage", "translator"},
                           {"step", step},
                           {"loss", total},
                           {"recon", recon},
                           {"reg", reg},
                           {"mean_sigma", mean_sigma},
                           {"lr", opt.current_lr()}});
        }
    }

    Real recon_tail = 0;
    for (Real r : recon_hist) recon_tail += r;
    report.final_recon = recon_hist.empty() ? 0 : recon_tail / recon_hist.size();
    report.mean_sigma_first = sigma_first_sum / static_cast<Real>(head_n);
    report.mean_sigma_last = sigma_last_sum / static_cast<Real>(head_n);
    report.steps = cfg.steps;
    report.checkpoint_dir = cfg.out_dir;

    auto student_bytes_after = read_file_bytes(student_dir + "/params.bin");
    if (student_bytes_after != student_bytes_before)
        throw ArtifactError("train_translator: student checkpoint changed on disk");
    if (student.params().content_sha256() != student_hash)
        throw ArtifactError("train_translator: student parameters drifted in memory");

    save_translator_checkpoint(
        cfg.out_dir, model, cfg.steps,
        Json{{"student_params_sha256", student_hash},
             {"final_recon", report.final_recon},
             {"mean_sigma_first", report.mean_sigma_first},
             {"mean_sigma_last", report.mean_sigma_last}});
    return report;
}

// ---------------------------------------------------------------------------
// sampling loop

std::vector<TranslationResult> translate_batch(const std::vector<Tensor>& sar3_01,
                                               const Translator& model,
                                               const Encoder& student,
                                               std::size_t steps, Real cfg_scale,
                                               const std::vector<std::uint64_t>& seeds) {
    if (sar3_01.empty()) throw ValidationError("translate: empty input");
    if (seeds.size() != sar3_01.size())
        throw ShapeError("translate: one seed per image required");
    const Shape& s0 = sar3_01.front().shape();
    if (s0.size() != 3 || s0[0] != 3) throw ShapeError("translate: inputs must be (3,H,W)");
    for (const Tensor& t : sar3_01) {
        if (t.shape() != s0) throw ShapeError("translate: mixed input shapes");
    }
    std::size_t B = sar3_01.size(), H = s0[1], W = s0[2];
    const NoiseSchedule& sched = model.schedule();

    NoGradGuard ng;
    Tensor sar01(Shape{B, 3, H, W});
    for (std::size_t b = 0; b < B; ++b) {
        std::copy(sar3_01[b].vec().begin(), sar3_01[b].vec().end(),
                  sar01.vec().begin() + static_cast<std::ptrdiff_t>(b * 3 * H * W));
    }

    const std::vector<std::string>& names = model.class_names();
    Condition cond_c, cond_u;
    cond_c.sar3 = to_pm1(sar01);
    cond_u.sar3 = cond_c.sar3;
    cond_c.hier = extract_hier_prompts(sar01, student);
    cond_u.hier = cond_c.hier;
    std::vector<PromptSpec> prompts(B);
    {
        Var probs = classify(student.encode(make_leaf(sar01)));
        for (std::size_t b = 0; b < B; ++b) {
            prompts[b] = build_prompt(probs_row(probs->value, b, names.size()),
                                      model.config().tau, model.config().top_k, names);
        }
    }
    cond_c.prompts = prompts;
    cond_u.prompts.assign(B, null_prompt());

    Tensor x(Shape{B, 3, H, W});
    for (std::size_t b = 0; b < B; ++b) {
        Rng r = Rng(seeds[b]).child("init_noise");
        for (std::size_t i = 0; i < 3 * H * W; ++i) x.vec()[b * 3 * H * W + i] = r.normal();
    }

    std::vector<std::ptrdiff_t> ts = ddim_timesteps(steps, sched.t_max);
    // snapshot Σ at the trajectory point nearest the halfway timestep
    std::ptrdiff_t half = static_cast<std::ptrdiff_t>(sched.t_max / 2);
    auto dist = [half](std::ptrdiff_t t) { return t < half ? half - t : t - half; };
    std::size_t mid_i = 0;
    for (std::size_t i = 1; i < ts.size(); ++i) {
        if (dist(ts[i]) < dist(ts[mid_i])) mid_i = i;
    }

    Tensor sigma_mid(Shape{B, 1, H, W});
    for (std::size_t i = 0; i < ts.size(); ++i) {
        std::size_t t = static_cast<std::size_t>(ts[i]);
        std::ptrdiff_t t_prev = (i + 1 < ts.size()) ? ts[i + 1] : -1;
        std::vector<std::size_t> tvec(B, t);
        DenoiserOut out_c = model.denoise(make_leaf(x), tvec, cond_c);
        DenoiserOut out_u = model.denoise(make_leaf(x), tvec, cond_u);
        Tensor eps = cfg_combine(out_c.eps->value, out_u.eps->value, cfg_scale);
        if (!all_finite(eps)) throw NumericError("translate: non-finite prediction");
        if (i == mid_i) sigma_mid = out_c.confidence->value;
        x = ddim_step(x, eps, t, t_prev, sched);
    }

    std::vector<TranslationResult> results(B);
    for (std::size_t b = 0; b < B; ++b) {
        TranslationResult& r = results[b];
        r.optical = Image(H, W, 3);
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t y = 0; y < H; ++y) {
                for (std::size_t xw = 0; xw < W; ++xw) {
                    Real v = x.vec()[((b * 3 + c) * H + y) * W + xw];
                    v = (v + 1.0) / 2.0;
                    r.optical.at(y, xw, c) = std::min(std::max(v, 0.0), 1.0);
                }
            }
        }
        r.confidence_mid = Tensor(Shape{H, W});
        Real smin = 1e300, smax = -1e300, ssum = 0;
        for (std::size_t i = 0; i < H * W; ++i) {
            Real v = sigma_mid.vec()[b * H * W + i];
            r.confidence_mid.vec()[i] = v;
            smin = std::min(smin, v);
            smax = std::max(smax, v);
            ssum += v;
        }
        r.prompt = prompts[b];
        r.stats = Json{{"prompt", r.prompt.text},
                       {"active_classes", r.prompt.active_classes},
                       {"seed", seeds[b]},
                       {"steps", steps},
                       {"cfg_scale", cfg_scale},
                       {"snapshot_t", ts[mid_i]},
                       {"sigma_mean", ssum / static_cast<Real>(H * W)},
                       {"sigma_min", smin},
                       {"sigma_max", smax}};
    }
    return results;
}

TranslationResult translate(const Tensor& sar3_01, const Translator& model,
                            const Encoder& student, std::size_t steps, Real cfg_scale,
                            std::uint64_t seed) {
    return translate_batch({sar3_01}, model, student, steps, cfg_scale, {seed}).front();
}

}  // namespace oscar
