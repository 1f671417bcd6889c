// Acceptance suite: one verdict line per criterion, exit 0 on pass.
//
// Each criterion is self-contained and prints
//   [PASS] C<n>: <what was verified> -- <measured values vs pinned bounds>
// or the matching [FAIL] line. Thresholds are pinned here, in code, so a
// passing run certifies the numbers printed next to them. Long criteria
// (C3, C4, C6, C9) cache or reuse artifacts under the --work directory.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "oscar/cli/cli.hpp"
#include "oscar/core/errors.hpp"
#include "oscar/core/hash.hpp"
#include "oscar/diffusion/diffusion.hpp"
#include "oscar/distill/distill.hpp"
#include "oscar/evalkit/evalkit.hpp"
#include "oscar/prompt/prompt.hpp"
#include "oscar/sggm/sggm.hpp"
#include "oscar/synthdata/synthdata.hpp"

// grad_check itself is assertion-free; neutralize the test-framework macros
// its header drags in so this binary needs no test runner.
#define DOCTEST_CONFIG_DISABLE
#include "support/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace oscar;
using oscar::testing::grad_check;

namespace {

struct Context {
    std::string work;
    std::string smoke_config;
};

struct Outcome {
    bool pass = false;
    std::string details;
};

std::string fmt(Real v, int prec = 4) {
    std::ostringstream os;
    os.precision(prec);
    os << v;
    return os.str();
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Real median_of(std::vector<Real> v) {
    if (v.empty()) throw ValidationError("median of empty vector");
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("cannot read " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// Restores (or clears) an environment variable when leaving scope.
struct EnvGuard {
    std::string name;
    std::optional<std::string> old;
    EnvGuard(const char* n, const std::string& v) : name(n) {
        if (const char* o = std::getenv(n)) old = o;
        setenv(n, v.c_str(), 1);
    }
    ~EnvGuard() {
        if (old)
            setenv(name.c_str(), old->c_str(), 1);
        else
            unsetenv(name.c_str());
    }
};

// ---------------------------------------------------------------------------
// C1: analytic gradients of every differentiable objective match central
// finite differences (h = 1e-4) with relative error < 1e-4 on >= 20 random
// small instances per objective.
// ---------------------------------------------------------------------------

Outcome criterion1(const Context&) {
    const Real kTol = 1e-4;
    const Real kH = 1e-4;
    const int kInstances = 20;
    Rng rng(424201);

    struct Worst {
        std::string name;
        Real err = 0;
    };
    std::vector<Worst> per;
    Real global = 0;
    auto note = [&](const std::string& name, Real err) {
        per.push_back({name, err});
        global = std::max(global, err);
    };

    {  // weighted multi-label classification loss
        Real worst = 0;
        for (int i = 0; i < kInstances; ++i) {
            Rng r = rng.child(100 + i);
            Var logits = parameter(Tensor::randn({3, 5}, r));
            Tensor labels({3, 5});
            for (auto& v : labels.vec()) v = r.uniform(0, 1) < 0.5 ? 0.0 : 1.0;
            DistillWeights w;
            w.class_counts.resize(5);
            for (auto& c : w.class_counts) c = 1 + static_cast<std::size_t>(r.uniform(0, 20));
            w.total = 40;
            auto res = grad_check([&] { return task_loss(logits, labels, w); }, {logits}, kH);
            worst = std::max(worst, res.max_rel_err);
        }
        note("task", worst);
    }
    {  // temperature-softened logit matching
        Real worst = 0;
        for (int i = 0; i < kInstances; ++i) {
            Rng r = rng.child(200 + i);
            Var zs = parameter(Tensor::randn({3, 5}, r));
            Tensor zt = Tensor::randn({3, 5}, r);
            auto res = grad_check([&] { return logit_loss(zs, constant(zt), 4.0); }, {zs}, kH);
            worst = std::max(worst, res.max_rel_err);
        }
        note("logit", worst);
    }
    {  // attention-transfer KL; rows normalized inside the closure so finite
       // differences on the raw scores keep every sample a valid distribution
        Real worst = 0;
        for (int i = 0; i < kInstances; ++i) {
            Rng r = rng.child(300 + i);
            Var leaf = parameter(Tensor::randn({2, 6}, r));
            Tensor t0 = Tensor::randn({2, 6}, r), t1 = Tensor::randn({2, 6}, r);
            auto build = [&] {
                FeatureBundle st, te;
                st.attn_per_layer[0] = softmax_last(leaf);
                st.attn_per_layer[1] = softmax_last(muls(leaf, 0.5));
                te.attn_per_layer[0] = softmax_last(constant(t0));
                te.attn_per_layer[1] = softmax_last(constant(t1));
                return attn_loss(st, te, {0, 1});
            };
            auto res = grad_check(build, {leaf}, kH);
            worst = std::max(worst, res.max_rel_err);
        }
        note("attn", worst);
    }
    {  // CLS-token alignment
        Real worst = 0;
        for (int i = 0; i < kInstances; ++i) {
            Rng r = rng.child(400 + i);
            FeatureBundle st, te;
            std::vector<Var> leaves;
            for (std::size_t l : {0, 1}) {
                Var c = parameter(Tensor::randn({2, 7}, r));
                st.cls_per_layer[l] = c;
                leaves.push_back(c);
                te.cls_per_layer[l] = constant(Tensor::randn({2, 7}, r));
            }
            auto res = grad_check([&] { return cls_loss(st, te, {0, 1}); }, leaves, kH);
            worst = std::max(worst, res.max_rel_err);
        }
        note("cls", worst);
    }
    {  // variance/invariance/covariance embedding regularizer
        // Rows follow a fixed spread pattern so the per-dimension std stays far
        // from the variance hinge at 1 (finite differences would straddle the
        // kink otherwise); half the instances sit on each side of the hinge.
        Real worst = 0;
        for (int i = 0; i < kInstances; ++i) {
            Rng r = rng.child(500 + i);
            const Real pattern[4] = {-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0};
            Tensor zs({4, 6});
            for (std::size_t j = 0; j < 6; ++j) {
                Real a = (i % 2 == 0) ? r.uniform(1.5, 3.0) : r.uniform(0.2, 0.5);
                for (std::size_t b = 0; b < 4; ++b)
                    zs.vec()[b * 6 + j] = a * pattern[b] + r.normal(0.0, 0.03);
            }
            Var z = parameter(zs);
            Tensor zt = Tensor::randn({4, 6}, r);
            DistillWeights w;
            auto res = grad_check([&] { return vicreg_loss(z, constant(zt), w); }, {z}, kH);
            worst = std::max(worst, res.max_rel_err);
        }
        note("vicreg", worst);
    }
    {  // uncertainty-weighted reconstruction + log-regularizer (and their sum)
        Real recon_worst = 0, reg_worst = 0, total_worst = 0;
        for (int i = 0; i < kInstances; ++i) {
            Rng r = rng.child(600 + i);
            UncertaintyConfig uc;
            uc.beta = (i % 2 == 0) ? 1.0 : 2.0;
            Var eps_hat = parameter(Tensor::randn({1, 3, 4, 4}, r));
            Var conf = parameter(Tensor::rand_uniform({1, 1, 4, 4}, r, 0.2, 3.0));
            Tensor eps = Tensor::randn({1, 3, 4, 4}, r);
            auto mk = [&] { return DenoiserOut{eps_hat, conf}; };
            auto r1 = grad_check([&] { return uncertainty_loss(mk(), eps, uc).recon; },
                                 {eps_hat, conf}, kH);
            auto r2 =
                grad_check([&] { return uncertainty_loss(mk(), eps, uc).reg; }, {conf}, kH);
            auto r3 = grad_check([&] { return uncertainty_loss(mk(), eps, uc).total; },
                                 {eps_hat, conf}, kH);
            recon_worst = std::max(recon_worst, r1.max_rel_err);
            reg_worst = std::max(reg_worst, r2.max_rel_err);
            total_worst = std::max(total_worst, r3.max_rel_err);
        }
        note("recon", recon_worst);
        note("reg", reg_worst);
        note("uncert-total", total_worst);
    }

    std::ostringstream d;
    d << "finite-difference gradient check, " << kInstances
      << " instances per objective -- max rel err " << fmt(global, 3) << " (tol " << kTol
      << "; ";
    for (std::size_t i = 0; i < per.size(); ++i)
        d << (i ? ", " : "") << per[i].name << " " << fmt(per[i].err, 2);
    d << ")";
    return {global < kTol, d.str()};
}

// ---------------------------------------------------------------------------
// C2: closed-form behaviors hold exactly: rarity-weight clipping, prompt
// construction at tau = 0.7 / k = 2, the palindromic stage->layer guidance
// map at full scale, guidance-scale 1 returning the conditional branch, and
// the uncertainty objective collapsing to half-MSE when the confidence map
// is identically one.
// ---------------------------------------------------------------------------

Outcome criterion2(const Context&) {
    std::vector<std::string> checks;
    bool ok = true;
    auto expect = [&](bool cond, const std::string& what) {
        if (!cond) {
            ok = false;
            checks.push_back("FAILED: " + what);
        }
    };

    {  // rarity weights, including both clip rails
        DistillWeights w;
        w.class_counts = {10, 90, 1, 5};
        w.total = 100;
        expect(class_weight(0, w) == 9.0, "weight (100-10)/10 == 9");
        expect(class_weight(1, w) == 1.0, "weight clipped up to 1");
        expect(class_weight(2, w) == 99.0, "weight (100-1)/1 == 99");
        DistillWeights w2 = w;
        w2.total = 1000;
        w2.class_counts = {5, 500, 999, 1000};
        expect(class_weight(0, w2) == 100.0, "weight clipped down to 100");
        expect(class_weight(1, w2) == 1.0, "weight (1000-500)/500 == 1");
        checks.push_back("rarity-weight clip exact");
    }
    {  // prompt text, ordering, top-k, strict threshold, tie-break
        const std::vector<std::string> names = {"alpha", "beta", "gamma", "delta"};
        PromptSpec p = build_prompt({0.9, 0.1, 0.8, 0.75}, 0.7, 2, names);
        expect(p.text == "Electro-Optical Image of [alpha, gamma]", "top-2 render");
        expect((p.active_classes == std::vector<std::size_t>{0, 2}), "top-2 order");
        p = build_prompt({0.72, 0.1, 0.2, 0.69}, 0.7, 2, names);
        expect(p.text == "Electro-Optical Image of [alpha]", "single-class render");
        p = build_prompt({0.3, 0.3, 0.3, 0.3}, 0.7, 2, names);
        expect(p.text == "Electro-Optical Image", "empty fallback render");
        expect(p.active_classes.empty(), "empty fallback class set");
        p = build_prompt({0.7, 0.9, 0.1, 0.1}, 0.7, 2, names);
        expect((p.active_classes == std::vector<std::size_t>{1}),
               "threshold is strict: 0.7 excluded");
        p = build_prompt({0.9, 0.85, 0.8, 0.1}, 0.7, 2, names);
        expect(p.active_classes.size() == 2, "k = 2 caps the selection");
        p = build_prompt({0.8, 0.8, 0.1, 0.1}, 0.7, 2, names);
        expect((p.active_classes == std::vector<std::size_t>{0, 1}),
               "equal probabilities break ties by class index");
        expect(p.text == "Electro-Optical Image of [alpha, beta]", "tie-break render");
        checks.push_back("prompt construction exact");
    }
    {  // palindromic guidance map over the published full-scale layer set
        const std::vector<std::size_t> full = {14, 17, 20, 23};
        const std::pair<Stage, std::size_t> table[] = {
            {Stage::Enc1, 14}, {Stage::Enc2, 17}, {Stage::Enc3, 20},
            {Stage::Enc4, 23}, {Stage::Mid, 23},  {Stage::Dec1, 23},
            {Stage::Dec2, 20}, {Stage::Dec3, 17}, {Stage::Dec4, 14}};
        for (auto& [s, layer] : table)
            expect(stage_to_layer(s, full) == layer, "stage->layer table entry");
        checks.push_back("stage->layer full-scale table exact");
    }
    {  // guidance scale 1 returns the conditional prediction
        Rng r(77);
        Tensor c = Tensor::randn({2, 3, 4, 4}, r);
        Tensor u = Tensor::randn({2, 3, 4, 4}, r);
        Tensor out = cfg_combine(c, u, 1.0);
        Real worst = 0;
        for (std::size_t i = 0; i < out.numel(); ++i)
            worst = std::max(worst, std::abs(out.vec()[i] - c.vec()[i]));
        expect(worst <= 1e-9, "scale-1 combine equals conditional branch");
        checks.push_back("scale-1 guidance max dev " + fmt(worst, 2));
    }
    {  // confidence == 1 collapses the weighted objective to half-MSE
        Rng r(78);
        UncertaintyConfig uc;  // beta 1, lambda 0.1, delta 1e-6
        Var eps_hat = constant(Tensor::randn({2, 3, 4, 4}, r));
        Var conf = constant(Tensor::full({2, 1, 4, 4}, 1.0));
        Tensor eps = Tensor::randn({2, 3, 4, 4}, r);
        UncertaintyLoss ul = uncertainty_loss(DenoiserOut{eps_hat, conf}, eps, uc);
        Real sq_sum = 0;
        for (std::size_t i = 0; i < eps.numel(); ++i) {
            Real d = eps.vec()[i] - eps_hat->value.vec()[i];
            sq_sum += d * d;
        }
        Real half_mse = 0.5 * sq_sum / (2.0 * 4.0 * 4.0);  // mean over pixels, not channels
        Real dev = std::abs(ul.recon->value.item() - half_mse);
        expect(dev <= 1e-9, "unit confidence reduces recon to half-MSE");
        checks.push_back("unit-confidence dev " + fmt(dev, 2));
    }

    std::ostringstream d;
    for (std::size_t i = 0; i < checks.size(); ++i) d << (i ? "; " : "") << checks[i];
    return {ok, d.str()};
}

// ---------------------------------------------------------------------------
// C3: on a 2000-scene dataset, distillation brings the student's attention KL
// to <= 0.2x its initial value and the student's micro-AP within 5 points of
// the teacher's, all in under 45 minutes of CPU wall clock. Runs the real
// pipeline commands; a completed matching run is reused and re-verified.
// ---------------------------------------------------------------------------

ExperimentConfig distill2k_config(const Context& ctx) {
    ExperimentConfig cfg;
    cfg.name = "distill2k";
    cfg.seed = 42;
    cfg.dataset.size = 64;
    cfg.dataset.count = 2000;
    // Multi-looked SAR (ENL 16): residual speckle in the student's inputs sets
    // the floor on how closely it can mimic attention computed from clean
    // optical images, so this dataset uses a well-averaged product.
    cfg.dataset.looks = 16;
    cfg.dataset.lee_window = 5;
    cfg.dataset.split_ratio = 0.8;
    cfg.dataset.hetero_noise = 0.0;
    cfg.teacher_train.epochs = 6;
    cfg.teacher_train.batch_size = 8;
    cfg.teacher_train.lr = 1e-3;
    cfg.teacher_train.warmup_steps = 100;
    // Rebalanced for this scale: with the stock weights the invariance/variance
    // block dominates the gradient and attention mimicry stalls early.
    cfg.distill.lambda_attn = 4.0;
    cfg.distill_train.epochs = 24;
    cfg.distill_train.batch_size = 8;
    cfg.distill_train.lr = 1.2e-3;
    cfg.distill_train.warmup_steps = 100;
    cfg.out_root = ctx.work + "/c3";
    return cfg;
}

Outcome criterion3(const Context& ctx) {
    const Real kKlShrink = 0.2;
    const Real kApGap = 0.05;
    const double kBudget = 45.0 * 60.0;
    auto t0 = std::chrono::steady_clock::now();

    ExperimentConfig cfg = distill2k_config(ctx);
    const std::string run = run_dir(cfg);

    bool reused = false;
    try {
        Json m = read_run_manifest(run);
        if (m.at("config_hash") == config_hash(cfg) && m.at("stages").contains("synth") &&
            m.at("stages").contains("teacher") && m.at("stages").contains("student")) {
            for (const char* s : {"synth", "teacher", "student"})
                verify_stage_artifact(m, s, run);
            reused = true;
        }
    } catch (const std::exception&) {
        reused = false;
    }
    if (!reused) {
        fs::remove_all(run);
        cmd_synth(cfg);
        cmd_train_teacher(cfg);
        cmd_distill(cfg);
    }

    Json m = read_run_manifest(run);
    const Json& teacher = m.at("stages").at("teacher");
    const Json& student = m.at("stages").at("student");
    const Real ap_t = teacher.at("best_val_ap_micro").get<Real>();
    const Real ap_s = student.at("best_val_ap_micro").get<Real>();
    const Real kl0 = student.at("attn_kl_initial").get<Real>();
    const Real kl1 = student.at("attn_kl_final").get<Real>();
    double secs = reused ? m.at("stages").at("synth").at("seconds").get<double>() +
                               teacher.at("seconds").get<double>() +
                               student.at("seconds").get<double>()
                         : elapsed_s(t0);

    const bool kl_ok = kl1 <= kKlShrink * kl0;
    const bool ap_ok = ap_s >= ap_t - kApGap;
    const bool time_ok = secs < kBudget;
    std::ostringstream d;
    d << "2000-scene distillation " << (reused ? "(verified prior run)" : "(fresh run)")
      << " -- attention KL " << fmt(kl0, 4) << " -> " << fmt(kl1, 4) << " (ratio "
      << fmt(kl1 / kl0, 3) << ", need <= " << kKlShrink << "), student micro-AP "
      << fmt(ap_s, 4) << " vs teacher " << fmt(ap_t, 4) << " (gap "
      << fmt((ap_t - ap_s) * 100, 3) << " pts, need <= 5), " << fmt(secs, 4) << " s < "
      << fmt(kBudget, 4) << " s";
    return {kl_ok && ap_ok && time_ok, d.str()};
}

// ---------------------------------------------------------------------------
// C4: on a dataset whose optical targets carry extra noise in the left half,
// the learned confidence map Sigma averages < 0.8x on the noisy half relative
// to the clean half; with lambda = 0 the mean Sigma collapses monotonically
// downward. Under 20 minutes.
// ---------------------------------------------------------------------------

Outcome criterion4(const Context& ctx) {
    const Real kRatio = 0.8;
    const double kBudget = 20.0 * 60.0;
    auto t0 = std::chrono::steady_clock::now();

    const std::string base = ctx.work + "/c4";
    fs::remove_all(base);
    fs::create_directories(base);

    DatasetConfig ds;
    ds.size = 64;
    ds.count = 240;
    ds.looks = 4;
    ds.lee_window = 5;
    ds.split_ratio = 0.9;
    ds.seed = 4242;
    ds.hetero_noise = 0.3;  // extra optical noise in the left half only
    build_dataset(ds, base + "/data", "acceptance-c4");
    LoadedDataset data = load_all(base + "/data");

    EncoderConfig ec;  // stock student; its weights stay random on purpose
    Encoder student(ec, 99);
    save_encoder_checkpoint(base + "/student", student, 0);

    TranslatorTrainConfig tc;
    tc.diffusion.image_size = 64;
    tc.steps = 650;
    tc.batch_size = 4;
    tc.lr = 3e-4;
    tc.warmup_steps = 50;
    tc.cosine = true;
    tc.augment = false;  // flips would shuffle the noisy half across sides
    tc.seed = 7;
    tc.out_dir = base + "/trans_default";
    tc.log_path = base + "/trans_default.jsonl";
    train_translator(data, base + "/student", tc);

    // Sigma maps on held-out pairs at low/mid timesteps, where the
    // unpredictable target noise dominates the residual.
    Translator model = load_translator_checkpoint(tc.out_dir);
    Real left_sum = 0, right_sum = 0;
    std::size_t left_n = 0, right_n = 0;
    {
        NoGradGuard ng;
        Rng rng(31337);
        const std::vector<std::size_t> ts = {60, 150, 300};
        const std::size_t B = 4;
        for (std::size_t start = 0; start < data.test.size(); start += B) {
            std::size_t b = std::min(B, data.test.size() - start);
            std::vector<const PreprocessedPair*> batch;
            for (std::size_t i = 0; i < b; ++i) batch.push_back(&data.test[start + i]);
            Tensor opt = stack_optical(batch);  // [0,1]
            Tensor sar = stack_sar(batch);
            for (auto& v : opt.vec()) v = 2 * v - 1;
            Tensor sar_m = sar;
            for (auto& v : sar_m.vec()) v = 2 * v - 1;
            HierPrompts hier = extract_hier_prompts(sar, student, "c4");
            // Prompts exactly as training builds them (minus the dropout).
            Var probs = classify(student.encode(make_leaf(sar)));
            std::vector<PromptSpec> prompts;
            for (std::size_t bi = 0; bi < b; ++bi) {
                std::vector<Real> row(6);
                for (std::size_t c = 0; c < 6; ++c) row[c] = probs->value.vec()[bi * 6 + c];
                prompts.push_back(build_prompt(row, 0.7, 2, class_names()));
            }
            for (std::size_t t : ts) {
                Tensor eps = Tensor::randn(opt.shape(), rng);
                Tensor x_t = forward_diffuse(opt, t, eps, model.schedule());
                DenoiserOut out = model.denoise(
                    constant(x_t), std::vector<std::size_t>(b, t), {sar_m, prompts, hier});
                const Tensor& conf = out.confidence->value;  // (b,1,64,64)
                for (std::size_t bi = 0; bi < b; ++bi)
                    for (std::size_t y = 0; y < 64; ++y)
                        for (std::size_t x = 0; x < 64; ++x) {
                            Real v = conf.vec()[(bi * 64 + y) * 64 + x];
                            if (x < 32) {
                                left_sum += v;
                                ++left_n;
                            } else {
                                right_sum += v;
                                ++right_n;
                            }
                        }
            }
        }
    }
    const Real ratio = (left_sum / left_n) / (right_sum / right_n);

    // lambda = 0 ablation: nothing rewards confidence, so it drifts down.
    TranslatorTrainConfig tz = tc;
    tz.diffusion.uncertainty.lambda = 0.0;
    tz.steps = 420;
    tz.out_dir = base + "/trans_lambda0";
    tz.log_path = base + "/trans_lambda0.jsonl";
    TranslatorTrainReport rz = train_translator(data, base + "/student", tz);

    std::vector<Real> sigma;
    {
        std::ifstream in(tz.log_path);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            Json j = Json::parse(line);
            if (j.contains("mean_sigma")) sigma.push_back(j.at("mean_sigma").get<Real>());
        }
    }
    bool collapse = sigma.size() >= 8 && rz.mean_sigma_last < rz.mean_sigma_first;
    std::vector<Real> quarters;
    if (collapse) {
        std::size_t q = sigma.size() / 4;
        for (int k = 0; k < 4; ++k) {
            Real s = 0;
            for (std::size_t i = k * q; i < (k + 1) * q; ++i) s += sigma[i];
            quarters.push_back(s / q);
        }
        for (int k = 1; k < 4; ++k)
            if (!(quarters[k] < quarters[k - 1])) collapse = false;
    }

    double secs = elapsed_s(t0);
    std::ostringstream d;
    d << "noise-aware confidence -- Sigma noisy/clean ratio " << fmt(ratio, 4)
      << " (need < " << kRatio << "); lambda=0 mean Sigma "
      << fmt(rz.mean_sigma_first, 4) << " -> " << fmt(rz.mean_sigma_last, 4)
      << ", quarter means";
    for (Real q : quarters) d << " " << fmt(q, 4);
    d << (collapse ? " strictly decreasing" : " NOT monotone") << "; " << fmt(secs, 4)
      << " s < " << fmt(kBudget, 4) << " s";
    return {ratio < kRatio && collapse && secs < kBudget, d.str()};
}

// ---------------------------------------------------------------------------
// C5: with the residual pinned to a known smooth field R(p) (the per-step
// target is the detached prediction plus R), the trained confidence map
// matches the analytic optimum 2*lambda/r^2 with median relative error < 20%.
// ---------------------------------------------------------------------------

Outcome criterion5(const Context&) {
    const Real kMedianTol = 0.20;
    const std::size_t H = 32, W = 32, steps = 3000;

    DiffusionConfig dc;
    dc.image_size = 32;
    dc.stage_channels = {8, 8, 8, 8};
    dc.groups = 4;
    dc.time_dim = 16;
    dc.t_max = 100;
    dc.d_txt = 8;
    dc.d_k = 8;
    const UncertaintyConfig& uc = dc.uncertainty;  // beta 1, lambda 0.1

    EncoderConfig ec;
    ec.depth = 4;
    ec.embed_dim = 32;
    ec.heads = 4;
    ec.patch_size = 8;
    ec.lora_rank = 4;
    ec.lora_alpha = 8.0;
    ec.lora_dropout = 0.0;
    ec.aligned_layers = {0, 1, 2, 3};
    ec.hier_layers = {0, 1, 2, 3};
    Encoder student(ec, 55);
    Translator model(dc, ec, class_names(), 66);

    // Smooth amplitude field a(p); the pinned residual has r^2(p) = 3 a(p)^2.
    Tensor a({H, W});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            a.vec()[y * W + x] = 0.6 + 1.5 * Real(x) / (W - 1) +
                                 0.25 * std::sin(2.0 * M_PI * Real(y) / H);
    Tensor R({1, 3, H, W});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < H * W; ++i) R.vec()[c * H * W + i] = a.vec()[i];

    // Fixed input that encodes a(p), plus fixed conditioning.
    Tensor x_fix({1, 3, H, W});
    for (std::size_t i = 0; i < H * W; ++i) {
        x_fix.vec()[0 * H * W + i] = a.vec()[i] / 2.35 * 2.0 - 1.0;
        x_fix.vec()[1 * H * W + i] = 2.0 * Real(i % W) / (W - 1) - 1.0;
        x_fix.vec()[2 * H * W + i] = std::sin(2.0 * M_PI * Real(i / W) / H);
    }
    Tensor sar01 = x_fix;
    for (auto& v : sar01.vec()) v = 0.5 * (v + 1.0);
    HierPrompts hier = extract_hier_prompts(sar01, student, "c5");
    Condition cond{x_fix, {null_prompt()}, hier};
    Var x_in = constant(x_fix);
    const std::vector<std::size_t> t_fix = {50};

    AdamConfig ac;
    ac.lr = 2e-3;
    ac.warmup_steps = 30;
    ac.total_steps = steps;
    ac.final_lr_frac = 0.05;
    Adam opt(model.params().trainable(), ac);
    for (std::size_t s = 0; s < steps; ++s) {
        opt.zero_grad();
        DenoiserOut out = model.denoise(x_in, t_fix, cond);
        // Detach the prediction and set the target to prediction + R: the
        // residual is pinned at R and only the confidence path trains.
        DenoiserOut pinned{constant(out.eps->value), out.confidence};
        Tensor target = out.eps->value;
        for (std::size_t i = 0; i < target.numel(); ++i) target.vec()[i] += R.vec()[i];
        UncertaintyLoss ul = uncertainty_loss(pinned, target, uc);
        backward(ul.total);
        opt.step();
    }

    NoGradGuard ng;
    DenoiserOut out = model.denoise(x_in, t_fix, cond);
    const Tensor& conf = out.confidence->value;
    std::vector<Real> rel;
    rel.reserve(H * W);
    for (std::size_t i = 0; i < H * W; ++i) {
        Real r2 = 3.0 * a.vec()[i] * a.vec()[i];
        Real target = optimal_confidence(r2, uc);
        rel.push_back(std::abs(conf.vec()[i] - target) / target);
    }
    Real med = median_of(rel);
    std::vector<Real> sorted = rel;
    std::sort(sorted.begin(), sorted.end());
    Real p90 = sorted[static_cast<std::size_t>(0.9 * (sorted.size() - 1))];

    std::ostringstream d;
    d << "confidence head vs analytic optimum 2*lambda/r^2 on a pinned smooth residual -- "
      << "median rel err " << fmt(med, 4) << " (need < " << kMedianTol << "), p90 "
      << fmt(p90, 4) << ", " << steps << " steps";
    return {med < kMedianTol, d.str()};
}

// ---------------------------------------------------------------------------
// C6: a trained translator at least halves the mean spectral angle of an
// untrained one on held-out scenes, and guidance-on beats guidance-off under
// an otherwise identical training budget and identical sampling seeds.
// Reuses the C3 dataset/student when present. Wall clock under an hour.
// ---------------------------------------------------------------------------

Outcome criterion6(const Context& ctx) {
    const double kBudget = 60.0 * 60.0;
    auto t0 = std::chrono::steady_clock::now();

    const std::string base = ctx.work + "/c6";
    fs::create_directories(base);

    // Prefer the C3 artifacts; otherwise build a smaller private set.
    ExperimentConfig c3 = distill2k_config(ctx);
    std::string data_dir = run_dir(c3) + "/dataset";
    std::string student_dir = run_dir(c3) + "/student_ckpt";
    if (!fs::exists(data_dir + "/manifest.json") ||
        !fs::exists(student_dir + "/manifest.json")) {
        ExperimentConfig mini = c3;
        mini.name = "mini";
        mini.dataset.count = 600;
        mini.teacher_train.epochs = 4;
        mini.distill_train.epochs = 5;
        mini.out_root = base + "/prep";
        const std::string run = run_dir(mini);
        if (!fs::exists(run + "/student_ckpt/manifest.json")) {
            fs::remove_all(run);
            cmd_synth(mini);
            cmd_train_teacher(mini);
            cmd_distill(mini);
        }
        data_dir = run + "/dataset";
        student_dir = run + "/student_ckpt";
    }
    LoadedDataset data = load_all(data_dir);
    Encoder student = load_encoder_checkpoint(student_dir);

    TranslatorTrainConfig tc;
    tc.diffusion.image_size = 64;
    tc.steps = 900;
    tc.batch_size = 4;
    tc.lr = 3e-4;
    tc.warmup_steps = 60;
    tc.cosine = true;
    tc.augment = false;
    tc.seed = 17;
    tc.out_dir = base + "/trans_guided";
    tc.log_path = base + "/trans_guided.jsonl";
    train_translator(data, student_dir, tc);

    TranslatorTrainConfig tb = tc;  // identical budget, seed, and batch order
    tb.diffusion.use_sggm = false;
    tb.out_dir = base + "/trans_unguided";
    tb.log_path = base + "/trans_unguided.jsonl";
    train_translator(data, student_dir, tb);

    Translator guided = load_translator_checkpoint(tc.out_dir);
    Translator unguided = load_translator_checkpoint(tb.out_dir);
    Translator untrained(tc.diffusion, student.config(), class_names(), 1717);

    const std::size_t K = std::min<std::size_t>(16, data.test.size());
    std::vector<Tensor> sar;
    std::vector<std::uint64_t> seeds;
    std::vector<const Image*> refs;
    Rng sr(777);
    for (std::size_t i = 0; i < K; ++i) {
        sar.push_back(image_to_chw(data.test[i].sar3));
        refs.push_back(&data.test[i].optical);
        seeds.push_back(sr.child(i).seed());
    }
    auto mean_sam = [&](const Translator& m) {
        auto res = translate_batch(sar, m, student, 30, m.config().cfg_scale, seeds);
        Real s = 0;
        for (std::size_t i = 0; i < K; ++i) s += sam(res[i].optical, *refs[i]);
        return s / K;
    };
    const Real sam_untrained = mean_sam(untrained);
    const Real sam_guided = mean_sam(guided);
    const Real sam_unguided = mean_sam(unguided);

    double secs = elapsed_s(t0);
    const bool halves = sam_guided <= 0.5 * sam_untrained;
    const bool beats = sam_guided < sam_unguided;
    std::ostringstream d;
    d << "translation quality on " << K << " held-out scenes -- mean SAM trained "
      << fmt(sam_guided, 4) << " vs untrained " << fmt(sam_untrained, 4) << " (need <= 0.5x = "
      << fmt(0.5 * sam_untrained, 4) << "); guidance-off " << fmt(sam_unguided, 4)
      << " (guided must be lower); " << fmt(secs, 4) << " s < " << fmt(kBudget, 4) << " s";
    return {halves && beats && secs < kBudget, d.str()};
}

// ---------------------------------------------------------------------------
// C7: metric implementations agree with independent oracles: SSIM closed
// form on constant planes, exact spectral angles, high-pass correlation
// signs, a hand-expanded spectral-distortion case, Gaussian closed forms for
// the feature-distribution distance, and an unbiasedness check for the
// kernel distance (mean over 100 resamplings within 2 standard errors of 0).
// ---------------------------------------------------------------------------

Outcome criterion7(const Context&) {
    std::vector<std::string> notes;
    bool ok = true;
    auto expect = [&](bool cond, const std::string& what) {
        if (!cond) {
            ok = false;
            notes.push_back("FAILED: " + what);
        }
    };
    Rng rng(90210);

    {  // SSIM: self-identity and the constant-plane closed form
        Image x(24, 24, 3);
        for (auto& v : x.data) v = rng.uniform(0, 1);
        expect(std::abs(ssim(x, x) - 1.0) <= 1e-12, "SSIM self == 1");
        Image a(16, 16, 1), b(16, 16, 1);
        for (auto& v : a.data) v = 0.2;
        for (auto& v : b.data) v = 0.6;
        const Real c1 = 1e-4, c2 = 9e-4;
        Real closed = ((2 * 0.2 * 0.6 + c1) * c2) / ((0.04 + 0.36 + c1) * c2);
        expect(std::abs(ssim(a, b) - closed) <= 1e-12, "SSIM constant-plane closed form");
        notes.push_back("SSIM closed form dev " + fmt(std::abs(ssim(a, b) - closed), 2));
    }
    {  // spectral angle: exact 45 and 90 degree cases, scale invariance
        Image u(4, 4, 3), v(4, 4, 3);
        for (std::size_t i = 0; i < u.data.size(); i += 3) {
            u.data[i] = 0.8;
            u.data[i + 1] = 0.0;
            u.data[i + 2] = 0.0;
            v.data[i] = 0.5;
            v.data[i + 1] = 0.5;
            v.data[i + 2] = 0.0;
        }
        expect(std::abs(sam(u, v) - M_PI / 4) <= 1e-12, "SAM 45-degree case");
        Image w = u;
        for (std::size_t i = 0; i < w.data.size(); i += 3) {
            w.data[i] = 0.0;
            w.data[i + 1] = 0.9;
        }
        expect(std::abs(sam(u, w) - M_PI / 2) <= 1e-12, "SAM 90-degree case");
        Image us = u;
        for (auto& t : us.data) t *= 0.37;
        expect(std::abs(sam(u, us)) <= 1e-9, "SAM scale invariance");
        notes.push_back("SAM exact angles");
    }
    {  // high-pass correlation: sign structure
        Image x(20, 20, 1), y(20, 20, 1);
        for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] = rng.uniform(0, 1);
        for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = 1.0 - x.data[i];
        expect(std::abs(scc(x, x) - 1.0) <= 1e-12, "SCC self == 1");
        expect(std::abs(scc(x, y) + 1.0) <= 1e-12, "SCC inverted == -1");
        notes.push_back("SCC sign structure exact");
    }
    {  // spectral distortion: hand-expanded two-band oracle
        Image p(8, 8, 2), r(8, 8, 2);
        for (auto& v : p.data) v = rng.uniform(0.1, 0.9);
        for (auto& v : r.data) v = rng.uniform(0.1, 0.9);
        auto band = [](const Image& im, std::size_t c) {
            std::vector<Real> out;
            for (std::size_t i = c; i < im.data.size(); i += im.c)
                out.push_back(im.data[i]);
            return out;
        };
        auto uiqi = [](const std::vector<Real>& a, const std::vector<Real>& b) {
            Real ma = 0, mb = 0;
            for (Real v : a) ma += v;
            for (Real v : b) mb += v;
            ma /= a.size();
            mb /= b.size();
            Real va = 0, vb = 0, cov = 0;
            for (std::size_t i = 0; i < a.size(); ++i) {
                va += (a[i] - ma) * (a[i] - ma);
                vb += (b[i] - mb) * (b[i] - mb);
                cov += (a[i] - ma) * (b[i] - mb);
            }
            return (4 * cov * ma * mb) / ((va + vb) * (ma * ma + mb * mb));
        };
        Real acc = 0;
        int terms = 0;
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 2; ++j) {
                if (i == j) continue;
                acc += std::abs(uiqi(band(p, i), band(p, j)) - uiqi(band(r, i), band(r, j)));
                ++terms;
            }
        Real oracle = acc / terms;
        expect(std::abs(d_lambda(p, r) - oracle) <= 1e-12, "spectral-distortion oracle");
        expect(d_lambda(p, p) == 0.0, "spectral distortion self == 0");
        notes.push_back("spectral-distortion oracle dev " +
                        fmt(std::abs(d_lambda(p, r) - oracle), 2));
    }
    {  // feature-distribution distance: identical sets and Gaussian closed forms
        Tensor a({300, 16});
        for (auto& v : a.vec()) v = rng.normal(0, 1);
        Real self = efid(a, a);
        expect(self <= 1e-3, "distribution distance of identical sets ~ 0");
        Tensor x1({500, 1}), x2({500, 1});
        for (auto& v : x1.vec()) v = rng.normal(0.3, 0.9);
        for (auto& v : x2.vec()) v = rng.normal(-0.2, 1.4);
        Real m1 = 0, m2 = 0;
        for (Real v : x1.vec()) m1 += v;
        for (Real v : x2.vec()) m2 += v;
        m1 /= 500;
        m2 /= 500;
        Real v1 = 0, v2 = 0;
        for (Real v : x1.vec()) v1 += (v - m1) * (v - m1);
        for (Real v : x2.vec()) v2 += (v - m2) * (v - m2);
        v1 /= 499;
        v2 /= 499;
        Real closed = (m1 - m2) * (m1 - m2) +
                      (std::sqrt(v1) - std::sqrt(v2)) * (std::sqrt(v1) - std::sqrt(v2));
        Real dev = std::abs(efid(x1, x2) - closed);
        expect(dev <= 1e-9, "1-D Gaussian closed form");
        notes.push_back("identical-set distance " + fmt(self, 2) + ", 1-D closed-form dev " +
                        fmt(dev, 2));
    }
    {  // kernel distance: unbiased at the null over 100 resamplings
        const int R = 100;
        const std::size_t m = 100, ddim = 8;
        std::vector<Real> vals;
        for (int r = 0; r < R; ++r) {
            Rng rr = rng.child(9000 + r);
            Tensor a({m, ddim}), b({m, ddim});
            for (auto& v : a.vec()) v = rr.normal(0, 1);
            for (auto& v : b.vec()) v = rr.normal(0, 1);
            vals.push_back(ekid(a, b));
        }
        Real mean = std::accumulate(vals.begin(), vals.end(), Real(0)) / R;
        Real var = 0;
        for (Real v : vals) var += (v - mean) * (v - mean);
        var /= (R - 1);
        Real se = std::sqrt(var / R);
        expect(std::abs(mean) <= 2 * se, "kernel-distance null mean within 2 SE");
        Tensor c({m, ddim}), e({m, ddim});
        Rng rr = rng.child(12345);
        for (auto& v : c.vec()) v = rr.normal(0, 1);
        for (auto& v : e.vec()) v = rr.normal(1.0, 1);
        expect(ekid(c, e) > 0.1, "kernel distance separates shifted distributions");
        notes.push_back("kernel-distance null mean " + fmt(mean, 2) + " vs 2SE " +
                        fmt(2 * se, 2));
    }

    std::ostringstream d;
    for (std::size_t i = 0; i < notes.size(); ++i) d << (i ? "; " : "") << notes[i];
    return {ok, d.str()};
}

// ---------------------------------------------------------------------------
// C8: at initialization every guidance pathway is exactly neutral -- the
// denoiser output is bit-identical with guidance enabled and disabled.
// ---------------------------------------------------------------------------

Outcome criterion8(const Context&) {
    DiffusionConfig on;
    on.image_size = 64;
    on.use_control = true;
    on.use_sggm = true;
    DiffusionConfig off = on;
    off.use_control = false;
    off.use_sggm = false;

    EncoderConfig ec;
    Encoder student(ec, 31);
    Translator m_on(on, ec, class_names(), 3);
    Translator m_off(off, ec, class_names(), 3);
    if (m_on.params().content_sha256() != m_off.params().content_sha256())
        return {false, "parameter draws differ between flag settings"};

    Rng rng(8);
    Tensor x_t = Tensor::randn({2, 3, 64, 64}, rng);
    Tensor sar = Tensor::rand_uniform({2, 3, 64, 64}, rng, -1.0, 1.0);
    Tensor sar01 = sar;
    for (auto& v : sar01.vec()) v = 0.5 * (v + 1.0);
    HierPrompts hier = extract_hier_prompts(sar01, student, "c8");
    std::vector<PromptSpec> prompts = {
        build_prompt({0.9, 0.1, 0.8, 0.1, 0.1, 0.1}, 0.7, 2, class_names()),
        null_prompt()};
    Condition cond{sar, prompts, hier};

    NoGradGuard ng;
    DenoiserOut a = m_on.denoise(constant(x_t), {500, 20}, cond);
    DenoiserOut b = m_off.denoise(constant(x_t), {500, 20}, cond);
    const auto& ea = a.eps->value.vec();
    const auto& eb = b.eps->value.vec();
    const auto& ca = a.confidence->value.vec();
    const auto& cb = b.confidence->value.vec();
    bool eps_same = ea.size() == eb.size() &&
                    std::memcmp(ea.data(), eb.data(), ea.size() * sizeof(Real)) == 0;
    bool conf_same = ca.size() == cb.size() &&
                     std::memcmp(ca.data(), cb.data(), ca.size() * sizeof(Real)) == 0;
    Real worst = 0;
    for (std::size_t i = 0; i < std::min(ea.size(), eb.size()); ++i)
        worst = std::max(worst, std::abs(ea[i] - eb[i]));

    std::ostringstream d;
    d << "untrained denoiser, guidance on vs off -- prediction "
      << (eps_same ? "bit-identical" : ("differs, max dev " + fmt(worst, 3)))
      << ", confidence " << (conf_same ? "bit-identical" : "differs") << " ("
      << ea.size() << " + " << ca.size() << " values compared)";
    return {eps_same && conf_same, d.str()};
}

// ---------------------------------------------------------------------------
// C9: the full 200-scene pipeline, run twice into two different run roots,
// produces byte-identical metric reports. Under 30 minutes per run.
// ---------------------------------------------------------------------------

Outcome criterion9(const Context& ctx) {
    const double kBudget = 30.0 * 60.0;
    ExperimentConfig cfg = load_experiment_config(ctx.smoke_config);
    const std::string base = ctx.work + "/c9";
    fs::remove_all(base);

    auto one_run = [&](const std::string& root) {
        EnvGuard env("OSCAR_RUN_ROOT", root);
        auto t0 = std::chrono::steady_clock::now();
        cmd_synth(cfg);
        cmd_train_teacher(cfg);
        cmd_distill(cfg);
        cmd_train_translator(cfg);
        cmd_translate(cfg);
        cmd_evaluate(cfg);
        return elapsed_s(t0);
    };
    double s1 = one_run(base + "/runA");
    double s2 = one_run(base + "/runB");

    std::string ra = read_bytes(base + "/runA/" + cfg.name + "/report.json");
    std::string rb = read_bytes(base + "/runB/" + cfg.name + "/report.json");
    const bool same = ra == rb;
    std::ostringstream d;
    d << "200-scene pipeline run twice -- reports " << (same ? "byte-identical" : "DIFFER")
      << " (sha " << sha256_hex(ra).substr(0, 12) << " vs " << sha256_hex(rb).substr(0, 12)
      << "), " << fmt(s1, 4) << " s and " << fmt(s2, 4) << " s per run (need < "
      << fmt(kBudget, 4) << " s each)";
    return {same && s1 < kBudget && s2 < kBudget, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance suite: verifies the framework's headline claims"};
    int criterion = 0;
    Context ctx;
    ctx.work = "acceptance_work";
    ctx.smoke_config = "configs/smoke200.json";
    app.add_option("--criterion", criterion, "criterion number (1-9)")
        ->required()
        ->check(CLI::Range(1, 9));
    app.add_option("--work", ctx.work, "working directory for generated artifacts");
    app.add_option("--smoke-config", ctx.smoke_config,
                   "experiment config used by the determinism criterion");
    CLI11_PARSE(app, argc, argv);

    static const char* kTitles[] = {
        "",
        "analytic gradients match finite differences",
        "closed-form behaviors are exact",
        "distillation closes the attention and accuracy gaps",
        "confidence tracks injected target noise",
        "confidence matches the analytic optimum",
        "training and guidance improve translation",
        "evaluation metrics match independent oracles",
        "guidance is exactly neutral at initialization",
        "end-to-end pipeline is bit-reproducible",
    };

    fs::create_directories(ctx.work);
    Outcome out;
    try {
        switch (criterion) {
            case 1: out = criterion1(ctx); break;
            case 2: out = criterion2(ctx); break;
            case 3: out = criterion3(ctx); break;
            case 4: out = criterion4(ctx); break;
            case 5: out = criterion5(ctx); break;
            case 6: out = criterion6(ctx); break;
            case 7: out = criterion7(ctx); break;
            case 8: out = criterion8(ctx); break;
            case 9: out = criterion9(ctx); break;
        }
    } catch (const std::exception& e) {
        out = {false, std::string("exception: ") + e.what()};
    }

    std::printf("[%s] C%d: %s -- %s\n", out.pass ? "PASS" : "FAIL", criterion,
                kTitles[criterion], out.details.c_str());
    return out.pass ? 0 : 1;
}
