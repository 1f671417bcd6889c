#include "oscar/distill/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "oscar/core/jsonl.hpp"

namespace oscar {

void DistillWeights::validate() const {
    if (lambda_kd < 0 || lambda_attn < 0 || lambda_inv < 0 || mu_var < 0 || nu_cov < 0)
        throw ConfigError("DistillWeights: loss weights must be nonnegative");
    if (temperature <= 0) throw ConfigError("DistillWeights: temperature must be positive");
    if (alpha_min > alpha_max)
        throw ConfigError("DistillWeights: alpha_min must not exceed alpha_max");
}

Real class_weight(std::size_t c, const DistillWeights& w) {
    if (c >= w.class_counts.size())
        throw ValidationError("class_weight: class id out of range");
    std::size_t nc = w.class_counts[c], n = w.total;
    if (nc > n) throw ValidationError("class_weight: N_c exceeds N");
    if (nc == 0) {
        std::fprintf(stderr,
                     "[distill] warning: class %zu absent from training split; "
                     "using alpha_max weight\n",
                     c);
        return w.alpha_max;
    }
    Real raw = static_cast<Real>(n - nc) / static_cast<Real>(nc);
    return std::clamp(raw, w.alpha_min, w.alpha_max);
}

Var task_loss(const Var& logits, const Tensor& labels, const DistillWeights& w) {
    const Shape& s = logits->value.shape();
    if (s.size() != 2 || labels.shape() != s)
        throw ShapeError("task_loss: logits and labels must both be (B,C)");
    std::size_t B = s[0], C = s[1];
    for (Real y : labels.vec())
        if (y != 0.0 && y != 1.0)
            throw ValidationError("task_loss: labels must be binary");

    Tensor wpos(s), wneg(s);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            Real y = labels[b * C + c];
            wpos[b * C + c] = y * class_weight(c, w);
            wneg[b * C + c] = 1.0 - y;
        }
    // -log σ(z) = softplus(-z); -log(1-σ(z)) = softplus(z)
    Var term = add(mul(constant(wpos), softplus_v(neg(logits))),
                   mul(constant(wneg), softplus_v(logits)));
    return muls(sum_all(term), 1.0 / static_cast<Real>(B * C));
}

Var logit_loss(const Var& z_S, const Var& z_T, Real temperature) {
    if (temperature <= 0) throw ConfigError("logit_loss: temperature must be positive");
    const Shape& s = z_S->value.shape();
    if (z_T->value.shape() != s) throw ShapeError("logit_loss: logit shapes differ");
    std::size_t n = z_S->value.numel();
    Tensor p_T(s), q_T(s);  // teacher soft targets, constants
    for (std::size_t i = 0; i < n; ++i) {
        Real p = 1.0 / (1.0 + std::exp(-z_T->value[i] / temperature));
        p_T[i] = p;
        q_T[i] = 1.0 - p;
    }
    Var zs = muls(z_S, 1.0 / temperature);
    Var term = add(mul(constant(p_T), softplus_v(neg(zs))),
                   mul(constant(q_T), softplus_v(zs)));
    return muls(sum_all(term), 1.0 / static_cast<Real>(n));
}

namespace {
void check_attn_rows(const Tensor& rows, const char* who) {
    std::size_t B = rows.dim(0), N = rows.dim(1);
    for (std::size_t b = 0; b < B; ++b) {
        Real sum = 0;
        for (std::size_t i = 0; i < N; ++i) {
            Real v = rows[b * N + i];
            if (v < 0) throw ValidationError(std::string(who) + ": negative attention mass");
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-4)
            throw ValidationError(std::string(who) + ": attention row not normalized");
    }
}
}  // namespace

Var attn_loss(const FeatureBundle& student, const FeatureBundle& teacher,
              const std::vector<std::size_t>& layers) {
    if (layers.empty()) throw ConfigError("attn_loss: empty layer set");
    Var acc;
    for (auto l : layers) {
        if (!student.attn_per_layer.count(l) || !teacher.attn_per_layer.count(l))
            throw ValidationError("attn_loss: bundle missing aligned layer");
        const Var& a_S = student.attn_per_layer.at(l);
        const Var& a_T = teacher.attn_per_layer.at(l);
        if (a_S->value.shape() != a_T->value.shape())
            throw ShapeError("attn_loss: attention shapes differ");
        check_attn_rows(a_S->value, "attn_loss(student)");
        check_attn_rows(a_T->value, "attn_loss(teacher)");
        std::size_t B = a_S->value.dim(0);

        // KL(A_T ‖ A_S) = Σ A_T·(log(A_T+ε) − log(A_S+ε)); teacher side constant
        Tensor t_mass = a_T->value;
        Tensor t_log(t_mass.shape());
        for (std::size_t i = 0; i < t_mass.numel(); ++i)
            t_log[i] = t_mass[i] * std::log(t_mass[i] + 1e-8);
        Real t_entropy = 0;
        for (std::size_t i = 0; i < t_log.numel(); ++i) t_entropy += t_log[i];

        Var cross = sum_all(mul(constant(t_mass), log_v(adds(a_S, 1e-8))));
        Var kl = muls(sub(constant(Tensor::scalar(t_entropy)), cross),
                      1.0 / static_cast<Real>(B));
        acc = acc ? add(acc, kl) : kl;
    }
    return muls(acc, 1.0 / static_cast<Real>(layers.size()));
}

Var cls_loss(const FeatureBundle& student, const FeatureBundle& teacher,
             const std::vector<std::size_t>& layers) {
    if (layers.empty()) throw ConfigError("cls_loss: empty layer set");
    Var acc;
    for (auto l : layers) {
        if (!student.cls_per_layer.count(l) || !teacher.cls_per_layer.count(l))
            throw ValidationError("cls_loss: bundle missing aligned layer");
        const Var& c_S = student.cls_per_layer.at(l);
        const Var& c_T = teacher.cls_per_layer.at(l);
        if (c_S->value.shape() != c_T->value.shape())
            throw ShapeError("cls_loss: CLS dimensions differ");
        std::size_t B = c_S->value.dim(0);
        Var sq = sum_all(square_v(sub(c_S, constant(c_T->value))));
        Var per_sample = muls(sq, 1.0 / static_cast<Real>(B));
        acc = acc ? add(acc, per_sample) : per_sample;
    }
    return muls(acc, 1.0 / static_cast<Real>(layers.size()));
}

namespace {
// variance + covariance penalty of one (B,d) batch as plain numbers
std::pair<Real, Real> var_cov_terms_const(const Tensor& z) {
    std::size_t B = z.dim(0), d = z.dim(1);
    std::vector<Real> mean(d, 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < d; ++j) mean[j] += z[b * d + j];
    for (auto& m : mean) m /= static_cast<Real>(B);
    Real var_term = 0;
    std::vector<Real> centered(B * d);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < d; ++j)
            centered[b * d + j] = z[b * d + j] - mean[j];
    for (std::size_t j = 0; j < d; ++j) {
        Real v = 0;
        for (std::size_t b = 0; b < B; ++b) v += centered[b * d + j] * centered[b * d + j];
        v /= static_cast<Real>(B - 1);
        var_term += std::max(0.0, 1.0 - std::sqrt(v + 1e-4));
    }
    var_term /= static_cast<Real>(d);
    Real cov_term = 0;
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            if (i == j) continue;
            Real cij = 0;
            for (std::size_t b = 0; b < B; ++b)
                cij += centered[b * d + i] * centered[b * d + j];
            cij /= static_cast<Real>(B - 1);
            cov_term += cij * cij;
        }
    cov_term /= static_cast<Real>(d);
    return {var_term, cov_term};
}
}  // namespace

Var vicreg_loss(const Var& z_S, const Var& z_T, const DistillWeights& w) {
    const Shape& s = z_S->value.shape();
    if (s.size() != 2 || z_T->value.shape() != s)
        throw ShapeError("vicreg_loss: embeddings must both be (B,d)");
    std::size_t B = s[0], d = s[1];
    if (B < 2) throw ValidationError("vicreg_loss: batch must have at least 2 samples");

    // invariance: mean squared element difference (‖·‖²/d averaged over batch)
    Var inv = mean_all(square_v(sub(z_S, constant(z_T->value))));

    // student branch, differentiable
    Var mu = reduce_mean(z_S, 0);                       // (d)
    Var zc = add_broadcast_suffix(z_S, neg(mu));        // centered (B,d)
    Var var = muls(reduce_sum(square_v(zc), 0), 1.0 / static_cast<Real>(B - 1));
    Var std_dev = sqrt_v(adds(var, 1e-4));
    Var hinge = mean_all(relu_v(adds(neg(std_dev), 1.0)));  // target std γ=1

    Var cov = muls(matmul(zc, zc, true, false), 1.0 / static_cast<Real>(B - 1));
    Tensor diag_mask({d, d});
    for (std::size_t i = 0; i < d; ++i) diag_mask[i * d + i] = 1.0;
    Var cov_sq = sum_all(square_v(cov));
    Var diag_sq = sum_all(square_v(mul(cov, constant(diag_mask))));
    Var cov_term = muls(sub(cov_sq, diag_sq), 1.0 / static_cast<Real>(d));

    // teacher branch contributes value only
    auto [t_var, t_cov] = var_cov_terms_const(z_T->value);

    Var out = muls(inv, w.lambda_inv);
    out = add(out, muls(adds(hinge, t_var), w.mu_var));
    out = add(out, muls(adds(cov_term, t_cov), w.nu_cov));
    return out;
}

LossTerms total_student_loss(const FeatureBundle& student, const FeatureBundle& teacher,
                             const Tensor& labels, const DistillWeights& w,
                             const std::vector<std::size_t>& layers) {
    LossTerms out;
    Var l_task = task_loss(student.logits, labels, w);
    Var l_logit = logit_loss(student.logits, teacher.logits, w.temperature);
    Var l_attn = attn_loss(student, teacher, layers);
    Var l_cls = cls_loss(student, teacher, layers);
    std::size_t deepest = *std::max_element(layers.begin(), layers.end());
    Var l_vic = vicreg_loss(student.cls_per_layer.at(deepest),
                            teacher.cls_per_layer.at(deepest), w);
    out.task = value0(l_task);
    out.logit = value0(l_logit);
    out.attn = value0(l_attn);
    out.cls = value0(l_cls);
    out.vicreg = value0(l_vic);
    out.total = add(add(l_task, muls(l_logit, w.lambda_kd)),
                    add(muls(add(l_attn, l_cls), w.lambda_attn), l_vic));
    return out;
}

namespace {
Real average_precision(const std::vector<Real>& scores, const std::vector<int>& labels) {
    std::size_t n = scores.size(), n_pos = 0;
    for (int y : labels) n_pos += static_cast<std::size_t>(y);
    if (n_pos == 0) return -1.0;  // undefined; caller excludes
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    // step-wise PR integration, grouping tied scores
    Real ap = 0;
    std::size_t tp = 0, seen = 0, prev_tp = 0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) {
            tp += static_cast<std::size_t>(labels[order[j]]);
            ++seen;
            ++j;
        }
        Real precision = static_cast<Real>(tp) / static_cast<Real>(seen);
        Real recall_gain =
            static_cast<Real>(tp - prev_tp) / static_cast<Real>(n_pos);
        ap += precision * recall_gain;
        prev_tp = tp;
        i = j;
    }
    return ap;
}

Real f1_from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
    if (2 * tp + fp + fn == 0) return 0.0;
    return 2.0 * static_cast<Real>(tp) / static_cast<Real>(2 * tp + fp + fn);
}
}  // namespace

ClassificationMetrics classification_metrics(const Tensor& probs, const Tensor& labels) {
    const Shape& s = probs.shape();
    if (s.size() != 2 || labels.shape() != s)
        throw ShapeError("classification_metrics: probs and labels must both be (B,C)");
    std::size_t B = s[0], C = s[1];
    for (Real p : probs.vec())
        if (p < 0.0 || p > 1.0)
            throw ValidationError("classification_metrics: probabilities outside [0,1]");

    ClassificationMetrics m;
    Real ap_sum = 0;
    std::size_t ap_classes = 0;
    std::size_t tp_all = 0, fp_all = 0, fn_all = 0;
    Real f1_sum = 0;
    for (std::size_t c = 0; c < C; ++c) {
        std::vector<Real> sc(B);
        std::vector<int> y(B);
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t b = 0; b < B; ++b) {
            sc[b] = probs[b * C + c];
            y[b] = labels[b * C + c] > 0.5 ? 1 : 0;
            bool pred = probs[b * C + c] >= 0.5;
            if (pred && y[b]) ++tp;
            if (pred && !y[b]) ++fp;
            if (!pred && y[b]) ++fn;
        }
        Real ap = average_precision(sc, y);
        if (ap >= 0) {
            ap_sum += ap;
            ++ap_classes;
        } else {
            std::fprintf(stderr,
                         "[distill] note: class %zu has no positives; excluded "
                         "from macro AP\n",
                         c);
        }
        f1_sum += f1_from_counts(tp, fp, fn);
        tp_all += tp;
        fp_all += fp;
        fn_all += fn;
    }
    m.ap_macro = ap_classes ? ap_sum / static_cast<Real>(ap_classes) : 0.0;
    m.f1_macro = f1_sum / static_cast<Real>(C);
    m.f1_micro = f1_from_counts(tp_all, fp_all, fn_all);

    // micro AP: pool every (sample, class) decision into one ranking
    std::vector<Real> sc_all(B * C);
    std::vector<int> y_all(B * C);
    for (std::size_t i = 0; i < B * C; ++i) {
        sc_all[i] = probs[i];
        y_all[i] = labels[i] > 0.5 ? 1 : 0;
    }
    Real micro = average_precision(sc_all, y_all);
    m.ap_micro = micro >= 0 ? micro : 0.0;
    return m;
}

LoadedDataset load_all(const std::string& dir, bool verify) {
    LoadedDataset out;
    out.idx = load_dataset(dir, verify);
    out.num_classes = out.idx.num_classes;
    out.train.reserve(out.idx.train.size());
    out.test.reserve(out.idx.test.size());
    for (const auto& rec : out.idx.train) out.train.push_back(load_pair(out.idx, rec));
    for (const auto& rec : out.idx.test) out.test.push_back(load_pair(out.idx, rec));
    return out;
}

namespace {
Tensor stack_images(const std::vector<const PreprocessedPair*>& pairs, bool sar) {
    if (pairs.empty()) throw ValidationError("stack: empty batch");
    const Image& first = sar ? pairs[0]->sar3 : pairs[0]->optical;
    std::size_t B = pairs.size(), H = first.h, W = first.w, C = first.c;
    Tensor out({B, C, H, W});
    for (std::size_t b = 0; b < B; ++b) {
        const Image& img = sar ? pairs[b]->sar3 : pairs[b]->optical;
        if (img.h != H || img.w != W || img.c != C)
            throw ShapeError("stack: inconsistent image sizes in batch");
        Tensor chw = image_to_chw(img);
        std::copy(chw.vec().begin(), chw.vec().end(), out.data() + b * C * H * W);
    }
    return out;
}
}  // namespace

Tensor stack_optical(const std::vector<const PreprocessedPair*>& pairs) {
    return stack_images(pairs, false);
}
Tensor stack_sar(const std::vector<const PreprocessedPair*>& pairs) {
    return stack_images(pairs, true);
}

Tensor stack_labels(const std::vector<const PreprocessedPair*>& pairs, std::size_t C) {
    Tensor out({pairs.size(), C});
    for (std::size_t b = 0; b < pairs.size(); ++b) {
        auto mh = multi_hot(pairs[b]->present_classes, C);
        std::copy(mh.begin(), mh.end(), out.data() + b * C);
    }
    return out;
}

void fill_class_counts(const std::vector<PreprocessedPair>& pairs, std::size_t C,
                       DistillWeights& w) {
    w.class_counts.assign(C, 0);
    w.total = pairs.size();
    for (const auto& p : pairs)
        for (int c : p.present_classes) w.class_counts.at(static_cast<std::size_t>(c))++;
}

ClassificationMetrics eval_encoder(const Encoder& enc,
                                   const std::vector<PreprocessedPair>& pairs,
                                   bool use_sar, std::size_t batch_size) {
    NoGradGuard guard;
    std::size_t C = enc.config().num_classes;
    Tensor probs({pairs.size(), C}), labels({pairs.size(), C});
    for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
        std::size_t stop = std::min(pairs.size(), start + batch_size);
        std::vector<const PreprocessedPair*> batch;
        for (std::size_t i = start; i < stop; ++i) batch.push_back(&pairs[i]);
        Var x = constant(use_sar ? stack_sar(batch) : stack_optical(batch));
        Var p = classify(enc.encode(x));
        Tensor lab = stack_labels(batch, C);
        std::copy(p->value.vec().begin(), p->value.vec().end(),
                  probs.data() + start * C);
        std::copy(lab.vec().begin(), lab.vec().end(), labels.data() + start * C);
    }
    return classification_metrics(probs, labels);
}

Real mean_attention_kl(const Encoder& student, const Encoder& teacher,
                       const std::vector<PreprocessedPair>& pairs,
                       std::size_t batch_size) {
    NoGradGuard guard;
    const auto& layers = student.config().aligned_layers;
    Real acc = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
        std::size_t stop = std::min(pairs.size(), start + batch_size);
        std::vector<const PreprocessedPair*> batch;
        for (std::size_t i = start; i < stop; ++i) batch.push_back(&pairs[i]);
        FeatureBundle fb_S = student.encode(constant(stack_sar(batch)));
        FeatureBundle fb_T = teacher.encode(constant(stack_optical(batch)));
        acc += value0(attn_loss(fb_S, fb_T, layers));
        ++batches;
    }
    return batches ? acc / static_cast<Real>(batches) : 0.0;
}

namespace {
AdamConfig make_adam(const TrainConfig& cfg, std::size_t total_steps) {
    AdamConfig ac;
    ac.lr = cfg.lr;
    ac.warmup_steps = cfg.warmup_steps;
    ac.total_steps = cfg.cosine ? total_steps : 0;
    ac.final_lr_frac = 0.0;
    return ac;
}

std::vector<const PreprocessedPair*> make_batch(
    const std::vector<PreprocessedPair>& pool, const std::vector<std::size_t>& order,
    std::size_t start, std::size_t stop, bool augment_on, Rng& aug_rng,
    std::vector<PreprocessedPair>& scratch) {
    scratch.clear();
    std::vector<const PreprocessedPair*> batch;
    scratch.reserve(stop - start);
    for (std::size_t i = start; i < stop; ++i) {
        const PreprocessedPair& p = pool[order[i]];
        if (augment_on) {
            scratch.push_back(augment(p, aug_rng.next_u64()));
        } else {
            batch.push_back(&p);
        }
    }
    if (augment_on)
        for (const auto& p : scratch) batch.push_back(&p);
    return batch;
}
}  // namespace

TrainReport train_teacher(const LoadedDataset& data, const TrainConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("train_teacher: out_dir is required");
    if (data.train.empty()) throw ValidationError("train_teacher: empty training split");
    Encoder enc(cfg.encoder, cfg.seed);
    std::size_t C = cfg.encoder.num_classes;

    DistillWeights w;
    fill_class_counts(data.train, C, w);

    std::size_t steps_per_epoch =
        (data.train.size() + cfg.batch_size - 1) / cfg.batch_size;
    Adam opt(enc.params().trainable(), make_adam(cfg, cfg.epochs * steps_per_epoch));

    JsonlLogger log;
    if (!cfg.log_path.empty()) log.open(cfg.log_path);

    Rng root(cfg.seed);
    Rng shuffle_rng = root.child("shuffle");
    Rng aug_rng = root.child("augment");
    Rng drop_rng = root.child("dropout");

    TrainReport rep;
    rep.checkpoint_dir = cfg.out_dir;
    std::vector<unsigned char> best_params;
    std::size_t best_step = 0;
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<PreprocessedPair> scratch;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            auto batch = make_batch(data.train, order, start, stop, cfg.augment,
                                    aug_rng, scratch);
            opt.zero_grad();
            FeatureBundle fb =
                enc.encode(constant(stack_optical(batch)), true, &drop_rng);
            Var loss = task_loss(fb.logits, stack_labels(batch, C), w);
            Real lv = value0(loss);
            if (!std::isfinite(lv))
                throw NumericError("train_teacher: loss diverged at step " +
                                   std::to_string(rep.steps));
            backward(loss);
            opt.step();
            rep.final_loss = lv;
            ++rep.steps;
            if (!cfg.log_path.empty())
                log.log(Json{{"stage", "teacher"},
                             {"step", rep.steps},
                             {"epoch", epoch},
                             {"loss", lv},
                             {"lr", opt.lr_at(rep.steps - 1)}});
        }
        ClassificationMetrics val = eval_encoder(enc, data.test, /*use_sar=*/false);
        rep.final_val_ap_micro = val.ap_micro;
        if (val.ap_micro >= rep.best_val_ap_micro) {
            rep.best_val_ap_micro = val.ap_micro;
            best_params = enc.params().serialize();
            best_step = rep.steps;
        }
        if (!cfg.log_path.empty())
            log.log(Json{{"stage", "teacher_val"},
                         {"epoch", epoch},
                         {"ap_micro", val.ap_micro},
                         {"ap_macro", val.ap_macro},
                         {"f1_micro", val.f1_micro}});
    }
    if (!best_params.empty()) enc.params().deserialize(best_params);
    save_encoder_checkpoint(cfg.out_dir, enc, best_step,
                            Json{{"role", "teacher"},
                                 {"val_ap_micro", rep.best_val_ap_micro}});
    return rep;
}

TrainReport distill_student(const LoadedDataset& data, const std::string& teacher_dir,
                            const DistillWeights& weights, const TrainConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("distill_student: out_dir is required");
    if (data.train.empty())
        throw ValidationError("distill_student: empty training split");
    weights.validate();
    Encoder teacher = load_encoder_checkpoint(teacher_dir);
    std::string teacher_hash_before = teacher.params().content_sha256();
    // Attention alignment assumes both encoders expose the same layer/head
    // geometry, so the student must share the teacher's architecture.
    if (encoder_config_to_json(cfg.encoder) != encoder_config_to_json(teacher.config()))
        throw ConfigError("distill_student: encoder config differs from the teacher's");
    Encoder student(cfg.encoder, cfg.seed);
    std::size_t C = cfg.encoder.num_classes;

    DistillWeights w = weights;
    if (w.class_counts.empty()) fill_class_counts(data.train, C, w);

    std::size_t steps_per_epoch =
        (data.train.size() + cfg.batch_size - 1) / cfg.batch_size;
    Adam opt(student.params().trainable(), make_adam(cfg, cfg.epochs * steps_per_epoch));

    JsonlLogger log;
    if (!cfg.log_path.empty()) log.open(cfg.log_path);

    Rng root(cfg.seed);
    Rng shuffle_rng = root.child("shuffle");
    Rng aug_rng = root.child("augment");
    Rng drop_rng = root.child("dropout");

    TrainReport rep;
    rep.checkpoint_dir = cfg.out_dir;
    rep.attn_kl_initial = mean_attention_kl(student, teacher, data.test);
    std::vector<unsigned char> best_params;
    std::size_t best_step = 0;
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<PreprocessedPair> scratch;
    const auto& layers = cfg.encoder.aligned_layers;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            auto batch = make_batch(data.train, order, start, stop, cfg.augment,
                                    aug_rng, scratch);
            if (batch.size() < 2) continue;  // variance term needs ≥ 2 samples
            opt.zero_grad();
            FeatureBundle fb_T;
            {
                NoGradGuard guard;
                fb_T = teacher.encode(constant(stack_optical(batch)));
            }
            FeatureBundle fb_S =
                student.encode(constant(stack_sar(batch)), true, &drop_rng);
            LossTerms terms =
                total_student_loss(fb_S, fb_T, stack_labels(batch, C), w, layers);
            Real lv = value0(terms.total);
            if (!std::isfinite(lv))
                throw NumericError("distill_student: loss diverged at step " +
                                   std::to_string(rep.steps));
            backward(terms.total);
            opt.step();
            rep.final_loss = lv;
            ++rep.steps;
            if (!cfg.log_path.empty())
                log.log(Json{{"stage", "student"},
                             {"step", rep.steps},
                             {"epoch", epoch},
                             {"loss", lv},
                             {"task", terms.task},
                             {"logit", terms.logit},
                             {"attn", terms.attn},
                             {"cls", terms.cls},
                             {"vicreg", terms.vicreg},
                             {"lr", opt.lr_at(rep.steps - 1)}});
        }
        ClassificationMetrics val = eval_encoder(student, data.test, /*use_sar=*/true);
        rep.final_val_ap_micro = val.ap_micro;
        if (val.ap_micro >= rep.best_val_ap_micro) {
            rep.best_val_ap_micro = val.ap_micro;
            best_params = student.params().serialize();
            best_step = rep.steps;
        }
        if (!cfg.log_path.empty())
            log.log(Json{{"stage", "student_val"},
                         {"epoch", epoch},
                         {"ap_micro", val.ap_micro},
                         {"ap_macro", val.ap_macro},
                         {"f1_micro", val.f1_micro}});
    }
    if (!best_params.empty()) student.params().deserialize(best_params);
    rep.attn_kl_final = mean_attention_kl(student, teacher, data.test);
    if (teacher.params().content_sha256() != teacher_hash_before)
        throw NumericError("distill_student: teacher parameters changed");
    save_encoder_checkpoint(cfg.out_dir, student, best_step,
                            Json{{"role", "student"},
                                 {"val_ap_micro", rep.best_val_ap_micro},
                                 {"attn_kl_initial", rep.attn_kl_initial},
                                 {"attn_kl_final", rep.attn_kl_final},
                                 {"teacher_params_sha256", teacher_hash_before}});
    return rep;
}

}  // namespace oscar
