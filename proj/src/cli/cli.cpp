#include "oscar/cli/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "oscar/core/hash.hpp"

namespace oscar {

namespace fs = std::filesystem;

namespace {

void check_keys(const Json& j, const char* ctx, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(std::string(ctx) + ": expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const char* a : allowed)
            if (key == a) {
                known = true;
                break;
            }
        if (!known) throw ConfigError(std::string(ctx) + ": unknown key '" + key + "'");
    }
}

template <typename T>
void read_into(const Json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

struct Stopwatch {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    Real seconds() const {
        return std::chrono::duration<Real>(std::chrono::steady_clock::now() - t0).count();
    }
};

void cli_log(const std::string& run, const Json& j) {
    ensure_dir(run + "/logs");
    std::ofstream out(run + "/logs/cli.jsonl", std::ios::app);
    if (out) out << j.dump() << "\n";
}

}  // namespace

void StageTrainConfig::validate() const {
    if (epochs == 0) throw ConfigError("train stage: epochs must be > 0");
    if (batch_size == 0) throw ConfigError("train stage: batch_size must be > 0");
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("train stage: lr must be positive");
}

void TranslatorStageConfig::validate() const {
    if (steps == 0) throw ConfigError("translator stage: steps must be > 0");
    if (batch_size == 0) throw ConfigError("translator stage: batch_size must be > 0");
    if (!(lr > 0) || !std::isfinite(lr))
        throw ConfigError("translator stage: lr must be positive");
}

void SamplerConfig::validate() const {
    if (steps == 0) throw ConfigError("sampler: steps must be > 0");
    if (!(cfg_scale >= 0) || !std::isfinite(cfg_scale))
        throw ConfigError("sampler: cfg_scale must be >= 0");
    if (batch_size == 0) throw ConfigError("sampler: batch_size must be > 0");
}

void ExperimentConfig::validate() const {
    if (name.empty() || name.find('/') != std::string::npos)
        throw ConfigError("experiment name must be a non-empty path segment");
    encoder.validate();
    distill.validate();
    diffusion.validate();
    teacher_train.validate();
    distill_train.validate();
    translator_train.validate();
    sampler.validate();
    if (dataset.count < 2) throw ConfigError("dataset: count must be >= 2");
    if (!(dataset.split_ratio > 0 && dataset.split_ratio < 1))
        throw ConfigError("dataset: split_ratio must lie in (0,1)");
    if (dataset.size != diffusion.image_size)
        throw ConfigError("dataset size " + std::to_string(dataset.size) +
                          " must equal diffusion image_size " +
                          std::to_string(diffusion.image_size));
    if (dataset.size % encoder.patch_size != 0)
        throw ConfigError("dataset size must be divisible by the encoder patch size");
    if (encoder.num_classes != class_names().size())
        throw ConfigError("encoder num_classes must match the " +
                          std::to_string(class_names().size()) + " land-cover classes");
    if (sampler.steps > diffusion.t_max)
        throw ConfigError("sampler steps cannot exceed diffusion t_max");
    if (out_root.empty()) throw ConfigError("out_root must not be empty");
}

Json experiment_config_to_json(const ExperimentConfig& cfg) {
    Json j;
    j["schema_version"] = 1;
    j["name"] = cfg.name;
    j["seed"] = cfg.seed;
    j["dataset"] = Json{{"size", cfg.dataset.size},
                        {"count", cfg.dataset.count},
                        {"mixture", cfg.dataset.mixture},
                        {"looks", cfg.dataset.looks},
                        {"lee_window", cfg.dataset.lee_window},
                        {"split_ratio", cfg.dataset.split_ratio},
                        {"hetero_noise", cfg.dataset.hetero_noise}};
    j["encoder"] = encoder_config_to_json(cfg.encoder);
    j["distill"] = Json{{"lambda_kd", cfg.distill.lambda_kd},
                        {"lambda_attn", cfg.distill.lambda_attn},
                        {"temperature", cfg.distill.temperature},
                        {"alpha_min", cfg.distill.alpha_min},
                        {"alpha_max", cfg.distill.alpha_max},
                        {"lambda_inv", cfg.distill.lambda_inv},
                        {"mu_var", cfg.distill.mu_var},
                        {"nu_cov", cfg.distill.nu_cov}};
    auto stage = [](const StageTrainConfig& s) {
        return Json{{"epochs", s.epochs},       {"batch_size", s.batch_size},
                    {"lr", s.lr},               {"warmup_steps", s.warmup_steps},
                    {"cosine", s.cosine},       {"augment", s.augment}};
    };
    j["teacher_train"] = stage(cfg.teacher_train);
    j["distill_train"] = stage(cfg.distill_train);
    j["translator_train"] = Json{{"steps", cfg.translator_train.steps},
                                 {"batch_size", cfg.translator_train.batch_size},
                                 {"lr", cfg.translator_train.lr},
                                 {"warmup_steps", cfg.translator_train.warmup_steps},
                                 {"cosine", cfg.translator_train.cosine},
                                 {"augment", cfg.translator_train.augment}};
    j["diffusion"] = diffusion_config_to_json(cfg.diffusion);
    j["sampler"] = Json{{"steps", cfg.sampler.steps},
                        {"cfg_scale", cfg.sampler.cfg_scale},
                        {"max_images", cfg.sampler.max_images},
                        {"batch_size", cfg.sampler.batch_size}};
    j["out_root"] = cfg.out_root;
    return j;
}

ExperimentConfig experiment_config_from_json(const Json& j) {
    check_keys(j, "experiment config",
               {"schema_version", "name", "seed", "dataset", "encoder", "distill",
                "teacher_train", "distill_train", "translator_train", "diffusion", "sampler",
                "out_root"});
    if (!j.contains("schema_version") || j.at("schema_version") != 1)
        throw ConfigError("experiment config: schema_version must be 1");
    ExperimentConfig cfg;
    read_into(j, "name", cfg.name);
    read_into(j, "seed", cfg.seed);
    if (j.contains("dataset")) {
        const Json& d = j.at("dataset");
        check_keys(d, "dataset",
                   {"size", "count", "mixture", "looks", "lee_window", "split_ratio",
                    "hetero_noise"});
        read_into(d, "size", cfg.dataset.size);
        read_into(d, "count", cfg.dataset.count);
        read_into(d, "mixture", cfg.dataset.mixture);
        read_into(d, "looks", cfg.dataset.looks);
        read_into(d, "lee_window", cfg.dataset.lee_window);
        read_into(d, "split_ratio", cfg.dataset.split_ratio);
        read_into(d, "hetero_noise", cfg.dataset.hetero_noise);
    }
    if (j.contains("encoder")) cfg.encoder = encoder_config_from_json(j.at("encoder"));
    if (j.contains("distill")) {
        const Json& d = j.at("distill");
        check_keys(d, "distill",
                   {"lambda_kd", "lambda_attn", "temperature", "alpha_min", "alpha_max",
                    "lambda_inv", "mu_var", "nu_cov"});
        read_into(d, "lambda_kd", cfg.distill.lambda_kd);
        read_into(d, "lambda_attn", cfg.distill.lambda_attn);
        read_into(d, "temperature", cfg.distill.temperature);
        read_into(d, "alpha_min", cfg.distill.alpha_min);
        read_into(d, "alpha_max", cfg.distill.alpha_max);
        read_into(d, "lambda_inv", cfg.distill.lambda_inv);
        read_into(d, "mu_var", cfg.distill.mu_var);
        read_into(d, "nu_cov", cfg.distill.nu_cov);
    }
    auto read_stage = [&](const char* key, StageTrainConfig& s) {
        if (!j.contains(key)) return;
        const Json& d = j.at(key);
        check_keys(d, key, {"epochs", "batch_size", "lr", "warmup_steps", "cosine", "augment"});
        read_into(d, "epochs", s.epochs);
        read_into(d, "batch_size", s.batch_size);
        read_into(d, "lr", s.lr);
        read_into(d, "warmup_steps", s.warmup_steps);
        read_into(d, "cosine", s.cosine);
        read_into(d, "augment", s.augment);
    };
    read_stage("teacher_train", cfg.teacher_train);
    read_stage("distill_train", cfg.distill_train);
    if (j.contains("translator_train")) {
        const Json& d = j.at("translator_train");
        check_keys(d, "translator_train",
                   {"steps", "batch_size", "lr", "warmup_steps", "cosine", "augment"});
        read_into(d, "steps", cfg.translator_train.steps);
        read_into(d, "batch_size", cfg.translator_train.batch_size);
        read_into(d, "lr", cfg.translator_train.lr);
        read_into(d, "warmup_steps", cfg.translator_train.warmup_steps);
        read_into(d, "cosine", cfg.translator_train.cosine);
        read_into(d, "augment", cfg.translator_train.augment);
    }
    if (j.contains("diffusion")) cfg.diffusion = diffusion_config_from_json(j.at("diffusion"));
    if (j.contains("sampler")) {
        const Json& d = j.at("sampler");
        check_keys(d, "sampler", {"steps", "cfg_scale", "max_images", "batch_size"});
        read_into(d, "steps", cfg.sampler.steps);
        read_into(d, "cfg_scale", cfg.sampler.cfg_scale);
        read_into(d, "max_images", cfg.sampler.max_images);
        read_into(d, "batch_size", cfg.sampler.batch_size);
    }
    read_into(j, "out_root", cfg.out_root);
    cfg.validate();
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    if (!file_exists(path)) throw ArtifactError("config file not found: " + path);
    return experiment_config_from_json(read_json(path));
}

std::string config_hash(const ExperimentConfig& cfg) {
    return sha256_hex(experiment_config_to_json(cfg).dump());
}

std::string run_dir(const ExperimentConfig& cfg) {
    const char* env = std::getenv("OSCAR_RUN_ROOT");
    const std::string root = (env && *env) ? env : cfg.out_root;
    return root + "/" + cfg.name;
}

// ---- run manifest ----

namespace {

std::string manifest_path(const std::string& run) { return run + "/manifest.json"; }

Json load_or_init_manifest(const std::string& run, const ExperimentConfig& cfg) {
    const std::string hash = config_hash(cfg);
    if (file_exists(manifest_path(run))) {
        Json m = read_json(manifest_path(run));
        if (m.value("kind", "") != "run")
            throw ArtifactError("manifest at " + run + " is not a run manifest");
        if (m.value("config_hash", "") != hash)
            throw ValidationError(
                "run directory " + run + " was created from a different config (hash " +
                m.value("config_hash", "?").substr(0, 12) + "... vs " + hash.substr(0, 12) +
                "...); use a fresh run directory or the original config");
        return m;
    }
    return Json{{"schema_version", 1}, {"kind", "run"},           {"name", cfg.name},
                {"config_hash", hash}, {"seed", cfg.seed},        {"stages", Json::object()}};
}

void record_stage(const std::string& run, const ExperimentConfig& cfg,
                  const std::string& stage, Json entry) {
    Json m = load_or_init_manifest(run, cfg);
    m["stages"][stage] = std::move(entry);
    write_json(manifest_path(run), m);
}

// Stamps the experiment hash into a checkpoint manifest produced by a trainer.
void embed_config_hash(const std::string& ckpt_dir, const std::string& hash) {
    Json m = read_json(ckpt_dir + "/manifest.json");
    m["config_hash"] = hash;
    write_json(ckpt_dir + "/manifest.json", m);
}

// Records a stage artifact by run-relative path; the checksum covers the
// artifact's own manifest/index file, which in turn lists its content hashes.
Json stage_entry(const std::string& run, const std::string& rel_path,
                 const std::string& rel_checksum_file, Real seconds) {
    return Json{{"path", rel_path},
                {"checksum_file", rel_checksum_file},
                {"checksum", sha256_file(run + "/" + rel_checksum_file)},
                {"seconds", seconds}};
}

}  // namespace

Json read_run_manifest(const std::string& dir) {
    if (!file_exists(manifest_path(dir)))
        throw ArtifactError("no run manifest at " + dir + "; run the synth command first");
    Json m = read_json(manifest_path(dir));
    if (m.value("kind", "") != "run")
        throw ArtifactError("manifest at " + dir + " is not a run manifest");
    return m;
}

void assert_stage_done(const Json& manifest, const std::string& stage, const std::string& run,
                       const std::string& needed_cmd) {
    if (!manifest.contains("stages") || !manifest.at("stages").contains(stage))
        throw ArtifactError("run " + run + " has no '" + stage + "' artifact yet; run the '" +
                            needed_cmd + "' command first");
}

void verify_stage_artifact(const Json& manifest, const std::string& stage,
                           const std::string& run) {
    const Json& e = manifest.at("stages").at(stage);
    const std::string file = run + "/" + e.at("checksum_file").get<std::string>();
    if (!file_exists(file))
        throw ArtifactError("stage '" + stage + "' artifact missing: " + file +
                            " (re-run the producing command)");
    const std::string have = sha256_file(file);
    if (have != e.at("checksum").get<std::string>())
        throw ArtifactError("stage '" + stage + "' artifact at " + file +
                            " does not match its recorded checksum; it was modified or "
                            "corrupted after the run");
}

// ---- commands ----

std::string cmd_synth(const ExperimentConfig& cfg) {
    cfg.validate();
    const std::string run = run_dir(cfg);
    ensure_dir(run);
    load_or_init_manifest(run, cfg);  // config-hash guard before any writes

    DatasetConfig ds = cfg.dataset;
    ds.seed = Rng(cfg.seed).child("synth").seed();
    const std::string out = run + "/dataset";
    Stopwatch sw;
    build_dataset(ds, out, config_hash(cfg));
    const Real secs = sw.seconds();

    record_stage(run, cfg, "synth",
                 stage_entry(run, "dataset", "dataset/manifest.json", secs));
    cli_log(run, Json{{"cmd", "synth"}, {"seconds", secs}, {"scenes", ds.count}});
    return out;
}

std::string cmd_train_teacher(const ExperimentConfig& cfg) {
    cfg.validate();
    const std::string run = run_dir(cfg);
    Json manifest = read_run_manifest(run);
    assert_stage_done(manifest, "synth", run, "synth");
    verify_stage_artifact(manifest, "synth", run);

    LoadedDataset data = load_all(run + "/dataset", /*verify=*/true);
    ensure_dir(run + "/logs");
    TrainConfig tc;
    tc.encoder = cfg.encoder;
    tc.epochs = cfg.teacher_train.epochs;
    tc.batch_size = cfg.teacher_train.batch_size;
    tc.lr = cfg.teacher_train.lr;
    tc.warmup_steps = cfg.teacher_train.warmup_steps;
    tc.cosine = cfg.teacher_train.cosine;
    tc.augment = cfg.teacher_train.augment;
    tc.seed = Rng(cfg.seed).child("teacher").seed();
    tc.out_dir = run + "/teacher_ckpt";
    tc.log_path = run + "/logs/teacher.jsonl";

    Stopwatch sw;
    TrainReport report = train_teacher(data, tc);
    embed_config_hash(tc.out_dir, config_hash(cfg));
    const Real secs = sw.seconds();

    Json entry = stage_entry(run, "teacher_ckpt", "teacher_ckpt/manifest.json", secs);
    entry["params_sha256"] = read_checkpoint_manifest(tc.out_dir).value("params_sha256", "");
    entry["best_val_ap_micro"] = report.best_val_ap_micro;
    entry["final_val_ap_micro"] = report.final_val_ap_micro;
    entry["final_loss"] = report.final_loss;
    record_stage(run, cfg, "teacher", entry);
    cli_log(run, Json{{"cmd", "train-teacher"},
                      {"seconds", secs},
                      {"best_val_ap_micro", report.best_val_ap_micro}});
    return tc.out_dir;
}

std::string cmd_distill(const ExperimentConfig& cfg) {
    cfg.validate();
    const std::string run = run_dir(cfg);
    Json manifest = read_run_manifest(run);
    assert_stage_done(manifest, "synth", run, "synth");
    verify_stage_artifact(manifest, "synth", run);
    assert_stage_done(manifest, "teacher", run, "train-teacher");
    verify_stage_artifact(manifest, "teacher", run);

    LoadedDataset data = load_all(run + "/dataset", /*verify=*/true);
    ensure_dir(run + "/logs");
    TrainConfig tc;
    tc.encoder = cfg.encoder;
    tc.epochs = cfg.distill_train.epochs;
    tc.batch_size = cfg.distill_train.batch_size;
    tc.lr = cfg.distill_train.lr;
    tc.warmup_steps = cfg.distill_train.warmup_steps;
    tc.cosine = cfg.distill_train.cosine;
    tc.augment = cfg.distill_train.augment;
    tc.seed = Rng(cfg.seed).child("distill").seed();
    tc.out_dir = run + "/student_ckpt";
    tc.log_path = run + "/logs/distill.jsonl";

    Stopwatch sw;
    TrainReport report = distill_student(data, run + "/teacher_ckpt", cfg.distill, tc);
    embed_config_hash(tc.out_dir, config_hash(cfg));
    const Real secs = sw.seconds();

    Json entry = stage_entry(run, "student_ckpt", "student_ckpt/manifest.json", secs);
    entry["params_sha256"] = read_checkpoint_manifest(tc.out_dir).value("params_sha256", "");
    entry["best_val_ap_micro"] = report.best_val_ap_micro;
    entry["final_val_ap_micro"] = report.final_val_ap_micro;
    entry["attn_kl_initial"] = report.attn_kl_initial;
    entry["attn_kl_final"] = report.attn_kl_final;
    record_stage(run, cfg, "student", entry);
    cli_log(run, Json{{"cmd", "distill"},
                      {"seconds", secs},
                      {"attn_kl_initial", report.attn_kl_initial},
                      {"attn_kl_final", report.attn_kl_final}});
    return tc.out_dir;
}

std::string cmd_train_translator(const ExperimentConfig& cfg) {
    cfg.validate();
    const std::string run = run_dir(cfg);
    Json manifest = read_run_manifest(run);
    assert_stage_done(manifest, "synth", run, "synth");
    verify_stage_artifact(manifest, "synth", run);
    assert_stage_done(manifest, "student", run, "distill");
    verify_stage_artifact(manifest, "student", run);

    LoadedDataset data = load_all(run + "/dataset", /*verify=*/true);
    ensure_dir(run + "/logs");
    TranslatorTrainConfig tc;
    tc.diffusion = cfg.diffusion;
    tc.steps = cfg.translator_train.steps;
    tc.batch_size = cfg.translator_train.batch_size;
    tc.lr = cfg.translator_train.lr;
    tc.warmup_steps = cfg.translator_train.warmup_steps;
    tc.cosine = cfg.translator_train.cosine;
    tc.augment = cfg.translator_train.augment;
    tc.seed = Rng(cfg.seed).child("translator").seed();
    tc.out_dir = run + "/translator_ckpt";
    tc.log_path = run + "/logs/translator.jsonl";

    Stopwatch sw;
    TranslatorTrainReport report = train_translator(data, run + "/student_ckpt", tc);
    embed_config_hash(tc.out_dir, config_hash(cfg));
    const Real secs = sw.seconds();

    Json entry = stage_entry(run, "translator_ckpt", "translator_ckpt/manifest.json", secs);
    entry["params_sha256"] = read_checkpoint_manifest(tc.out_dir).value("params_sha256", "");
    entry["final_recon"] = report.final_recon;
    entry["mean_sigma_first"] = report.mean_sigma_first;
    entry["mean_sigma_last"] = report.mean_sigma_last;
    record_stage(run, cfg, "translator", entry);
    cli_log(run, Json{{"cmd", "train-translator"},
                      {"seconds", secs},
                      {"final_recon", report.final_recon}});
    return tc.out_dir;
}

std::string cmd_translate(const ExperimentConfig& cfg, const std::string& input_dir) {
    cfg.validate();
    const std::string run = run_dir(cfg);
    Json manifest = read_run_manifest(run);
    assert_stage_done(manifest, "student", run, "distill");
    verify_stage_artifact(manifest, "student", run);
    assert_stage_done(manifest, "translator", run, "train-translator");
    verify_stage_artifact(manifest, "translator", run);

    std::string data_dir = input_dir;
    if (data_dir.empty()) {
        assert_stage_done(manifest, "synth", run, "synth");
        verify_stage_artifact(manifest, "synth", run);
        data_dir = run + "/dataset";
    }
    DatasetIndex idx = load_dataset(data_dir, /*verify_checksums=*/true);
    if (idx.test.empty()) throw ValidationError("dataset at " + data_dir + " has no test split");
    if (idx.size != cfg.diffusion.image_size)
        throw ValidationError("input dataset size does not match the diffusion image size");

    Translator model = load_translator_checkpoint(run + "/translator_ckpt");
    Encoder student = load_encoder_checkpoint(run + "/student_ckpt");

    const std::string out = run + "/translated";
    ensure_dir(out + "/pred");
    ensure_dir(out + "/ref");
    ensure_dir(out + "/conf");
    ensure_dir(out + "/stats");

    std::size_t count = idx.test.size();
    if (cfg.sampler.max_images > 0) count = std::min(count, cfg.sampler.max_images);

    Stopwatch sw;
    Json files = Json::object();
    auto save = [&](const std::string& rel, const Image& img, int depth) {
        write_png(out + "/" + rel, img, depth);
        files[rel] = sha256_file(out + "/" + rel);
    };

    Rng seeds = Rng(cfg.seed).child("translate");
    for (std::size_t start = 0; start < count; start += cfg.sampler.batch_size) {
        const std::size_t bs = std::min(cfg.sampler.batch_size, count - start);
        std::vector<Tensor> sar;
        std::vector<std::uint64_t> batch_seeds;
        std::vector<PreprocessedPair> pairs;
        for (std::size_t b = 0; b < bs; ++b) {
            pairs.push_back(load_pair(idx, idx.test[start + b]));
            sar.push_back(image_to_chw(pairs.back().sar3));
            batch_seeds.push_back(seeds.child(start + b).seed());
        }
        std::vector<TranslationResult> results = translate_batch(
            sar, model, student, cfg.sampler.steps, cfg.sampler.cfg_scale, batch_seeds);
        for (std::size_t b = 0; b < bs; ++b) {
            const std::string& id = idx.test[start + b].id;
            save("pred/" + id + ".png", results[b].optical, 8);
            save("ref/" + id + ".png", pairs[b].optical, 8);

            // Confidence snapshot normalized to [0,1]; raw range kept in stats.
            const Tensor& conf = results[b].confidence_mid;
            Real lo = conf.vec()[0], hi = conf.vec()[0];
            for (Real v : conf.vec()) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            Image conf_img(idx.size, idx.size, 1);
            const Real span = hi - lo;
            for (std::size_t i = 0; i < conf.numel(); ++i)
                conf_img.data[i] = span > 0 ? (conf.vec()[i] - lo) / span : 0.0;
            save("conf/" + id + ".png", conf_img, 16);

            Json st = results[b].stats;
            st["id"] = id;
            st["conf_scale_min"] = lo;
            st["conf_scale_max"] = hi;
            write_json(out + "/stats/" + id + ".json", st);
            files["stats/" + id + ".json"] = sha256_file(out + "/stats/" + id + ".json");
        }
    }
    const Real secs = sw.seconds();

    Json index = {{"schema_version", 1},
                  {"kind", "translated"},
                  {"config_hash", config_hash(cfg)},
                  {"count", count},
                  {"sampler",
                   Json{{"steps", cfg.sampler.steps}, {"cfg_scale", cfg.sampler.cfg_scale}}},
                  {"files", files}};
    write_json(out + "/index.json", index);

    Json entry = stage_entry(run, "translated", "translated/index.json", secs);
    entry["images"] = count;
    record_stage(run, cfg, "translate", entry);
    cli_log(run, Json{{"cmd", "translate"}, {"seconds", secs}, {"images", count}});
    return out;
}

MetricReport cmd_evaluate(const ExperimentConfig& cfg, bool strict) {
    cfg.validate();
    const std::string run = run_dir(cfg);
    Json manifest = read_run_manifest(run);
    assert_stage_done(manifest, "teacher", run, "train-teacher");
    verify_stage_artifact(manifest, "teacher", run);
    assert_stage_done(manifest, "translate", run, "translate");
    verify_stage_artifact(manifest, "translate", run);

    Stopwatch sw;
    MetricReport report = evaluate_run(run + "/translated/pred", run + "/translated/ref",
                                       run + "/teacher_ckpt", strict);
    Json j = report.to_json();
    j["config_hash"] = config_hash(cfg);
    write_json(run + "/report.json", j);
    atomic_write_text(run + "/report.txt", report.table());
    const Real secs = sw.seconds();

    Json entry = stage_entry(run, "report.json", "report.json", secs);
    entry["mean_ssim"] = report.mean_ssim;
    entry["mean_sam"] = report.mean_sam;
    entry["efid"] = report.efid_value;
    record_stage(run, cfg, "evaluate", entry);
    cli_log(run, Json{{"cmd", "evaluate"}, {"seconds", secs}, {"mean_sam", report.mean_sam}});
    return report;
}

int run_command(const std::string& command, const ExperimentConfig& cfg,
                const std::string& input_dir, bool strict) {
    try {
        if (command == "synth") {
            const std::string p = cmd_synth(cfg);
            std::cout << "dataset ready: " << p << "\n";
        } else if (command == "train-teacher") {
            const std::string p = cmd_train_teacher(cfg);
            std::cout << "teacher checkpoint: " << p << "\n";
        } else if (command == "distill") {
            const std::string p = cmd_distill(cfg);
            std::cout << "student checkpoint: " << p << "\n";
        } else if (command == "train-translator") {
            const std::string p = cmd_train_translator(cfg);
            std::cout << "translator checkpoint: " << p << "\n";
        } else if (command == "translate") {
            const std::string p = cmd_translate(cfg, input_dir);
            std::cout << "translated images: " << p << "\n";
        } else if (command == "evaluate") {
            MetricReport report = cmd_evaluate(cfg, strict);
            std::cout << report.table();
        } else {
            throw ValidationError("unknown command '" + command + "'");
        }
        return 0;
    } catch (const ArtifactError& e) {
        std::cerr << "artifact error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace oscar
